//! Lattice kinematical Hilbert spaces, constraint operators and group averaging.
//!
//! Every frame factor is a ℤ_N lattice with momenta `p_k = k·δp`,
//! `k ∈ [−N/2, N/2)`.  System factors are stored in the eigenbasis of their
//! transformation generator, so every constraint built here is diagonal in the
//! global product basis.  The gauge group is the cyclic group generated by
//! `e^{i s₀ Ĉ/ℏ}`; it acts on the constraint spectrum modulo a window `K·δp`,
//! and the *folded* constraint (eigenvalues reduced into the centred window)
//! is the operator whose kernel the group average projects onto.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num::complex::Complex64;
use num::Integer;
use thiserror::Error;

pub type CVec = DVector<Complex64>;
pub type CMat = DMatrix<Complex64>;

const HERMITIAN_TOL: f64 = 1e-12;
const LATTICE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinError {
    #[error("eigenvalue {value} of factor {factor} is not an integer multiple of the frame momentum spacing {unit}")]
    IncommensurableSpectrum { factor: usize, value: f64, unit: f64 },
    #[error("factor {0} is not a frame factor")]
    NotAFrameFactor(usize),
    #[error("factor index {0} out of range")]
    NoSuchFactor(usize),
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
    #[error("constraint has an empty kernel")]
    EmptyKernel,
    #[error("frames entering the constraint linearly must share N and δp")]
    IncompatibleFrames,
    #[error("system generator has a negative eigenvalue {0}")]
    NegativeGenerator(f64),
    #[error("constraint is not of the form p_R² − G_S: {0}")]
    NotQuadratic(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Frame,
    System,
}

/// One tensor factor.  `spectrum` lists the diagonal of the factor's
/// transformation generator in the factor basis.  `dp > 0` marks a factor
/// whose basis is a momentum lattice (every frame, and lattice particles used
/// as systems).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    pub kind: FactorKind,
    pub label: String,
    pub n: usize,
    pub dp: f64,
    pub spectrum: Vec<f64>,
}

/// Momentum lattice `k·δp` for `k ∈ [−N/2, N/2)`.
pub fn lattice_momenta(n: usize, dp: f64) -> Vec<f64> {
    let half = (n / 2) as i64;
    (0..n as i64).map(|i| (i - half) as f64 * dp).collect()
}

impl FactorSpec {
    pub fn frame(label: &str, n: usize, dp: f64) -> Self {
        FactorSpec {
            kind: FactorKind::Frame,
            label: label.to_string(),
            n,
            dp,
            spectrum: lattice_momenta(n, dp),
        }
    }

    /// A system factor given in the eigenbasis of its generator.
    pub fn system(label: &str, spectrum: Vec<f64>) -> Self {
        FactorSpec {
            kind: FactorKind::System,
            label: label.to_string(),
            n: spectrum.len(),
            dp: 0.0,
            spectrum,
        }
    }

    /// A system particle on a momentum lattice whose generator is a function
    /// of its momentum.
    pub fn lattice_system(label: &str, n: usize, dp: f64, generator: impl Fn(f64) -> f64) -> Self {
        let spectrum = lattice_momenta(n, dp).into_iter().map(generator).collect();
        FactorSpec {
            kind: FactorKind::System,
            label: label.to_string(),
            n,
            dp,
            spectrum,
        }
    }

    pub fn momenta(&self) -> Option<Vec<f64>> {
        (self.dp > 0.0).then(|| lattice_momenta(self.n, self.dp))
    }

    /// Orientation grid spacing δρ = 2πℏ/(N δp).
    pub fn drho(&self, hbar: f64) -> Option<f64> {
        (self.dp > 0.0).then(|| 2.0 * PI * hbar / (self.n as f64 * self.dp))
    }
}

/// Product of factors; factor 0 is the most significant index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpace {
    pub factors: Vec<FactorSpec>,
    pub dims: Vec<usize>,
    pub strides: Vec<usize>,
    pub dim: usize,
    pub hbar: f64,
}

pub fn tensor_space(factors: Vec<FactorSpec>, hbar: f64) -> Result<LatticeSpace, KinError> {
    if !(hbar > 0.0) {
        return Err(KinError::InvalidFactor(format!("hbar must be positive, got {hbar}")));
    }
    for f in &factors {
        if f.kind == FactorKind::Frame && (f.n < 4 || f.n % 2 == 1) {
            return Err(KinError::InvalidFactor(format!(
                "frame '{}' needs even N ≥ 4, got {}",
                f.label, f.n
            )));
        }
        if f.n == 0 || f.spectrum.len() != f.n {
            return Err(KinError::InvalidFactor(format!("factor '{}' has inconsistent size", f.label)));
        }
    }
    if let Some(unit) = factors.iter().find(|f| f.kind == FactorKind::Frame).map(|f| f.dp) {
        for (i, f) in factors.iter().enumerate() {
            for &v in &f.spectrum {
                lattice_multiple(v, unit).ok_or(KinError::IncommensurableSpectrum { factor: i, value: v, unit })?;
            }
        }
    }
    let dims: Vec<usize> = factors.iter().map(|f| f.n).collect();
    let strides = strides_of(&dims);
    let dim = dims.iter().product();
    Ok(LatticeSpace { factors, dims, strides, dim, hbar })
}

pub(crate) fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for f in (0..dims.len().saturating_sub(1)).rev() {
        strides[f] = strides[f + 1] * dims[f + 1];
    }
    strides
}

fn lattice_multiple(v: f64, unit: f64) -> Option<i64> {
    let r = v / unit;
    let k = r.round();
    ((r - k).abs() < LATTICE_TOL).then_some(k as i64)
}

impl LatticeSpace {
    pub fn factor(&self, f: usize) -> Result<&FactorSpec, KinError> {
        self.factors.get(f).ok_or(KinError::NoSuchFactor(f))
    }

    pub fn frame(&self, f: usize) -> Result<&FactorSpec, KinError> {
        let spec = self.factor(f)?;
        if spec.kind != FactorKind::Frame {
            return Err(KinError::NotAFrameFactor(f));
        }
        Ok(spec)
    }

    /// Local index of factor `f` inside the global basis index `i`.
    pub fn local_index(&self, i: usize, f: usize) -> usize {
        (i / self.strides[f]) % self.dims[f]
    }

    pub fn global_index(&self, locals: &[usize]) -> usize {
        locals.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    /// Diagonal of a per-factor function lifted to the global basis.
    pub fn lift_diagonal(&self, f: usize, local: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim, |i, _| local[self.local_index(i, f)])
    }

    /// Product state `⊗_f v_f`.
    pub fn product_state(&self, parts: &[CVec]) -> CVec {
        assert_eq!(parts.len(), self.dims.len(), "one vector per factor");
        CVec::from_fn(self.dim, |i, _| {
            parts
                .iter()
                .enumerate()
                .fold(Complex64::new(1.0, 0.0), |acc, (f, v)| acc * v[self.local_index(i, f)])
        })
    }

    /// Dimension of all factors except `f`.
    pub fn complement_dim(&self, f: usize) -> usize {
        self.dim / self.dims[f]
    }

    /// Maps (local index on f, complement index) to the global index.
    pub fn join_index(&self, f: usize, a: usize, rest: usize) -> usize {
        let s = self.strides[f];
        let hi = rest / s;
        let lo = rest % s;
        hi * s * self.dims[f] + a * s + lo
    }

    /// Inverse of `join_index`.
    pub fn split_index(&self, f: usize, i: usize) -> (usize, usize) {
        let s = self.strides[f];
        let d = self.dims[f];
        let a = (i / s) % d;
        let hi = i / (s * d);
        (a, hi * s + i % s)
    }

    /// The space with factor `f` removed, for reduced states.
    pub fn without(&self, f: usize) -> LatticeSpace {
        let mut factors = self.factors.clone();
        factors.remove(f);
        let dims: Vec<usize> = factors.iter().map(|x| x.n).collect();
        LatticeSpace { strides: strides_of(&dims), dim: dims.iter().product(), dims, factors, hbar: self.hbar }
    }
}

/// Applies a factor-local matrix to a state vector.
pub fn apply_factor(v: &CVec, dims: &[usize], strides: &[usize], f: usize, mat: &CMat) -> CVec {
    let d = dims[f];
    let s = strides[f];
    let block = d * s;
    let mut out = CVec::zeros(v.len());
    let mut col = vec![Complex64::new(0.0, 0.0); d];
    for base in (0..v.len()).step_by(block) {
        for inner in 0..s {
            for (b, c) in col.iter_mut().enumerate() {
                *c = v[base + b * s + inner];
            }
            for a in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for (b, c) in col.iter().enumerate() {
                    acc += mat[(a, b)] * c;
                }
                out[base + a * s + inner] = acc;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Repr {
    Dense(CMat),
    Diagonal(CVec),
    /// Tensor product of factor-local matrices; absent factors carry the identity.
    Kron(Vec<(usize, CMat)>),
}

/// Operator on a lattice space with factor support and a verified hermiticity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct KinOperator {
    repr: Repr,
    dims: Vec<usize>,
    support: BTreeSet<usize>,
    hermitian: bool,
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn mat_is_hermitian(m: &CMat) -> bool {
    let scale = m.iter().fold(1.0f64, |a, x| a.max(x.norm()));
    (0..m.nrows()).all(|i| (0..=i).all(|j| (m[(i, j)] - m[(j, i)].conj()).norm() <= HERMITIAN_TOL * scale))
}

impl KinOperator {
    fn build(repr: Repr, dims: Vec<usize>, support: BTreeSet<usize>) -> Self {
        let hermitian = match &repr {
            Repr::Dense(m) => mat_is_hermitian(m),
            Repr::Diagonal(d) => {
                let scale = d.iter().fold(1.0f64, |a, x| a.max(x.norm()));
                d.iter().all(|x| x.im.abs() <= HERMITIAN_TOL * scale)
            }
            Repr::Kron(parts) => parts.iter().all(|(_, m)| mat_is_hermitian(m)),
        };
        KinOperator { repr, dims, support, hermitian }
    }

    pub fn dense(space: &LatticeSpace, m: CMat) -> Self {
        assert_eq!(m.nrows(), space.dim);
        Self::build(Repr::Dense(m), space.dims.clone(), (0..space.dims.len()).collect())
    }

    pub fn dense_with_support(space: &LatticeSpace, m: CMat, support: BTreeSet<usize>) -> Self {
        assert_eq!(m.nrows(), space.dim);
        Self::build(Repr::Dense(m), space.dims.clone(), support)
    }

    pub fn diagonal(space: &LatticeSpace, d: CVec, support: BTreeSet<usize>) -> Self {
        assert_eq!(d.len(), space.dim);
        Self::build(Repr::Diagonal(d), space.dims.clone(), support)
    }

    pub fn real_diagonal(space: &LatticeSpace, d: &DVector<f64>, support: BTreeSet<usize>) -> Self {
        Self::diagonal(space, d.map(c), support)
    }

    pub fn local(space: &LatticeSpace, f: usize, m: CMat) -> Self {
        assert_eq!(m.nrows(), space.dims[f], "local matrix size");
        Self::build(Repr::Kron(vec![(f, m)]), space.dims.clone(), [f].into_iter().collect())
    }

    pub fn kron(space: &LatticeSpace, mut parts: Vec<(usize, CMat)>) -> Self {
        parts.sort_by_key(|(f, _)| *f);
        let support = parts.iter().map(|(f, _)| *f).collect();
        Self::build(Repr::Kron(parts), space.dims.clone(), support)
    }

    pub fn identity(space: &LatticeSpace) -> Self {
        Self::build(Repr::Kron(Vec::new()), space.dims.clone(), BTreeSet::new())
    }

    pub fn zero(space: &LatticeSpace) -> Self {
        Self::build(Repr::Diagonal(CVec::zeros(space.dim)), space.dims.clone(), BTreeSet::new())
    }

    pub fn repr(&self) -> &Repr {
        &self.repr
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn support(&self) -> &BTreeSet<usize> {
        &self.support
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn apply(&self, v: &CVec) -> CVec {
        match &self.repr {
            Repr::Dense(m) => m * v,
            Repr::Diagonal(d) => v.component_mul(d),
            Repr::Kron(parts) => {
                let strides = strides_of(&self.dims);
                let mut out = v.clone();
                for (f, m) in parts {
                    out = apply_factor(&out, &self.dims, &strides, *f, m);
                }
                out
            }
        }
    }

    /// `⟨bra|O|ket⟩` with `bra` conjugated.
    pub fn matrix_element(&self, bra: &CVec, ket: &CVec) -> Complex64 {
        bra.dotc(&self.apply(ket))
    }

    pub fn expectation(&self, psi: &CVec) -> Complex64 {
        self.matrix_element(psi, psi) / psi.norm_squared()
    }

    pub fn to_dense(&self) -> CMat {
        match &self.repr {
            Repr::Dense(m) => m.clone(),
            Repr::Diagonal(d) => CMat::from_diagonal(d),
            Repr::Kron(parts) => {
                let mut full = CMat::from_element(1, 1, c(1.0));
                for (f, &d) in self.dims.iter().enumerate() {
                    let local = parts
                        .iter()
                        .find(|(g, _)| *g == f)
                        .map(|(_, m)| m.clone())
                        .unwrap_or_else(|| CMat::identity(d, d));
                    full = full.kronecker(&local);
                }
                full
            }
        }
    }

    pub fn as_diagonal(&self) -> Option<CVec> {
        match &self.repr {
            Repr::Diagonal(d) => Some(d.clone()),
            _ => None,
        }
    }

    pub fn adjoint(&self) -> Self {
        let repr = match &self.repr {
            Repr::Dense(m) => Repr::Dense(m.adjoint()),
            Repr::Diagonal(d) => Repr::Diagonal(d.conjugate()),
            Repr::Kron(parts) => Repr::Kron(parts.iter().map(|(f, m)| (*f, m.adjoint())).collect()),
        };
        KinOperator { repr, dims: self.dims.clone(), support: self.support.clone(), hermitian: self.hermitian }
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let repr = match &self.repr {
            Repr::Dense(m) => Repr::Dense(m * s),
            Repr::Diagonal(d) => Repr::Diagonal(d * s),
            Repr::Kron(parts) if parts.is_empty() => Repr::Diagonal(CVec::from_element(self.dim(), s)),
            Repr::Kron(parts) => {
                let mut parts = parts.clone();
                parts[0].1 *= s;
                Repr::Kron(parts)
            }
        };
        Self::build(repr, self.dims.clone(), self.support.clone())
    }

    /// Operator product `self · other`.
    pub fn mul(&self, other: &KinOperator) -> Self {
        let support: BTreeSet<usize> = self.support.union(&other.support).copied().collect();
        let repr = match (&self.repr, &other.repr) {
            (Repr::Diagonal(a), Repr::Diagonal(b)) => Repr::Diagonal(a.component_mul(b)),
            (Repr::Kron(a), Repr::Kron(b)) => {
                let mut parts: Vec<(usize, CMat)> = a.clone();
                for (f, m) in b {
                    match parts.iter_mut().find(|(g, _)| g == f) {
                        Some((_, existing)) => *existing = &*existing * m,
                        None => parts.push((*f, m.clone())),
                    }
                }
                parts.sort_by_key(|(f, _)| *f);
                Repr::Kron(parts)
            }
            (Repr::Diagonal(a), _) => {
                let mut m = other.to_dense();
                for (i, mut row) in m.row_iter_mut().enumerate() {
                    row *= a[i];
                }
                Repr::Dense(m)
            }
            (_, Repr::Diagonal(b)) => {
                let mut m = self.to_dense();
                for (j, mut col) in m.column_iter_mut().enumerate() {
                    col *= b[j];
                }
                Repr::Dense(m)
            }
            (Repr::Kron(_), _) => Repr::Dense(self.apply_columns(other.to_dense())),
            (_, Repr::Kron(_)) => Repr::Dense(other.adjoint().apply_columns(self.to_dense().adjoint()).adjoint()),
            _ => Repr::Dense(self.to_dense() * other.to_dense()),
        };
        Self::build(repr, self.dims.clone(), support)
    }

    /// `self · m`, one column at a time.
    fn apply_columns(&self, mut m: CMat) -> CMat {
        for mut col in m.column_iter_mut() {
            let v = self.apply(&col.clone_owned());
            col.copy_from(&v);
        }
        m
    }

    pub fn add(&self, other: &KinOperator) -> Self {
        let support: BTreeSet<usize> = self.support.union(&other.support).copied().collect();
        let repr = match (&self.repr, &other.repr) {
            (Repr::Diagonal(a), Repr::Diagonal(b)) => Repr::Diagonal(a + b),
            _ => Repr::Dense(self.to_dense() + other.to_dense()),
        };
        Self::build(repr, self.dims.clone(), support)
    }

    pub fn sub(&self, other: &KinOperator) -> Self {
        self.add(&other.scale(c(-1.0)))
    }

    pub fn commutator(&self, other: &KinOperator) -> Self {
        self.mul(other).sub(&other.mul(self))
    }

    /// Largest absolute entry of `self − other`.
    pub fn max_diff(&self, other: &KinOperator) -> f64 {
        (self.to_dense() - other.to_dense()).iter().fold(0.0, |a, x| a.max(x.norm()))
    }

    pub fn max_abs(&self) -> f64 {
        match &self.repr {
            Repr::Diagonal(d) => d.iter().fold(0.0, |a, x| a.max(x.norm())),
            _ => self.to_dense().iter().fold(0.0, |a, x| a.max(x.norm())),
        }
    }
}

/// Operator on a lattice factor, given by a matrix in its basis.
pub fn local_operator(space: &LatticeSpace, f: usize, m: CMat) -> Result<KinOperator, KinError> {
    let d = space.factor(f)?.n;
    if m.nrows() != d || m.ncols() != d {
        return Err(KinError::DimensionMismatch { expected: d, got: m.nrows() });
    }
    Ok(KinOperator::local(space, f, m))
}

pub fn momentum_operator(space: &LatticeSpace, f: usize) -> Result<KinOperator, KinError> {
    let spec = space.frame(f)?;
    let m = CMat::from_diagonal(&CVec::from_iterator(spec.n, lattice_momenta(spec.n, spec.dp).into_iter().map(c)));
    Ok(KinOperator::local(space, f, m))
}

/// Momentum operator of any factor with a momentum lattice basis.
pub fn lattice_momentum(space: &LatticeSpace, f: usize) -> Result<KinOperator, KinError> {
    let spec = space.factor(f)?;
    let p = spec.momenta().ok_or(KinError::NotAFrameFactor(f))?;
    Ok(KinOperator::local(space, f, CMat::from_diagonal(&CVec::from_iterator(spec.n, p.into_iter().map(c)))))
}

/// The diagonal generator of factor `f` (p̂ for frames, Ĝ for systems).
pub fn generator_operator(space: &LatticeSpace, f: usize) -> Result<KinOperator, KinError> {
    let spec = space.factor(f)?;
    let d = CVec::from_iterator(spec.n, spec.spectrum.iter().map(|&x| c(x)));
    Ok(KinOperator::local(space, f, CMat::from_diagonal(&d)))
}

/// A constraint term supported on one factor, given by its diagonal in the factor basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintTerm {
    pub factor: usize,
    pub values: Vec<f64>,
}

impl ConstraintTerm {
    /// The factor's own generator with a coefficient.
    pub fn generator(space: &LatticeSpace, factor: usize, coeff: f64) -> Result<Self, KinError> {
        let spec = space.factor(factor)?;
        Ok(ConstraintTerm { factor, values: spec.spectrum.iter().map(|x| coeff * x).collect() })
    }

    /// `coeff · G^power` for the factor generator.
    pub fn power(space: &LatticeSpace, factor: usize, power: i32, coeff: f64) -> Result<Self, KinError> {
        let spec = space.factor(factor)?;
        Ok(ConstraintTerm { factor, values: spec.spectrum.iter().map(|x| coeff * x.powi(power)).collect() })
    }

    pub fn custom(factor: usize, values: Vec<f64>) -> Self {
        ConstraintTerm { factor, values }
    }
}

/// A diagonal constraint together with its cyclic gauge group data.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub terms: Vec<ConstraintTerm>,
    /// Raw eigenvalues in the global basis.
    pub raw: DVector<f64>,
    /// Eigenvalues as integer multiples of `unit`, folded into the window of width `modulus`.
    pub folded_units: Vec<i64>,
    pub raw_units: Vec<i64>,
    pub unit: f64,
    pub modulus: i64,
    /// Generator step: the group is `{e^{i n s₀ Ĉ/ℏ}}`.
    pub s0: f64,
    pub group_order: usize,
    /// Frames entering as `+p̂_R`; for these the frame is ideal.
    pub linear_frames: Vec<usize>,
    pub zero_in_spectrum: bool,
    pub hbar: f64,
}

fn fold(m: i64, k: i64) -> i64 {
    let half = k / 2;
    (m + half).rem_euclid(k) - half
}

pub fn build_constraint(space: &LatticeSpace, terms: Vec<ConstraintTerm>) -> Result<Constraint, KinError> {
    for t in &terms {
        let d = space.factor(t.factor)?.n;
        if t.values.len() != d {
            return Err(KinError::DimensionMismatch { expected: d, got: t.values.len() });
        }
    }
    let frames: Vec<usize> = terms
        .iter()
        .filter(|t| space.factors[t.factor].kind == FactorKind::Frame)
        .map(|t| t.factor)
        .collect();
    let unit = frames
        .first()
        .map(|&f| space.factors[f].dp)
        .or_else(|| space.factors.iter().find(|f| f.kind == FactorKind::Frame).map(|f| f.dp))
        .unwrap_or(1.0);

    let linear_frames: Vec<usize> = terms
        .iter()
        .filter(|t| {
            let spec = &space.factors[t.factor];
            spec.kind == FactorKind::Frame
                && t.values.iter().zip(&spec.spectrum).all(|(a, b)| (a - b).abs() < LATTICE_TOL * unit)
        })
        .map(|t| t.factor)
        .collect();

    let mut raw = DVector::<f64>::zeros(space.dim);
    for t in &terms {
        raw += space.lift_diagonal(t.factor, &t.values);
    }
    let mut raw_units = Vec::with_capacity(space.dim);
    for (i, &v) in raw.iter().enumerate() {
        let m = lattice_multiple(v, unit).ok_or(KinError::IncommensurableSpectrum {
            factor: space.local_index(i, terms.first().map_or(0, |t| t.factor)),
            value: v,
            unit,
        })?;
        raw_units.push(m);
    }

    let modulus = if let Some(&f0) = linear_frames.first() {
        let (n0, dp0) = (space.factors[f0].n, space.factors[f0].dp);
        if linear_frames
            .iter()
            .any(|&f| space.factors[f].n != n0 || (space.factors[f].dp - dp0).abs() > LATTICE_TOL * dp0)
        {
            return Err(KinError::IncompatibleFrames);
        }
        n0 as i64
    } else {
        2 * raw_units.iter().map(|m| m.abs()).max().unwrap_or(0) + 1
    };
    let folded_units: Vec<i64> = raw_units.iter().map(|&m| fold(m, modulus)).collect();
    let g = folded_units.iter().fold(0i64, |a, &m| a.gcd(&m));
    let group_order = if g == 0 { 1 } else { (modulus / modulus.gcd(&g)) as usize };
    let s0 = 2.0 * PI * space.hbar / (modulus as f64 * unit);
    let zero_in_spectrum = folded_units.iter().any(|&m| m == 0);
    Ok(Constraint {
        terms,
        raw,
        folded_units,
        raw_units,
        unit,
        modulus,
        s0,
        group_order,
        linear_frames,
        zero_in_spectrum,
        hbar: space.hbar,
    })
}

impl Constraint {
    pub fn support(&self) -> BTreeSet<usize> {
        self.terms.iter().map(|t| t.factor).collect()
    }

    /// The folded constraint operator, whose kernel is the physical subspace.
    pub fn op(&self, space: &LatticeSpace) -> KinOperator {
        let d = DVector::from_iterator(space.dim, self.folded_units.iter().map(|&m| m as f64 * self.unit));
        KinOperator::real_diagonal(space, &d, self.support())
    }

    /// The unfolded operator `Σ_i Ĝ_i`.
    pub fn raw_op(&self, space: &LatticeSpace) -> KinOperator {
        KinOperator::real_diagonal(space, &self.raw, self.support())
    }

    pub fn is_ideal_for(&self, frame: usize) -> bool {
        self.linear_frames.contains(&frame)
    }

    /// Phases of `e^{i n s₀ Ĉ/ℏ}` in the global basis.
    pub fn group_phases(&self, n: i64) -> CVec {
        let k = self.modulus as f64;
        CVec::from_iterator(
            self.folded_units.len(),
            self.folded_units.iter().map(|&m| Complex64::from_polar(1.0, 2.0 * PI * (n * m) as f64 / k)),
        )
    }

    /// Diagonal of `e^{i s Ĉ/ℏ}` for an arbitrary real `s`, using the folded spectrum.
    pub fn flow_phases(&self, s: f64) -> CVec {
        CVec::from_iterator(
            self.folded_units.len(),
            self.folded_units
                .iter()
                .map(|&m| Complex64::from_polar(1.0, s * m as f64 * self.unit / self.hbar)),
        )
    }

    /// `Ĉ − p̂_R` as a global diagonal: the generator acting on everything but frame `f`.
    pub fn relative_generator(&self, space: &LatticeSpace, frame: usize) -> DVector<f64> {
        let mut out = DVector::<f64>::zeros(space.dim);
        for t in self.terms.iter().filter(|t| t.factor != frame) {
            out += space.lift_diagonal(t.factor, &t.values);
        }
        out
    }
}

/// The coherent group average Π, the projector onto the kernel of the folded constraint.
pub fn group_average(space: &LatticeSpace, c: &Constraint) -> Result<KinOperator, KinError> {
    if !c.zero_in_spectrum {
        return Err(KinError::EmptyKernel);
    }
    let d = DVector::from_iterator(space.dim, c.folded_units.iter().map(|&m| if m == 0 { 1.0 } else { 0.0 }));
    Ok(KinOperator::real_diagonal(space, &d, c.support()))
}

/// Π as the explicit average `(1/N_G) Σ_n e^{i n s₀ Ĉ/ℏ}` over the cyclic group.
pub fn group_average_sum(space: &LatticeSpace, c: &Constraint) -> KinOperator {
    let n_g = c.group_order;
    let terms = crate::par::map_range(n_g, |n| c.group_phases(n as i64));
    let sum = terms.into_iter().fold(CVec::zeros(space.dim), |a, b| a + b) / Complex64::new(n_g as f64, 0.0);
    KinOperator::diagonal(space, sum, c.support())
}

/// `⟨ψ|Π|φ⟩`.
pub fn physical_inner_product(pi: &KinOperator, psi: &CVec, phi: &CVec) -> Complex64 {
    pi.matrix_element(psi, phi)
}

/// Projectors onto `p_R ≥ 0` and `p_R < 0` of a frame factor.
pub fn sector_projectors(space: &LatticeSpace, frame: usize) -> Result<(KinOperator, KinOperator), KinError> {
    let spec = space.frame(frame)?;
    let p = lattice_momenta(spec.n, spec.dp);
    let plus = CVec::from_iterator(spec.n, p.iter().map(|&x| c(if x >= 0.0 { 1.0 } else { 0.0 })));
    let minus = plus.map(|x| c(1.0) - x);
    Ok((
        KinOperator::local(space, frame, CMat::from_diagonal(&plus)),
        KinOperator::local(space, frame, CMat::from_diagonal(&minus)),
    ))
}

/// Splits `Ĉ = p̂_R² − Ĝ_S` into `Ĉ₊ = p̂_R + √Ĝ_S` and `Ĉ₋ = p̂_R − √Ĝ_S`.
pub fn factorize_constraint(space: &LatticeSpace, c: &Constraint) -> Result<(Constraint, Constraint), KinError> {
    let mut frame_term = None;
    let mut system_term = None;
    for t in &c.terms {
        let spec = &space.factors[t.factor];
        if spec.kind == FactorKind::Frame {
            let squares = spec.spectrum.iter().zip(&t.values).all(|(p, v)| (p * p - v).abs() < LATTICE_TOL * c.unit);
            if !squares || frame_term.is_some() {
                return Err(KinError::NotQuadratic("frame term must be p̂_R²".into()));
            }
            frame_term = Some(t.factor);
        } else {
            if system_term.is_some() {
                return Err(KinError::NotQuadratic("expected a single system term".into()));
            }
            system_term = Some(t);
        }
    }
    let frame = frame_term.ok_or_else(|| KinError::NotQuadratic("no frame term".into()))?;
    let sys = system_term.ok_or_else(|| KinError::NotQuadratic("no system term".into()))?;
    let mut root = Vec::with_capacity(sys.values.len());
    for &v in &sys.values {
        let g = -v;
        if g < -LATTICE_TOL {
            return Err(KinError::NegativeGenerator(g));
        }
        root.push(g.max(0.0).sqrt());
    }
    let p = ConstraintTerm::generator(space, frame, 1.0)?;
    let plus = build_constraint(space, vec![p.clone(), ConstraintTerm::custom(sys.factor, root.clone())])?;
    let minus = build_constraint(space, vec![p, ConstraintTerm::custom(sys.factor, root.iter().map(|x| -x).collect())])?;
    Ok((plus, minus))
}
