//! Algebraic states: normalized linear functionals on the generator algebra,
//! stored as value tables on normal-ordered monomials up to a degree bound.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use num::complex::Complex64;
use num::Zero;
use thiserror::Error;

use crate::kinspace::{CMat, CVec, Constraint, KinError, KinOperator, LatticeSpace};
use crate::ncalg::{degree, AlgebraElement, AlgebraError, Assignment, Coef, GeneratorSet};
use crate::relobs::{orientation_projector, relational_observable, Form, OrientationFrame, RelObsError};

pub const DEFAULT_DEGREE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgStateError {
    #[error("degree {degree} exceeds the state's bound {bound}")]
    DegreeExceeded { degree: usize, bound: usize },
    #[error("state is not physical: ‖Ĉψ‖/‖ψ‖ = {0:e}")]
    NotPhysical(f64),
    #[error("state has no Hilbert-space backing")]
    NoHilbertBacking,
    #[error("⟨bra|ket⟩ vanishes; the functional cannot be normalized")]
    Unnormalizable,
    #[error("normal order must place {0} before its momentum")]
    OrderingViolation(String),
    #[error("invalid observable: {0}")]
    InvalidObservable(String),
    #[error("state and element use different generator sets")]
    ForeignElement,
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Kin(#[from] KinError),
    #[error(transparent)]
    RelObs(#[from] RelObsError),
}

/// The Hilbert pair realizing a state: `ω(a) = ⟨bra|a|ket⟩ / ⟨bra|ket⟩`.
#[derive(Debug, Clone)]
pub struct HilbertBacking {
    pub space: LatticeSpace,
    pub assignment: Arc<Assignment>,
    pub bra: CVec,
    pub ket: CVec,
    pub norm: Complex64,
}

#[derive(Debug, Clone)]
pub struct AlgebraicState {
    gens: Arc<GeneratorSet>,
    degree: usize,
    hbar: f64,
    table: HashMap<Vec<u16>, Complex64>,
    backing: Option<Arc<HilbertBacking>>,
}

/// All exponent vectors of total degree ≤ `max` over `n` generators, by degree.
pub fn monomials(n: usize, max: usize) -> Vec<Vec<u16>> {
    let mut out = vec![vec![0u16; n]];
    let mut level = vec![vec![0u16; n]];
    for _ in 0..max {
        let mut next = Vec::new();
        for m in &level {
            // extend only at or after the last nonzero index, so each monomial appears once
            let start = m.iter().rposition(|&e| e > 0).unwrap_or(0);
            for i in start..n {
                let mut e = m.clone();
                e[i] += 1;
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        level = next;
    }
    out
}

/// Monomials of degree ≤ `max` in the listed generators only.
pub fn monomials_in(n: usize, gens: &[usize], max: usize) -> Vec<Vec<u16>> {
    monomials(gens.len(), max)
        .into_iter()
        .map(|sub| {
            let mut e = vec![0u16; n];
            for (k, &g) in gens.iter().enumerate() {
                e[g] = sub[k];
            }
            e
        })
        .collect()
}

impl AlgebraicState {
    /// `ω(a) = ⟨bra|represent(a)|ket⟩ / ⟨bra|ket⟩` on all monomials up to `degree`.
    pub fn from_hilbert(bra: CVec, ket: CVec, space: &LatticeSpace, assignment: Arc<Assignment>, degree: usize) -> Result<Self, AlgStateError> {
        let norm = bra.dotc(&ket);
        if norm.norm() < 1e-300 || norm.norm() < 1e-14 * bra.norm() * ket.norm() {
            return Err(AlgStateError::Unnormalizable);
        }
        let gens = assignment.gens.clone();
        let n = gens.len();
        let mons = monomials(n, degree);
        let mut vecs: HashMap<Vec<u16>, CVec> = HashMap::new();
        vecs.insert(vec![0; n], ket.clone());
        let mut by_degree: Vec<Vec<Vec<u16>>> = vec![Vec::new(); degree + 1];
        for m in mons {
            by_degree[crate::ncalg::degree(&m)].push(m);
        }
        for level in by_degree.iter().skip(1) {
            let computed = crate::par::map_slice(level, |m| {
                let i = m.iter().position(|&e| e > 0).expect("nonzero monomial");
                let mut rest = m.clone();
                rest[i] -= 1;
                assignment.ops[i].apply(&vecs[&rest])
            });
            for (m, v) in level.iter().zip(computed) {
                vecs.insert(m.clone(), v);
            }
        }
        let table = vecs.iter().map(|(m, v)| (m.clone(), bra.dotc(v) / norm)).collect();
        Ok(AlgebraicState {
            gens,
            degree,
            hbar: assignment.hbar,
            table,
            backing: Some(Arc::new(HilbertBacking { space: space.clone(), assignment, bra, ket, norm })),
        })
    }

    /// Frame-conditioned state: bra `(|ρ⟩⟨ρ|⊗1)ψ`, ket `ψ`, with `ψ` physical.
    pub fn frame_state(
        space: &LatticeSpace,
        c: &Constraint,
        frame: &OrientationFrame,
        rho: f64,
        psi: &CVec,
        assignment: Arc<Assignment>,
        degree: usize,
    ) -> Result<Self, AlgStateError> {
        let r = crate::reduction_gauge::constraint_residual(space, c, psi);
        if r > 1e-9 {
            return Err(AlgStateError::NotPhysical(r));
        }
        let theta = KinOperator::local(space, frame.factor, orientation_projector(frame, rho));
        Self::from_hilbert(theta.apply(psi), psi.clone(), space, assignment, degree)
    }

    /// A state given directly by its values; monomials missing from the map evaluate to zero.
    pub fn from_table(gens: &Arc<GeneratorSet>, hbar: f64, degree: usize, table: HashMap<Vec<u16>, Complex64>) -> Self {
        AlgebraicState { gens: gens.clone(), degree, hbar, table, backing: None }
    }

    /// Same ket and assignment with a new bra.
    pub fn with_bra(&self, bra: CVec) -> Result<Self, AlgStateError> {
        let h = self.backing.as_ref().ok_or(AlgStateError::NoHilbertBacking)?;
        Self::from_hilbert(bra, h.ket.clone(), &h.space, h.assignment.clone(), self.degree)
    }

    pub fn gens(&self) -> &Arc<GeneratorSet> {
        &self.gens
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn hilbert(&self) -> Option<&HilbertBacking> {
        self.backing.as_deref()
    }

    pub fn value(&self, m: &[u16]) -> Complex64 {
        self.table.get(m).copied().unwrap_or_else(Complex64::zero)
    }

    pub fn evaluate(&self, a: &AlgebraElement) -> Result<Complex64, AlgStateError> {
        if !Arc::ptr_eq(a.gens(), &self.gens) && **a.gens() != *self.gens {
            return Err(AlgStateError::ForeignElement);
        }
        let mut acc = Complex64::zero();
        for ((m, g), c) in a.terms() {
            let d = degree(m);
            if d > self.degree {
                return Err(AlgStateError::DegreeExceeded { degree: d, bound: self.degree });
            }
            acc += c.to_c64() * self.hbar.sqrt().powi(*g as i32) * self.value(m);
        }
        Ok(acc)
    }

    /// `⟨bra|O|ket⟩/⟨bra|ket⟩` for an arbitrary operator.
    pub fn evaluate_operator(&self, op: &KinOperator) -> Result<Complex64, AlgStateError> {
        let h = self.hilbert().ok_or(AlgStateError::NoHilbertBacking)?;
        Ok(h.bra.dotc(&op.apply(&h.ket)) / h.norm)
    }

    /// `⟨bra|v⟩/⟨bra|ket⟩` for a vector already acted on.
    pub fn evaluate_vector(&self, v: &CVec) -> Result<Complex64, AlgStateError> {
        let h = self.hilbert().ok_or(AlgStateError::NoHilbertBacking)?;
        Ok(h.bra.dotc(v) / h.norm)
    }

    /// Value table as sorted `monomial<TAB>re<TAB>im` lines.
    pub fn to_table_string(&self) -> String {
        let sorted: BTreeMap<&Vec<u16>, &Complex64> = self.table.iter().collect();
        let mut s = String::new();
        for (m, v) in sorted {
            let name: Vec<String> = m
                .iter()
                .enumerate()
                .filter(|(_, &e)| e > 0)
                .map(|(i, &e)| if e == 1 { self.gens.name(i).to_string() } else { format!("{}^{}", self.gens.name(i), e) })
                .collect();
            let name = if name.is_empty() { "1".to_string() } else { name.join("*") };
            s.push_str(&format!("{name}\t{:.15e}\t{:.15e}\n", v.re, v.im));
        }
        s
    }
}

/// `max_a |ω(a·Ĉ)|` over monomials `a` of degree ≤ `D − deg Ĉ`.
pub fn check_constraint_surface(omega: &AlgebraicState, c: &AlgebraElement) -> Result<f64, AlgStateError> {
    let dc = c.degree();
    if dc > omega.degree {
        return Err(AlgStateError::DegreeExceeded { degree: dc, bound: omega.degree });
    }
    let mons = monomials(omega.gens.len(), omega.degree - dc);
    let vals = crate::par::map_slice(&mons, |m| -> Result<f64, AlgStateError> {
        let a = AlgebraElement::monomial(&omega.gens, m.clone(), 0, Coef::one());
        Ok(omega.evaluate(&a.checked_mul(c)?)?.norm())
    });
    vals.into_iter().try_fold(0.0f64, |acc, v| Ok(acc.max(v?)))
}

/// `max_a |ω((Ẑ − ρ)·a)|` over monomials `a` of degree ≤ `D − 1`.
pub fn check_frame_gauge(omega: &AlgebraicState, z: usize, rho: f64) -> Result<f64, AlgStateError> {
    let zel = AlgebraElement::generator(&omega.gens, z);
    let mons = monomials(omega.gens.len(), omega.degree.saturating_sub(1));
    let vals = crate::par::map_slice(&mons, |m| -> Result<f64, AlgStateError> {
        let a = AlgebraElement::monomial(&omega.gens, m.clone(), 0, Coef::one());
        let za = omega.evaluate(&zel.checked_mul(&a)?)?;
        Ok((za - omega.evaluate(&a)? * rho).norm())
    });
    vals.into_iter().try_fold(0.0f64, |acc, v| Ok(acc.max(v?)))
}

/// Outcome of the bounded-degree reference-frame conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub degree: usize,
    pub z_selfadjoint: bool,
    pub canonical_commutator: bool,
    pub c_selfadjoint: bool,
    /// No nonzero `a` of degree ≤ D with `a·Ĉ = 0`.
    pub right_multiplication_injective: bool,
    pub commutant_dim: usize,
    /// The commutant of `Ẑ` meets the left ideal `A·Ĉ` only in zero.
    pub commutant_disjoint: bool,
    /// Every generator lies in `span{z, z·Ĉ : z ∈ Z'}`.
    pub generates: bool,
}

impl FrameReport {
    pub fn passes(&self) -> bool {
        self.z_selfadjoint
            && self.canonical_commutator
            && self.c_selfadjoint
            && self.right_multiplication_injective
            && self.commutant_disjoint
            && self.generates
    }
}

type SparseVec = BTreeMap<usize, Coef>;

/// Incremental row echelon basis over ℚ(i), tracking how each stored vector
/// combines the inserted ones.
#[derive(Default)]
struct Echelon {
    pivots: BTreeMap<usize, (SparseVec, SparseVec)>,
    inserted: usize,
}

fn axpy(y: &mut SparseVec, a: &Coef, x: &SparseVec) {
    for (k, v) in x {
        let e = y.entry(*k).or_insert_with(Coef::zero);
        *e = &*e + &(a * v);
        if e.is_zero() {
            y.remove(k);
        }
    }
}

impl Echelon {
    /// Inserts a vector; returns the combination of inserted vectors that
    /// vanishes when it turns out dependent.
    fn insert(&mut self, mut v: SparseVec) -> Option<SparseVec> {
        let mut comb: SparseVec = [(self.inserted, Coef::one())].into_iter().collect();
        self.inserted += 1;
        loop {
            let Some((&k, lead)) = v.iter().next() else {
                return Some(comb);
            };
            match self.pivots.get(&k) {
                Some((pv, pc)) => {
                    let f = -(lead * &pv[&k].inv().expect("pivot nonzero"));
                    axpy(&mut v, &f, pv);
                    axpy(&mut comb, &f, pc);
                }
                None => {
                    self.pivots.insert(k, (v, comb));
                    return None;
                }
            }
        }
    }

    fn rank(&self) -> usize {
        self.pivots.len()
    }

    fn contains(&self, v: &SparseVec) -> bool {
        let mut v = v.clone();
        while let Some((&k, lead)) = v.iter().next() {
            match self.pivots.get(&k) {
                Some((pv, _)) => {
                    let f = -(lead * &pv[&k].inv().expect("pivot nonzero"));
                    axpy(&mut v, &f, pv);
                }
                None => return false,
            }
        }
        true
    }
}

/// Coordinates of an element at ℏ = 1 in a shared monomial index.
fn coords(a: &AlgebraElement, index: &mut HashMap<Vec<u16>, usize>) -> SparseVec {
    let mut out = SparseVec::new();
    for ((m, _), c) in a.terms() {
        let next = index.len();
        let k = *index.entry(m.clone()).or_insert(next);
        let e = out.entry(k).or_insert_with(Coef::zero);
        *e = &*e + c;
        if e.is_zero() {
            out.remove(&k);
        }
    }
    out
}

/// Bounded-degree check that `(Ẑ, Ĉ)` forms an algebraic reference frame.
/// Linear-algebra conditions are decided exactly at ℏ = 1.
pub fn verify_reference_frame(z: &AlgebraElement, c: &AlgebraElement, degree: usize) -> Result<FrameReport, AlgStateError> {
    let gens = z.gens().clone();
    let n = gens.len();
    let z_selfadjoint = z.adjoint()? == *z;
    let c_selfadjoint = c.adjoint()? == *c;
    let comm = z.commutator(c)?;
    let canonical_commutator = comm == AlgebraElement::monomial(&gens, vec![0; n], 2, Coef::i());

    let mut index: HashMap<Vec<u16>, usize> = HashMap::new();
    let dc = c.degree();
    let mons = monomials(n, degree);

    // a ↦ a·Ĉ on degree ≤ D − deg Ĉ
    let low: Vec<&Vec<u16>> = mons.iter().filter(|m| crate::ncalg::degree(m) + dc <= degree).collect();
    let mut ideal = Echelon::default();
    let mut injective = true;
    for m in &low {
        let a = AlgebraElement::monomial(&gens, (*m).clone(), 0, Coef::one());
        if ideal.insert(coords(&a.checked_mul(c)?, &mut index)).is_some() {
            injective = false;
        }
    }

    // commutant of Ẑ: kernel of a ↦ [Ẑ, a] on degree ≤ D
    let mut ad = Echelon::default();
    let mut commutant: Vec<AlgebraElement> = Vec::new();
    let mut ad_index: HashMap<Vec<u16>, usize> = HashMap::new();
    let base: Vec<&Vec<u16>> = mons.iter().collect();
    for m in &base {
        let a = AlgebraElement::monomial(&gens, (*m).clone(), 0, Coef::one());
        if let Some(comb) = ad.insert(coords(&z.commutator(&a)?, &mut ad_index)) {
            let mut el = AlgebraElement::zero(&gens);
            for (k, coef) in comb {
                el.add_term((base[k].clone(), 0), coef);
            }
            if !el.is_zero() {
                commutant.push(el);
            }
        }
    }

    let mut joint = Echelon::default();
    for m in &low {
        let a = AlgebraElement::monomial(&gens, (*m).clone(), 0, Coef::one());
        joint.insert(coords(&a.checked_mul(c)?, &mut index));
    }
    let mut zspan = Echelon::default();
    for el in &commutant {
        let v = coords(el, &mut index);
        zspan.insert(v.clone());
        joint.insert(v);
    }
    let commutant_disjoint = joint.rank() == ideal.rank() + zspan.rank();

    // generation: each generator in span{z, z·Ĉ}
    let mut gen_span = Echelon::default();
    for el in commutant.iter().filter(|e| e.degree() <= dc.max(1)) {
        gen_span.insert(coords(el, &mut index));
        gen_span.insert(coords(&el.checked_mul(c)?, &mut index));
    }
    let generates = (0..n).all(|i| gen_span.contains(&coords(&AlgebraElement::generator(&gens, i), &mut index)));

    Ok(FrameReport {
        degree,
        z_selfadjoint,
        canonical_commutator,
        c_selfadjoint,
        right_multiplication_injective: injective,
        commutant_dim: zspan.rank(),
        commutant_disjoint,
        generates,
    })
}

/// Gram-form positivity data for a list of algebra elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityReport {
    /// Smallest eigenvalue of the hermitian part of `M_ab = ω(b_a* b_b)`.
    pub min_eigenvalue: f64,
    /// `max |M − M†|`.
    pub hermiticity_defect: f64,
}

impl PositivityReport {
    pub fn positive(&self) -> bool {
        self.min_eigenvalue >= -1e-10 && self.hermiticity_defect < 1e-10
    }
}

/// Gram form evaluated through the state's value table.
pub fn check_almost_positive(omega: &AlgebraicState, basis: &[AlgebraElement]) -> Result<PositivityReport, AlgStateError> {
    let k = basis.len();
    let adj: Vec<AlgebraElement> = basis.iter().map(|b| b.adjoint()).collect::<Result<_, _>>()?;
    let mut m = CMat::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            m[(a, b)] = omega.evaluate(&adj[a].checked_mul(&basis[b])?)?;
        }
    }
    Ok(gram_report(&m))
}

/// Gram form evaluated at operator level, `⟨bra|rep(b_a)† rep(b_b)|ket⟩/⟨bra|ket⟩`.
pub fn check_almost_positive_hilbert(omega: &AlgebraicState, basis: &[AlgebraElement]) -> Result<PositivityReport, AlgStateError> {
    let h = omega.hilbert().ok_or(AlgStateError::NoHilbertBacking)?;
    let kets: Vec<CVec> = basis.iter().map(|b| h.assignment.apply(b, &h.ket)).collect();
    let k = basis.len();
    let mut m = CMat::zeros(k, k);
    for a in 0..k {
        // ω(a* b) = ⟨a·bra-side|b ket⟩ needs rep(a)† applied to the bra
        let bra_a = h.assignment.apply(&basis[a], &h.bra);
        for b in 0..k {
            m[(a, b)] = bra_a.dotc(&kets[b]) / h.norm;
        }
    }
    Ok(gram_report(&m))
}

fn gram_report(m: &CMat) -> PositivityReport {
    let herm = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let defect = (m - m.adjoint()).iter().fold(0.0f64, |a, x| a.max(x.norm()));
    let min = if herm.nrows() == 0 {
        0.0
    } else {
        herm.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    };
    PositivityReport { min_eigenvalue: min, hermiticity_defect: defect }
}

/// Generators of one ideal frame: orientation `q`, momentum `p` and the lattice factor.
#[derive(Debug, Clone)]
pub struct FrameGens {
    pub q: usize,
    pub p: usize,
    pub frame: OrientationFrame,
}

/// Symbolic expansion `Ô_A^ρ(y) = Σ_n (q_A − ρ)^n P_n / n!` with
/// `P_n = (−i/ℏ)^n ad_{Ĝ}^n(y)` and `Ĝ = Ĉ − p̂_A`; present only when the
/// series terminates.
#[derive(Debug, Clone)]
pub struct Dressing {
    pub q: usize,
    pub terms: Vec<AlgebraElement>,
}

pub fn dressing(c: &AlgebraElement, frame: &FrameGens, y: &AlgebraElement, max_order: usize) -> Result<Option<Dressing>, AlgStateError> {
    let gens = c.gens().clone();
    let g = c - &AlgebraElement::generator(&gens, frame.p);
    if g.generators_used().contains(&frame.q) || y.generators_used().contains(&frame.q) || y.generators_used().contains(&frame.p) {
        return Err(AlgStateError::InvalidObservable("dressing needs an ideal frame and f_S off the frame".into()));
    }
    let mut terms = vec![y.clone()];
    let mut cur = y.clone();
    for _ in 0..max_order {
        let next = g.commutator(&cur)?;
        if next.is_zero() {
            return Ok(Some(Dressing { q: frame.q, terms }));
        }
        let scaled = next
            .div_hbar(2)
            .ok_or_else(|| AlgStateError::InvalidObservable("commutator without an ℏ factor".into()))?
            .scale(&(-Coef::i()));
        terms.push(scaled.clone());
        cur = scaled;
    }
    Ok(None)
}

/// A linear combination `Σ c_k a_k` with complex numeric coefficients.
#[derive(Debug, Clone)]
pub struct NumPoly(pub Vec<(Complex64, AlgebraElement)>);

impl NumPoly {
    pub fn mul(&self, other: &NumPoly) -> Result<NumPoly, AlgStateError> {
        let mut out = Vec::with_capacity(self.0.len() * other.0.len());
        for (a, x) in &self.0 {
            for (b, y) in &other.0 {
                out.push((a * b, x.checked_mul(y)?));
            }
        }
        Ok(NumPoly(out))
    }

    pub fn evaluate(&self, omega: &AlgebraicState) -> Result<Complex64, AlgStateError> {
        self.0.iter().try_fold(Complex64::zero(), |acc, (c, a)| Ok(acc + c * omega.evaluate(a)?))
    }
}

fn binom(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |a, k| a * k as f64)
}

/// `(c₀ − y)^k` with numeric `c₀`.
fn shifted_power(gens: &Arc<GeneratorSet>, c0: f64, y: usize, k: u32, sign: f64) -> Result<NumPoly, AlgStateError> {
    let yel = AlgebraElement::generator(gens, y);
    let mut out = Vec::new();
    for j in 0..=k {
        let coef = binom(k, j) * c0.powi((k - j) as i32) * sign.powi(j as i32);
        out.push((Complex64::new(coef, 0.0), yel.pow(j)?));
    }
    Ok(NumPoly(out))
}

impl Dressing {
    /// `Ô` as a numeric-coefficient combination at orientation `ρ`.
    pub fn at(&self, rho: f64) -> Result<NumPoly, AlgStateError> {
        let gens = self.terms[0].gens().clone();
        let mut out = Vec::new();
        for (n, p) in self.terms.iter().enumerate() {
            let shift = shifted_power(&gens, -rho, self.q, n as u32, 1.0)?;
            for (c, qpow) in shift.0 {
                out.push((c / factorial(n), qpow.checked_mul(p)?));
            }
        }
        Ok(NumPoly(out))
    }
}

/// What transform_frame needs about the pair of frames.
pub struct FramePair<'a> {
    pub space: &'a LatticeSpace,
    pub constraint: &'a Constraint,
    pub c_alg: &'a AlgebraElement,
    /// Frame whose perspective the input state is in.
    pub from: &'a FrameGens,
    /// Frame whose perspective is requested.
    pub to: &'a FrameGens,
}

struct SplitTerm {
    coef: Complex64,
    k: u32,
    l: u32,
    system: Vec<u16>,
}

fn split_observable(pair: &FramePair, f: &AlgebraElement) -> Result<(AlgebraElement, Vec<SplitTerm>), AlgStateError> {
    let gens = f.gens().clone();
    for fr in [pair.from, pair.to] {
        if fr.q > fr.p {
            return Err(AlgStateError::OrderingViolation(gens.name(fr.q).to_string()));
        }
    }
    let (a, b) = (pair.to, pair.from);
    let used = f.generators_used();
    if used.contains(&a.q) || used.contains(&a.p) {
        return Err(AlgStateError::InvalidObservable(format!("f acts on the target frame {}", gens.name(a.q))));
    }
    let g_s = &(pair.c_alg - &AlgebraElement::generator(&gens, a.p)) - &AlgebraElement::generator(&gens, b.p);
    let gu = g_s.generators_used();
    if [a.q, a.p, b.q, b.p].iter().any(|x| gu.contains(x)) {
        return Err(AlgStateError::InvalidObservable("constraint is not p_A + p_B + G_S".into()));
    }
    let hbar_sqrt = pair.space.hbar.sqrt();
    let mut terms = Vec::new();
    for ((m, g), c) in f.terms() {
        let mut system = m.clone();
        system[b.q] = 0;
        system[b.p] = 0;
        terms.push(SplitTerm {
            coef: c.to_c64() * hbar_sqrt.powi(*g as i32),
            k: m[b.q] as u32,
            l: m[b.p] as u32,
            system,
        });
    }
    Ok((g_s, terms))
}

/// `ω_{A|ρ_A}(f)` from a state in the `from` frame's gauge at `ρ_B`, via the
/// substitution `q_B → ρ_A+ρ_B − q_A`, `p_B → −p_A − Ĝ_S` and the relational
/// dressing of the system part.  Uses the symbolic dressing when it terminates
/// and the state's Hilbert backing otherwise.
pub fn transform_frame(omega_b: &AlgebraicState, pair: &FramePair, rho_a: f64, rho_b: f64, f: &AlgebraElement) -> Result<Complex64, AlgStateError> {
    let (g_s, terms) = split_observable(pair, f)?;
    let gens = f.gens().clone();
    let a = pair.to;
    let mut total = Complex64::zero();
    let mut needs_hilbert = false;
    let mut symbolic = Vec::new();
    for t in &terms {
        let ys = AlgebraElement::monomial(&gens, t.system.clone(), 0, Coef::one());
        match dressing(pair.c_alg, a, &ys, 2 * omega_b.degree + 2)? {
            Some(d) => symbolic.push((t, d)),
            None => {
                needs_hilbert = true;
                break;
            }
        }
    }
    if needs_hilbert {
        return transform_frame_hilbert(omega_b, pair, rho_a, rho_b, f);
    }
    let minus_p = &(-&AlgebraElement::generator(&gens, a.p)) - &g_s;
    for (t, d) in symbolic {
        let x = shifted_power(&gens, rho_a + rho_b, a.q, t.k, -1.0)?;
        let pl = NumPoly(vec![(Complex64::new(1.0, 0.0), minus_p.pow(t.l)?)]);
        let prod = x.mul(&pl)?.mul(&d.at(rho_a)?)?;
        total += t.coef * prod.evaluate(omega_b)?;
    }
    Ok(total)
}

/// [`transform_frame`] evaluated at operator level on the state's Hilbert pair.
pub fn transform_frame_hilbert(omega_b: &AlgebraicState, pair: &FramePair, rho_a: f64, rho_b: f64, f: &AlgebraElement) -> Result<Complex64, AlgStateError> {
    let h = omega_b.hilbert().ok_or(AlgStateError::NoHilbertBacking)?;
    let (g_s, terms) = split_observable(pair, f)?;
    let gens = f.gens().clone();
    let a = pair.to;
    let minus_p = &(-&AlgebraElement::generator(&gens, a.p)) - &g_s;
    let q_a = &h.assignment.ops[a.q];
    let c0 = Complex64::new(rho_a + rho_b, 0.0);
    let mut total = Complex64::zero();
    for t in &terms {
        let ys = AlgebraElement::monomial(&gens, t.system.clone(), 0, Coef::one());
        let fs = crate::ncalg::represent(&ys, pair.space, &h.assignment);
        let o = relational_observable(pair.space, pair.constraint, &a.frame, rho_a, &fs, Form::Closed)?;
        let mut v = o.apply(&h.ket);
        for _ in 0..t.l {
            v = h.assignment.apply(&minus_p, &v);
        }
        for _ in 0..t.k {
            v = &v * c0 - q_a.apply(&v);
        }
        total += t.coef * h.bra.dotc(&v) / h.norm;
    }
    Ok(total)
}
