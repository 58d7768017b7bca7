//! Orientation states, covariant effects, the G-twirl and relational observables.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::DVector;
use num::complex::Complex64;
use thiserror::Error;

use crate::kinspace::{CMat, CVec, Constraint, KinError, KinOperator, LatticeSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelObsError {
    #[error("orientation index {index} out of range for a grid of {n} points")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("orientation {0} is not a grid point")]
    OffGrid(f64),
    #[error("closed form needs an ideal frame; factor {0} does not enter the constraint linearly")]
    UnsupportedForm(usize),
    #[error("observable must be supported off the frame factor {0}")]
    SupportOverlap(usize),
    #[error(transparent)]
    Kin(#[from] KinError),
}

/// Orientation grid of a frame factor, `ρ_j = j·δρ` for `j ∈ [−N/2, N/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationFrame {
    pub factor: usize,
    pub n: usize,
    pub dp: f64,
    pub drho: f64,
    pub hbar: f64,
}

impl OrientationFrame {
    pub fn new(space: &LatticeSpace, factor: usize) -> Result<Self, RelObsError> {
        let spec = space.frame(factor)?;
        Ok(OrientationFrame {
            factor,
            n: spec.n,
            dp: spec.dp,
            drho: 2.0 * PI * space.hbar / (spec.n as f64 * spec.dp),
            hbar: space.hbar,
        })
    }

    /// Orientation value of grid index `j` (index 0 is `ρ = −(N/2)·δρ`).
    pub fn rho(&self, j: usize) -> f64 {
        (j as i64 - (self.n / 2) as i64) as f64 * self.drho
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.rho(j)).collect()
    }

    /// Grid index of an orientation value, if it lies on the grid (modulo the period).
    pub fn index_of(&self, rho: f64) -> Result<usize, RelObsError> {
        let x = rho / self.drho;
        let k = x.round();
        if (x - k).abs() > 1e-9 {
            return Err(RelObsError::OffGrid(rho));
        }
        Ok((k as i64 + (self.n / 2) as i64).rem_euclid(self.n as i64) as usize)
    }

    pub fn momenta(&self) -> Vec<f64> {
        crate::kinspace::lattice_momenta(self.n, self.dp)
    }

    /// `|ρ⟩ = Σ_k e^{−iρ p_k/ℏ}|p_k⟩` for any real ρ.
    pub fn state_at(&self, rho: f64) -> CVec {
        CVec::from_iterator(self.n, self.momenta().into_iter().map(|p| Complex64::from_polar(1.0, -rho * p / self.hbar)))
    }

    /// Matrix whose columns are the grid orientation states.
    pub fn basis(&self) -> CMat {
        let p = self.momenta();
        CMat::from_fn(self.n, self.n, |k, j| Complex64::from_polar(1.0, -self.rho(j) * p[k] / self.hbar))
    }

    /// Orientation-basis amplitudes `⟨ρ_j|v⟩/√N` of a factor-local vector.
    pub fn to_orientation(&self, v: &CVec) -> CVec {
        self.basis().adjoint() * v / Complex64::new((self.n as f64).sqrt(), 0.0)
    }

    /// Factor-local vector with orientation-basis amplitudes `a_j`.
    pub fn from_orientation(&self, a: &CVec) -> CVec {
        self.basis() * a / Complex64::new((self.n as f64).sqrt(), 0.0)
    }
}

pub fn orientation_state(frame: &OrientationFrame, j: usize) -> Result<CVec, RelObsError> {
    if j >= frame.n {
        return Err(RelObsError::IndexOutOfRange { index: j, n: frame.n });
    }
    Ok(frame.state_at(frame.rho(j)))
}

/// `|ρ⟩⟨ρ|` on the frame factor, unnormalized (`⟨ρ|ρ⟩ = N`).
pub fn orientation_projector(frame: &OrientationFrame, rho: f64) -> CMat {
    let v = frame.state_at(rho);
    &v * v.adjoint()
}

/// `Ê(X) = (1/N) Σ_{j∈X} |ρ_j⟩⟨ρ_j|` on the frame factor.
pub fn effect_operator(space: &LatticeSpace, frame: &OrientationFrame, set: &[usize]) -> Result<KinOperator, RelObsError> {
    let mut m = CMat::zeros(frame.n, frame.n);
    let unique: BTreeSet<usize> = set.iter().copied().collect();
    for &j in &unique {
        let v = orientation_state(frame, j)?;
        m += &v * v.adjoint();
    }
    m /= Complex64::new(frame.n as f64, 0.0);
    Ok(KinOperator::local(space, frame.factor, m))
}

/// First moment of the orientation POVM on the frame factor.
pub fn orientation_matrix(frame: &OrientationFrame) -> CMat {
    let b = frame.basis();
    let d = CVec::from_iterator(frame.n, frame.grid().into_iter().map(|r| Complex64::new(r, 0.0)));
    &b * CMat::from_diagonal(&d) * b.adjoint() / Complex64::new(frame.n as f64, 0.0)
}

/// `R̂ = (1/N) Σ_j ρ_j |ρ_j⟩⟨ρ_j|`, also used as the position operator of any lattice factor.
pub fn orientation_operator(space: &LatticeSpace, frame: &OrientationFrame) -> KinOperator {
    KinOperator::local(space, frame.factor, orientation_matrix(frame))
}

/// Position operator of a lattice factor (frame or lattice system).
pub fn position_operator(space: &LatticeSpace, factor: usize) -> Result<KinOperator, RelObsError> {
    let spec = space.factor(factor)?;
    if spec.dp <= 0.0 {
        return Err(KinError::NotAFrameFactor(factor).into());
    }
    let frame = OrientationFrame {
        factor,
        n: spec.n,
        dp: spec.dp,
        drho: 2.0 * PI * space.hbar / (spec.n as f64 * spec.dp),
        hbar: space.hbar,
    };
    Ok(orientation_operator(space, &frame))
}

/// The G-twirl `(1/N_G) Σ_n U_n A U_n†` in closed form: in the diagonal basis
/// of `Ĉ` it keeps exactly the entries whose folded eigenvalues agree modulo
/// the group window.
pub fn g_twirl(space: &LatticeSpace, c: &Constraint, a: &KinOperator) -> KinOperator {
    let m = a.to_dense();
    let k = c.modulus;
    let units = &c.folded_units;
    let out = CMat::from_fn(space.dim, space.dim, |i, j| {
        if (units[i] - units[j]).rem_euclid(k) == 0 {
            m[(i, j)]
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let support = a.support().union(&c.support()).copied().collect();
    KinOperator::dense_with_support(space, out, support)
}

/// The G-twirl as the explicit group sum; the terms are evaluated in parallel
/// when the `parallel` feature is on.
pub fn g_twirl_sum(space: &LatticeSpace, c: &Constraint, a: &KinOperator) -> KinOperator {
    let m = a.to_dense();
    let n_g = c.group_order;
    let terms = crate::par::map_range(n_g, |n| conjugate_by_phases(&m, &c.group_phases(-(n as i64))));
    let mut sum = terms.into_iter().fold(CMat::zeros(space.dim, space.dim), |acc, t| acc + t);
    sum /= Complex64::new(n_g as f64, 0.0);
    let support = a.support().union(&c.support()).copied().collect();
    KinOperator::dense_with_support(space, sum, support)
}

/// Sequential reference version of [`g_twirl_sum`].
pub fn g_twirl_sum_seq(space: &LatticeSpace, c: &Constraint, a: &KinOperator) -> KinOperator {
    let m = a.to_dense();
    let n_g = c.group_order;
    let terms = crate::par::map_range_seq(n_g, |n| conjugate_by_phases(&m, &c.group_phases(-(n as i64))));
    let mut sum = terms.into_iter().fold(CMat::zeros(space.dim, space.dim), |acc, t| acc + t);
    sum /= Complex64::new(n_g as f64, 0.0);
    let support = a.support().union(&c.support()).copied().collect();
    KinOperator::dense_with_support(space, sum, support)
}

/// `D M D†` for a diagonal unitary `D = diag(u)`.
fn conjugate_by_phases(m: &CMat, u: &CVec) -> CMat {
    CMat::from_fn(m.nrows(), m.ncols(), |i, j| u[i] * m[(i, j)] * u[j].conj())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    Kinematical,
    Physical,
    Closed,
}

fn conditional(space: &LatticeSpace, frame: &OrientationFrame, rho: f64, f_s: &KinOperator) -> Result<KinOperator, RelObsError> {
    if f_s.support().contains(&frame.factor) {
        return Err(RelObsError::SupportOverlap(frame.factor));
    }
    Ok(KinOperator::local(space, frame.factor, orientation_projector(frame, rho)).mul(f_s))
}

/// Relational observable "f_S when the frame reads ρ" in the requested form.
pub fn relational_observable(
    space: &LatticeSpace,
    c: &Constraint,
    frame: &OrientationFrame,
    rho: f64,
    f_s: &KinOperator,
    form: Form,
) -> Result<KinOperator, RelObsError> {
    match form {
        Form::Kinematical => Ok(g_twirl(space, c, &conditional(space, frame, rho, f_s)?)),
        Form::Physical => {
            let pi = crate::kinspace::group_average(space, c)?;
            Ok(pi.mul(&conditional(space, frame, rho, f_s)?))
        }
        Form::Closed => closed_form(space, c, frame, rho, f_s),
    }
}

/// `Σ_j (1/N)|ρ_j⟩⟨ρ_j| ⊗ U(ρ_j−ρ) f U(ρ_j−ρ)†` with `U(σ) = e^{−iσĜ_rel/ℏ}`,
/// the spectral form of `e^{−i(R̂−ρ)Ĝ_rel/ℏ} f e^{i(R̂−ρ)Ĝ_rel/ℏ}`.
fn closed_form(
    space: &LatticeSpace,
    c: &Constraint,
    frame: &OrientationFrame,
    rho: f64,
    f_s: &KinOperator,
) -> Result<KinOperator, RelObsError> {
    if !c.is_ideal_for(frame.factor) {
        return Err(RelObsError::UnsupportedForm(frame.factor));
    }
    if f_s.support().contains(&frame.factor) {
        return Err(RelObsError::SupportOverlap(frame.factor));
    }
    let f = frame.factor;
    let block = complement_block(space, f, f_s);
    let g_rel = c.relative_generator(space, f);
    let dc = space.complement_dim(f);
    // G_rel does not depend on the frame index; read it at frame index 0.
    let g: Vec<f64> = (0..dc).map(|r| g_rel[space.join_index(f, 0, r)]).collect();
    let p = frame.momenta();
    let grid = frame.grid();
    let n = frame.n;
    let hbar = space.hbar;
    let mut out = CMat::zeros(space.dim, space.dim);
    for i in 0..space.dim {
        let (k, r) = space.split_index(f, i);
        for jdx in 0..space.dim {
            let (k2, r2) = space.split_index(f, jdx);
            let fr = block[(r, r2)];
            if fr == Complex64::new(0.0, 0.0) {
                continue;
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for &rj in &grid {
                let phase = -rj * (p[k] - p[k2]) / hbar - (rj - rho) * (g[r] - g[r2]) / hbar;
                acc += Complex64::from_polar(1.0, phase);
            }
            out[(i, jdx)] = fr * acc / n as f64;
        }
    }
    let support = f_s.support().union(&c.support()).copied().collect();
    Ok(KinOperator::dense_with_support(space, out, support))
}

/// Matrix of an operator supported off factor `f`, restricted to the complement
/// (read off at frame index 0).
pub fn complement_block(space: &LatticeSpace, f: usize, op: &KinOperator) -> CMat {
    let m = op.to_dense();
    let dc = space.complement_dim(f);
    CMat::from_fn(dc, dc, |r, r2| m[(space.join_index(f, 0, r), space.join_index(f, 0, r2))])
}

/// Lifts a complement operator back to the full space as `1_f ⊗ block`.
pub fn lift_complement(space: &LatticeSpace, f: usize, block: &CMat, support: BTreeSet<usize>) -> KinOperator {
    let mut out = CMat::zeros(space.dim, space.dim);
    for a in 0..space.dims[f] {
        for r in 0..block.nrows() {
            for r2 in 0..block.ncols() {
                out[(space.join_index(f, a, r), space.join_index(f, a, r2))] = block[(r, r2)];
            }
        }
    }
    KinOperator::dense_with_support(space, out, support)
}

/// Probability weight of a state on the two grid points nearest each edge of
/// the frame's orientation grid.
pub fn wraparound_weight(space: &LatticeSpace, frame: &OrientationFrame, psi: &CVec) -> f64 {
    let f = frame.factor;
    let dc = space.complement_dim(f);
    let b = frame.basis();
    let norm = psi.norm_squared();
    if norm == 0.0 {
        return 0.0;
    }
    let edges = [0usize, 1, frame.n - 2, frame.n - 1];
    let mut w = 0.0;
    for r in 0..dc {
        let local = CVec::from_fn(frame.n, |k, _| psi[space.join_index(f, k, r)]);
        for &j in &edges {
            let amp = b.column(j).dotc(&local);
            w += amp.norm_sqr() / frame.n as f64;
        }
    }
    w / norm
}

/// Diagonal unitary `e^{−iσ Ĝ/ℏ}` for a global real diagonal `Ĝ`.
pub fn diagonal_flow(g: &DVector<f64>, sigma: f64, hbar: f64) -> CVec {
    g.map(|x| Complex64::from_polar(1.0, -sigma * x / hbar))
}
