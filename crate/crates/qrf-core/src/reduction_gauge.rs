//! Page–Wootters reduction and embedding, frame-change maps, and gauge maps
//! `Φ` with their projector identities.

use std::collections::BTreeSet;

use num::complex::Complex64;
use thiserror::Error;

use crate::algstates::{AlgStateError, AlgebraicState};
use crate::kinspace::{group_average, CMat, CVec, Constraint, KinError, KinOperator, LatticeSpace};
use crate::relobs::{complement_block, lift_complement, orientation_projector, OrientationFrame, RelObsError};

const PHYSICAL_TOL: f64 = 1e-9;
const MAX_FLOW_NORM: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaugeError {
    #[error("state is not physical: ‖Ĉψ‖/‖ψ‖ = {0:e}")]
    NotPhysical(f64),
    #[error("source and target frame are the same factor {0}")]
    SameFrame(usize),
    #[error("observable acts on the source frame factor {0}")]
    UnsupportedSupport(usize),
    #[error("flow exponent has norm {0:.3e} > 50")]
    IllConditionedFlow(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Kin(#[from] KinError),
    #[error(transparent)]
    RelObs(#[from] RelObsError),
    #[error(transparent)]
    State(#[from] AlgStateError),
}

/// Relative size of `Ĉψ` for the folded constraint.
pub fn constraint_residual(space: &LatticeSpace, c: &Constraint, psi: &CVec) -> f64 {
    let n = psi.norm();
    if n == 0.0 {
        return 0.0;
    }
    let cpsi = c.op(space).apply(psi);
    cpsi.norm() / (n * c.unit)
}

/// `(⟨ρ|⊗1)` as a matrix from the full space to the complement of the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionMap {
    pub frame: usize,
    pub rho: f64,
    pub matrix: CMat,
}

pub fn reduction_map(space: &LatticeSpace, frame: &OrientationFrame, rho: f64) -> ReductionMap {
    let f = frame.factor;
    let dc = space.complement_dim(f);
    let bra = frame.state_at(rho).conjugate();
    let mut m = CMat::zeros(dc, space.dim);
    for i in 0..space.dim {
        let (k, r) = space.split_index(f, i);
        m[(r, i)] = bra[k];
    }
    ReductionMap { frame: f, rho, matrix: m }
}

/// Conditions a physical state on the frame reading `ρ`.
pub fn reduce(space: &LatticeSpace, c: &Constraint, frame: &OrientationFrame, rho: f64, psi: &CVec) -> Result<CVec, GaugeError> {
    if psi.len() != space.dim {
        return Err(GaugeError::DimensionMismatch { expected: space.dim, got: psi.len() });
    }
    let r = constraint_residual(space, c, psi);
    if r > PHYSICAL_TOL {
        return Err(GaugeError::NotPhysical(r));
    }
    Ok(reduce_unchecked(space, frame, rho, psi))
}

/// `(⟨ρ|⊗1)ψ` without the physicality check.
pub fn reduce_unchecked(space: &LatticeSpace, frame: &OrientationFrame, rho: f64, psi: &CVec) -> CVec {
    let f = frame.factor;
    let bra = frame.state_at(rho).conjugate();
    let mut out = CVec::zeros(space.complement_dim(f));
    for i in 0..space.dim {
        let (k, r) = space.split_index(f, i);
        out[r] += bra[k] * psi[i];
    }
    out
}

/// `Π(|ρ⟩⊗φ)`.
pub fn embed(space: &LatticeSpace, c: &Constraint, frame: &OrientationFrame, rho: f64, phi: &CVec) -> Result<CVec, GaugeError> {
    let f = frame.factor;
    let dc = space.complement_dim(f);
    if phi.len() != dc {
        return Err(GaugeError::DimensionMismatch { expected: dc, got: phi.len() });
    }
    let ket = frame.state_at(rho);
    let pi = group_average(space, c)?;
    let v = CVec::from_fn(space.dim, |i, _| {
        let (k, r) = space.split_index(f, i);
        ket[k] * phi[r]
    });
    Ok(pi.apply(&v))
}

/// `Π_{|R} = ⟨ρ|Π|ρ⟩` on the complement of the frame.
pub fn reduced_projector(space: &LatticeSpace, c: &Constraint, frame: &OrientationFrame, rho: f64) -> Result<CMat, GaugeError> {
    let pi = group_average(space, c)?.to_dense();
    let r = reduction_map(space, frame, rho).matrix;
    Ok(&r * pi * r.adjoint())
}

/// `π̂ = 1_R ⊗ Π_{|R}`.
pub fn system_projector(space: &LatticeSpace, c: &Constraint, frame: &OrientationFrame, rho: f64) -> Result<KinOperator, GaugeError> {
    let block = reduced_projector(space, c, frame, rho)?;
    let support: BTreeSet<usize> = (0..space.dims.len()).filter(|&g| g != frame.factor).collect();
    Ok(lift_complement(space, frame.factor, &block, support))
}

/// The change of perspective `V = R_B(ρ_B) Π R_A(ρ_A)†` between reduced spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct QrfTransform {
    pub from: usize,
    pub to: usize,
    pub rho_from: f64,
    pub rho_to: f64,
    /// Maps the complement of `from` to the complement of `to`.
    pub matrix: CMat,
}

pub fn qrf_transform(
    space: &LatticeSpace,
    c: &Constraint,
    a: &OrientationFrame,
    rho_a: f64,
    b: &OrientationFrame,
    rho_b: f64,
) -> Result<QrfTransform, GaugeError> {
    if a.factor == b.factor {
        return Err(GaugeError::SameFrame(a.factor));
    }
    let pi = group_average(space, c)?.to_dense();
    let ra = reduction_map(space, a, rho_a).matrix;
    let rb = reduction_map(space, b, rho_b).matrix;
    Ok(QrfTransform { from: a.factor, to: b.factor, rho_from: rho_a, rho_to: rho_b, matrix: rb * pi * ra.adjoint() })
}

impl QrfTransform {
    pub fn apply(&self, phi: &CVec) -> CVec {
        &self.matrix * phi
    }

    pub fn inverse_apply(&self, phi: &CVec) -> CVec {
        self.matrix.adjoint() * phi
    }
}

/// [`QrfTransform`] applied to one reduced state without forming `Π`: for
/// two ideal frames every complement index of either frame meets the
/// physical subspace in exactly one global index.
pub fn ideal_frame_change(
    space: &LatticeSpace,
    c: &Constraint,
    a: &OrientationFrame,
    rho_a: f64,
    b: &OrientationFrame,
    rho_b: f64,
    phi: &CVec,
) -> Result<CVec, GaugeError> {
    if a.factor == b.factor {
        return Err(GaugeError::SameFrame(a.factor));
    }
    for f in [a, b] {
        if !c.is_ideal_for(f.factor) {
            return Err(RelObsError::UnsupportedForm(f.factor).into());
        }
    }
    let expected = space.complement_dim(a.factor);
    if phi.len() != expected {
        return Err(GaugeError::DimensionMismatch { expected, got: phi.len() });
    }
    let (pa, pb) = (a.momenta(), b.momenta());
    let hbar = space.hbar;
    let mut out = CVec::zeros(space.complement_dim(b.factor));
    for (i, _) in c.folded_units.iter().enumerate().filter(|(_, &u)| u == 0) {
        let (ka, ra) = space.split_index(a.factor, i);
        let (kb, rb) = space.split_index(b.factor, i);
        out[rb] += Complex64::from_polar(1.0, (rho_b * pb[kb] - rho_a * pa[ka]) / hbar) * phi[ra];
    }
    Ok(out)
}

/// `V f V†` for `f` supported off the source frame, returned as `1_B ⊗ (V f V†)`
/// on the full space.
pub fn conjugate_observable(space: &LatticeSpace, v: &QrfTransform, f: &KinOperator) -> Result<KinOperator, GaugeError> {
    if f.support().contains(&v.from) {
        return Err(GaugeError::UnsupportedSupport(v.from));
    }
    let block = complement_block(space, v.from, f);
    let out = &v.matrix * block * v.matrix.adjoint();
    let support: BTreeSet<usize> = (0..space.dims.len()).filter(|&g| g != v.to).collect();
    Ok(lift_complement(space, v.to, &out, support))
}

/// A gauge map stored as an explicit operator.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeMap {
    pub op: KinOperator,
    pub label: String,
}

/// `Θ(ρ) = |ρ⟩⟨ρ| ⊗ 1`.
pub fn theta_gauge(space: &LatticeSpace, frame: &OrientationFrame, rho: f64) -> GaugeMap {
    GaugeMap {
        op: KinOperator::local(space, frame.factor, orientation_projector(frame, rho)),
        label: format!("Theta[{}]({rho})", space.factors[frame.factor].label),
    }
}

/// `e^{iÔ₁Ĉ} Φ e^{iÔ₂Ĉ}` for hermitian `Ô₁, Ô₂` commuting with `Ĉ`.
pub fn dressed_gauge(space: &LatticeSpace, c: &Constraint, phi: &GaugeMap, o1: &KinOperator, o2: &KinOperator) -> GaugeMap {
    let cm = c.op(space);
    let e1 = (o1.mul(&cm).to_dense() * Complex64::i()).exp();
    let e2 = (o2.mul(&cm).to_dense() * Complex64::i()).exp();
    GaugeMap { op: KinOperator::dense(space, e1 * phi.op.to_dense() * e2), label: format!("dressed {}", phi.label) }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaugeReport {
    /// `max |ΠΦΠ − Π|`.
    pub pi_phi_pi: f64,
    /// `max |Π(ΦΠΦ − Φ)Π|`.
    pub phi_pi_phi: f64,
    pub valid: bool,
}

pub fn verify_gauge(phi: &GaugeMap, pi: &KinOperator) -> GaugeReport {
    let f = &phi.op;
    let pfp = pi.mul(f).mul(pi);
    let r1 = pfp.max_diff(pi);
    let fpf = f.mul(pi).mul(f);
    let r2 = pi.mul(&fpf.sub(f)).mul(pi).max_abs();
    GaugeReport { pi_phi_pi: r1, phi_pi_phi: r2, valid: r1 < 1e-10 && r2 < 1e-10 }
}

/// Residuals of the reference-gauge identity battery at one orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorIdentities {
    /// `ΠΘ(ρ)Π = Π`.
    pub pi_theta_pi: f64,
    /// `(1/N) Σ_j Θ(ρ_j) = 1`.
    pub theta_resolution: f64,
    /// `Θ(ρ)ΠΘ(ρ) = Θ(ρ)π̂`.
    pub theta_pi_theta: f64,
    /// `π̂Π = Ππ̂ = Π`.
    pub pi_hat_commute: f64,
    /// `Θ(ρ') = U Θ(ρ) U†` with `U = e^{−i(ρ'−ρ)Ĉ/ℏ}`.
    pub covariance: f64,
    /// `ΦΠΦ = Φ` on the physical subspace for `Φ = Θ(ρ)`.
    pub gauge_condition: f64,
}

impl ProjectorIdentities {
    pub fn max(&self) -> f64 {
        [
            self.pi_theta_pi,
            self.theta_resolution,
            self.theta_pi_theta,
            self.pi_hat_commute,
            self.covariance,
            self.gauge_condition,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn projector_identities(
    space: &LatticeSpace,
    c: &Constraint,
    frame: &OrientationFrame,
    j: usize,
    j2: usize,
) -> Result<ProjectorIdentities, GaugeError> {
    let rho = frame.rho(j);
    let pi = group_average(space, c)?;
    let theta = theta_gauge(space, frame, rho);
    let t = &theta.op;
    let max = |m: &CMat| m.iter().fold(0.0f64, |acc, x| acc.max(x.norm()));

    let mut res = CMat::zeros(frame.n, frame.n);
    for k in 0..frame.n {
        res += orientation_projector(frame, frame.rho(k));
    }
    res /= Complex64::new(frame.n as f64, 0.0);
    let theta_resolution = max(&(res - CMat::identity(frame.n, frame.n)));

    let pihat = system_projector(space, c, frame, rho)?;
    let theta_pi_theta = t.mul(&pi).mul(t).max_diff(&t.mul(&pihat));
    let pi_hat_commute = pihat.mul(&pi).max_diff(&pi).max(pi.mul(&pihat).max_diff(&pi));

    let shift = frame.rho(j2) - rho;
    let u = c.flow_phases(-shift);
    let moved = theta_gauge(space, frame, frame.rho(j2)).op.to_dense();
    let t = t.to_dense();
    let conj = CMat::from_fn(space.dim, space.dim, |a, b| u[a] * t[(a, b)] * u[b].conj());
    let covariance = max(&(moved - conj));

    let report = verify_gauge(&theta, &pi);
    Ok(ProjectorIdentities {
        pi_theta_pi: report.pi_phi_pi,
        theta_resolution,
        theta_pi_theta,
        pi_hat_commute,
        covariance,
        gauge_condition: report.phi_pi_phi,
    })
}

/// `ω'(·) = ω(Π Φ ·)` for a Hilbert-backed state.
pub fn gauge_transform_state(omega: &AlgebraicState, pi: &KinOperator, phi: &GaugeMap) -> Result<AlgebraicState, GaugeError> {
    let h = omega.hilbert().ok_or(AlgStateError::NoHilbertBacking)?;
    let bra = phi.op.adjoint().apply(&pi.adjoint().apply(&h.bra));
    Ok(omega.with_bra(bra)?)
}

/// `ω'(·) = ω(e^{iλ âĈ/ℏ} ·)` for a Hilbert-backed state.
pub fn gauge_flow(omega: &AlgebraicState, a: &KinOperator, c_op: &KinOperator, lambda: f64) -> Result<AlgebraicState, GaugeError> {
    let h = omega.hilbert().ok_or(AlgStateError::NoHilbertBacking)?;
    let ac = a.mul(c_op).to_dense();
    let hbar = h.space.hbar;
    let size = lambda.abs() * ac.norm() / hbar;
    if size > MAX_FLOW_NORM {
        return Err(GaugeError::IllConditionedFlow(size));
    }
    // e^{iλ âĈ/ℏ}† applied to the bra as a Taylor series
    let gen = ac.adjoint() * Complex64::new(0.0, -lambda / hbar);
    let mut term = h.bra.clone();
    let mut bra = term.clone();
    for k in 1.. {
        term = &gen * term / Complex64::new(k as f64, 0.0);
        bra += &term;
        if term.norm() <= f64::EPSILON * 1e-3 * bra.norm() {
            break;
        }
    }
    Ok(omega.with_bra(bra)?)
}
