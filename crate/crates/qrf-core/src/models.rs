//! The four example systems and the experiments that push them through the
//! Hilbert, algebraic and effective formalisms side by side.

use std::f64::consts::PI;
use std::fmt;
use std::io;
use std::str::FromStr;
use std::sync::Arc;

use num::complex::Complex64;
use num::rational::Rational64;
use num::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::algstates::{transform_frame, verify_reference_frame, AlgStateError, AlgebraicState, FrameGens, FramePair};
use crate::effective::{
    degenerate_solve, expect_expand_sym, factor_tower_solution, moments_from_operators, rho_param, transform_expectation,
    effective_frame_transform, EffectiveError, FrameChange, FrameVars, MomentState,
};
use crate::kinspace::{
    build_constraint, factorize_constraint, group_average, sector_projectors, tensor_space, CMat, CVec,
    Constraint, ConstraintTerm, FactorSpec, KinError, KinOperator, LatticeSpace,
};
use crate::ncalg::{represent, AlgebraElement, AlgebraError, Assignment, Coef, GeneratorSet, GeneratorSetBuilder};
use crate::reduction_gauge::{
    embed, gauge_flow, ideal_frame_change, projector_identities, reduce, GaugeError,
};
use crate::relobs::{
    complement_block, orientation_matrix, relational_observable, Form, OrientationFrame, RelObsError,
};

/// Largest total Hilbert dimension a model may have.
pub const MAX_DIM: usize = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("reference frame conditions fail for {0}")]
    FrameCheck(String),
    #[error("suite '{suite}' does not apply to the {model} model")]
    Unsupported { suite: String, model: String },
    #[error("state vanishes after projection onto the physical subspace")]
    EmptyState,
    #[error("report I/O: {0}")]
    Io(String),
    #[error(transparent)]
    Kin(#[from] KinError),
    #[error(transparent)]
    RelObs(#[from] RelObsError),
    #[error(transparent)]
    Gauge(#[from] GaugeError),
    #[error(transparent)]
    State(#[from] AlgStateError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Effective(#[from] EffectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Newtonian,
    NParticle,
    Su2,
    Degenerate,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Newtonian, ModelKind::NParticle, ModelKind::Su2, ModelKind::Degenerate];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Newtonian => "newtonian",
            ModelKind::NParticle => "nparticle",
            ModelKind::Su2 => "su2",
            ModelKind::Degenerate => "degenerate",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::InvalidSpec(format!("unknown model '{s}' (expected newtonian, nparticle, su2 or degenerate)")))
    }
}

/// Initial states: a periodized Gaussian momentum profile on every lattice
/// factor, optionally sheared, and the uniform superposition on the others.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRecipe {
    /// Momentum width σ in lattice units; `None` means `√(N/4π)`, which
    /// spreads equally over the momentum lattice and the orientation grid.
    pub width: Option<f64>,
    /// Position centers in orientation-grid units, one per lattice factor.
    pub centers: Vec<i64>,
    /// Mean momenta in lattice units, one per lattice factor.
    pub momenta: Vec<i64>,
    /// Shear `k_t → k_t + shear·k_{t−1}` between consecutive lattice factors.
    pub shear: i64,
}

impl Default for StateRecipe {
    fn default() -> Self {
        StateRecipe { width: None, centers: Vec::new(), momenta: Vec::new(), shear: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Points `N` of every momentum lattice.
    pub lattice: usize,
    pub dp: f64,
    pub hbar: f64,
    /// Number of particles (nparticle).
    pub particles: usize,
    /// Twice the spin (su2).
    pub two_j: usize,
    /// Coupling of `Ĵ_z` in the constraint (su2).
    pub beta: Rational64,
    /// Particle mass (newtonian).
    pub mass: Rational64,
    /// Eigenvalues of `Ĥ` in units of `δp`, with `Ĝ_S = Ĥ²` (degenerate).
    pub energies: Vec<i64>,
    pub state: StateRecipe,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            lattice: 16,
            dp: 1.0,
            hbar: 1.0,
            particles: 3,
            two_j: 2,
            beta: Rational64::from_integer(1),
            mass: Rational64::new(1, 2),
            energies: vec![1, 2],
            state: StateRecipe::default(),
        }
    }

    pub fn width(&self) -> f64 {
        self.state.width.unwrap_or_else(|| balanced_width(self.lattice))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.lattice < 4 || self.lattice % 2 != 0 {
            return bad(format!("lattice must be even and at least 4, got {}", self.lattice));
        }
        if !(self.dp > 0.0 && self.dp.is_finite()) {
            return bad(format!("dp must be positive, got {}", self.dp));
        }
        if !(self.hbar > 0.0 && self.hbar.is_finite()) {
            return bad(format!("hbar must be positive, got {}", self.hbar));
        }
        if let Some(w) = self.state.width {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("state.width must be positive, got {w}"));
            }
        }
        let dim = match self.kind {
            ModelKind::Newtonian => {
                if self.mass <= Rational64::zero() {
                    return bad(format!("mass must be positive, got {}", self.mass));
                }
                self.lattice.pow(2)
            }
            ModelKind::NParticle => {
                if self.particles < 2 {
                    return bad(format!("nparticle needs at least 2 particles, got {}", self.particles));
                }
                (self.lattice as f64).powi(self.particles as i32) as usize
            }
            ModelKind::Su2 => {
                if self.two_j == 0 {
                    return bad("two_j must be at least 1".into());
                }
                self.lattice.pow(2) * (self.two_j + 1)
            }
            ModelKind::Degenerate => {
                if self.energies.is_empty() || self.energies.iter().any(|&e| e <= 0) {
                    return bad("energies must be a nonempty list of positive integers".into());
                }
                self.lattice * self.energies.len()
            }
        };
        if dim > MAX_DIM {
            return bad(format!("Hilbert dimension {dim} exceeds {MAX_DIM}"));
        }
        Ok(())
    }
}

/// Momentum width whose orientation-grid width is the same number of points.
pub fn balanced_width(n: usize) -> f64 {
    (n as f64 / (4.0 * PI)).sqrt()
}

fn coef(r: Rational64) -> Coef {
    Coef::ratio(*r.numer(), *r.denom())
}

fn r64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn cx(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Spin-`j` matrices `(Ĵ_x, Ĵ_y, Ĵ_z)` in the `Ĵ_z` eigenbasis ordered `m = j, j−1, …, −j`.
pub fn spin_matrices(two_j: usize, hbar: f64) -> [CMat; 3] {
    let d = two_j + 1;
    let j = two_j as f64 / 2.0;
    let mut jp = CMat::zeros(d, d);
    let mut jz = CMat::zeros(d, d);
    for k in 0..d {
        let m = j - k as f64;
        jz[(k, k)] = cx(hbar * m);
        if k > 0 {
            jp[(k - 1, k)] = cx(hbar * (j * (j + 1.0) - m * (m + 1.0)).sqrt());
        }
    }
    let jm = jp.adjoint();
    let jx = (&jp + &jm) * cx(0.5);
    let jy = (&jp - &jm) * Complex64::new(0.0, -0.5);
    [jx, jy, jz]
}

/// `g(R̂)` for the orientation operator of a frame, built spectrally.
pub fn orientation_function(frame: &OrientationFrame, g: impl Fn(f64) -> f64) -> CMat {
    let b = frame.basis();
    let d = CVec::from_iterator(frame.n, frame.grid().into_iter().map(|r| cx(g(r))));
    &b * CMat::from_diagonal(&d) * b.adjoint() / cx(frame.n as f64)
}

/// A model bound to its kinematical space, constraint, generator algebra and frames.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub space: LatticeSpace,
    pub constraint: Constraint,
    pub gens: Arc<GeneratorSet>,
    pub c_alg: AlgebraElement,
    pub assignment: Arc<Assignment>,
    /// Factor and local matrix of every generator.
    pub local_ops: Vec<(usize, CMat)>,
    /// The ideal frames, each with its generator pair.
    pub frames: Vec<FrameGens>,
    /// Factor of the degenerate frame, when there is one.
    pub sector_frame: Option<usize>,
}

const LETTERS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

fn particle_label(i: usize) -> String {
    LETTERS.chars().nth(i).map(String::from).unwrap_or_else(|| format!("P{i}"))
}

pub fn build_model(spec: &ModelSpec) -> Result<Model, ModelError> {
    spec.validate()?;
    let n = spec.lattice;
    let dp = spec.dp;
    let hbar = spec.hbar;
    let mut b = GeneratorSetBuilder::new();
    let mut local_ops: Vec<(usize, CMat)> = Vec::new();
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    let factors: Vec<FactorSpec>;
    let mut sector_frame = None;
    let position = |n: usize, dp: f64, hbar: f64| {
        let frame = OrientationFrame { factor: 0, n, dp, drho: 2.0 * PI * hbar / (n as f64 * dp), hbar };
        orientation_matrix(&frame)
    };
    let momentum = |n: usize, dp: f64| CMat::from_diagonal(&CVec::from_iterator(n, crate::kinspace::lattice_momenta(n, dp).into_iter().map(cx)));

    let (c_terms, c_alg_fn): (Vec<(usize, Vec<f64>)>, Box<dyn Fn(&Arc<GeneratorSet>) -> AlgebraElement>) = match spec.kind {
        ModelKind::Newtonian => {
            let m = r64(spec.mass);
            factors = vec![FactorSpec::frame("C", n, dp), FactorSpec::lattice_system("S", n, dp, move |p| p * p / (2.0 * m))];
            for (f, label) in [(0, "C"), (1, "S")] {
                let (q, p) = b.canonical_pair(&format!("q_{label}"), &format!("p_{label}"));
                local_ops.push((f, position(n, dp, hbar)));
                local_ops.push((f, momentum(n, dp)));
                if f == 0 {
                    pairs.push((f, q, p));
                }
            }
            let k = coef(Rational64::from_integer(1) / (spec.mass * 2));
            (
                vec![(0, factors[0].spectrum.clone()), (1, factors[1].spectrum.clone())],
                Box::new(move |g| {
                    let y = |i| AlgebraElement::generator(g, i);
                    &y(1) + &(&y(3) * &y(3)).scale(&k)
                }),
            )
        }
        ModelKind::NParticle => {
            factors = (0..spec.particles).map(|i| FactorSpec::frame(&particle_label(i), n, dp)).collect();
            for f in 0..spec.particles {
                let label = particle_label(f);
                let (q, p) = b.canonical_pair(&format!("q_{label}"), &format!("p_{label}"));
                local_ops.push((f, position(n, dp, hbar)));
                local_ops.push((f, momentum(n, dp)));
                pairs.push((f, q, p));
            }
            let k = spec.particles;
            (
                factors.iter().enumerate().map(|(f, x)| (f, x.spectrum.clone())).collect(),
                Box::new(move |g| {
                    (0..k).fold(AlgebraElement::zero(g), |acc, f| &acc + &AlgebraElement::generator(g, 2 * f + 1))
                }),
            )
        }
        ModelKind::Su2 => {
            let j = spec.two_j as f64 / 2.0;
            let bf = r64(spec.beta);
            let spectrum: Vec<f64> = (0..=spec.two_j).map(|k| bf * hbar * (j - k as f64)).collect();
            factors = vec![FactorSpec::frame("A", n, dp), FactorSpec::frame("B", n, dp), FactorSpec::system("S", spectrum.clone())];
            for f in 0..2 {
                let label = particle_label(f);
                let (q, p) = b.canonical_pair(&format!("q_{label}"), &format!("p_{label}"));
                local_ops.push((f, position(n, dp, hbar)));
                local_ops.push((f, momentum(n, dp)));
                pairs.push((f, q, p));
            }
            b.su2("J_x", "J_y", "J_z");
            for m in spin_matrices(spec.two_j, hbar) {
                local_ops.push((2, m));
            }
            let beta = spec.beta;
            (
                vec![
                    (0, factors[0].spectrum.clone()),
                    (1, factors[1].spectrum.clone()),
                    (2, spectrum.iter().map(|x| -x).collect()),
                ],
                Box::new(move |g| {
                    let y = |i| AlgebraElement::generator(g, i);
                    &(&y(1) + &y(3)) - &y(6).scale(&coef(beta))
                }),
            )
        }
        ModelKind::Degenerate => {
            let h: Vec<f64> = spec.energies.iter().map(|&e| e as f64 * dp).collect();
            factors = vec![FactorSpec::frame("R", n, dp), FactorSpec::system("S", h.clone())];
            b.canonical_pair("q_R", "p_R");
            b.generator("H");
            local_ops.push((0, position(n, dp, hbar)));
            local_ops.push((0, momentum(n, dp)));
            local_ops.push((1, CMat::from_diagonal(&CVec::from_iterator(h.len(), h.iter().map(|&x| cx(x))))));
            sector_frame = Some(0);
            let p2: Vec<f64> = factors[0].spectrum.iter().map(|p| p * p).collect();
            (
                vec![(0, p2), (1, h.iter().map(|x| -x * x).collect())],
                Box::new(|g| {
                    let y = |i| AlgebraElement::generator(g, i);
                    &(&y(1) * &y(1)) - &(&y(2) * &y(2))
                }),
            )
        }
    };
    let gens = b.build()?;
    let space = tensor_space(factors, hbar)?;
    let constraint = build_constraint(&space, c_terms.into_iter().map(|(f, v)| ConstraintTerm::custom(f, v)).collect())?;
    let c_alg = c_alg_fn(&gens);
    let ops: Vec<KinOperator> = local_ops.iter().map(|(f, m)| KinOperator::local(&space, *f, m.clone())).collect();
    let (assignment, _) = Assignment::new(&gens, ops, hbar, &[])?;
    let mut frames = Vec::new();
    for (f, q, p) in pairs {
        let report = verify_reference_frame(&AlgebraElement::generator(&gens, q), &c_alg, 2)?;
        if !report.passes() || !constraint.is_ideal_for(f) {
            return Err(ModelError::FrameCheck(gens.name(q).to_string()));
        }
        frames.push(FrameGens { q, p, frame: OrientationFrame::new(&space, f)? });
    }
    Ok(Model {
        spec: spec.clone(),
        space,
        constraint,
        gens,
        c_alg,
        assignment: Arc::new(assignment),
        local_ops,
        frames,
        sector_frame,
    })
}

/// `Σ_w exp(−(k − k₀ + wN)²/4σ²) · e^{−2πi x₀ k/N}`, a Gaussian on `ℤ_N` centered
/// at momentum `k₀` and position `x₀` grid points.
fn lattice_profile(n: usize, sigma: f64, center: i64, mean: i64, k: i64) -> Complex64 {
    let nn = n as i64;
    let mut a = 0.0;
    for w in -4..=4 {
        let x = (k - mean + w * nn) as f64;
        a += (-x * x / (4.0 * sigma * sigma)).exp();
    }
    Complex64::from_polar(a, -2.0 * PI * (center * k) as f64 / n as f64)
}

impl Model {
    pub fn label(&self) -> &'static str {
        self.spec.kind.name()
    }

    pub fn factor_of(&self, generator: usize) -> usize {
        self.local_ops[generator].0
    }

    /// Generators acting off the given factor.
    pub fn generators_off(&self, factor: usize) -> Vec<usize> {
        (0..self.gens.len()).filter(|&g| self.factor_of(g) != factor).collect()
    }

    /// Generators whose commutation relations close on other generators
    /// exactly in every finite representation (the su(2) triple).
    pub fn lie_generators(&self) -> Vec<usize> {
        (0..self.gens.len()).filter(|&g| self.gens.canonical_partner(g).is_none()).collect()
    }

    /// Generator operators on the space with `factor` removed; the generators
    /// of that factor get `None`.
    pub fn reduced_ops(&self, factor: usize) -> (LatticeSpace, Vec<Option<KinOperator>>) {
        let sub = self.space.without(factor);
        let ops = self
            .local_ops
            .iter()
            .map(|(f, m)| match f.cmp(&factor) {
                std::cmp::Ordering::Equal => None,
                std::cmp::Ordering::Less => Some(KinOperator::local(&sub, *f, m.clone())),
                std::cmp::Ordering::Greater => Some(KinOperator::local(&sub, f - 1, m.clone())),
            })
            .collect();
        (sub, ops)
    }

    /// Moments of a reduced state in the perspective of the frame on `factor`.
    pub fn reduced_moments(&self, factor: usize, phi: &CVec, order: usize) -> MomentState {
        let (_, ops) = self.reduced_ops(factor);
        let refs: Vec<Option<&KinOperator>> = ops.iter().map(|o| o.as_ref()).collect();
        moments_from_operators(phi, &self.gens, &refs, self.space.hbar, order)
    }

    /// `Πψ/‖Πψ‖` for the model's constraint.
    pub fn physical(&self, psi: &CVec) -> Result<CVec, ModelError> {
        self.physical_for(&self.constraint, psi)
    }

    pub fn physical_for(&self, c: &Constraint, psi: &CVec) -> Result<CVec, ModelError> {
        let out = group_average(&self.space, c)?.apply(psi);
        let norm = out.norm();
        if norm < 1e-12 * psi.norm().max(1e-300) {
            return Err(ModelError::EmptyState);
        }
        Ok(out / cx(norm))
    }

    /// Kinematical state of a recipe; the lattice factors are taken in order.
    pub fn recipe_state(&self, recipe: &StateRecipe) -> CVec {
        let sigma = recipe.width.unwrap_or_else(|| balanced_width(self.spec.lattice));
        let space = &self.space;
        let lattice: Vec<usize> = (0..space.dims.len()).filter(|&f| space.factors[f].dp > 0.0).collect();
        CVec::from_fn(space.dim, |i, _| {
            let mut amp = cx(1.0);
            let mut prev: Option<i64> = None;
            for f in 0..space.dims.len() {
                let l = space.local_index(i, f);
                match lattice.iter().position(|&g| g == f) {
                    Some(t) => {
                        let n = space.dims[f];
                        let k = l as i64 - (n / 2) as i64;
                        let eff = k + prev.map_or(0, |p| recipe.shear * p);
                        let center = recipe.centers.get(t).copied().unwrap_or(0);
                        let mean = recipe.momenta.get(t).copied().unwrap_or(0);
                        amp *= lattice_profile(n, sigma, center, mean, eff);
                        prev = Some(k);
                    }
                    None => amp /= (space.dims[f] as f64).sqrt(),
                }
            }
            amp
        })
    }

    pub fn random_kinematical(&self, rng: &mut impl Rng) -> CVec {
        CVec::from_fn(self.space.dim, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    pub fn random_physical(&self, rng: &mut impl Rng) -> Result<CVec, ModelError> {
        self.physical(&self.random_kinematical(rng))
    }

    /// A recipe with random mean momenta and a random shear, centered in position.
    pub fn random_recipe(&self, rng: &mut impl Rng) -> StateRecipe {
        let lattices = self.space.factors.iter().filter(|f| f.dp > 0.0).count();
        StateRecipe {
            width: self.spec.state.width,
            centers: vec![0; lattices],
            momenta: (0..lattices).map(|_| rng.gen_range(-1..=1)).collect(),
            shear: 0,
        }
    }
}

/// Random observable: one to three normal-ordered monomials of degree one to
/// `max_deg` in the given generators, with small rational coefficients.
pub fn random_observable(gens: &Arc<GeneratorSet>, allowed: &[usize], rng: &mut impl Rng, max_deg: usize) -> AlgebraElement {
    let mut out = AlgebraElement::zero(gens);
    for _ in 0..rng.gen_range(1..=3) {
        let mut exps = vec![0u16; gens.len()];
        for _ in 0..rng.gen_range(1..=max_deg) {
            exps[allowed[rng.gen_range(0..allowed.len())]] += 1;
        }
        let num = rng.gen_range(1..=4) * if rng.gen_bool(0.5) { 1 } else { -1 };
        let mut k = Coef::ratio(num, rng.gen_range(1..=3));
        if rng.gen_bool(0.25) {
            k = k.mul_i();
        }
        out = &out + &AlgebraElement::monomial(gens, exps, 0, k);
    }
    out
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One compared quantity. Rows without a tolerance are informational.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub quantity: String,
    pub formalism: String,
    pub value: Complex64,
    pub residual: f64,
    pub tol: Option<f64>,
}

impl Row {
    pub fn passes(&self) -> bool {
        match self.tol {
            Some(t) => self.residual.is_finite() && self.residual <= t,
            None => true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub suite: String,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn new(suite: &str) -> Self {
        Report { suite: suite.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, quantity: impl Into<String>, formalism: &str, value: Complex64, residual: f64, tol: Option<f64>) {
        self.rows.push(Row { quantity: quantity.into(), formalism: formalism.to_string(), value, residual, tol });
    }

    pub fn passes(&self) -> bool {
        self.rows.iter().all(Row::passes)
    }

    pub fn failures(&self) -> Vec<&Row> {
        self.rows.iter().filter(|r| !r.passes()).collect()
    }

    /// Largest residual over the gated rows.
    pub fn max_residual(&self) -> f64 {
        self.rows.iter().filter(|r| r.tol.is_some()).map(|r| r.residual).fold(0.0, f64::max)
    }

    pub fn rows_with(&self, prefix: &str) -> impl Iterator<Item = &Row> {
        let prefix = prefix.to_string();
        self.rows.iter().filter(move |r| r.quantity.starts_with(&prefix))
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    /// Columns `quantity, formalism, value_re, value_im, residual`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), ModelError> {
        let mut wr = csv::Writer::from_writer(w);
        let io_err = |e: csv::Error| ModelError::Io(e.to_string());
        wr.write_record(["quantity", "formalism", "value_re", "value_im", "residual"]).map_err(io_err)?;
        for r in &self.rows {
            wr.write_record([
                r.quantity.clone(),
                r.formalism.clone(),
                format!("{:.15e}", r.value.re),
                format!("{:.15e}", r.value.im),
                format!("{:.6e}", r.residual),
            ])
            .map_err(io_err)?;
        }
        wr.flush().map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let gated = self.rows.iter().filter(|r| r.tol.is_some()).count();
        let failures = self.failures();
        let mut s = format!("## {}\n\n", self.suite);
        s.push_str(&format!(
            "{} rows, {} checked, {} failing, largest checked residual {:.3e}\n\n",
            self.rows.len(),
            gated,
            failures.len(),
            self.max_residual()
        ));
        let mut by_formalism: Vec<(String, usize, f64)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.tol.is_some()) {
            match by_formalism.iter_mut().find(|(f, _, _)| *f == r.formalism) {
                Some(e) => {
                    e.1 += 1;
                    e.2 = e.2.max(r.residual);
                }
                None => by_formalism.push((r.formalism.clone(), 1, r.residual)),
            }
        }
        if !by_formalism.is_empty() {
            s.push_str("| formalism | rows | max residual |\n|---|---|---|\n");
            for (f, n, m) in &by_formalism {
                s.push_str(&format!("| {f} | {n} | {m:.3e} |\n"));
            }
            s.push('\n');
        }
        if !failures.is_empty() {
            s.push_str("| failing quantity | formalism | residual | tolerance |\n|---|---|---|---|\n");
            for r in failures {
                s.push_str(&format!("| {} | {} | {:.3e} | {:.1e} |\n", r.quantity, r.formalism, r.residual, r.tol.unwrap_or(f64::NAN)));
            }
            s.push('\n');
        }
        s
    }
}

fn rel(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

// ---------------------------------------------------------------------------
// Equivalence of the formalisms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceOptions {
    pub observables: usize,
    pub states: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        EquivalenceOptions { observables: 20, states: 5, seed: 0, tol: 1e-10 }
    }
}

/// Relational expectation of random system observables in the first ideal
/// frame, computed as physical-inner-product expectations of the twirled and
/// the projected relational observable, in the Page–Wootters reduced state,
/// in the algebraic gauge-fixed state, and as the gauge-fixed value of the
/// twirled observable. Observables built from the su(2) triple also get the
/// effective expansion at order four.
pub fn run_equivalence_suite(model: &Model, opts: &EquivalenceOptions) -> Result<Report, ModelError> {
    let fr = model.frames.first().ok_or_else(|| ModelError::Unsupported { suite: "equivalence".into(), model: model.label().into() })?;
    let frame = &fr.frame;
    let space = &model.space;
    let c = &model.constraint;
    let rho = frame.rho(frame.n / 2 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let system = model.generators_off(frame.factor);
    let lie: Vec<usize> = model.lie_generators().into_iter().filter(|g| system.contains(g)).collect();
    let pi = group_average(space, c)?;

    let mut states = Vec::with_capacity(opts.states);
    for _ in 0..opts.states {
        let kin = model.random_kinematical(&mut rng);
        let phys = model.physical(&kin)?;
        let pw = reduce(space, c, frame, rho, &phys)?;
        let omega = AlgebraicState::frame_state(space, c, frame, rho, &phys, model.assignment.clone(), 2)?;
        let moments = (!lie.is_empty()).then(|| model.reduced_moments(frame.factor, &pw, 2));
        states.push((kin, phys, pw, omega, moments));
    }

    let mut report = Report::new("equivalence");
    let tol = Some(opts.tol);
    for k in 0..opts.observables {
        let pool = if !lie.is_empty() && k % 2 == 0 { &lie } else { &system };
        let f = random_observable(&model.gens, pool, &mut rng, 2);
        let f_op = represent(&f, space, &model.assignment);
        let block = complement_block(space, frame.factor, &f_op);
        let o_kin = relational_observable(space, c, frame, rho, &f_op, Form::Kinematical)?;
        let o_phys = relational_observable(space, c, frame, rho, &f_op, Form::Physical)?;
        let expansion = (pool.as_ptr() == lie.as_ptr()).then(|| expect_expand_sym(&f, 4));
        for (s, (kin, phys, pw, omega, moments)) in states.iter().enumerate() {
            let q = format!("f{k}/state{s}");
            let reference = pw.dotc(&(&block * pw)) / pw.norm_squared();
            let norm = pi.matrix_element(kin, kin);
            let values = [
                ("physical_twirl", pi.matrix_element(kin, &o_kin.apply(kin)) / norm),
                ("physical_projected", o_phys.matrix_element(phys, phys)),
                ("algebraic", omega.evaluate(&f)?),
                ("theta_gauge", omega.evaluate_operator(&o_kin)?),
            ];
            report.push(q.clone(), "page_wootters", reference, 0.0, tol);
            for (name, v) in values {
                report.push(q.clone(), name, v, rel(v, reference), tol);
            }
            if let (Some(e), Some(m)) = (&expansion, moments) {
                let v = m.evaluate(e)?;
                report.push(q.clone(), "effective_m4", v, rel(v, reference), tol);
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Frame changes in the translation-invariant model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceOptions {
    /// Random localized states on top of the model's own recipe.
    pub states: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions { states: 3, seed: 0, tol: 1e-10 }
    }
}

fn unit(n: usize, parts: &[(usize, u16)]) -> Vec<u16> {
    let mut v = vec![0u16; n];
    for &(i, e) in parts {
        v[i] += e;
    }
    v
}

/// Moment lookup where moments involving the perspective frame's own
/// coordinates, fixed by its gauge, read as zero.
fn mom(s: &MomentState, parts: &[(usize, u16)]) -> Complex64 {
    s.moment(&unit(s.gens().len(), parts)).unwrap_or_else(Complex64::zero)
}

fn expect(s: &MomentState, i: usize) -> Complex64 {
    s.expectation(i).unwrap_or_else(Complex64::zero)
}

struct Perspective {
    rho: f64,
    gens: FrameGens,
    state: CVec,
    moments: MomentState,
    omega: AlgebraicState,
}

/// Frame-change laws for particle positions, in every formalism. Particles
/// `A, B, C` are the first three; `D` is the fourth when present and `C`
/// otherwise. Orientations satisfy `ρ_A + ρ_B = −δρ`, which maps the
/// orientation grid of `A` onto that of `B` without wrapping.
pub fn run_variance_experiment(model: &Model, opts: &VarianceOptions) -> Result<Report, ModelError> {
    if model.spec.kind != ModelKind::NParticle || model.frames.len() < 3 {
        return Err(ModelError::Unsupported { suite: "variance".into(), model: model.label().into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut recipes = vec![model.spec.state.clone()];
    for _ in 0..opts.states {
        recipes.push(model.random_recipe(&mut rng));
    }
    let mut report = Report::new("variance");
    for (s, recipe) in recipes.iter().enumerate() {
        let psi = model.physical(&model.recipe_state(recipe))?;
        variance_laws(model, &psi, &format!("state{s}"), opts.tol, &mut report)?;
    }
    uncorrelated_limit(model, opts.tol, &mut report)?;
    Ok(report)
}

fn perspective(model: &Model, idx: usize, rho: f64, psi: &CVec) -> Result<Perspective, ModelError> {
    let gens = model.frames[idx].clone();
    let state = reduce(&model.space, &model.constraint, &gens.frame, rho, psi)?;
    let moments = model.reduced_moments(gens.frame.factor, &state, 2);
    let omega = AlgebraicState::frame_state(&model.space, &model.constraint, &gens.frame, rho, psi, model.assignment.clone(), 2)?;
    Ok(Perspective { rho, gens, state, moments, omega })
}

fn variance_laws(model: &Model, psi: &CVec, tag: &str, tol: f64, report: &mut Report) -> Result<(), ModelError> {
    let fa = &model.frames[0].frame;
    let rho_a = fa.rho(fa.n / 2);
    let rho_b = fa.rho(fa.n / 2 - 1);
    let d_idx = if model.frames.len() > 3 { 3 } else { 2 };
    let pa = perspective(model, 0, rho_a, psi)?;
    let pb = perspective(model, 1, rho_b, psi)?;
    let pd = perspective(model, d_idx, fa.rho(fa.n / 2 + 1), psi)?;
    let (qa, qb, qc) = (model.frames[0].q, model.frames[1].q, model.frames[2].q);
    let pa_i = model.frames[0].p;
    let tol = Some(tol);
    let g = &model.gens;

    // exact change of perspective between reduced states
    let moved = ideal_frame_change(&model.space, &model.constraint, &pb.gens.frame, pb.rho, &pa.gens.frame, pa.rho, &pb.state)?;
    let overlap = moved.dotc(&pa.state) / (moved.norm() * pa.state.norm());
    report.push(format!("{tag}/frame_change_overlap"), "hilbert", overlap, (1.0 - overlap.norm()).abs(), tol);

    let a = &pa.moments;
    let b = &pb.moments;
    let d = &pd.moments;
    let g_s_b: Complex64 = model.frames.iter().skip(2).map(|f| expect(b, f.p)).sum();
    let laws: Vec<(&str, Complex64, Complex64)> = vec![
        ("mean_q_B", expect(a, qb), cx(pa.rho + pb.rho) - expect(b, qa)),
        ("mean_p_B", expect(a, model.frames[1].p), -expect(b, pa_i) - g_s_b),
        ("var_q_C", mom(a, &[(qc, 2)]), mom(b, &[(qc, 2)]) + mom(b, &[(qa, 2)]) - mom(b, &[(qa, 1), (qc, 1)]) * 2.0),
        (
            "cov_q_B_q_C_general",
            mom(a, &[(qb, 1), (qc, 1)]),
            mom(d, &[(qb, 1), (qc, 1)]) + mom(d, &[(qa, 2)]) - mom(d, &[(qa, 1), (qb, 1)]) - mom(d, &[(qa, 1), (qc, 1)]),
        ),
        ("cov_q_B_q_C", mom(a, &[(qb, 1), (qc, 1)]), mom(b, &[(qa, 2)]) - mom(b, &[(qa, 1), (qc, 1)])),
    ];

    // the same target quantities through the algebraic and effective changes of frame
    let pair_for = |p: &Perspective| (p.gens.clone(), p.rho);
    let y = |i| AlgebraElement::generator(g, i);
    let alg = |from: &(FrameGens, f64), omega: &AlgebraicState, f: &AlgebraElement| {
        let pair = FramePair { space: &model.space, constraint: &model.constraint, c_alg: &model.c_alg, from: &from.0, to: &pa.gens };
        transform_frame(omega, &pair, pa.rho, from.1, f)
    };
    let alg_cov = |p: &Perspective, i: usize, j: usize| -> Result<Complex64, AlgStateError> {
        let from = pair_for(p);
        Ok(alg(&from, &p.omega, &(&y(i) * &y(j)))? - alg(&from, &p.omega, &y(i))? * alg(&from, &p.omega, &y(j))?)
    };
    let alg1 = |p: &Perspective, i: usize| alg(&pair_for(p), &p.omega, &y(i));
    let eff = |p: &Perspective| -> Result<MomentState, EffectiveError> {
        let fc = FrameChange {
            constraint: model.c_alg.clone(),
            from: FrameVars { q: p.gens.q, p: p.gens.p },
            to: FrameVars { q: pa.gens.q, p: pa.gens.p },
        };
        effective_frame_transform(&p.moments, &fc, pa.rho, p.rho, 2)
    };
    let eb = eff(&pb)?;
    let ed = eff(&pd)?;
    for (name, lhs, rhs) in laws {
        let q = format!("{tag}/{name}");
        report.push(q.clone(), "hilbert", lhs, rel(rhs, lhs), tol);
        let (alg_v, eff_v) = match name {
            "mean_q_B" => (alg1(&pb, qb)?, expect(&eb, qb)),
            "mean_p_B" => (alg1(&pb, model.frames[1].p)?, expect(&eb, model.frames[1].p)),
            "var_q_C" => (alg_cov(&pb, qc, qc)?, mom(&eb, &[(qc, 2)])),
            "cov_q_B_q_C_general" => (alg_cov(&pd, qb, qc)?, mom(&ed, &[(qb, 1), (qc, 1)])),
            _ => (alg_cov(&pb, qb, qc)?, mom(&eb, &[(qb, 1), (qc, 1)])),
        };
        report.push(q.clone(), "algebraic", alg_v, rel(alg_v, lhs), tol);
        report.push(q, "effective", eff_v, rel(eff_v, lhs), tol);
    }
    Ok(())
}

/// A product state in `B`'s perspective: the covariance of `B` and `C` seen
/// from `A` equals the spread of `A` seen from `B`.
fn uncorrelated_limit(model: &Model, tol: f64, report: &mut Report) -> Result<(), ModelError> {
    let fb = &model.frames[1].frame;
    let (sub, _) = model.reduced_ops(fb.factor);
    let sigma = model.spec.width();
    let mut phi = CVec::from_element(sub.dim, cx(1.0));
    for i in 0..sub.dim {
        for f in 0..sub.dims.len() {
            let n = sub.dims[f];
            let k = sub.local_index(i, f) as i64 - (n / 2) as i64;
            phi[i] *= lattice_profile(n, sigma * (1.0 + 0.25 * f as f64), 0, f as i64 - 1, k);
        }
    }
    let rho_a = fb.rho(fb.n / 2);
    let rho_b = fb.rho(fb.n / 2 - 1);
    let psi = embed(&model.space, &model.constraint, fb, rho_b, &phi)?;
    let pa = perspective(model, 0, rho_a, &psi)?;
    let pb = perspective(model, 1, rho_b, &psi)?;
    let (qa, qb, qc) = (model.frames[0].q, model.frames[1].q, model.frames[2].q);
    let lhs = mom(&pa.moments, &[(qb, 1), (qc, 1)]);
    let rhs = mom(&pb.moments, &[(qa, 2)]);
    report.push("product/cov_q_A_q_C_in_B", "hilbert", mom(&pb.moments, &[(qa, 1), (qc, 1)]), mom(&pb.moments, &[(qa, 1), (qc, 1)]).norm(), Some(tol));
    report.push("product/cov_q_B_q_C_in_A", "hilbert", lhs, rel(rhs, lhs), Some(tol));
    Ok(())
}

// ---------------------------------------------------------------------------
// su(2) system
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SpinOptions {
    pub seed: u64,
    pub tol: f64,
}

impl Default for SpinOptions {
    fn default() -> Self {
        SpinOptions { seed: 0, tol: 1e-10 }
    }
}

/// `Σ_j (1/N)|ρ_j⟩⟨ρ_j| ⊗ [cos(β(ρ_j−ρ))Ĵ_x − sin(β(ρ_j−ρ))Ĵ_y]` on the full space.
pub fn spin_dirac_jx(model: &Model, rho: f64) -> Result<KinOperator, ModelError> {
    if model.spec.kind != ModelKind::Su2 {
        return Err(ModelError::Unsupported { suite: "spin".into(), model: model.label().into() });
    }
    let beta = r64(model.spec.beta);
    let frame = &model.frames[0].frame;
    let [jx, jy, _] = spin_matrices(model.spec.two_j, model.spec.hbar);
    let cos = orientation_function(frame, |r| (beta * (r - rho)).cos());
    let sin = orientation_function(frame, |r| (beta * (r - rho)).sin());
    let space = &model.space;
    let a = KinOperator::kron(space, vec![(0, cos), (2, jx)]);
    let b = KinOperator::kron(space, vec![(0, sin), (2, jy)]);
    Ok(a.sub(&b))
}

/// Closed-form relational `Ĵ_x` against the twirl, `Ĵ_z` across frames, and
/// the change of frame of `⟨Ĵ_x⟩` as a state on the trigonometric dressing.
pub fn run_spin_suite(model: &Model, opts: &SpinOptions) -> Result<Report, ModelError> {
    if model.spec.kind != ModelKind::Su2 {
        return Err(ModelError::Unsupported { suite: "spin".into(), model: model.label().into() });
    }
    let space = &model.space;
    let c = &model.constraint;
    let (fa, fb) = (&model.frames[0].frame, &model.frames[1].frame);
    let rho_a = fa.rho(fa.n / 2 + 1);
    let rho_b = fb.rho(fb.n / 2 + 2);
    let tol = Some(opts.tol);
    let mut report = Report::new("spin");
    let jx = KinOperator::local(space, 2, model.local_ops[4].1.clone());
    let closed = spin_dirac_jx(model, rho_a)?;
    let twirl = relational_observable(space, c, fa, rho_a, &jx, Form::Kinematical)?;
    let generic = relational_observable(space, c, fa, rho_a, &jx, Form::Closed)?;
    report.push("dirac_jx/twirl", "hilbert", cx(closed.max_diff(&twirl)), closed.max_diff(&twirl), tol);
    report.push("dirac_jx/closed_form", "hilbert", cx(closed.max_diff(&generic)), closed.max_diff(&generic), tol);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let beta = r64(model.spec.beta);
    let [sx, sy, sz] = spin_matrices(model.spec.two_j, model.spec.hbar);
    for s in 0..3 {
        let psi = if s == 0 { model.physical(&model.recipe_state(&model.spec.state))? } else { model.random_physical(&mut rng)? };
        let phi_a = reduce(space, c, fa, rho_a, &psi)?;
        let phi_b = reduce(space, c, fb, rho_b, &psi)?;
        let (sub_a, _) = model.reduced_ops(0);
        let (sub_b, _) = model.reduced_ops(1);
        // complement of A is (B, S); complement of B is (A, S)
        let on_a = |m: &CMat| KinOperator::local(&sub_a, 1, m.clone()).expectation(&phi_a);
        let on_b = |m: &CMat| KinOperator::local(&sub_b, 1, m.clone()).expectation(&phi_b);
        let jz_a = on_a(&sz);
        let jz_b = on_b(&sz);
        report.push(format!("state{s}/jz_frame_independent"), "hilbert", jz_a, rel(jz_b, jz_a), tol);
        let cos = orientation_function(fa, |r| (beta * (r - rho_a)).cos());
        let sin = orientation_function(fa, |r| (beta * (r - rho_a)).sin());
        let dressed = KinOperator::kron(&sub_b, vec![(0, cos), (1, sx.clone())])
            .sub(&KinOperator::kron(&sub_b, vec![(0, sin), (1, sy.clone())]));
        let from_b = dressed.expectation(&phi_b);
        let jx_a = on_a(&sx);
        report.push(format!("state{s}/jx_change_of_frame"), "hilbert", jx_a, rel(from_b, jx_a), tol);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// ℏ-scaling of the truncated frame change
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingOptions {
    pub ladder: Vec<f64>,
    pub orders: Vec<usize>,
    pub lattice: usize,
    /// Position width of the frame state in units of `√ℏ`.
    pub width: f64,
    /// Skew `α` of the frame profile `√(φ(x)·σ(αx))`, with `σ` the logistic function.
    pub skew: f64,
    /// Relative tolerance on the fitted slope.
    pub tol: f64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions { ladder: vec![1.0, 0.5, 0.25, 0.125], orders: vec![2, 4], lattice: 256, width: 0.3, skew: 4.0, tol: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub hbar: f64,
    pub order: usize,
    pub deviation: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Spin-`j` coherent state along `(θ, φ)` in the `Ĵ_z` eigenbasis `m = j, …, −j`.
pub fn spin_coherent_state(two_j: usize, theta: f64, phi: f64) -> CVec {
    let j = two_j as f64 / 2.0;
    let mut binom = 1.0;
    let mut out = CVec::zeros(two_j + 1);
    // k = j − m runs 0..=2j; the amplitude carries C(2j, k)
    for k in 0..=two_j {
        if k > 0 {
            binom *= (two_j + 1 - k) as f64 / k as f64;
        }
        let m = j - k as f64;
        let a = binom.sqrt() * (theta / 2.0).cos().powi((two_j - k) as i32) * (theta / 2.0).sin().powi(k as i32);
        out[k] = Complex64::from_polar(a, -m * phi);
    }
    out
}

/// Deviation of the order-`M` effective frame change of `⟨Ĵ_x⟩, ⟨Ĵ_y⟩` from
/// the exact change of perspective on the su2 model with `j = 1/ℏ`, `δp = ℏ`.
pub fn run_hbar_scaling(opts: &ScalingOptions) -> Result<(Vec<ScalingPoint>, Report), ModelError> {
    let mut points = Vec::new();
    for &hbar in &opts.ladder {
        let j2 = (2.0 / hbar).round();
        if (j2 * hbar - 2.0).abs() > 1e-9 {
            return Err(ModelError::InvalidSpec(format!("ℏ = {hbar} does not give an integer 2j = 2/ℏ")));
        }
        let mut spec = ModelSpec::new(ModelKind::Su2);
        spec.lattice = opts.lattice;
        spec.hbar = hbar;
        spec.dp = hbar;
        spec.two_j = j2 as usize;
        let model = build_model(&spec)?;
        let (fa, fb) = (model.frames[0].clone(), model.frames[1].clone());
        let rho_a = fa.frame.rho(fa.frame.n / 2);
        let rho_b = fb.frame.rho(fb.frame.n / 2);

        // B's perspective: frame A in a skewed profile, the spin in a coherent state
        let s = opts.width * hbar.sqrt();
        let (q0, p0) = (0.3, 0.2);
        let amps = CVec::from_iterator(
            fa.frame.n,
            fa.frame.grid().into_iter().map(|q| {
                let x = (q - q0) / s;
                let skewed = (-x * x / 4.0).exp() / (1.0 + (-opts.skew * x).exp()).sqrt();
                Complex64::from_polar(skewed, p0 * q / hbar)
            }),
        );
        let frame_state = fa.frame.from_orientation(&amps);
        let spin = spin_coherent_state(spec.two_j, 1.1, 0.4);
        let phi_b = frame_state.kronecker(&spin);
        let phi_b = &phi_b / cx(phi_b.norm());
        let phi_a = ideal_frame_change(&model.space, &model.constraint, &fb.frame, rho_b, &fa.frame, rho_a, &phi_b)?;

        let max_order = *opts.orders.iter().max().unwrap_or(&2);
        let s_b = model.reduced_moments(fb.frame.factor, &phi_b, max_order);
        let s_a = model.reduced_moments(fa.frame.factor, &phi_a, 1);
        let fc = FrameChange {
            constraint: model.c_alg.clone(),
            from: FrameVars { q: fb.q, p: fb.p },
            to: FrameVars { q: fa.q, p: fa.p },
        };
        let mut src = s_b.clone();
        src.set_param(&rho_param(&model.gens, fa.q), cx(rho_a));
        src.set_param(&rho_param(&model.gens, fb.q), cx(rho_b));
        for &order in &opts.orders {
            let mut dev: f64 = 0.0;
            for g in [4usize, 5] {
                let t = transform_expectation(&fc, &AlgebraElement::generator(&model.gens, g), order)?;
                let v = src.evaluate(&t)?;
                dev = dev.max((v - expect(&s_a, g)).norm());
            }
            points.push(ScalingPoint { hbar, order, deviation: dev });
        }
    }
    let mut report = Report::new("scaling");
    for p in &points {
        report.push(format!("deviation/M{}/hbar{}", p.order, p.hbar), "effective", cx(p.deviation), 0.0, None);
    }
    for &order in &opts.orders {
        let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.order == order).map(|p| (p.hbar, p.deviation)).collect();
        let slope = loglog_slope(&pts);
        let target = (order as f64 + 1.0) / 2.0;
        report.push(format!("slope/M{order}"), "effective", cx(slope), ((slope - target) / target).abs(), Some(opts.tol));
    }
    Ok((points, report))
}

// ---------------------------------------------------------------------------
// Degenerate frame
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DegenerateOptions {
    pub seed: u64,
    pub tol: f64,
}

impl Default for DegenerateOptions {
    fn default() -> Self {
        DegenerateOptions { seed: 0, tol: 1e-10 }
    }
}

/// Orthonormal basis of the range of a hermitian projector.
fn range_basis(p: &CMat) -> CMat {
    let eig = p.clone().symmetric_eigen();
    let cols: Vec<CVec> = (0..p.nrows()).filter(|&k| eig.eigenvalues[k] > 0.5).map(|k| eig.eigenvectors.column(k).into_owned()).collect();
    if cols.is_empty() {
        CMat::zeros(p.nrows(), 0)
    } else {
        CMat::from_columns(&cols)
    }
}

/// Largest principal angle between the ranges of two projectors, or `π/2`
/// when the dimensions differ.
pub fn principal_angle(p1: &CMat, p2: &CMat) -> (usize, usize, f64) {
    let (u1, u2) = (range_basis(p1), range_basis(p2));
    let (d1, d2) = (u1.ncols(), u2.ncols());
    if d1 != d2 {
        return (d1, d2, PI / 2.0);
    }
    if d1 == 0 {
        return (0, 0, 0.0);
    }
    let sv = (u1.adjoint() * u2).singular_values();
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
    (d1, d2, (1.0 - smin * smin).max(0.0).sqrt().asin())
}

/// Sector kernels of the full constraint against the factor constraints,
/// sector-wise relational expectations, and the effective branches against the
/// factor towers, symbolically and on Hilbert moments.
pub fn run_degenerate_suite(model: &Model, opts: &DegenerateOptions) -> Result<Report, ModelError> {
    let r = model.sector_frame.ok_or_else(|| ModelError::Unsupported { suite: "degenerate".into(), model: model.label().into() })?;
    let space = &model.space;
    let c = &model.constraint;
    let tol = Some(opts.tol);
    let mut report = Report::new("degenerate");
    let (c_plus, c_minus) = factorize_constraint(space, c)?;
    let (s_plus, s_minus) = sector_projectors(space, r)?;
    let pi = group_average(space, c)?;
    let pi_plus = group_average(space, &c_plus)?;
    let pi_minus = group_average(space, &c_minus)?;
    let sectors = [("plus", &s_plus, &pi_minus, &c_minus), ("minus", &s_minus, &pi_plus, &c_plus)];
    for (name, sector, factor_pi, _) in &sectors {
        let full = pi.mul(sector).to_dense();
        let fac = factor_pi.mul(sector).to_dense();
        let (d1, d2, angle) = principal_angle(&full, &fac);
        let residual = if d1 == d2 && d1 > 0 { angle } else { f64::INFINITY };
        report.push(format!("kernel_{name}/angle"), "hilbert", cx(d1 as f64), residual, tol);
    }
    let cross = s_plus.mul(&pi).mul(&s_minus).to_dense();
    let cross_max = cross.iter().fold(0.0f64, |a, x| a.max(x.norm()));
    report.push("kernel/cross_block", "hilbert", cx(cross_max), cross_max, tol);

    let frame = OrientationFrame::new(space, r)?;
    let rho = frame.rho(frame.n / 2 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d_s = space.dims[1];
    let f_mat = {
        let m = CMat::from_fn(d_s, d_s, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        (&m + m.adjoint()) * cx(0.5)
    };
    let f_op = KinOperator::local(space, 1, f_mat.clone());
    let alg = model.gens.clone();
    let (qr, pr, h) = (0usize, 1usize, 2usize);
    let rvars = FrameVars { q: qr, p: pr };
    for (name, sector, _, fac_c) in &sectors {
        let kin = model.random_kinematical(&mut rng);
        let psi = model.physical(&sector.apply(&kin))?;
        let full_obs = relational_observable(space, c, &frame, rho, &f_op, Form::Kinematical)?;
        let fac_obs = relational_observable(space, fac_c, &frame, rho, &f_op, Form::Kinematical)?;
        let v_full = full_obs.expectation(&psi);
        let v_fac = fac_obs.expectation(&psi);
        let pw = reduce(space, fac_c, &frame, rho, &psi)?;
        let v_pw = pw.dotc(&(&f_mat * &pw)) / pw.norm_squared();
        report.push(format!("sector_{name}/relational"), "full_constraint", v_full, rel(v_full, v_fac), tol);
        report.push(format!("sector_{name}/relational"), "page_wootters", v_pw, rel(v_pw, v_fac), tol);

        // effective branch on the Hilbert moments of this sector
        let ops: Vec<Option<&KinOperator>> = model.assignment.ops.iter().map(Some).collect();
        let s = moments_from_operators(&psi, &alg, &ops, space.hbar, 2);
        let h_mean = s.expectation(h).unwrap_or_default().re;
        let branches = degenerate_solve(&alg, rvars, h, h_mean)?;
        let sign: i8 = if *name == "plus" { 1 } else { -1 };
        let branch = branches.iter().find(|b| b.sign == sign).expect("both signs present");
        for (label, f, exact) in [
            ("p_R", &branch.p_r, s.expectation(pr).unwrap_or_default()),
            ("var_p_R", &branch.var_p, s.moment(&unit(alg.len(), &[(pr, 2)])).unwrap_or_default()),
            ("cov_p_R_H", &branch.cov_ph, s.moment(&unit(alg.len(), &[(pr, 1), (h, 1)])).unwrap_or_default()),
        ] {
            let v = s.evaluate(f)?;
            report.push(format!("sector_{name}/branch_{label}"), "effective", v, rel(v, exact), tol);
        }
    }
    for sign in [1i8, -1] {
        let branches = degenerate_solve(&alg, rvars, h, 1.0)?;
        let branch = branches.iter().find(|b| b.sign == sign).expect("both signs present");
        let factor = factor_tower_solution(&alg, rvars, h, sign)?;
        let same = branch.p_r == factor.p_r && branch.var_p == factor.var_p && branch.cov_ph == factor.cov_ph;
        report.push(format!("branch{sign:+}/factor_tower"), "symbolic", cx(if same { 1.0 } else { 0.0 }), if same { 0.0 } else { 1.0 }, Some(0.0));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gauge-map identities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorOptions {
    pub seed: u64,
    pub tol: f64,
    /// Relative tolerance of the finite-difference flow check.
    pub flow_tol: f64,
    /// Finite-difference step in units of `ℏ/‖âĈ‖`.
    pub step: f64,
}

impl Default for ProjectorOptions {
    fn default() -> Self {
        ProjectorOptions { seed: 0, tol: 1e-10, flow_tol: 1e-6, step: 1e-4 }
    }
}

/// Projector identities of the reference gauge at two orientations for every
/// ideal frame (the factor constraints stand in for the degenerate frame),
/// and a central-difference check of the gauge flow.
pub fn run_projector_suite(model: &Model, opts: &ProjectorOptions) -> Result<Report, ModelError> {
    let space = &model.space;
    let mut settings: Vec<(String, Constraint, OrientationFrame)> = Vec::new();
    for fr in &model.frames {
        settings.push((space.factors[fr.frame.factor].label.clone(), model.constraint.clone(), fr.frame.clone()));
    }
    if let Some(r) = model.sector_frame {
        let (cp, cm) = factorize_constraint(space, &model.constraint)?;
        let frame = OrientationFrame::new(space, r)?;
        settings.push(("R/C+".into(), cp, frame.clone()));
        settings.push(("R/C-".into(), cm, frame));
    }
    let tol = Some(opts.tol);
    let mut report = Report::new("projector");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (label, c, frame) in &settings {
        for (j, j2) in [(frame.n / 2, frame.n / 2 + 3), (1, frame.n - 2)] {
            let ids = projector_identities(space, c, frame, j, j2)?;
            let q = format!("{label}/j{j}");
            for (name, v) in [
                ("gauge_condition", ids.gauge_condition),
                ("pi_theta_pi", ids.pi_theta_pi),
                ("theta_resolution", ids.theta_resolution),
                ("theta_pi_theta", ids.theta_pi_theta),
                ("pi_hat_commute", ids.pi_hat_commute),
                ("covariance", ids.covariance),
            ] {
                report.push(format!("{q}/{name}"), "hilbert", cx(v), v, tol);
            }
        }

        // iℏ d/dλ ω_λ(b) at λ = 0 against ω([b, âĈ])
        let psi = model.physical_for(c, &model.random_kinematical(&mut rng))?;
        let rho = frame.rho(frame.n / 2);
        let omega = AlgebraicState::frame_state(space, c, frame, rho, &psi, model.assignment.clone(), 1)?;
        // b is the frame orientation, so that [Ĉ, b] ≠ 0 and the check is not 0 = 0
        let others = model.generators_off(frame.factor);
        let orientation = (0..model.gens.len()).find(|&g| model.factor_of(g) == frame.factor).expect("a frame generator");
        let a = &model.assignment.ops[*others.last().expect("a system generator")];
        let b = &model.assignment.ops[orientation];
        let c_op = c.op(space);
        let h = opts.step * space.hbar / a.mul(&c_op).to_dense().norm().max(f64::MIN_POSITIVE);
        let plus = gauge_flow(&omega, a, &c_op, h)?.evaluate_operator(b)?;
        let minus = gauge_flow(&omega, a, &c_op, -h)?.evaluate_operator(b)?;
        let lhs = (plus - minus) / cx(2.0 * h) * Complex64::new(0.0, space.hbar);
        let rhs = omega.evaluate_operator(&b.commutator(&a.mul(&c_op)))?;
        report.push(format!("{label}/gauge_flow"), "algebraic", lhs, (lhs - rhs).norm() / rhs.norm().max(1e-12), Some(opts.flow_tol));
    }
    Ok(report)
}
