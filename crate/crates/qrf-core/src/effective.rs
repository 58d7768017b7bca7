//! Semiclassical quantum phase space.
//!
//! Coordinates are the expectation values `y_i = ⟨ŷ_i⟩` and the Weyl-ordered
//! central moments `Δ(y^n)`. A moment of total degree `|n|` has semiclassical
//! order `|n|` and `ℏ^{1/2}` has order one, so the integer ℏ-grade used in
//! [`crate::ncalg`] doubles as the order carried by explicit powers of ℏ.
//!
//! Operators are expanded in the shifted generators `Δŷ_i = ŷ_i − y_i`
//! ([`DeltaOp`]). Their commutators pick up the c-numbers `y_k`, and every
//! term has a definite order, so products can be truncated as they are formed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::sync::{Arc, Mutex};

use num::complex::Complex64;
use num::{BigRational, Signed, Zero};
use thiserror::Error;

use crate::kinspace::{CVec, KinOperator};
use crate::ncalg::{degree, to_weyl_basis, weyl_symmetrize, AlgebraElement, AlgebraError, Assignment, Coef, GeneratorSet};

/// Below this value of `⟨Ĝ_S⟩` the square-root expansion of the degenerate
/// branch is not trusted.
pub const ENERGY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EffectiveError {
    #[error("variable {0} is not stored in the moment state")]
    MissingVariable(String),
    #[error("parameter {0} has no value")]
    MissingParameter(String),
    #[error("truncation order {order} cannot determine {variable}")]
    InsufficientTower { variable: String, order: usize },
    #[error("constraint is not of the form p̂_{0} + K̂ with K̂ free of the {0} pair")]
    NotIdealConstraint(String),
    #[error("relational dressing of {0} neither terminates nor closes on a rotation")]
    NonTerminatingDressing(String),
    #[error("invalid observable: {0}")]
    InvalidObservable(String),
    #[error("⟨Ĝ_S⟩ = {0:e} is too close to zero for the square-root expansion")]
    NearZeroEnergy(f64),
    #[error("flow diverged at step {step}")]
    StepTooLarge { step: usize },
    #[error("degenerate branch fails its own tower: {0}")]
    BranchResidual(String),
    #[error("moment functions use different generator sets")]
    ForeignElement,
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("csv: {0}")]
    Csv(String),
}

// ---------------------------------------------------------------------------
// Commutative polynomials in phase-space variables
// ---------------------------------------------------------------------------

/// A coordinate or symbol on the quantum phase space.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    /// `y_i = ⟨ŷ_i⟩`.
    Expect(usize),
    /// Central moment `Δ(y^n)`, `|n| ≥ 2`.
    Moment(Vec<u16>),
    /// `⟨W(y^n)⟩`, the expectation of a Weyl-symmetrized monomial. Used when
    /// computing brackets.
    Raw(Vec<u16>),
    /// A real or complex parameter such as a frame orientation.
    Param(String),
    /// A classical constraint value, counted at order two.
    Class(String),
    /// `sin(arg)` or `cos(arg)` of an order-zero argument.
    Trig { sin: bool, arg: Box<Poly> },
}

impl Var {
    pub fn order(&self) -> u32 {
        match self {
            Var::Moment(n) => degree(n) as u32,
            Var::Class(_) => 2,
            _ => 0,
        }
    }
}

pub type Monomial = BTreeMap<Var, u32>;
type PKey = (Monomial, u32);

/// Polynomial over `ℚ(i)` in [`Var`]s and `ℏ^{1/2}`; the `u32` in each key
/// is the ℏ-grade.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Poly {
    terms: BTreeMap<PKey, Coef>,
}

fn term_order(k: &PKey) -> u32 {
    k.0.iter().map(|(v, e)| v.order() * e).sum::<u32>() + k.1
}

fn binom(n: u32, k: u32) -> i64 {
    (0..k).fold(1i64, |acc, i| acc * (n - i) as i64 / (i + 1) as i64)
}

fn factorial(n: u32) -> i64 {
    (1..=n as i64).product()
}

impl Poly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: Coef) -> Self {
        let mut p = Self::zero();
        p.add_term((Monomial::new(), 0), c);
        p
    }

    pub fn one() -> Self {
        Self::constant(Coef::one())
    }

    pub fn int(n: i64) -> Self {
        Self::constant(Coef::int(n))
    }

    pub fn var(v: Var) -> Self {
        let mut m = Monomial::new();
        m.insert(v, 1);
        let mut p = Self::zero();
        p.add_term((m, 0), Coef::one());
        p
    }

    /// `ℏ^{grade/2}`.
    pub fn hbar(grade: u32) -> Self {
        let mut p = Self::zero();
        p.add_term((Monomial::new(), grade), Coef::one());
        p
    }

    pub fn expect(i: usize) -> Self {
        Self::var(Var::Expect(i))
    }

    /// `Δ(y^n)`, with `Δ(1) = 1` and first-order moments identically zero.
    pub fn moment(n: &[u16]) -> Self {
        match degree(n) {
            0 => Self::one(),
            1 => Self::zero(),
            _ => Self::var(Var::Moment(n.to_vec())),
        }
    }

    pub fn param(name: &str) -> Self {
        Self::var(Var::Param(name.to_string()))
    }

    pub fn trig(sin: bool, arg: Poly) -> Self {
        if arg.is_zero() {
            return if sin { Self::zero() } else { Self::one() };
        }
        Self::var(Var::Trig { sin, arg: Box::new(arg) })
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &BTreeMap<(Monomial, u32), Coef> {
        &self.terms
    }

    pub fn add_term(&mut self, k: (Monomial, u32), c: Coef) {
        if c.is_zero() {
            return;
        }
        match self.terms.get_mut(&k) {
            Some(e) => {
                *e = &*e + &c;
                if e.is_zero() {
                    self.terms.remove(&k);
                }
            }
            None => {
                self.terms.insert(k, c);
            }
        }
    }

    pub fn scale(&self, c: &Coef) -> Self {
        let mut out = Self::zero();
        for (k, v) in &self.terms {
            out.add_term(k.clone(), v * c);
        }
        out
    }

    pub fn mul_hbar(&self, grade: u32) -> Self {
        let mut out = Self::zero();
        for ((m, g), v) in &self.terms {
            out.add_term((m.clone(), g + grade), v.clone());
        }
        out
    }

    pub fn pow(&self, k: u32) -> Self {
        (0..k).fold(Self::one(), |acc, _| &acc * self)
    }

    /// Drops every term of semiclassical order above `m`.
    pub fn truncate(&self, m: usize) -> Self {
        Poly { terms: self.terms.iter().filter(|(k, _)| term_order(k) as usize <= m).map(|(k, c)| (k.clone(), c.clone())).collect() }
    }

    /// Product with terms above order `m` discarded as they appear.
    pub fn mul_trunc(&self, other: &Self, m: usize) -> Self {
        let mut out = Self::zero();
        for (ka, ca) in &self.terms {
            let oa = term_order(ka) as usize;
            if oa > m {
                continue;
            }
            for (kb, cb) in &other.terms {
                if oa + term_order(kb) as usize > m {
                    continue;
                }
                out.add_term(mul_keys(ka, kb), ca * cb);
            }
        }
        out
    }

    /// Lowest order among the terms; the order of the zero polynomial is `None`.
    pub fn order(&self) -> Option<u32> {
        self.terms.keys().map(term_order).min()
    }

    pub fn max_order(&self) -> Option<u32> {
        self.terms.keys().map(term_order).max()
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        self.terms.keys().flat_map(|(m, _)| m.keys().cloned()).collect()
    }

    /// Replaces `v` by `with` everywhere, including inside trigonometric arguments.
    pub fn substitute(&self, v: &Var, with: &Poly) -> Poly {
        self.substitute_all(&BTreeMap::from([(v.clone(), with.clone())]))
    }

    /// Simultaneous substitution of every variable in `map`.
    pub fn substitute_all(&self, map: &BTreeMap<Var, Poly>) -> Poly {
        let mut powers: HashMap<(Var, u32), Poly> = HashMap::new();
        let mut out = Poly::zero();
        for ((m, g), c) in &self.terms {
            let mut fixed = Monomial::new();
            let mut replaced: Option<Poly> = None;
            for (var, &e) in m {
                let rep = if let Some(w) = map.get(var) {
                    Some(powers.entry((var.clone(), e)).or_insert_with(|| w.pow(e)).clone())
                } else if let Var::Trig { sin, arg } = var {
                    let new_arg = arg.substitute_all(map);
                    (new_arg != **arg).then(|| Poly::trig(*sin, new_arg).pow(e))
                } else {
                    None
                };
                match rep {
                    Some(r) => replaced = Some(replaced.map_or(r.clone(), |acc| &acc * &r)),
                    None => {
                        fixed.insert(var.clone(), e);
                    }
                }
            }
            let base = (fixed, *g);
            match replaced {
                None => out.add_term(base, c.clone()),
                Some(r) => {
                    for (k, c2) in &r.terms {
                        out.add_term(mul_keys(&base, k), c * c2);
                    }
                }
            }
        }
        out
    }

    pub fn evaluate(&self, hbar: f64, lookup: &mut dyn FnMut(&Var) -> Result<Complex64, EffectiveError>) -> Result<Complex64, EffectiveError> {
        let mut total = Complex64::zero();
        let sqrt_h = hbar.sqrt();
        for ((m, g), c) in &self.terms {
            let mut t = c.to_c64() * sqrt_h.powi(*g as i32);
            for (v, &e) in m {
                let x = match v {
                    Var::Trig { sin, arg } => {
                        let a = arg.evaluate(hbar, lookup)?;
                        if *sin {
                            a.sin()
                        } else {
                            a.cos()
                        }
                    }
                    _ => lookup(v)?,
                };
                t *= x.powi(e as i32);
            }
            total += t;
        }
        Ok(total)
    }

    /// Coefficient of the constant, grade-zero term.
    pub fn constant_term(&self) -> Coef {
        self.terms.get(&(Monomial::new(), 0)).cloned().unwrap_or_else(Coef::zero)
    }
}

fn mul_keys(a: &PKey, b: &PKey) -> PKey {
    let mut m = a.0.clone();
    for (v, e) in &b.0 {
        *m.entry(v.clone()).or_insert(0) += e;
    }
    (m, a.1 + b.1)
}

impl Add for &Poly {
    type Output = Poly;
    fn add(self, o: &Poly) -> Poly {
        let mut out = self.clone();
        for (k, c) in &o.terms {
            out.add_term(k.clone(), c.clone());
        }
        out
    }
}

impl AddAssign<&Poly> for Poly {
    fn add_assign(&mut self, o: &Poly) {
        for (k, c) in &o.terms {
            self.add_term(k.clone(), c.clone());
        }
    }
}

impl Sub for &Poly {
    type Output = Poly;
    fn sub(self, o: &Poly) -> Poly {
        let mut out = self.clone();
        for (k, c) in &o.terms {
            out.add_term(k.clone(), -c);
        }
        out
    }
}

impl Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(&Coef::int(-1))
    }
}

impl Mul for &Poly {
    type Output = Poly;
    fn mul(self, o: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (ka, ca) in &self.terms {
            for (kb, cb) in &o.terms {
                out.add_term(mul_keys(ka, kb), ca * cb);
            }
        }
        out
    }
}

fn fmt_var(v: &Var, names: &[String]) -> String {
    match v {
        Var::Expect(i) => names[*i].clone(),
        Var::Moment(n) => {
            let nz: Vec<(usize, u16)> = n.iter().enumerate().filter(|(_, &e)| e > 0).map(|(i, &e)| (i, e)).collect();
            if nz.len() == 1 && nz[0].1 == 2 {
                format!("(Δ{})^2", names[nz[0].0])
            } else {
                let parts: Vec<String> =
                    nz.iter().map(|&(i, e)| if e == 1 { names[i].clone() } else { format!("{}^{}", names[i], e) }).collect();
                format!("Δ({})", parts.join(" "))
            }
        }
        Var::Raw(n) => {
            let parts: Vec<String> = n
                .iter()
                .enumerate()
                .filter(|(_, &e)| e > 0)
                .map(|(i, &e)| if e == 1 { names[i].clone() } else { format!("{}^{}", names[i], e) })
                .collect();
            format!("⟨{}⟩_W", parts.join(" "))
        }
        Var::Param(s) | Var::Class(s) => s.clone(),
        Var::Trig { sin, arg } => format!("{}({})", if *sin { "sin" } else { "cos" }, fmt_poly(arg, names)),
    }
}

fn fmt_poly(p: &Poly, names: &[String]) -> String {
    if p.terms.is_empty() {
        return "0".into();
    }
    let mut parts = Vec::new();
    for ((m, g), c) in &p.terms {
        let mut s = c.to_string();
        if *g > 0 {
            s.push_str(&format!("*h^{g}"));
        }
        for (v, e) in m {
            s.push('*');
            s.push_str(&fmt_var(v, names));
            if *e > 1 {
                s.push_str(&format!("^{e}"));
            }
        }
        parts.push(s);
    }
    parts.join(" + ")
}

/// A polynomial on phase space bound to a generator set, used for constraint
/// functions, expanded observables and transformation laws.
#[derive(Clone, PartialEq)]
pub struct MomentFunction {
    gens: Arc<GeneratorSet>,
    poly: Poly,
}

impl fmt::Debug for MomentFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for MomentFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", fmt_poly(&self.poly, self.gens.names()))
    }
}

impl MomentFunction {
    pub fn new(gens: &Arc<GeneratorSet>, poly: Poly) -> Self {
        MomentFunction { gens: gens.clone(), poly }
    }

    pub fn zero(gens: &Arc<GeneratorSet>) -> Self {
        Self::new(gens, Poly::zero())
    }

    pub fn expect(gens: &Arc<GeneratorSet>, i: usize) -> Self {
        Self::new(gens, Poly::expect(i))
    }

    pub fn moment(gens: &Arc<GeneratorSet>, n: &[u16]) -> Self {
        Self::new(gens, Poly::moment(n))
    }

    /// `(Δy_i)²`.
    pub fn variance(gens: &Arc<GeneratorSet>, i: usize) -> Self {
        Self::moment(gens, &unit2(gens.len(), i, i))
    }

    /// `Δ(y_i y_j)` for `i ≠ j`.
    pub fn covariance(gens: &Arc<GeneratorSet>, i: usize, j: usize) -> Self {
        Self::moment(gens, &unit2(gens.len(), i, j))
    }

    pub fn gens(&self) -> &Arc<GeneratorSet> {
        &self.gens
    }

    pub fn poly(&self) -> &Poly {
        &self.poly
    }

    pub fn is_zero(&self) -> bool {
        self.poly.is_zero()
    }

    pub fn truncate(&self, m: usize) -> Self {
        Self::new(&self.gens, self.poly.truncate(m))
    }

    pub fn substitute(&self, v: &Var, with: &Poly) -> Self {
        Self::new(&self.gens, self.poly.substitute(v, with))
    }

    pub fn scale(&self, c: &Coef) -> Self {
        Self::new(&self.gens, self.poly.scale(c))
    }

    pub fn checked_add(&self, o: &Self) -> Result<Self, EffectiveError> {
        self.same(o)?;
        Ok(Self::new(&self.gens, &self.poly + &o.poly))
    }

    pub fn checked_sub(&self, o: &Self) -> Result<Self, EffectiveError> {
        self.same(o)?;
        Ok(Self::new(&self.gens, &self.poly - &o.poly))
    }

    pub fn checked_mul(&self, o: &Self) -> Result<Self, EffectiveError> {
        self.same(o)?;
        Ok(Self::new(&self.gens, &self.poly * &o.poly))
    }

    fn same(&self, o: &Self) -> Result<(), EffectiveError> {
        if Arc::ptr_eq(&self.gens, &o.gens) || *self.gens == *o.gens {
            Ok(())
        } else {
            Err(EffectiveError::ForeignElement)
        }
    }

    pub fn evaluate(&self, s: &MomentState) -> Result<Complex64, EffectiveError> {
        s.evaluate_poly(&self.poly)
    }

    /// Sorted terms with exact coefficients; stable across runs.
    pub fn to_canonical_string(&self) -> String {
        self.to_string()
    }

    /// Replaces the variable `v` using the classical constraint value
    /// `c_class = a·v + rest` (numeric `a ≠ 0`), i.e. `v = (K − rest)/a`
    /// where the symbol `K` named `label` is counted at order two.
    pub fn with_class_order(&self, v: &Var, c_class: &Poly, label: &str) -> Result<Self, EffectiveError> {
        let mut a = Coef::zero();
        let mut rest = Poly::zero();
        for ((m, g), c) in c_class.terms() {
            if *g == 0 && m.len() == 1 && m.get(v) == Some(&1) {
                a = &a + c;
            } else if m.contains_key(v) {
                return Err(EffectiveError::InvalidObservable("classical constraint must be linear in the eliminated variable".into()));
            } else {
                rest.add_term((m.clone(), *g), c.clone());
            }
        }
        let inv = a.inv().ok_or_else(|| EffectiveError::InvalidObservable("eliminated variable absent from constraint".into()))?;
        let k = Poly::var(Var::Class(label.to_string()));
        let replacement = (&k - &rest).scale(&inv);
        Ok(self.substitute(v, &replacement))
    }
}

impl Add for &MomentFunction {
    type Output = MomentFunction;
    fn add(self, o: &MomentFunction) -> MomentFunction {
        self.checked_add(o).expect("moment functions over one generator set")
    }
}

impl Sub for &MomentFunction {
    type Output = MomentFunction;
    fn sub(self, o: &MomentFunction) -> MomentFunction {
        self.checked_sub(o).expect("moment functions over one generator set")
    }
}

impl Mul for &MomentFunction {
    type Output = MomentFunction;
    fn mul(self, o: &MomentFunction) -> MomentFunction {
        self.checked_mul(o).expect("moment functions over one generator set")
    }
}

fn unit(n: usize, i: usize) -> Vec<u16> {
    let mut v = vec![0; n];
    v[i] = 1;
    v
}

fn unit2(n: usize, i: usize, j: usize) -> Vec<u16> {
    let mut v = vec![0; n];
    v[i] += 1;
    v[j] += 1;
    v
}

/// Exponent vectors `k ≤ n` componentwise.
fn sub_indices(n: &[u16]) -> Vec<Vec<u16>> {
    let mut out = vec![vec![]];
    for &e in n {
        let mut next = Vec::new();
        for prefix in &out {
            for k in 0..=e {
                let mut v = prefix.clone();
                v.push(k);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

/// Exponent vectors with support in `vars` and total degree in `lo..=hi`.
pub fn multi_indices(n: usize, vars: &[usize], lo: usize, hi: usize) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    fn rec(n: usize, vars: &[usize], pos: usize, left: usize, cur: &mut Vec<u16>, lo: usize, hi: usize, out: &mut Vec<Vec<u16>>) {
        if pos == vars.len() {
            let d = hi - left;
            if d >= lo {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur[vars[pos]] = e as u16;
            rec(n, vars, pos + 1, left - e, cur, lo, hi, out);
        }
        cur[vars[pos]] = 0;
    }
    let mut cur = vec![0u16; n];
    rec(n, vars, 0, hi, &mut cur, lo, hi, &mut out);
    out.sort_by(|a, b| degree(a).cmp(&degree(b)).then_with(|| b.cmp(a)));
    out
}

// ---------------------------------------------------------------------------
// Moment states
// ---------------------------------------------------------------------------

/// Values of the phase-space coordinates at one point, truncated at order `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    gens: Arc<GeneratorSet>,
    pub order: usize,
    pub hbar: f64,
    expectations: BTreeMap<usize, Complex64>,
    moments: BTreeMap<Vec<u16>, Complex64>,
    params: BTreeMap<String, Complex64>,
}

impl MomentState {
    pub fn new(gens: &Arc<GeneratorSet>, order: usize, hbar: f64) -> Self {
        MomentState { gens: gens.clone(), order, hbar, expectations: BTreeMap::new(), moments: BTreeMap::new(), params: BTreeMap::new() }
    }

    pub fn gens(&self) -> &Arc<GeneratorSet> {
        &self.gens
    }

    pub fn set_expectation(&mut self, i: usize, v: Complex64) {
        self.expectations.insert(i, v);
    }

    /// Stores `Δ(y^n)`; first-order and over-order entries are ignored.
    pub fn set_moment(&mut self, n: &[u16], v: Complex64) {
        let d = degree(n);
        if d >= 2 && d <= self.order {
            self.moments.insert(n.to_vec(), v);
        }
    }

    pub fn set_param(&mut self, name: &str, v: Complex64) {
        self.params.insert(name.to_string(), v);
    }

    pub fn expectation(&self, i: usize) -> Option<Complex64> {
        self.expectations.get(&i).copied()
    }

    pub fn moment(&self, n: &[u16]) -> Option<Complex64> {
        match degree(n) {
            0 => Some(Complex64::new(1.0, 0.0)),
            1 => Some(Complex64::zero()),
            _ => self.moments.get(n).copied(),
        }
    }

    pub fn variance(&self, i: usize) -> Option<Complex64> {
        self.moment(&unit2(self.gens.len(), i, i))
    }

    pub fn expectations(&self) -> &BTreeMap<usize, Complex64> {
        &self.expectations
    }

    pub fn moments(&self) -> &BTreeMap<Vec<u16>, Complex64> {
        &self.moments
    }

    pub fn params(&self) -> &BTreeMap<String, Complex64> {
        &self.params
    }

    /// All stored coordinates as `(variable, value)` pairs, expectations first.
    pub fn variables(&self) -> Vec<(Var, Complex64)> {
        let mut out: Vec<(Var, Complex64)> = self.expectations.iter().map(|(&i, &v)| (Var::Expect(i), v)).collect();
        out.extend(self.moments.iter().map(|(n, &v)| (Var::Moment(n.clone()), v)));
        out
    }

    pub fn get(&self, v: &Var) -> Option<Complex64> {
        match v {
            Var::Expect(i) => self.expectation(*i),
            Var::Moment(n) => self.moment(n),
            Var::Param(s) | Var::Class(s) => self.params.get(s).copied(),
            _ => None,
        }
    }

    pub fn set(&mut self, v: &Var, x: Complex64) {
        match v {
            Var::Expect(i) => self.set_expectation(*i, x),
            Var::Moment(n) => self.set_moment(n, x),
            Var::Param(s) | Var::Class(s) => self.set_param(s, x),
            _ => {}
        }
    }

    pub fn var_name(&self, v: &Var) -> String {
        fmt_var(v, self.gens.names())
    }

    fn lookup(&self, v: &Var) -> Result<Complex64, EffectiveError> {
        match v {
            Var::Param(s) | Var::Class(s) => self.params.get(s).copied().ok_or_else(|| EffectiveError::MissingParameter(s.clone())),
            Var::Raw(n) => {
                // ⟨W(n)⟩ = Σ_k C(n,k) y^{n−k} Δ(y^k)
                let mut total = Complex64::zero();
                for k in sub_indices(n) {
                    if degree(&k) == 1 {
                        continue;
                    }
                    let mut t = Complex64::new(1.0, 0.0);
                    for i in 0..n.len() {
                        if n[i] > k[i] {
                            let y = self.lookup(&Var::Expect(i))?;
                            t *= y.powi((n[i] - k[i]) as i32) * binom(n[i] as u32, k[i] as u32) as f64;
                        }
                    }
                    total += t * self.lookup(&Var::Moment(k.clone()))?;
                }
                Ok(total)
            }
            other => self.get(other).ok_or_else(|| EffectiveError::MissingVariable(self.var_name(other))),
        }
    }

    pub fn evaluate_poly(&self, p: &Poly) -> Result<Complex64, EffectiveError> {
        p.evaluate(self.hbar, &mut |v| self.lookup(v))
    }

    pub fn evaluate(&self, f: &MomentFunction) -> Result<Complex64, EffectiveError> {
        self.evaluate_poly(&f.poly)
    }

    /// Largest absolute difference over the variables stored in both states.
    pub fn max_deviation(&self, other: &MomentState) -> f64 {
        let mut worst: f64 = 0.0;
        for (v, x) in self.variables() {
            if let Some(y) = other.get(&v) {
                worst = worst.max((x - y).norm());
            }
        }
        worst
    }

    /// Moment table as CSV: `variable,order,value_re,value_im`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), EffectiveError> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| EffectiveError::Csv(e.to_string());
        wr.write_record(["variable", "order", "value_re", "value_im"]).map_err(err)?;
        for (v, x) in self.variables() {
            let order = match &v {
                Var::Moment(n) => degree(n),
                _ => 0,
            };
            wr.write_record([self.var_name(&v), order.to_string(), format!("{:.17e}", x.re), format!("{:.17e}", x.im)]).map_err(err)?;
        }
        wr.flush().map_err(|e| EffectiveError::Csv(e.to_string()))
    }
}

/// Expectations and Weyl-ordered central moments of `psi` up to order `order`,
/// for every generator of the assignment.
pub fn moments_from_hilbert(psi: &CVec, assignment: &Assignment, order: usize) -> MomentState {
    let ops: Vec<Option<&KinOperator>> = assignment.ops.iter().map(Some).collect();
    moments_from_operators(psi, &assignment.gens, &ops, assignment.hbar, order)
}

/// As [`moments_from_hilbert`], restricted to the generators with an operator.
///
/// The symmetrized product is built recursively,
/// `W(n)ψ = Σ_i (n_i/|n|) Δŷ_i W(n − e_i)ψ`, on the shifted operators, which
/// avoids cancellations between raw moments at small ℏ.
pub fn moments_from_operators(psi: &CVec, gens: &Arc<GeneratorSet>, ops: &[Option<&KinOperator>], hbar: f64, order: usize) -> MomentState {
    let n = gens.len();
    let norm2 = psi.norm_squared();
    let mut s = MomentState::new(gens, order, hbar);
    let avail: Vec<usize> = (0..n).filter(|&i| ops.get(i).copied().flatten().is_some()).collect();
    let mut mean = vec![Complex64::zero(); n];
    for &i in &avail {
        let op = ops[i].expect("available operator");
        mean[i] = psi.dotc(&op.apply(psi)) / norm2;
        s.set_expectation(i, mean[i]);
    }
    let mut vecs: HashMap<Vec<u16>, CVec> = HashMap::new();
    vecs.insert(vec![0; n], psi.clone());
    for idx in multi_indices(n, &avail, 1, order) {
        let tot = degree(&idx) as f64;
        let mut acc = CVec::zeros(psi.len());
        for &i in &avail {
            if idx[i] == 0 {
                continue;
            }
            let mut prev = idx.clone();
            prev[i] -= 1;
            let v = &vecs[&prev];
            let op = ops[i].expect("available operator");
            let shifted = op.apply(v) - v * mean[i];
            acc += shifted * Complex64::new(idx[i] as f64 / tot, 0.0);
        }
        if degree(&idx) >= 2 {
            s.set_moment(&idx, psi.dotc(&acc) / norm2);
        }
        vecs.insert(idx, acc);
    }
    s
}

// ---------------------------------------------------------------------------
// Operators in moment coordinates
// ---------------------------------------------------------------------------

type DTerms = Vec<(Vec<u16>, Poly)>;

/// Multiplication tables for the shifted generators `Δŷ_i` of one generator set.
pub struct DeltaAlgebra {
    gens: Arc<GeneratorSet>,
    mono_gen: Mutex<HashMap<(Vec<u16>, usize), Arc<DTerms>>>,
    mono_mono: Mutex<HashMap<(Vec<u16>, Vec<u16>), Arc<DTerms>>>,
    weyl: Mutex<HashMap<Vec<u16>, Arc<DTerms>>>,
    expect: Mutex<HashMap<Vec<u16>, Poly>>,
}

impl fmt::Debug for DeltaAlgebra {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeltaAlgebra").field("gens", &self.gens).finish()
    }
}

impl DeltaAlgebra {
    pub fn new(gens: &Arc<GeneratorSet>) -> Arc<Self> {
        Arc::new(DeltaAlgebra {
            gens: gens.clone(),
            mono_gen: Mutex::new(HashMap::new()),
            mono_mono: Mutex::new(HashMap::new()),
            weyl: Mutex::new(HashMap::new()),
            expect: Mutex::new(HashMap::new()),
        })
    }

    pub fn gens(&self) -> &Arc<GeneratorSet> {
        &self.gens
    }

    /// Normal-ordered `m · Δŷ_g`.
    fn mono_times_gen(&self, m: &[u16], g: usize) -> Arc<DTerms> {
        if m[g + 1..].iter().all(|&e| e == 0) {
            let mut out = m.to_vec();
            out[g] += 1;
            return Arc::new(vec![(out, Poly::one())]);
        }
        let key = (m.to_vec(), g);
        if let Some(hit) = self.mono_gen.lock().expect("memo lock").get(&key) {
            return hit.clone();
        }
        let mut acc: BTreeMap<Vec<u16>, Poly> = BTreeMap::new();
        let mut lead = m.to_vec();
        lead[g] += 1;
        acc.insert(lead, Poly::one());
        let word: Vec<usize> = (g + 1..m.len()).flat_map(|k| std::iter::repeat(k).take(m[k] as usize)).collect();
        let mut prefix = m.to_vec();
        for e in prefix.iter_mut().skip(g + 1) {
            *e = 0;
        }
        for (t, &bt) in word.iter().enumerate() {
            // [Δy_bt, Δy_g] = iℏ Σ_k α_k (Δy_k + y_k)
            for (k, alpha) in self.gens.bracket(bt, g) {
                let c = Poly::constant(alpha.mul_i()).mul_hbar(2);
                let mut cur: DTerms = match k {
                    None => vec![(prefix.clone(), c)],
                    Some(k) => {
                        let mut v: DTerms = self.mono_times_gen(&prefix, *k).iter().map(|(mm, p)| (mm.clone(), p * &c)).collect();
                        v.push((prefix.clone(), &c * &Poly::expect(*k)));
                        v
                    }
                };
                for &b in &word[t + 1..] {
                    cur = self.extend(&cur, b);
                }
                for (mono, p) in cur {
                    let e = acc.entry(mono).or_default();
                    *e = &*e + &p;
                }
            }
            prefix[bt] += 1;
        }
        let list: DTerms = acc.into_iter().filter(|(_, p)| !p.is_zero()).collect();
        let list = Arc::new(list);
        self.mono_gen.lock().expect("memo lock").insert(key, list.clone());
        list
    }

    fn extend(&self, terms: &DTerms, g: usize) -> DTerms {
        let mut acc: BTreeMap<Vec<u16>, Poly> = BTreeMap::new();
        for (m, p) in terms {
            for (m2, p2) in self.mono_times_gen(m, g).iter() {
                let e = acc.entry(m2.clone()).or_default();
                *e = &*e + &(p * p2);
            }
        }
        acc.into_iter().filter(|(_, p)| !p.is_zero()).collect()
    }

    fn mono_times_mono(&self, a: &[u16], b: &[u16]) -> Arc<DTerms> {
        if degree(b) == 0 {
            return Arc::new(vec![(a.to_vec(), Poly::one())]);
        }
        let key = (a.to_vec(), b.to_vec());
        if let Some(hit) = self.mono_mono.lock().expect("memo lock").get(&key) {
            return hit.clone();
        }
        let mut cur: DTerms = vec![(a.to_vec(), Poly::one())];
        for (g, &e) in b.iter().enumerate() {
            for _ in 0..e {
                cur = self.extend(&cur, g);
            }
        }
        let list = Arc::new(cur);
        self.mono_mono.lock().expect("memo lock").insert(key, list.clone());
        list
    }

    /// Normal-ordered form of the symmetrized product `W(Δŷ^n)`.
    fn weyl(&self, n: &[u16]) -> Arc<DTerms> {
        if let Some(hit) = self.weyl.lock().expect("memo lock").get(n) {
            return hit.clone();
        }
        let total = degree(n);
        let list = if total <= 1 {
            vec![(n.to_vec(), Poly::one())]
        } else {
            let mut acc: BTreeMap<Vec<u16>, Poly> = BTreeMap::new();
            for i in 0..n.len() {
                if n[i] == 0 {
                    continue;
                }
                let mut rest = n.to_vec();
                rest[i] -= 1;
                let w = Coef::ratio(n[i] as i64, total as i64);
                let gen = unit(n.len(), i);
                for (m, p) in self.weyl(&rest).iter() {
                    for (m2, p2) in self.mono_times_mono(&gen, m).iter() {
                        let e = acc.entry(m2.clone()).or_default();
                        *e = &*e + &(p * p2).scale(&w);
                    }
                }
            }
            acc.into_iter().filter(|(_, p)| !p.is_zero()).collect()
        };
        let list = Arc::new(list);
        self.weyl.lock().expect("memo lock").insert(n.to_vec(), list.clone());
        list
    }

    /// `⟨m⟩` for a normal-ordered monomial in the `Δŷ_i`, in moment coordinates.
    fn expect_mono(&self, m: &[u16]) -> Poly {
        match degree(m) {
            0 => return Poly::one(),
            1 => return Poly::zero(),
            _ => {}
        }
        if let Some(hit) = self.expect.lock().expect("memo lock").get(m) {
            return hit.clone();
        }
        // W(m) = m + lower-degree terms, and ⟨W(m)⟩ = Δ(m).
        let mut out = Poly::moment(m);
        for (w, c) in self.weyl(m).iter() {
            if w.as_slice() != m {
                out = &out - &(c * &self.expect_mono(w));
            }
        }
        self.expect.lock().expect("memo lock").insert(m.to_vec(), out.clone());
        out
    }
}

/// Operator `Σ_m c_m(y) Π Δŷ_i^{m_i}` (normal order) with phase-space
/// polynomial coefficients.
#[derive(Clone)]
pub struct DeltaOp {
    alg: Arc<DeltaAlgebra>,
    terms: BTreeMap<Vec<u16>, Poly>,
}

impl fmt::Debug for DeltaOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.alg.gens.names();
        let mut parts = Vec::new();
        for (m, p) in &self.terms {
            let word: Vec<String> = m
                .iter()
                .enumerate()
                .filter(|(_, &e)| e > 0)
                .map(|(i, &e)| if e == 1 { format!("Δ{}", names[i]) } else { format!("Δ{}^{}", names[i], e) })
                .collect();
            parts.push(format!("[{}]·{}", fmt_poly(p, names), word.join("·")));
        }
        write!(f, "{}", parts.join(" + "))
    }
}

impl DeltaOp {
    pub fn zero(alg: &Arc<DeltaAlgebra>) -> Self {
        DeltaOp { alg: alg.clone(), terms: BTreeMap::new() }
    }

    pub fn scalar(alg: &Arc<DeltaAlgebra>, p: Poly) -> Self {
        let mut out = Self::zero(alg);
        out.add_term(vec![0; alg.gens.len()], p);
        out
    }

    /// `Δŷ_i`.
    pub fn delta(alg: &Arc<DeltaAlgebra>, i: usize) -> Self {
        let mut out = Self::zero(alg);
        out.add_term(unit(alg.gens.len(), i), Poly::one());
        out
    }

    /// `ŷ_i = Δŷ_i + y_i`.
    pub fn generator(alg: &Arc<DeltaAlgebra>, i: usize) -> Self {
        &Self::delta(alg, i) + &Self::scalar(alg, Poly::expect(i))
    }

    /// Rewrites an algebra element in the shifted generators. Each normal-ordered
    /// monomial `Π ŷ_i^{m_i}` becomes `Π (Δŷ_i + y_i)^{m_i}`, still in normal order.
    pub fn from_element(alg: &Arc<DeltaAlgebra>, a: &AlgebraElement) -> Self {
        let n = alg.gens.len();
        let mut out = Self::zero(alg);
        for ((m, g), c) in a.terms() {
            let mut cur: Vec<(Vec<u16>, Poly)> = vec![(vec![0; n], Poly::hbar(*g).scale(c))];
            for i in 0..n {
                if m[i] == 0 {
                    continue;
                }
                let mut next = Vec::new();
                for (mono, p) in &cur {
                    for k in 0..=m[i] {
                        let mut mm = mono.clone();
                        mm[i] = k;
                        let coef = (p * &Poly::expect(i).pow((m[i] - k) as u32)).scale(&Coef::int(binom(m[i] as u32, k as u32)));
                        next.push((mm, coef));
                    }
                }
                cur = next;
            }
            for (mono, p) in cur {
                out.add_term(mono, p);
            }
        }
        out
    }

    pub fn terms(&self) -> &BTreeMap<Vec<u16>, Poly> {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn add_term(&mut self, m: Vec<u16>, p: Poly) {
        if p.is_zero() {
            return;
        }
        let e = self.terms.entry(m.clone()).or_default();
        *e = &*e + &p;
        if e.is_zero() {
            self.terms.remove(&m);
        }
    }

    pub fn scale(&self, p: &Poly) -> Self {
        let mut out = Self::zero(&self.alg);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * p);
        }
        out
    }

    /// Drops every term whose order (Δ-degree plus coefficient order) exceeds `order`.
    pub fn truncate(&self, order: usize) -> Self {
        let mut out = Self::zero(&self.alg);
        for (m, p) in &self.terms {
            let d = degree(m);
            if d <= order {
                out.add_term(m.clone(), p.truncate(order - d));
            }
        }
        out
    }

    /// Product truncated at `order`. Orders are superadditive under the
    /// product, so terms dropped early cannot feed back below `order`.
    pub fn mul_trunc(&self, other: &Self, order: usize) -> Self {
        let mut acc: BTreeMap<Vec<u16>, Poly> = BTreeMap::new();
        for (ma, pa) in &self.terms {
            let da = degree(ma);
            if da > order {
                continue;
            }
            let pa = pa.truncate(order - da);
            let Some(oa) = pa.order() else { continue };
            for (mb, pb) in &other.terms {
                let db = degree(mb);
                if da + db + oa as usize > order {
                    continue;
                }
                let pb = pb.truncate(order - da - db - oa as usize);
                if pb.is_zero() {
                    continue;
                }
                let pab = pa.mul_trunc(&pb, order - da - db);
                for (m, c) in self.alg.mono_times_mono(ma, mb).iter() {
                    let d = degree(m);
                    if d > order {
                        continue;
                    }
                    let t = pab.mul_trunc(c, order - d);
                    if !t.is_zero() {
                        let e = acc.entry(m.clone()).or_default();
                        *e = &*e + &t;
                    }
                }
            }
        }
        let mut out = Self::zero(&self.alg);
        for (m, p) in acc {
            out.add_term(m, p);
        }
        out
    }

    pub fn pow_trunc(&self, k: u32, order: usize) -> Self {
        let mut out = Self::scalar(&self.alg, Poly::one());
        for _ in 0..k {
            out = out.mul_trunc(self, order);
        }
        out
    }

    /// `⟨self⟩` as a phase-space polynomial truncated at `order`.
    pub fn expect(&self, order: usize) -> Poly {
        let mut out = Poly::zero();
        for (m, p) in &self.terms {
            let d = degree(m);
            if d > order {
                continue;
            }
            let e = self.alg.expect_mono(m);
            out += &p.mul_trunc(&e, order);
        }
        out.truncate(order)
    }
}

impl Add for &DeltaOp {
    type Output = DeltaOp;
    fn add(self, o: &DeltaOp) -> DeltaOp {
        let mut out = self.clone();
        for (m, p) in &o.terms {
            out.add_term(m.clone(), p.clone());
        }
        out
    }
}

impl AddAssign<&DeltaOp> for DeltaOp {
    fn add_assign(&mut self, o: &DeltaOp) {
        for (m, p) in &o.terms {
            self.add_term(m.clone(), p.clone());
        }
    }
}

impl Sub for &DeltaOp {
    type Output = DeltaOp;
    fn sub(self, o: &DeltaOp) -> DeltaOp {
        let mut out = self.clone();
        for (m, p) in &o.terms {
            out.add_term(m.clone(), -p);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Expansion, brackets and truncation
// ---------------------------------------------------------------------------

/// `𝒯_M⟨P⟩` as a function of expectations and moments.
pub fn expect_expand_sym(p: &AlgebraElement, order: usize) -> MomentFunction {
    let alg = DeltaAlgebra::new(p.gens());
    MomentFunction::new(p.gens(), DeltaOp::from_element(&alg, p).expect(order))
}

/// Numeric `𝒯_M⟨P⟩` on a moment state, with `M` the state's order.
pub fn expect_expand(p: &AlgebraElement, s: &MomentState) -> Result<Complex64, EffectiveError> {
    s.evaluate(&expect_expand_sym(p, s.order))
}

pub fn truncate(f: &MomentFunction, order: usize) -> MomentFunction {
    f.truncate(order)
}

/// `Δ(y^n) = Σ_k C(n,k) (−y)^{n−k} ⟨W(y^k)⟩`.
fn moment_to_raw(n: &[u16]) -> Poly {
    let mut out = Poly::zero();
    for k in sub_indices(n) {
        let mut t = raw_atom(&k);
        for i in 0..n.len() {
            let e = (n[i] - k[i]) as u32;
            if e > 0 {
                t = (&t * &Poly::expect(i).pow(e)).scale(&Coef::int(binom(n[i] as u32, k[i] as u32) * if e % 2 == 1 { -1 } else { 1 }));
            }
        }
        out += &t;
    }
    out
}

fn raw_atom(k: &[u16]) -> Poly {
    match degree(k) {
        0 => Poly::one(),
        1 => Poly::expect(k.iter().position(|&e| e == 1).expect("unit index")),
        _ => Poly::var(Var::Raw(k.to_vec())),
    }
}

/// `⟨W(y^n)⟩ = Σ_k C(n,k) y^{n−k} Δ(y^k)`.
fn raw_to_moments(n: &[u16]) -> Poly {
    let mut out = Poly::zero();
    for k in sub_indices(n) {
        let mut t = Poly::moment(&k);
        if t.is_zero() {
            continue;
        }
        for i in 0..n.len() {
            let e = (n[i] - k[i]) as u32;
            if e > 0 {
                t = (&t * &Poly::expect(i).pow(e)).scale(&Coef::int(binom(n[i] as u32, k[i] as u32)));
            }
        }
        out += &t;
    }
    out
}

fn to_raw(p: &Poly) -> Poly {
    let map = p
        .vars()
        .into_iter()
        .filter_map(|v| match &v {
            Var::Moment(n) => Some((v.clone(), moment_to_raw(n))),
            _ => None,
        })
        .collect();
    p.substitute_all(&map)
}

fn from_raw(p: &Poly) -> Poly {
    let map = p
        .vars()
        .into_iter()
        .filter_map(|v| match &v {
            Var::Raw(n) => Some((v.clone(), raw_to_moments(n))),
            _ => None,
        })
        .collect();
    p.substitute_all(&map)
}

/// Bracket engine with caches of `{⟨W(n)⟩, ⟨W(m)⟩}` and of the brackets of
/// moment atoms.
struct Brackets {
    gens: Arc<GeneratorSet>,
    cache: HashMap<(Vec<u16>, Vec<u16>), Poly>,
    moments: HashMap<(Var, Var), Poly>,
}

impl Brackets {
    fn raw_index(&self, v: &Var) -> Option<Vec<u16>> {
        match v {
            Var::Expect(i) => Some(unit(self.gens.len(), *i)),
            Var::Raw(n) => Some(n.clone()),
            _ => None,
        }
    }

    fn raw_raw(&mut self, a: &[u16], b: &[u16]) -> Result<Poly, EffectiveError> {
        let key = (a.to_vec(), b.to_vec());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let wa = weyl_symmetrize(&self.gens, a);
        let wb = weyl_symmetrize(&self.gens, b);
        let comm = wa.commutator(&wb)?;
        let mut out = Poly::zero();
        for ((k, g), c) in to_weyl_basis(&comm) {
            // ⟨[a,b]⟩/(iℏ): divide by i and by one power of ℏ
            let g = g.checked_sub(2).ok_or_else(|| EffectiveError::InvalidObservable("commutator without an ℏ factor".into()))?;
            let coef = (-c.mul_i()).clone();
            out += &(&raw_atom(&k) * &Poly::hbar(g)).scale(&coef);
        }
        self.cache.insert(key, out.clone());
        Ok(out)
    }

    fn atoms(&mut self, a: &Var, b: &Var) -> Result<Poly, EffectiveError> {
        match (a, b) {
            (Var::Param(_) | Var::Class(_), _) | (_, Var::Param(_) | Var::Class(_)) => Ok(Poly::zero()),
            (Var::Trig { sin, arg }, _) => {
                let d = self.poly(arg, &Poly::var(b.clone()))?;
                let deriv = if *sin { Poly::trig(false, (**arg).clone()) } else { -&Poly::trig(true, (**arg).clone()) };
                Ok(&deriv * &d)
            }
            (_, Var::Trig { .. }) => Ok(-&self.atoms(b, a)?),
            (Var::Moment(_), _) | (_, Var::Moment(_)) => {
                let key = (a.clone(), b.clone());
                if let Some(hit) = self.moments.get(&key) {
                    return Ok(hit.clone());
                }
                let raw = self.poly(&to_raw(&Poly::var(a.clone())), &to_raw(&Poly::var(b.clone())))?;
                let out = from_raw(&raw);
                self.moments.insert(key, out.clone());
                Ok(out)
            }
            _ => {
                let ia = self.raw_index(a).ok_or_else(|| EffectiveError::InvalidObservable("moment variable reached the bracket".into()))?;
                let ib = self.raw_index(b).ok_or_else(|| EffectiveError::InvalidObservable("moment variable reached the bracket".into()))?;
                self.raw_raw(&ia, &ib)
            }
        }
    }

    /// Leibniz extension over monomials of raw atoms.
    fn poly(&mut self, f: &Poly, g: &Poly) -> Result<Poly, EffectiveError> {
        let mut out = Poly::zero();
        for ((mf, gf), cf) in f.terms() {
            for ((mg, gg), cg) in g.terms() {
                let c = cf * cg;
                for (a, &ea) in mf {
                    for (b, &eb) in mg {
                        let ab = self.atoms(a, b)?;
                        if ab.is_zero() {
                            continue;
                        }
                        let mut rest = mf.clone();
                        reduce_exp(&mut rest, a);
                        for (v, e) in mg {
                            *rest.entry(v.clone()).or_insert(0) += e;
                        }
                        reduce_exp(&mut rest, b);
                        let mult = Coef::int(ea as i64 * eb as i64);
                        let base = Poly { terms: BTreeMap::from([((rest, gf + gg), &c * &mult)]) };
                        out += &(&base * &ab);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn reduce_exp(m: &mut Monomial, v: &Var) {
    if let Some(e) = m.get_mut(v) {
        *e -= 1;
        if *e == 0 {
            m.remove(v);
        }
    }
}

/// `{f, g}` extended from `{⟨â⟩, ⟨b̂⟩} = ⟨[â, b̂]⟩/(iℏ)` by linearity and Leibniz.
pub fn poisson_bracket(f: &MomentFunction, g: &MomentFunction) -> Result<MomentFunction, EffectiveError> {
    if !(Arc::ptr_eq(&f.gens, &g.gens) || *f.gens == *g.gens) {
        return Err(EffectiveError::ForeignElement);
    }
    let mut b = Brackets { gens: f.gens.clone(), cache: HashMap::new(), moments: HashMap::new() };
    Ok(MomentFunction::new(&f.gens, b.poly(&f.poly, &g.poly)?))
}

// ---------------------------------------------------------------------------
// Constraint towers, gauge fixing and frame changes
// ---------------------------------------------------------------------------

/// Orientation and momentum generators of one ideal frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameVars {
    pub q: usize,
    pub p: usize,
}

/// Name of the orientation parameter of the frame whose orientation is `q`.
pub fn rho_param(gens: &GeneratorSet, q: usize) -> String {
    format!("rho_{}", gens.name(q))
}

/// `⟨Ĉ⟩` followed by `⟨Δŷ_i Ĉ⟩` for every generator, truncated at `order`.
pub fn constraint_tower(c: &AlgebraElement, order: usize) -> Vec<(String, MomentFunction)> {
    let gens = c.gens();
    let alg = DeltaAlgebra::new(gens);
    let cop = DeltaOp::from_element(&alg, c);
    let mut out = vec![("C".to_string(), MomentFunction::new(gens, cop.expect(order)))];
    for i in 0..gens.len() {
        let t = DeltaOp::delta(&alg, i).mul_trunc(&cop, order);
        out.push((format!("C_{}", gens.name(i)), MomentFunction::new(gens, t.expect(order))));
    }
    out
}

/// Rules for evaluating expectations in the gauge of one ideal frame, for a
/// constraint `Ĉ = p̂_R + K̂` with `K̂` free of the frame pair: `p̂_R` is
/// replaced by `−K̂` from the right and `q̂_R − ρ` annihilates from the left.
struct GaugeRules {
    frame: FrameVars,
    rho: Poly,
    e_p: Poly,
    k_shift: DeltaOp,
    order: usize,
}

fn gauge_rules(alg: &Arc<DeltaAlgebra>, c: &AlgebraElement, frame: FrameVars, rho: Poly, order: usize) -> Result<GaugeRules, EffectiveError> {
    let gens = alg.gens();
    let k = c - &AlgebraElement::generator(gens, frame.p);
    let used = k.generators_used();
    if used.contains(&frame.q) || used.contains(&frame.p) {
        return Err(EffectiveError::NotIdealConstraint(gens.name(frame.q).to_string()));
    }
    let minus_k = DeltaOp::from_element(alg, &-&k);
    let e_p = minus_k.expect(order);
    let k_shift = &minus_k - &DeltaOp::scalar(alg, Poly::expect(frame.p));
    Ok(GaugeRules { frame, rho, e_p, k_shift, order })
}

impl GaugeRules {
    fn reduce(&self, op: &DeltaOp) -> DeltaOp {
        let alg = &op.alg;
        let mut out = DeltaOp::zero(alg);
        let mut kpow: HashMap<u16, DeltaOp> = HashMap::new();
        for (m, p) in &op.terms {
            if m[self.frame.q] > 0 {
                continue;
            }
            let l = m[self.frame.p];
            if l == 0 {
                out.add_term(m.clone(), p.clone());
                continue;
            }
            let mut rest = m.clone();
            rest[self.frame.p] = 0;
            let kp = kpow.entry(l).or_insert_with(|| self.k_shift.pow_trunc(l as u32, self.order)).clone();
            let mut x = DeltaOp::zero(alg);
            x.add_term(rest, p.clone());
            out += &x.mul_trunc(&kp, self.order);
        }
        out
    }

    /// `⟨op⟩` in this gauge, expressed in the remaining coordinates.
    fn expect(&self, op: &DeltaOp) -> Poly {
        let e = self.reduce(op).expect(self.order);
        e.substitute(&Var::Expect(self.frame.q), &self.rho).substitute(&Var::Expect(self.frame.p), &self.e_p).truncate(self.order)
    }
}

/// Values of every frame-dependent coordinate of one ideal frame in its own
/// gauge, as functions of the remaining coordinates.
#[derive(Debug, Clone)]
pub struct GaugeSolution {
    pub frame: FrameVars,
    pub order: usize,
    pub rho: String,
    pub values: BTreeMap<Var, MomentFunction>,
}

/// Imposes `q_R = ρ` and `Δ(q_R^{n₁} x^n) = 0`, and solves the constraint
/// tower for `p_R` and every moment containing `p_R`.
pub fn fix_frame_gauge(c: &AlgebraElement, frame: FrameVars, order: usize) -> Result<GaugeSolution, EffectiveError> {
    let gens = c.gens();
    let alg = DeltaAlgebra::new(gens);
    let rho = rho_param(gens, frame.q);
    let rules = gauge_rules(&alg, c, frame, Poly::param(&rho), order)?;
    let mut values = BTreeMap::new();
    values.insert(Var::Expect(frame.q), MomentFunction::new(gens, Poly::param(&rho)));
    values.insert(Var::Expect(frame.p), MomentFunction::new(gens, rules.e_p.clone()));
    let all: Vec<usize> = (0..gens.len()).collect();
    for n in multi_indices(gens.len(), &all, 2, order) {
        if n[frame.q] == 0 && n[frame.p] == 0 {
            continue;
        }
        let w = DeltaOp { alg: alg.clone(), terms: alg.weyl(&n).iter().cloned().collect() };
        values.insert(Var::Moment(n), MomentFunction::new(gens, rules.expect(&w)));
    }
    Ok(GaugeSolution { frame, order, rho, values })
}

impl GaugeSolution {
    pub fn value_of(&self, v: &Var) -> Result<&MomentFunction, EffectiveError> {
        if let Var::Moment(n) = v {
            if degree(n) > self.order {
                return Err(EffectiveError::InsufficientTower { variable: format!("{v:?}"), order: self.order });
            }
        }
        self.values.get(v).ok_or_else(|| EffectiveError::MissingVariable(format!("{v:?}")))
    }

    /// Fills the frame coordinates of `s` at orientation `rho`.
    pub fn apply(&self, s: &mut MomentState, rho: f64) -> Result<(), EffectiveError> {
        s.set_param(&self.rho, Complex64::new(rho, 0.0));
        let mut updates = Vec::new();
        for (v, f) in &self.values {
            updates.push((v.clone(), s.evaluate(f)?));
        }
        for (v, x) in updates {
            s.set(&v, x);
        }
        Ok(())
    }

    /// Largest deviation of `s` from this gauge at orientation `rho`, over the
    /// conditions not involving `p_R`.
    pub fn residual(&self, s: &MomentState, rho: f64) -> Result<f64, EffectiveError> {
        let mut worst = (s.expectation(self.frame.q).ok_or_else(|| EffectiveError::MissingVariable("frame orientation".into()))? - rho).norm();
        for (n, x) in s.moments() {
            if n[self.frame.q] > 0 && n[self.frame.p] == 0 {
                worst = worst.max(x.norm());
            }
        }
        Ok(worst)
    }
}

/// A change of ideal frame for a constraint `Ĉ = p̂_from + p̂_to + Ĝ`, with
/// `Ĝ` free of both frame pairs.
#[derive(Debug, Clone)]
pub struct FrameChange {
    pub constraint: AlgebraElement,
    /// Frame whose gauge the input state is in.
    pub from: FrameVars,
    /// Frame whose gauge is requested.
    pub to: FrameVars,
}

fn rational_sqrt(x: &BigRational) -> Option<BigRational> {
    if x.is_negative() {
        return None;
    }
    let n = x.numer().sqrt();
    let d = x.denom().sqrt();
    if &(&n * &n) == x.numer() && &(&d * &d) == x.denom() {
        Some(BigRational::new(n, d))
    } else {
        None
    }
}

/// Relational dressing `Ô_R^ρ(ŷ)` of a single generator as a series in
/// `Δq̂_R` around the expectation `q_R`:
/// `Σ_k (Δq̂_R)^k / k! · D_k`, with `D_k` the k-th derivative of
/// `Σ_n θ^n P_n / n!` at `θ = q_R − ρ` and `P_n = (−i/ℏ) [Ĝ, P_{n−1}]`.
/// Terms with `k > order` are dropped.
pub fn dirac_series(
    alg: &Arc<DeltaAlgebra>,
    c: &AlgebraElement,
    frame: FrameVars,
    rho: &Poly,
    y: usize,
    order: usize,
) -> Result<DeltaOp, EffectiveError> {
    let gens = alg.gens().clone();
    if y == frame.q {
        return Ok(DeltaOp::scalar(alg, rho.clone()));
    }
    let g = c - &AlgebraElement::generator(&gens, frame.p);
    if g.generators_used().contains(&frame.q) || g.generators_used().contains(&frame.p) {
        return Err(EffectiveError::NotIdealConstraint(gens.name(frame.q).to_string()));
    }
    let y_el = AlgebraElement::generator(&gens, y);
    let mut p_terms = vec![y_el.clone()];
    let mut closed = None;
    const CAP: usize = 24;
    for n in 1..=CAP {
        let comm = g.commutator(&p_terms[n - 1])?;
        if comm.is_zero() {
            closed = Some(false);
            break;
        }
        let next = comm
            .div_hbar(2)
            .ok_or_else(|| EffectiveError::InvalidObservable("commutator without an ℏ factor".into()))?
            .scale(&(-Coef::i()));
        p_terms.push(next);
        if n == 2 {
            if rotation_rate(&p_terms[0], &p_terms[2]).is_some() {
                closed = Some(true);
                break;
            }
        }
    }
    let theta = &Poly::expect(frame.q) - rho;
    let dq = DeltaOp::delta(alg, frame.q);
    let mut out = DeltaOp::zero(alg);
    let mut dq_pow = DeltaOp::scalar(alg, Poly::one());
    match closed {
        Some(false) => {
            let ops: Vec<DeltaOp> = p_terms.iter().map(|p| DeltaOp::from_element(alg, p)).collect();
            for k in 0..=order {
                let mut dk = DeltaOp::zero(alg);
                for (j, pj) in ops.iter().enumerate().skip(k) {
                    let m = (j - k) as u32;
                    let coef = theta.pow(m).scale(&Coef::ratio(1, factorial(m)));
                    dk += &pj.scale(&coef);
                }
                if dk.is_zero() {
                    break;
                }
                let term = dq_pow.mul_trunc(&dk, order).scale(&Poly::constant(Coef::ratio(1, factorial(k as u32))));
                out += &term;
                dq_pow = dq_pow.mul_trunc(&dq, order);
            }
        }
        Some(true) => {
            // Σ θ^n P_n/n! = cos(κθ) P_0 + sin(κθ)/κ · P_1
            let kappa = rotation_rate(&p_terms[0], &p_terms[2]).expect("rotation detected above");
            let kc = Coef::real(kappa.clone());
            let arg = theta.scale(&kc);
            let p0 = DeltaOp::from_element(alg, &p_terms[0]);
            let p1 = DeltaOp::from_element(alg, &p_terms[1]).scale(&Poly::constant(kc.inv().expect("nonzero rate")));
            for k in 0..=order {
                let (cs, cc) = trig_derivative(false, k);
                let (ss, sc) = trig_derivative(true, k);
                let cos_k = Poly::trig(cs, arg.clone()).scale(&Coef::int(cc));
                let sin_k = Poly::trig(ss, arg.clone()).scale(&Coef::int(sc));
                let dk = (&p0.scale(&cos_k) + &p1.scale(&sin_k)).scale(&Poly::constant(kc.pow(k as u32)));
                let term = dq_pow.mul_trunc(&dk, order).scale(&Poly::constant(Coef::ratio(1, factorial(k as u32))));
                out += &term;
                dq_pow = dq_pow.mul_trunc(&dq, order);
            }
        }
        None => return Err(EffectiveError::NonTerminatingDressing(gens.name(y).to_string())),
    }
    Ok(out.truncate(order))
}

/// `κ` with `P_2 = −κ² P_0`, if it exists and is rational.
fn rotation_rate(p0: &AlgebraElement, p2: &AlgebraElement) -> Option<BigRational> {
    let (k, c0) = p0.terms().iter().next()?;
    let c2 = p2.terms().get(k)?;
    let ratio = c2 * &c0.inv()?;
    if !ratio.im.is_zero() || !ratio.re.is_negative() {
        return None;
    }
    if p0.scale(&ratio) != *p2 {
        return None;
    }
    rational_sqrt(&-ratio.re)
}

/// k-th derivative of sin/cos as (is_sin, sign).
fn trig_derivative(sin: bool, k: usize) -> (bool, i64) {
    let shift = if sin { 0 } else { 1 };
    // sin^{(k)} = sin(x + kπ/2); cos(x) = sin(x + π/2)
    match (k + shift) % 4 {
        0 => (true, 1),
        1 => (false, 1),
        2 => (true, -1),
        _ => (false, -1),
    }
}

/// Dressing of a polynomial observable, built multiplicatively from the
/// generator dressings.
pub fn dirac_observable(
    alg: &Arc<DeltaAlgebra>,
    c: &AlgebraElement,
    frame: FrameVars,
    rho: &Poly,
    f: &AlgebraElement,
    order: usize,
) -> Result<DeltaOp, EffectiveError> {
    let mut cache: HashMap<usize, DeltaOp> = HashMap::new();
    let mut out = DeltaOp::zero(alg);
    for ((m, g), coef) in f.terms() {
        let mut term = DeltaOp::scalar(alg, Poly::hbar(*g).scale(coef));
        for (i, &e) in m.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !cache.contains_key(&i) {
                cache.insert(i, dirac_series(alg, c, frame, rho, i, order)?);
            }
            let d = &cache[&i];
            for _ in 0..e {
                term = term.mul_trunc(d, order);
            }
        }
        out += &term;
    }
    Ok(out)
}

/// Symbolic frame change: every coordinate of the target perspective as a
/// function of the source-gauge coordinates and the two orientations.
#[derive(Debug, Clone)]
pub struct FrameChangeMap {
    pub change: FrameChange,
    pub order: usize,
    pub rho_to: String,
    pub rho_from: String,
    pub values: BTreeMap<Var, MomentFunction>,
    gauge_to: GaugeSolution,
}

struct ChangeContext {
    alg: Arc<DeltaAlgebra>,
    rules: GaugeRules,
    rho_to: Poly,
}

fn change_context(fc: &FrameChange, order: usize) -> Result<ChangeContext, EffectiveError> {
    let gens = fc.constraint.gens();
    let alg = DeltaAlgebra::new(gens);
    let rules = gauge_rules(&alg, &fc.constraint, fc.from, Poly::param(&rho_param(gens, fc.from.q)), order)?;
    Ok(ChangeContext { alg, rules, rho_to: Poly::param(&rho_param(gens, fc.to.q)) })
}

pub fn frame_change_map(fc: &FrameChange, order: usize) -> Result<FrameChangeMap, EffectiveError> {
    let gens = fc.constraint.gens().clone();
    let ctx = change_context(fc, order)?;
    let targets: Vec<usize> = (0..gens.len()).filter(|&i| i != fc.to.q && i != fc.to.p).collect();
    let mut shifted: HashMap<usize, DeltaOp> = HashMap::new();
    let mut values = BTreeMap::new();
    for &t in &targets {
        let o = dirac_series(&ctx.alg, &fc.constraint, fc.to, &ctx.rho_to, t, order)?;
        let e = ctx.rules.expect(&o);
        shifted.insert(t, &o - &DeltaOp::scalar(&ctx.alg, e.clone()));
        values.insert(Var::Expect(t), MomentFunction::new(&gens, e));
    }
    // W(n) = Σ_i (n_i/|n|) (Ô_i − E_i) W(n − e_i)
    let mut sym: HashMap<Vec<u16>, DeltaOp> = HashMap::new();
    sym.insert(vec![0; gens.len()], DeltaOp::scalar(&ctx.alg, Poly::one()));
    for n in multi_indices(gens.len(), &targets, 1, order) {
        let tot = degree(&n) as i64;
        let mut acc = DeltaOp::zero(&ctx.alg);
        for &i in &targets {
            if n[i] == 0 {
                continue;
            }
            let mut prev = n.clone();
            prev[i] -= 1;
            let w = Poly::constant(Coef::ratio(n[i] as i64, tot));
            acc += &shifted[&i].mul_trunc(&sym[&prev], order).scale(&w);
        }
        if degree(&n) >= 2 {
            values.insert(Var::Moment(n.clone()), MomentFunction::new(&gens, ctx.rules.expect(&acc)));
        }
        sym.insert(n, acc);
    }
    let gauge_to = fix_frame_gauge(&fc.constraint, fc.to, order)?;
    Ok(FrameChangeMap {
        change: fc.clone(),
        order,
        rho_to: rho_param(&gens, fc.to.q),
        rho_from: rho_param(&gens, fc.from.q),
        values,
        gauge_to,
    })
}

impl FrameChangeMap {
    pub fn value_of(&self, v: &Var) -> Option<&MomentFunction> {
        self.values.get(v)
    }

    /// Numeric frame change of a source-gauge state. The result also carries
    /// the target frame's own coordinates fixed by its gauge.
    pub fn apply(&self, s_from: &MomentState, rho_to: f64, rho_from: f64) -> Result<MomentState, EffectiveError> {
        let mut src = s_from.clone();
        src.set_param(&self.rho_to, Complex64::new(rho_to, 0.0));
        src.set_param(&self.rho_from, Complex64::new(rho_from, 0.0));
        let mut out = MomentState::new(s_from.gens(), self.order, s_from.hbar);
        for (v, f) in &self.values {
            out.set(v, src.evaluate(f)?);
        }
        self.gauge_to.apply(&mut out, rho_to)?;
        Ok(out)
    }
}

/// Numeric effective frame change at truncation `order`.
pub fn effective_frame_transform(s_from: &MomentState, fc: &FrameChange, rho_to: f64, rho_from: f64, order: usize) -> Result<MomentState, EffectiveError> {
    frame_change_map(fc, order)?.apply(s_from, rho_to, rho_from)
}

/// `𝒯_M⟨f⟩` in the target gauge, in source-gauge coordinates.
pub fn transform_expectation(fc: &FrameChange, f: &AlgebraElement, order: usize) -> Result<MomentFunction, EffectiveError> {
    let ctx = change_context(fc, order)?;
    let o = dirac_observable(&ctx.alg, &fc.constraint, fc.to, &ctx.rho_to, f, order)?;
    Ok(MomentFunction::new(fc.constraint.gens(), ctx.rules.expect(&o)))
}

/// `𝒯_M (Δf)²` in the target gauge, in source-gauge coordinates.
pub fn transform_uncertainty(fc: &FrameChange, f: &AlgebraElement, order: usize) -> Result<MomentFunction, EffectiveError> {
    let ctx = change_context(fc, order)?;
    let o = dirac_observable(&ctx.alg, &fc.constraint, fc.to, &ctx.rho_to, f, order)?;
    let e = ctx.rules.expect(&o);
    let shifted = &o - &DeltaOp::scalar(&ctx.alg, e);
    let sq = shifted.mul_trunc(&shifted, order);
    Ok(MomentFunction::new(fc.constraint.gens(), ctx.rules.expect(&sq)))
}

// ---------------------------------------------------------------------------
// Degenerate constraint
// ---------------------------------------------------------------------------

/// One branch of the order-ℏ solution of `Ĉ = p̂_R² − Ĥ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegenerateBranch {
    pub sign: i8,
    pub p_r: MomentFunction,
    pub var_p: MomentFunction,
    pub cov_ph: MomentFunction,
}

impl DegenerateBranch {
    fn substitutions(&self, r: FrameVars, h: usize) -> Vec<(Var, Poly)> {
        let n = self.p_r.gens().len();
        vec![
            (Var::Expect(r.p), self.p_r.poly().clone()),
            (Var::Moment(unit2(n, r.p, r.p)), self.var_p.poly().clone()),
            (Var::Moment(unit2(n, r.p, h)), self.cov_ph.poly().clone()),
        ]
    }

    /// The tower functions with this branch substituted, truncated at order two.
    pub fn residuals(&self, tower: &[(String, MomentFunction)], r: FrameVars, h: usize) -> Vec<(String, MomentFunction)> {
        let subs = self.substitutions(r, h);
        tower
            .iter()
            .map(|(name, f)| {
                let mut p = f.poly().clone();
                for (v, w) in &subs {
                    p = p.substitute(v, w);
                }
                (name.clone(), MomentFunction::new(f.gens(), p.truncate(2)))
            })
            .collect()
    }
}

/// `⟨Ĉ⟩`, `⟨Δp̂_R Ĉ⟩`, `⟨ΔĤ Ĉ⟩` at order two for `Ĉ = p̂_R² − Ĥ²`.
pub fn degenerate_tower(gens: &Arc<GeneratorSet>, r: FrameVars, h: usize) -> Vec<(String, MomentFunction)> {
    let p = AlgebraElement::generator(gens, r.p);
    let hh = AlgebraElement::generator(gens, h);
    let c = &(&p * &p) - &(&hh * &hh);
    let tower = constraint_tower(&c, 2);
    let keep = ["C".to_string(), format!("C_{}", gens.name(r.p)), format!("C_{}", gens.name(h))];
    tower.into_iter().filter(|(n, _)| keep.contains(n)).collect()
}

/// Both branches `p_R = ±H`, `(Δp_R)² = (ΔH)²`, `Δ(p_R H) = ±(ΔH)²`, checked
/// against the order-two tower. `g_mean` is `⟨Ĝ_S⟩`, which must be bounded
/// away from zero for `Ĥ = √Ĝ_S` to be expanded.
pub fn degenerate_solve(gens: &Arc<GeneratorSet>, r: FrameVars, h: usize, g_mean: f64) -> Result<[DegenerateBranch; 2], EffectiveError> {
    if !(g_mean > ENERGY_FLOOR) {
        return Err(EffectiveError::NearZeroEnergy(g_mean));
    }
    let n = gens.len();
    let var_h = Poly::moment(&unit2(n, h, h));
    let tower = degenerate_tower(gens, r, h);
    let make = |sign: i8| {
        let s = Coef::int(sign as i64);
        DegenerateBranch {
            sign,
            p_r: MomentFunction::new(gens, Poly::expect(h).scale(&s)),
            var_p: MomentFunction::new(gens, var_h.clone()),
            cov_ph: MomentFunction::new(gens, var_h.scale(&s)),
        }
    };
    let branches = [make(1), make(-1)];
    for b in &branches {
        for (name, res) in b.residuals(&tower, r, h) {
            if !res.is_zero() {
                return Err(EffectiveError::BranchResidual(format!("{name}: {res}")));
            }
        }
    }
    Ok(branches)
}

/// Order-two solution of the factor constraint `Ĉ = p̂_R − sign·Ĥ`, obtained
/// from its own tower.
pub fn factor_tower_solution(gens: &Arc<GeneratorSet>, r: FrameVars, h: usize, sign: i8) -> Result<DegenerateBranch, EffectiveError> {
    let p = AlgebraElement::generator(gens, r.p);
    let hh = AlgebraElement::generator(gens, h);
    let c = &p - &hh.scale(&Coef::int(sign as i64));
    let sol = fix_frame_gauge(&c, r, 2)?;
    let n = gens.len();
    Ok(DegenerateBranch {
        sign,
        p_r: sol.value_of(&Var::Expect(r.p))?.clone(),
        var_p: sol.value_of(&Var::Moment(unit2(n, r.p, r.p)))?.clone(),
        cov_ph: sol.value_of(&Var::Moment(unit2(n, r.p, h)))?.clone(),
    })
}

/// `H = ⟨√Ĝ⟩` and `(ΔH)²` to order ℏ from the mean and variance of `Ĝ`.
pub fn sqrt_moments(g_mean: f64, g_var: f64) -> Result<(f64, f64), EffectiveError> {
    if !(g_mean > ENERGY_FLOOR) {
        return Err(EffectiveError::NearZeroEnergy(g_mean));
    }
    let h = g_mean.sqrt() - g_var / (8.0 * g_mean.powf(1.5));
    Ok((h, g_var / (4.0 * g_mean)))
}

// ---------------------------------------------------------------------------
// Flows
// ---------------------------------------------------------------------------

/// Integrates `dv/dλ = {v, generator}` for every stored coordinate of `s`
/// with fixed-step RK4, truncating the vector field at the state's order.
pub fn constraint_flow(s: &MomentState, generator: &MomentFunction, lambda: f64, steps: usize) -> Result<MomentState, EffectiveError> {
    if steps == 0 || lambda == 0.0 {
        return Ok(s.clone());
    }
    let gens = s.gens().clone();
    let vars: Vec<Var> = s.variables().into_iter().map(|(v, _)| v).collect();
    let mut field = Vec::with_capacity(vars.len());
    for v in &vars {
        let f = MomentFunction::new(&gens, Poly::var(v.clone()));
        field.push(poisson_bracket(&f, generator)?.truncate(s.order));
    }
    let h = lambda / steps as f64;
    let mut x: Vec<Complex64> = vars.iter().map(|v| s.get(v).expect("stored")).collect();
    let eval = |x: &[Complex64]| -> Result<Vec<Complex64>, EffectiveError> {
        let mut st = s.clone();
        for (v, &val) in vars.iter().zip(x) {
            st.set(v, val);
        }
        field.iter().map(|f| st.evaluate(f)).collect()
    };
    for step in 0..steps {
        let k1 = eval(&x)?;
        let x2: Vec<Complex64> = x.iter().zip(&k1).map(|(a, k)| a + k * (h / 2.0)).collect();
        let k2 = eval(&x2)?;
        let x3: Vec<Complex64> = x.iter().zip(&k2).map(|(a, k)| a + k * (h / 2.0)).collect();
        let k3 = eval(&x3)?;
        let x4: Vec<Complex64> = x.iter().zip(&k3).map(|(a, k)| a + k * h).collect();
        let k4 = eval(&x4)?;
        let mut diverged = false;
        for i in 0..x.len() {
            let dx = (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
            if !dx.re.is_finite() || !dx.im.is_finite() || dx.norm() > 1e6 * (1.0 + x[i].norm()) {
                diverged = true;
            }
            x[i] += dx;
        }
        if diverged {
            return Err(EffectiveError::StepTooLarge { step });
        }
    }
    let mut out = s.clone();
    for (v, val) in vars.iter().zip(x) {
        out.set(v, val);
    }
    Ok(out)
}

