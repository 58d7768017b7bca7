//! Exact noncommutative polynomial algebra in named generators.
//!
//! Elements are kept in normal order: the fixed generator order, with the
//! configuration variable of each canonical pair placed before its momentum.
//! Coefficients live in `ℚ(i)` and every term carries an integer ℏ-grade
//! (grade 2 is one power of ℏ), so `[q, p] = iℏ` is the term `i·ℏ¹`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, Mutex};

use num::complex::Complex64;
use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use thiserror::Error;

use crate::kinspace::{CMat, CVec, KinOperator, LatticeSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("duplicate generator name '{0}'")]
    DuplicateGenerator(String),
    #[error("unknown generator '{0}'")]
    UnknownGenerator(String),
    #[error("Jacobi identity fails for generators ({0}, {1}, {2})")]
    JacobiViolation(String, String, String),
    #[error("relation for ({0}, {1}) given twice")]
    DuplicateRelation(String, String),
    #[error("total degree {degree} exceeds the cap {cap}")]
    DegreeCapExceeded { degree: usize, cap: usize },
    #[error("elements belong to different generator sets")]
    ForeignElement,
    #[error("relation [{0}, {1}] violated by the representation: residual {2:e}")]
    RelationViolation(String, String, f64),
    #[error("assignment has {got} operators for {expected} generators")]
    AssignmentSize { expected: usize, got: usize },
}

/// Exact complex rational `re + i·im`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coef {
    pub re: BigRational,
    pub im: BigRational,
}

impl Coef {
    pub fn zero() -> Self {
        Coef { re: BigRational::zero(), im: BigRational::zero() }
    }
    pub fn one() -> Self {
        Coef::int(1)
    }
    pub fn i() -> Self {
        Coef { re: BigRational::zero(), im: BigRational::one() }
    }
    pub fn int(n: i64) -> Self {
        Coef { re: BigRational::from_integer(BigInt::from(n)), im: BigRational::zero() }
    }
    pub fn ratio(n: i64, d: i64) -> Self {
        Coef { re: BigRational::new(BigInt::from(n), BigInt::from(d)), im: BigRational::zero() }
    }
    pub fn real(r: BigRational) -> Self {
        Coef { re: r, im: BigRational::zero() }
    }
    pub fn new(re: BigRational, im: BigRational) -> Self {
        Coef { re, im }
    }
    pub fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }
    pub fn is_real(&self) -> bool {
        self.im.is_zero()
    }
    pub fn conj(&self) -> Self {
        Coef { re: self.re.clone(), im: -self.im.clone() }
    }
    pub fn mul_i(&self) -> Self {
        Coef { re: -self.im.clone(), im: self.re.clone() }
    }
    pub fn inv(&self) -> Option<Self> {
        let n = &self.re * &self.re + &self.im * &self.im;
        if n.is_zero() {
            return None;
        }
        Some(Coef { re: &self.re / &n, im: -(&self.im / &n) })
    }
    pub fn to_c64(&self) -> Complex64 {
        Complex64::new(self.re.to_f64().unwrap_or(f64::NAN), self.im.to_f64().unwrap_or(f64::NAN))
    }
    pub fn pow(&self, k: u32) -> Self {
        (0..k).fold(Coef::one(), |a, _| &a * self)
    }
}

impl Add for &Coef {
    type Output = Coef;
    fn add(self, o: &Coef) -> Coef {
        Coef { re: &self.re + &o.re, im: &self.im + &o.im }
    }
}
impl Sub for &Coef {
    type Output = Coef;
    fn sub(self, o: &Coef) -> Coef {
        Coef { re: &self.re - &o.re, im: &self.im - &o.im }
    }
}
impl Mul for &Coef {
    type Output = Coef;
    fn mul(self, o: &Coef) -> Coef {
        Coef {
            re: &self.re * &o.re - &self.im * &o.im,
            im: &self.re * &o.im + &self.im * &o.re,
        }
    }
}
impl Neg for &Coef {
    type Output = Coef;
    fn neg(self) -> Coef {
        Coef { re: -self.re.clone(), im: -self.im.clone() }
    }
}
impl Add for Coef {
    type Output = Coef;
    fn add(self, o: Coef) -> Coef {
        &self + &o
    }
}
impl Sub for Coef {
    type Output = Coef;
    fn sub(self, o: Coef) -> Coef {
        &self - &o
    }
}
impl Mul for Coef {
    type Output = Coef;
    fn mul(self, o: Coef) -> Coef {
        &self * &o
    }
}
impl Neg for Coef {
    type Output = Coef;
    fn neg(self) -> Coef {
        -&self
    }
}

impl fmt::Display for Coef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.re.is_zero(), self.im.is_zero()) {
            (_, true) => write!(f, "{}", self.re),
            (true, false) => write!(f, "{}i", self.im),
            (false, false) => {
                if self.im.is_negative() {
                    write!(f, "({}-{}i)", self.re, -self.im.clone())
                } else {
                    write!(f, "({}+{}i)", self.re, self.im)
                }
            }
        }
    }
}

/// Term key: exponent vector in normal order and ℏ-grade.
pub type Key = (Vec<u16>, u32);
type TermList = Vec<(Vec<u16>, u32, Coef)>;

/// `[y_i, y_j] = iℏ Σ_k α_k y_k`; `None` stands for the identity.
pub type Bracket = Vec<(Option<usize>, Coef)>;

/// Ordered named generators with their commutation table.
pub struct GeneratorSet {
    names: Vec<String>,
    brackets: Vec<Vec<Bracket>>,
    degree_cap: usize,
    hermitian: Vec<bool>,
    mono_gen: Mutex<HashMap<(Vec<u16>, u16), Arc<TermList>>>,
    mono_mono: Mutex<HashMap<(Vec<u16>, Vec<u16>), Arc<TermList>>>,
    weyl: Mutex<HashMap<Vec<u16>, Arc<TermList>>>,
}

impl fmt::Debug for GeneratorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorSet").field("names", &self.names).field("degree_cap", &self.degree_cap).finish()
    }
}

impl PartialEq for GeneratorSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.brackets == other.brackets
    }
}

#[derive(Debug, Clone, Default)]
pub struct GeneratorSetBuilder {
    names: Vec<String>,
    relations: BTreeMap<(usize, usize), Bracket>,
    degree_cap: Option<usize>,
    errors: Vec<AlgebraError>,
}

impl GeneratorSetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn generator(&mut self, name: &str) -> usize {
        if self.names.iter().any(|n| n == name) {
            self.errors.push(AlgebraError::DuplicateGenerator(name.to_string()));
        }
        self.names.push(name.to_string());
        self.names.len() - 1
    }

    /// A canonical pair with `[q, p] = iℏ`; `q` precedes `p` in normal order.
    pub fn canonical_pair(&mut self, q: &str, p: &str) -> (usize, usize) {
        let qi = self.generator(q);
        let pi = self.generator(p);
        self.insert(qi, pi, vec![(None, Coef::one())]);
        (qi, pi)
    }

    /// Three generators with `[J_a, J_b] = iℏ ε_abc J_c`.
    pub fn su2(&mut self, x: &str, y: &str, z: &str) -> [usize; 3] {
        let (a, b, c) = (self.generator(x), self.generator(y), self.generator(z));
        self.insert(a, b, vec![(Some(c), Coef::one())]);
        self.insert(b, c, vec![(Some(a), Coef::one())]);
        self.insert(a, c, vec![(Some(b), Coef::int(-1))]);
        [a, b, c]
    }

    /// General relation `[a, b] = iℏ Σ α_k y_k` between named generators.
    pub fn relation(&mut self, a: &str, b: &str, terms: Vec<(Option<&str>, Coef)>) -> Result<(), AlgebraError> {
        let ia = self.index(a)?;
        let ib = self.index(b)?;
        let mut bracket = Vec::new();
        for (k, c) in terms {
            let k = k.map(|name| self.index(name)).transpose()?;
            bracket.push((k, c));
        }
        self.insert(ia, ib, bracket);
        Ok(())
    }

    pub fn degree_cap(&mut self, cap: usize) -> &mut Self {
        self.degree_cap = Some(cap);
        self
    }

    fn index(&self, name: &str) -> Result<usize, AlgebraError> {
        self.names.iter().position(|n| n == name).ok_or_else(|| AlgebraError::UnknownGenerator(name.to_string()))
    }

    fn insert(&mut self, a: usize, b: usize, mut bracket: Bracket) {
        let (key, flip) = if a < b { ((a, b), false) } else { ((b, a), true) };
        if flip {
            bracket = bracket.into_iter().map(|(k, c)| (k, -c)).collect();
        }
        if self.relations.insert(key, bracket).is_some() {
            self.errors.push(AlgebraError::DuplicateRelation(self.names[a].clone(), self.names[b].clone()));
        }
    }

    pub fn build(&self) -> Result<Arc<GeneratorSet>, AlgebraError> {
        if let Some(e) = self.errors.first() {
            return Err(e.clone());
        }
        let n = self.names.len();
        let mut brackets = vec![vec![Vec::new(); n]; n];
        for (&(a, b), br) in &self.relations {
            let br: Bracket = br.iter().filter(|(_, c)| !c.is_zero()).cloned().collect();
            brackets[b][a] = br.iter().map(|(k, c)| (*k, -c)).collect();
            brackets[a][b] = br;
        }
        let set = GeneratorSet {
            names: self.names.clone(),
            brackets,
            degree_cap: self.degree_cap.unwrap_or(12),
            hermitian: vec![true; n],
            mono_gen: Mutex::new(HashMap::new()),
            mono_mono: Mutex::new(HashMap::new()),
            weyl: Mutex::new(HashMap::new()),
        };
        set.check_jacobi()?;
        Ok(Arc::new(set))
    }
}

impl GeneratorSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index(&self, name: &str) -> Result<usize, AlgebraError> {
        self.names.iter().position(|n| n == name).ok_or_else(|| AlgebraError::UnknownGenerator(name.to_string()))
    }

    pub fn degree_cap(&self) -> usize {
        self.degree_cap
    }

    /// `[y_i, y_j] / (iℏ)` as a list of structure constants.
    pub fn bracket(&self, i: usize, j: usize) -> &Bracket {
        &self.brackets[i][j]
    }

    /// Whether `[y_i, y_j]` is a multiple of the identity (or zero).
    pub fn is_canonical_relation(&self, i: usize, j: usize) -> bool {
        self.brackets[i][j].iter().all(|(k, _)| k.is_none())
    }

    pub fn is_hermitian(&self, i: usize) -> bool {
        self.hermitian[i]
    }

    /// Partner of a generator in a canonical pair, if any.
    pub fn canonical_partner(&self, i: usize) -> Option<usize> {
        (0..self.len()).find(|&j| j != i && !self.brackets[i][j].is_empty() && self.is_canonical_relation(i, j))
    }

    fn check_jacobi(&self) -> Result<(), AlgebraError> {
        let n = self.len();
        // [[y_a, y_b], y_c] = (iℏ)² Σ_m α_ab^m α_mc^l y_l ; the identity part drops out.
        let double = |a: usize, b: usize, c: usize| -> BTreeMap<usize, Coef> {
            let mut out = BTreeMap::new();
            for (m, am) in &self.brackets[a][b] {
                if let Some(m) = m {
                    for (l, al) in &self.brackets[*m][c] {
                        let key = l.map_or(usize::MAX, |x| x);
                        let e = out.entry(key).or_insert_with(Coef::zero);
                        *e = &*e + &(am * al);
                    }
                }
            }
            out
        };
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    let mut total: BTreeMap<usize, Coef> = BTreeMap::new();
                    for part in [double(a, b, c), double(b, c, a), double(c, a, b)] {
                        for (k, v) in part {
                            let e = total.entry(k).or_insert_with(Coef::zero);
                            *e = &*e + &v;
                        }
                    }
                    if total.values().any(|v| !v.is_zero()) {
                        return Err(AlgebraError::JacobiViolation(
                            self.names[a].clone(),
                            self.names[b].clone(),
                            self.names[c].clone(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Normal-ordered form of `m · y_g` (grades relative to `m`).
    fn mono_times_gen(&self, m: &[u16], g: usize) -> Arc<TermList> {
        if m[g + 1..].iter().all(|&e| e == 0) {
            let mut out = m.to_vec();
            out[g] += 1;
            return Arc::new(vec![(out, 0, Coef::one())]);
        }
        let key = (m.to_vec(), g as u16);
        if let Some(hit) = self.mono_gen.lock().expect("memo lock").get(&key) {
            return hit.clone();
        }
        let mut acc: BTreeMap<Key, Coef> = BTreeMap::new();
        let mut lead = m.to_vec();
        lead[g] += 1;
        acc.insert((lead, 0), Coef::one());
        // m = A·B with B the word of generators after g; y_g moves left through B.
        let word: Vec<usize> = (g + 1..m.len()).flat_map(|k| std::iter::repeat(k).take(m[k] as usize)).collect();
        let mut prefix = m.to_vec();
        for k in g + 1..m.len() {
            prefix[k] = 0;
        }
        for (t, &bt) in word.iter().enumerate() {
            // [b_t, y_g] = −iℏ Σ α_{g,b_t}^k y_k
            for (k, alpha) in &self.brackets[g][bt] {
                let c = (-alpha).mul_i();
                let mut cur: TermList = vec![(prefix.clone(), 2, c)];
                if let Some(k) = k {
                    cur = self.extend_by_gen(&cur, *k);
                }
                for &b in &word[t + 1..] {
                    cur = self.extend_by_gen(&cur, b);
                }
                for (mono, gr, c) in cur {
                    let e = acc.entry((mono, gr)).or_insert_with(Coef::zero);
                    *e = &*e + &c;
                }
            }
            prefix[bt] += 1;
        }
        let list: TermList = acc.into_iter().filter(|(_, c)| !c.is_zero()).map(|((m, g), c)| (m, g, c)).collect();
        let list = Arc::new(list);
        self.mono_gen.lock().expect("memo lock").insert(key, list.clone());
        list
    }

    fn extend_by_gen(&self, terms: &TermList, g: usize) -> TermList {
        let mut acc: BTreeMap<Key, Coef> = BTreeMap::new();
        for (m, gr, c) in terms {
            for (m2, gr2, c2) in self.mono_times_gen(m, g).iter() {
                let e = acc.entry((m2.clone(), gr + gr2)).or_insert_with(Coef::zero);
                *e = &*e + &(c * c2);
            }
        }
        acc.into_iter().filter(|(_, c)| !c.is_zero()).map(|((m, g), c)| (m, g, c)).collect()
    }

    /// Normal-ordered form of `a · b` for monomials.
    fn mono_times_mono(&self, a: &[u16], b: &[u16]) -> Arc<TermList> {
        let key = (a.to_vec(), b.to_vec());
        if let Some(hit) = self.mono_mono.lock().expect("memo lock").get(&key) {
            return hit.clone();
        }
        let mut cur: TermList = vec![(a.to_vec(), 0, Coef::one())];
        for (g, &e) in b.iter().enumerate() {
            for _ in 0..e {
                cur = self.extend_by_gen(&cur, g);
            }
        }
        let list = Arc::new(cur);
        self.mono_mono.lock().expect("memo lock").insert(key, list.clone());
        list
    }

    fn weyl_terms(&self, n: &[u16]) -> Arc<TermList> {
        if let Some(hit) = self.weyl.lock().expect("memo lock").get(n) {
            return hit.clone();
        }
        let total: u32 = n.iter().map(|&e| e as u32).sum();
        let list = if total <= 1 {
            vec![(n.to_vec(), 0, Coef::one())]
        } else {
            // W(n) = Σ_i (n_i/|n|) y_i W(n − e_i)
            let mut acc: BTreeMap<Key, Coef> = BTreeMap::new();
            for i in 0..n.len() {
                if n[i] == 0 {
                    continue;
                }
                let mut rest = n.to_vec();
                rest[i] -= 1;
                let w = Coef::ratio(n[i] as i64, total as i64);
                let mut gen = vec![0u16; n.len()];
                gen[i] = 1;
                for (m, gr, c) in self.weyl_terms(&rest).iter() {
                    for (m2, gr2, c2) in self.mono_times_mono(&gen, m).iter() {
                        let e = acc.entry((m2.clone(), gr + gr2)).or_insert_with(Coef::zero);
                        *e = &*e + &(&w * &(c * c2));
                    }
                }
            }
            acc.into_iter().filter(|(_, c)| !c.is_zero()).map(|((m, g), c)| (m, g, c)).collect()
        };
        let list = Arc::new(list);
        self.weyl.lock().expect("memo lock").insert(n.to_vec(), list.clone());
        list
    }
}

/// Normal-ordered polynomial with exact, ℏ-graded coefficients.
#[derive(Clone)]
pub struct AlgebraElement {
    gens: Arc<GeneratorSet>,
    terms: BTreeMap<Key, Coef>,
}

impl fmt::Debug for AlgebraElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl PartialEq for AlgebraElement {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms && (Arc::ptr_eq(&self.gens, &other.gens) || self.gens == other.gens)
    }
}

pub fn degree(m: &[u16]) -> usize {
    m.iter().map(|&e| e as usize).sum()
}

impl AlgebraElement {
    pub fn zero(gens: &Arc<GeneratorSet>) -> Self {
        AlgebraElement { gens: gens.clone(), terms: BTreeMap::new() }
    }

    pub fn scalar(gens: &Arc<GeneratorSet>, c: Coef) -> Self {
        Self::monomial(gens, vec![0; gens.len()], 0, c)
    }

    pub fn one(gens: &Arc<GeneratorSet>) -> Self {
        Self::scalar(gens, Coef::one())
    }

    /// `c · ℏ^{grade/2} · Π y_i^{exps_i}` with `exps` read in normal order.
    pub fn monomial(gens: &Arc<GeneratorSet>, exps: Vec<u16>, grade: u32, c: Coef) -> Self {
        assert_eq!(exps.len(), gens.len(), "exponent vector length");
        let mut terms = BTreeMap::new();
        if !c.is_zero() {
            terms.insert((exps, grade), c);
        }
        AlgebraElement { gens: gens.clone(), terms }
    }

    pub fn generator(gens: &Arc<GeneratorSet>, i: usize) -> Self {
        let mut e = vec![0; gens.len()];
        e[i] = 1;
        Self::monomial(gens, e, 0, Coef::one())
    }

    pub fn named(gens: &Arc<GeneratorSet>, name: &str) -> Result<Self, AlgebraError> {
        Ok(Self::generator(gens, gens.index(name)?))
    }

    pub fn from_terms(gens: &Arc<GeneratorSet>, terms: impl IntoIterator<Item = (Key, Coef)>) -> Self {
        let mut out = Self::zero(gens);
        for (k, c) in terms {
            out.add_term(k, c);
        }
        out
    }

    pub fn gens(&self) -> &Arc<GeneratorSet> {
        &self.gens
    }

    pub fn terms(&self) -> &BTreeMap<Key, Coef> {
        &self.terms
    }

    pub fn add_term(&mut self, k: Key, c: Coef) {
        if c.is_zero() {
            return;
        }
        let e = self.terms.entry(k.clone()).or_insert_with(Coef::zero);
        *e = &*e + &c;
        if e.is_zero() {
            self.terms.remove(&k);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(|(m, _)| degree(m)).max().unwrap_or(0)
    }

    /// Generators appearing in any term.
    pub fn generators_used(&self) -> BTreeSet<usize> {
        self.terms
            .keys()
            .flat_map(|(m, _)| m.iter().enumerate().filter(|(_, &e)| e > 0).map(|(i, _)| i))
            .collect()
    }

    pub fn scale(&self, c: &Coef) -> Self {
        Self::from_terms(&self.gens, self.terms.iter().map(|(k, v)| (k.clone(), v * c)))
    }

    /// Multiplies by ℏ^{grade/2}.
    pub fn mul_hbar(&self, grade: u32) -> Self {
        Self::from_terms(&self.gens, self.terms.iter().map(|((m, g), v)| ((m.clone(), g + grade), v.clone())))
    }

    /// Divides by ℏ^{grade/2} when every term carries at least that grade.
    pub fn div_hbar(&self, grade: u32) -> Option<Self> {
        if self.terms.keys().any(|(_, g)| *g < grade) {
            return None;
        }
        Some(Self::from_terms(&self.gens, self.terms.iter().map(|((m, g), v)| ((m.clone(), g - grade), v.clone()))))
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self, AlgebraError> {
        self.same_set(other)?;
        let mut out = self.clone();
        for (k, c) in &other.terms {
            out.add_term(k.clone(), c.clone());
        }
        Ok(out)
    }

    fn same_set(&self, other: &Self) -> Result<(), AlgebraError> {
        if Arc::ptr_eq(&self.gens, &other.gens) || *self.gens == *other.gens {
            Ok(())
        } else {
            Err(AlgebraError::ForeignElement)
        }
    }

    pub fn checked_mul(&self, other: &Self) -> Result<Self, AlgebraError> {
        self.same_set(other)?;
        let cap = self.gens.degree_cap;
        let mut acc: BTreeMap<Key, Coef> = BTreeMap::new();
        for ((mb, gb), cb) in &other.terms {
            for ((ma, ga), ca) in &self.terms {
                let d = degree(ma) + degree(mb);
                if d > cap {
                    return Err(AlgebraError::DegreeCapExceeded { degree: d, cap });
                }
                let cab = ca * cb;
                for (m, g, c) in self.gens.mono_times_mono(ma, mb).iter() {
                    let e = acc.entry((m.clone(), g + ga + gb)).or_insert_with(Coef::zero);
                    *e = &*e + &(&cab * c);
                }
            }
        }
        Ok(Self::from_terms(&self.gens, acc))
    }

    pub fn commutator(&self, other: &Self) -> Result<Self, AlgebraError> {
        let ab = self.checked_mul(other)?;
        let ba = other.checked_mul(self)?;
        Ok(&ab - &ba)
    }

    pub fn pow(&self, k: u32) -> Result<Self, AlgebraError> {
        let mut out = Self::one(&self.gens);
        for _ in 0..k {
            out = out.checked_mul(self)?;
        }
        Ok(out)
    }

    /// The *-involution: conjugate coefficients and reverse every word.
    pub fn adjoint(&self) -> Result<Self, AlgebraError> {
        let mut out = Self::zero(&self.gens);
        for ((m, g), c) in &self.terms {
            let mut cur: TermList = vec![(vec![0; m.len()], 0, Coef::one())];
            for k in (0..m.len()).rev() {
                for _ in 0..m[k] {
                    cur = self.gens.extend_by_gen(&cur, k);
                }
            }
            let cc = c.conj();
            for (mm, gg, c2) in cur {
                out.add_term((mm, gg + g), &cc * &c2);
            }
        }
        Ok(out)
    }

    /// Terms with ℏ-grade zero only (the classical part of the ordering).
    pub fn grade_part(&self, grade: u32) -> Self {
        Self::from_terms(&self.gens, self.terms.iter().filter(|((_, g), _)| *g == grade).map(|(k, c)| (k.clone(), c.clone())))
    }

    /// Canonical text form: sorted terms, exact coefficients, `h^k` for ℏ^{k/2}.
    pub fn to_canonical_string(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AlgebraElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for ((m, g), c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{}", c)?;
            if *g > 0 {
                write!(f, "*h^{}", g)?;
            }
            for (i, &e) in m.iter().enumerate() {
                match e {
                    0 => {}
                    1 => write!(f, "*{}", self.gens.names[i])?,
                    _ => write!(f, "*{}^{}", self.gens.names[i], e)?,
                }
            }
        }
        Ok(())
    }
}

impl Add for &AlgebraElement {
    type Output = AlgebraElement;
    fn add(self, o: &AlgebraElement) -> AlgebraElement {
        self.checked_add(o).expect("elements of the same generator set")
    }
}
impl Sub for &AlgebraElement {
    type Output = AlgebraElement;
    fn sub(self, o: &AlgebraElement) -> AlgebraElement {
        self.checked_add(&-o).expect("elements of the same generator set")
    }
}
impl Neg for &AlgebraElement {
    type Output = AlgebraElement;
    fn neg(self) -> AlgebraElement {
        self.scale(&Coef::int(-1))
    }
}
/// Panics when the degree cap is exceeded; use [`AlgebraElement::checked_mul`] to handle it.
impl Mul for &AlgebraElement {
    type Output = AlgebraElement;
    fn mul(self, o: &AlgebraElement) -> AlgebraElement {
        self.checked_mul(o).unwrap_or_else(|e| panic!("{e}"))
    }
}

pub fn multiply(a: &AlgebraElement, b: &AlgebraElement) -> Result<AlgebraElement, AlgebraError> {
    a.checked_mul(b)
}

pub fn commutator(a: &AlgebraElement, b: &AlgebraElement) -> Result<AlgebraElement, AlgebraError> {
    a.commutator(b)
}

pub fn adjoint(a: &AlgebraElement) -> Result<AlgebraElement, AlgebraError> {
    a.adjoint()
}

/// Average over all orderings of the multiset `y^n`, in normal order.
pub fn weyl_symmetrize(gens: &Arc<GeneratorSet>, n: &[u16]) -> AlgebraElement {
    let terms = gens.weyl_terms(n);
    AlgebraElement::from_terms(gens, terms.iter().map(|(m, g, c)| ((m.clone(), *g), c.clone())))
}

/// Rewrites `a` in the Weyl basis: `a = Σ c_n ℏ^{g/2} W(n)`.
pub fn to_weyl_basis(a: &AlgebraElement) -> BTreeMap<Key, Coef> {
    let mut rest = a.clone();
    let mut out = BTreeMap::new();
    while let Some(((m, g), c)) = rest
        .terms
        .iter()
        .max_by(|x, y| degree(&x.0 .0).cmp(&degree(&y.0 .0)).then_with(|| y.0.cmp(&x.0)))
        .map(|(k, c)| (k.clone(), c.clone()))
    {
        let w = weyl_symmetrize(&a.gens, &m).mul_hbar(g).scale(&c);
        rest = &rest - &w;
        let e: &mut Coef = out.entry((m, g)).or_insert_with(Coef::zero);
        *e = &*e + &c;
    }
    out.retain(|_, c: &mut Coef| !c.is_zero());
    out
}

/// Generator operators on a lattice space, one per generator.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub gens: Arc<GeneratorSet>,
    pub ops: Vec<KinOperator>,
    pub hbar: f64,
}

/// Residuals of the commutation relations in a representation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationReport {
    /// Largest residual among Lie-type and vanishing relations (required exact).
    pub lie_residual: f64,
    /// Largest residual among canonical `iℏ·1` relations on the test states.
    pub canonical_residual: f64,
    pub worst: Option<(String, String)>,
}

impl Assignment {
    /// Checks the relations on the given test states; Lie-type relations must
    /// hold to 1e−10, canonical ones are only reported.
    pub fn new(gens: &Arc<GeneratorSet>, ops: Vec<KinOperator>, hbar: f64, test_states: &[CVec]) -> Result<(Self, RelationReport), AlgebraError> {
        if ops.len() != gens.len() {
            return Err(AlgebraError::AssignmentSize { expected: gens.len(), got: ops.len() });
        }
        let a = Assignment { gens: gens.clone(), ops, hbar };
        let report = a.check_relations(test_states);
        if report.lie_residual > 1e-10 {
            let (x, y) = report.worst.clone().unwrap_or_default();
            return Err(AlgebraError::RelationViolation(x, y, report.lie_residual));
        }
        Ok((a, report))
    }

    pub fn check_relations(&self, test_states: &[CVec]) -> RelationReport {
        let n = self.gens.len();
        let mut lie: f64 = 0.0;
        let mut canon: f64 = 0.0;
        let mut worst = None;
        let i_hbar = Complex64::new(0.0, self.hbar);
        for a in 0..n {
            for b in a + 1..n {
                let bracket = self.gens.bracket(a, b);
                let canonical = !bracket.is_empty() && self.gens.is_canonical_relation(a, b);
                for psi in test_states {
                    let lhs = self.ops[a].apply(&self.ops[b].apply(psi)) - self.ops[b].apply(&self.ops[a].apply(psi));
                    let mut rhs = CVec::zeros(psi.len());
                    for (k, c) in bracket {
                        let v = match k {
                            Some(k) => self.ops[*k].apply(psi),
                            None => psi.clone(),
                        };
                        rhs += v * (i_hbar * c.to_c64());
                    }
                    let r = (lhs - rhs).norm() / psi.norm().max(1e-300);
                    if canonical {
                        canon = canon.max(r);
                    } else if r > lie {
                        lie = r;
                        worst = Some((self.gens.name(a).to_string(), self.gens.name(b).to_string()));
                    }
                }
            }
        }
        RelationReport { lie_residual: lie, canonical_residual: canon, worst }
    }

    fn hbar_power(&self, grade: u32) -> f64 {
        self.hbar.sqrt().powi(grade as i32)
    }

    /// `represent(a)·ψ` without forming matrices.
    pub fn apply(&self, a: &AlgebraElement, psi: &CVec) -> CVec {
        let mut out = CVec::zeros(psi.len());
        for ((m, g), c) in a.terms() {
            let mut v = psi.clone();
            for k in (0..m.len()).rev() {
                for _ in 0..m[k] {
                    v = self.ops[k].apply(&v);
                }
            }
            out += v * (c.to_c64() * self.hbar_power(*g));
        }
        out
    }
}

/// The operator representing `a` under the assignment.
pub fn represent(a: &AlgebraElement, space: &LatticeSpace, assignment: &Assignment) -> KinOperator {
    let mut out = CMat::zeros(space.dim, space.dim);
    let mut support = BTreeSet::new();
    for ((m, g), c) in a.terms() {
        let mut op = KinOperator::identity(space);
        for (k, &e) in m.iter().enumerate() {
            for _ in 0..e {
                op = op.mul(&assignment.ops[k]);
            }
            if e > 0 {
                support.extend(assignment.ops[k].support().iter().copied());
            }
        }
        out += op.to_dense() * (c.to_c64() * assignment.hbar_power(*g));
    }
    KinOperator::dense_with_support(space, out, support)
}
