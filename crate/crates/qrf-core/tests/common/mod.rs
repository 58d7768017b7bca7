//! Random instances shared by the property tests and the acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use qrf_core::effective::{MomentFunction, Poly, Var};
use qrf_core::ncalg::{AlgebraElement, Coef, GeneratorSet, GeneratorSetBuilder};
use rand::Rng;

/// Two canonical pairs `(q_1, p_1, q_2, p_2)`.
pub fn canonical_gens() -> Arc<GeneratorSet> {
    let mut b = GeneratorSetBuilder::new();
    b.canonical_pair("q_1", "p_1");
    b.canonical_pair("q_2", "p_2");
    b.build().unwrap()
}

/// A canonical pair next to an su(2) triple.
pub fn mixed_gens() -> Arc<GeneratorSet> {
    let mut b = GeneratorSetBuilder::new();
    b.canonical_pair("q", "p");
    b.su2("J_x", "J_y", "J_z");
    b.build().unwrap()
}

fn small_coef(rng: &mut impl Rng) -> Coef {
    let n = rng.gen_range(1..=3) * if rng.gen_bool(0.5) { 1 } else { -1 };
    let d = rng.gen_range(1..=2);
    if rng.gen_bool(0.2) {
        Coef::ratio(n, d).mul_i()
    } else {
        Coef::ratio(n, d)
    }
}

fn random_exponents(rng: &mut impl Rng, n: usize, lo: usize, hi: usize) -> Vec<u16> {
    let total = rng.gen_range(lo..=hi);
    let mut v = vec![0u16; n];
    for _ in 0..total {
        v[rng.gen_range(0..n)] += 1;
    }
    v
}

/// Normal-ordered polynomial with up to three terms of degree at most `max_deg`.
pub fn random_element(gens: &Arc<GeneratorSet>, rng: &mut impl Rng, max_deg: usize) -> AlgebraElement {
    let mut out = AlgebraElement::zero(gens);
    for _ in 0..rng.gen_range(1..=3) {
        let m = random_exponents(rng, gens.len(), 1, max_deg);
        out = &out + &AlgebraElement::monomial(gens, m, 0, small_coef(rng));
    }
    out
}

/// Sum of up to three products of one or two phase-space atoms, the atoms
/// being expectations and moments of degree two or three.
pub fn random_moment_function(gens: &Arc<GeneratorSet>, rng: &mut impl Rng) -> MomentFunction {
    let mut poly = Poly::zero();
    for _ in 0..rng.gen_range(1..=3) {
        let mut term = Poly::constant(small_coef(rng));
        for _ in 0..rng.gen_range(1..=2) {
            let atom = if rng.gen_bool(0.5) {
                Poly::expect(rng.gen_range(0..gens.len()))
            } else {
                Poly::var(Var::Moment(random_exponents(rng, gens.len(), 2, 3)))
            };
            term = &term * &atom;
        }
        poly = &poly + &term;
    }
    MomentFunction::new(gens, poly)
}
