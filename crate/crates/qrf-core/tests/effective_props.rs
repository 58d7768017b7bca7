mod common;

use std::sync::Arc;

use nalgebra::DMatrix;
use num::complex::Complex64;
use proptest::prelude::*;
use qrf_core::effective::{expect_expand_sym, moments_from_hilbert, poisson_bracket, MomentFunction};
use qrf_core::kinspace::{tensor_space, CVec, FactorSpec, KinOperator, LatticeSpace};
use qrf_core::ncalg::{represent, Assignment, GeneratorSet, GeneratorSetBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lhs_rhs_equal(a: &MomentFunction, b: &MomentFunction) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.poly(), b.poly(), "{} vs {}", a, b);
    Ok(())
}

fn gens_for(flag: bool) -> Arc<GeneratorSet> {
    if flag {
        common::canonical_gens()
    } else {
        common::mixed_gens()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bracket_is_antisymmetric(seed in any::<u64>(), canonical in any::<bool>()) {
        let g = gens_for(canonical);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::random_moment_function(&g, &mut rng);
        let h = common::random_moment_function(&g, &mut rng);
        let fh = poisson_bracket(&f, &h).unwrap();
        let hf = poisson_bracket(&h, &f).unwrap();
        lhs_rhs_equal(&fh, &hf.scale(&qrf_core::ncalg::Coef::int(-1)))?;
    }

    #[test]
    fn bracket_obeys_leibniz(seed in any::<u64>(), canonical in any::<bool>()) {
        let g = gens_for(canonical);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::random_moment_function(&g, &mut rng);
        let a = common::random_moment_function(&g, &mut rng);
        let b = common::random_moment_function(&g, &mut rng);
        let lhs = poisson_bracket(&f, &(&a * &b)).unwrap();
        let rhs = &(&poisson_bracket(&f, &a).unwrap() * &b) + &(&a * &poisson_bracket(&f, &b).unwrap());
        lhs_rhs_equal(&lhs, &rhs)?;
    }

    #[test]
    fn bracket_obeys_jacobi(seed in any::<u64>(), canonical in any::<bool>()) {
        let g = gens_for(canonical);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::random_moment_function(&g, &mut rng);
        let a = common::random_moment_function(&g, &mut rng);
        let b = common::random_moment_function(&g, &mut rng);
        let br = |x: &MomentFunction, y: &MomentFunction| poisson_bracket(x, y).unwrap();
        let total = &(&br(&f, &br(&a, &b)) + &br(&a, &br(&b, &f))) + &br(&b, &br(&f, &a));
        prop_assert!(total.is_zero(), "{}", total);
    }

    #[test]
    fn truncation_commutes_with_bracket(seed in any::<u64>(), canonical in any::<bool>(), order in 2usize..=3) {
        let g = gens_for(canonical);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::random_moment_function(&g, &mut rng);
        let h = common::random_moment_function(&g, &mut rng);
        let lhs = poisson_bracket(&f.truncate(order), &h.truncate(order)).unwrap().truncate(order);
        let rhs = poisson_bracket(&f, &h).unwrap().truncate(order);
        lhs_rhs_equal(&lhs, &rhs)?;
    }

    #[test]
    fn algebra_commutator_laws(seed in any::<u64>(), canonical in any::<bool>()) {
        let g = gens_for(canonical);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::random_element(&g, &mut rng, 2);
        let b = common::random_element(&g, &mut rng, 2);
        let c = common::random_element(&g, &mut rng, 2);
        let ab = a.commutator(&b).unwrap();
        prop_assert_eq!(&ab, &-&b.commutator(&a).unwrap());
        let leibniz = &(&ab * &c) + &(&b * &a.commutator(&c).unwrap());
        prop_assert_eq!(a.commutator(&(&b * &c)).unwrap(), leibniz);
        let jac = &(&a.commutator(&b.commutator(&c).unwrap()).unwrap() + &b.commutator(&c.commutator(&a).unwrap()).unwrap())
            + &c.commutator(&a.commutator(&b).unwrap()).unwrap();
        prop_assert!(jac.is_zero());
    }
}

/// Spin-`j` matrices `(J_x, J_y, J_z)` in the `J_z` eigenbasis, `m = j, j−1, …`.
fn spin_ops(space: &LatticeSpace, two_j: usize, hbar: f64) -> Vec<KinOperator> {
    let d = two_j + 1;
    let j = two_j as f64 / 2.0;
    let mut jp = DMatrix::<Complex64>::zeros(d, d);
    let mut jz = DMatrix::<Complex64>::zeros(d, d);
    for k in 0..d {
        let m = j - k as f64;
        jz[(k, k)] = Complex64::new(hbar * m, 0.0);
        if k > 0 {
            jp[(k - 1, k)] = Complex64::new(hbar * (j * (j + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
        }
    }
    let jm = jp.adjoint();
    let jx = (&jp + &jm) * Complex64::new(0.5, 0.0);
    let jy = (&jp - &jm) * Complex64::new(0.0, -0.5);
    vec![KinOperator::local(space, 0, jx), KinOperator::local(space, 0, jy), KinOperator::local(space, 0, jz)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A degree-3 polynomial needs moments up to degree 3 only; its expansion
    /// is exact once the truncation also keeps the ℏ corrections (order 6).
    #[test]
    fn moment_expansion_is_exact_up_to_its_order(seed in any::<u64>(), hbar in 0.2f64..1.5) {
        let mut b = GeneratorSetBuilder::new();
        b.su2("J_x", "J_y", "J_z");
        let g = b.build().unwrap();
        let space = tensor_space(vec![FactorSpec::system("S", vec![1.5, 0.5, -0.5, -1.5])], hbar).unwrap();
        let ops = spin_ops(&space, 3, hbar);
        let (assignment, _) = Assignment::new(&g, ops, hbar, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = CVec::from_iterator(4, (0..4).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
        let psi = &psi / Complex64::new(psi.norm(), 0.0);
        let p = common::random_element(&g, &mut rng, 3);
        let s = moments_from_hilbert(&psi, &assignment, 3);
        let exact = represent(&p, &space, &assignment).expectation(&psi);
        let expanded = s.evaluate(&expect_expand_sym(&p, 6)).unwrap();
        prop_assert!((exact - expanded).norm() < 1e-10, "{} vs {}", exact, expanded);
    }
}
