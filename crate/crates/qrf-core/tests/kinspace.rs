use nalgebra::{DMatrix, DVector};
use num::complex::Complex64;
use num::rational::Rational64;
use proptest::prelude::*;
use qrf_core::kinspace::{
    build_constraint, factorize_constraint, group_average, group_average_sum, lattice_momenta, physical_inner_product,
    sector_projectors, tensor_space, CMat, CVec, ConstraintTerm, FactorSpec, KinError, KinOperator,
};
use qrf_core::models::{build_model, ModelError, ModelKind, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> CMat {
    DMatrix::from_fn(r, c, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn random_vector(rng: &mut impl Rng, n: usize) -> CVec {
    DVector::from_fn(n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.norm()))
}

#[test]
fn newtonian_kernel_matches_integer_count() {
    // p_C + p_S²/2m with m = 1/2 is p_C + p_S²; physical iff k_C + k_S² ≡ 0 mod N.
    let spec = ModelSpec { lattice: 8, ..ModelSpec::new(ModelKind::Newtonian) };
    let m = build_model(&spec).unwrap();
    let pi = group_average(&m.space, &m.constraint).unwrap().to_dense();
    let n = 8i64;
    for i in 0..m.space.dim {
        let kc = m.space.local_index(i, 0) as i64 - n / 2;
        let ks = m.space.local_index(i, 1) as i64 - n / 2;
        let expected = if (kc + ks * ks).rem_euclid(n) == 0 { 1.0 } else { 0.0 };
        assert_eq!(pi[(i, i)].re, expected, "index {i}");
    }
    let rank: f64 = (0..m.space.dim).map(|i| pi[(i, i)].re).sum();
    assert_eq!(rank, 8.0);
}

#[test]
fn group_average_is_an_orthogonal_projector_equal_to_the_group_sum() {
    for kind in ModelKind::ALL {
        let spec = ModelSpec { lattice: 8, particles: 3, ..ModelSpec::new(kind) };
        let m = build_model(&spec).unwrap();
        let pi = group_average(&m.space, &m.constraint).unwrap();
        let sum = group_average_sum(&m.space, &m.constraint);
        assert!(pi.max_diff(&sum) < 1e-12, "{kind}: {}", pi.max_diff(&sum));
        assert!(pi.mul(&pi).max_diff(&pi) < 1e-12, "{kind}");
        assert!(pi.is_hermitian(), "{kind}");
        let c = m.constraint.op(&m.space);
        assert!(c.mul(&pi).max_abs() < 1e-12, "{kind}: Π is not in the kernel of Ĉ");
    }
}

#[test]
fn physical_inner_product_is_the_projected_norm() {
    let m = build_model(&ModelSpec { lattice: 8, ..ModelSpec::new(ModelKind::Su2) }).unwrap();
    let pi = group_average(&m.space, &m.constraint).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let psi = random_vector(&mut rng, m.space.dim);
    let phi = random_vector(&mut rng, m.space.dim);
    let direct = pi.apply(&psi).dotc(&pi.apply(&phi));
    assert!((physical_inner_product(&pi, &psi, &phi) - direct).norm() < 1e-10);
    assert!(physical_inner_product(&pi, &psi, &psi).im.abs() < 1e-12);
}

#[test]
fn off_lattice_coupling_is_rejected() {
    for (two_j, beta) in [(2, Rational64::new(1, 3)), (1, Rational64::new(1, 2)), (2, Rational64::new(3, 2))] {
        let spec = ModelSpec { lattice: 8, two_j, beta, ..ModelSpec::new(ModelKind::Su2) };
        match build_model(&spec) {
            Err(ModelError::Kin(KinError::IncommensurableSpectrum { unit, value, .. })) => {
                assert_eq!(unit, 1.0);
                assert!((value - value.round()).abs() > 0.1, "{value}");
            }
            other => panic!("two_j {two_j}, β {beta}: {other:?}"),
        }
    }
    for (two_j, beta) in [(2, Rational64::from_integer(2)), (1, Rational64::from_integer(2)), (3, Rational64::from_integer(4))] {
        build_model(&ModelSpec { lattice: 8, two_j, beta, ..ModelSpec::new(ModelKind::Su2) }).unwrap();
    }
}

#[test]
fn tensor_space_validation() {
    assert!(matches!(tensor_space(vec![FactorSpec::frame("A", 5, 1.0)], 1.0), Err(KinError::InvalidFactor(_))));
    assert!(matches!(tensor_space(vec![FactorSpec::frame("A", 2, 1.0)], 1.0), Err(KinError::InvalidFactor(_))));
    assert!(matches!(tensor_space(vec![FactorSpec::frame("A", 4, 1.0)], 0.0), Err(KinError::InvalidFactor(_))));
    let err = tensor_space(vec![FactorSpec::frame("A", 4, 1.0), FactorSpec::system("S", vec![0.5, 1.0])], 1.0).unwrap_err();
    assert_eq!(err, KinError::IncommensurableSpectrum { factor: 1, value: 0.5, unit: 1.0 });
    let s = tensor_space(vec![FactorSpec::frame("A", 4, 1.0), FactorSpec::system("S", vec![1.0, 2.0, 3.0])], 1.0).unwrap();
    assert_eq!(s.dims, vec![4, 3]);
    assert_eq!(s.strides, vec![3, 1]);
    assert_eq!(s.dim, 12);
    assert_eq!(lattice_momenta(4, 0.5), vec![-1.0, -0.5, 0.0, 0.5]);
}

#[test]
fn split_and_join_are_inverse() {
    let s = tensor_space(
        vec![FactorSpec::frame("A", 4, 1.0), FactorSpec::system("S", vec![1.0, 2.0, 3.0]), FactorSpec::frame("B", 6, 1.0)],
        1.0,
    )
    .unwrap();
    for f in 0..3 {
        let mut seen = vec![false; s.dim];
        for a in 0..s.dims[f] {
            for r in 0..s.complement_dim(f) {
                let i = s.join_index(f, a, r);
                assert_eq!(s.split_index(f, i), (a, r));
                assert_eq!(s.local_index(i, f), a);
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        let sub = s.without(f);
        assert_eq!(sub.dim, s.complement_dim(f));
        assert_eq!(sub.dims.len(), 2);
    }
}

#[test]
fn sector_projectors_split_the_frame() {
    let s = tensor_space(vec![FactorSpec::frame("R", 8, 1.0), FactorSpec::system("S", vec![1.0, 2.0])], 1.0).unwrap();
    let (plus, minus) = sector_projectors(&s, 0).unwrap();
    assert!(plus.add(&minus).max_diff(&KinOperator::identity(&s)) < 1e-15);
    assert!(plus.mul(&minus).max_abs() < 1e-15);
    let d = plus.to_dense();
    let ones: f64 = (0..s.dim).map(|i| d[(i, i)].re).sum();
    // k ∈ {0, 1, 2, 3} out of [−4, 4), times the two system levels.
    assert_eq!(ones, 8.0);
    assert_eq!(sector_projectors(&s, 1).unwrap_err(), KinError::NotAFrameFactor(1));
}

#[test]
fn quadratic_constraint_factorizes() {
    let m = build_model(&ModelSpec { lattice: 8, energies: vec![1, 2, 3], ..ModelSpec::new(ModelKind::Degenerate) }).unwrap();
    let (cp, cm) = factorize_constraint(&m.space, &m.constraint).unwrap();
    for i in 0..m.space.dim {
        let prod = cp.raw[i] * cm.raw[i];
        assert!((prod - m.constraint.raw[i]).abs() < 1e-12, "{i}: {prod} vs {}", m.constraint.raw[i]);
    }
    assert!(cp.is_ideal_for(0) && cm.is_ideal_for(0));
    assert!(!m.constraint.is_ideal_for(0));

    let nm = build_model(&ModelSpec { lattice: 8, ..ModelSpec::new(ModelKind::Newtonian) }).unwrap();
    assert!(matches!(factorize_constraint(&nm.space, &nm.constraint), Err(KinError::NotQuadratic(_))));
}

#[test]
fn constraint_without_a_kernel_has_no_group_average() {
    let s = tensor_space(vec![FactorSpec::frame("R", 4, 1.0), FactorSpec::system("S", vec![1.0])], 1.0).unwrap();
    let p2: Vec<f64> = lattice_momenta(4, 1.0).iter().map(|p| p * p + 1.0).collect();
    let c = build_constraint(&s, vec![ConstraintTerm::custom(0, p2), ConstraintTerm::custom(1, vec![0.0])]).unwrap();
    assert_eq!(group_average(&s, &c).unwrap_err(), KinError::EmptyKernel);
    let short = build_constraint(&s, vec![ConstraintTerm::custom(0, vec![1.0])]).unwrap_err();
    assert_eq!(short, KinError::DimensionMismatch { expected: 4, got: 1 });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn structured_products_match_dense_products(seed in any::<u64>(), left in any::<bool>()) {
        let s = tensor_space(
            vec![FactorSpec::system("X", vec![1.0, 2.0]), FactorSpec::system("Y", vec![1.0, 2.0, 3.0]), FactorSpec::system("Z", vec![1.0, 2.0])],
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kron = KinOperator::kron(&s, vec![(0, random_matrix(&mut rng, 2, 2)), (2, random_matrix(&mut rng, 2, 2))]);
        let local = KinOperator::local(&s, 1, random_matrix(&mut rng, 3, 3));
        let dense = KinOperator::dense(&s, random_matrix(&mut rng, 12, 12));
        let diag = KinOperator::diagonal(&s, random_vector(&mut rng, 12), [0, 1, 2].into());
        let ops = [&kron, &local, &dense, &diag];
        for a in ops {
            for b in ops {
                let (x, y) = if left { (a, b) } else { (b, a) };
                let got = x.mul(y).to_dense();
                let want = x.to_dense() * y.to_dense();
                prop_assert!(max_abs(&(got - want)) < 1e-12);
            }
        }
        let v = random_vector(&mut rng, 12);
        for a in ops {
            prop_assert!((a.apply(&v) - a.to_dense() * &v).norm() < 1e-12);
            prop_assert!(max_abs(&(a.adjoint().to_dense() - a.to_dense().adjoint())) < 1e-15);
        }
    }
}
