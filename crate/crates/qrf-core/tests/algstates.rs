use num::complex::Complex64;
use qrf_core::algstates::{
    check_almost_positive, check_almost_positive_hilbert, check_constraint_surface, check_frame_gauge, transform_frame,
    verify_reference_frame, AlgStateError, AlgebraicState, FramePair,
};
use qrf_core::kinspace::CVec;
use qrf_core::models::{build_model, random_observable, Model, ModelKind, ModelSpec};
use qrf_core::ncalg::{represent, AlgebraElement, Coef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(kind: ModelKind, lattice: usize) -> Model {
    build_model(&ModelSpec { lattice, ..ModelSpec::new(kind) }).unwrap()
}

/// Random state supported where the unfolded constraint vanishes, so it is
/// annihilated by the algebraic constraint as well as the folded one.
fn raw_kernel_state(m: &Model, rng: &mut impl Rng) -> CVec {
    let v = CVec::from_fn(m.space.dim, |i, _| {
        if m.constraint.raw_units[i] == 0 {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let n = v.norm();
    v / Complex64::new(n, 0.0)
}

#[test]
fn hilbert_states_match_dense_representations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model(ModelKind::Su2, 6);
    let bra = m.random_kinematical(&mut rng);
    let ket = m.random_kinematical(&mut rng);
    let omega = AlgebraicState::from_hilbert(bra.clone(), ket.clone(), &m.space, m.assignment.clone(), 3).unwrap();
    let all: Vec<usize> = (0..m.gens.len()).collect();
    for _ in 0..20 {
        let f = random_observable(&m.gens, &all, &mut rng, 3);
        let oracle = represent(&f, &m.space, &m.assignment).matrix_element(&bra, &ket) / bra.dotc(&ket);
        let got = omega.evaluate(&f).unwrap();
        assert!((got - oracle).norm() < 1e-9 * oracle.norm().max(1.0), "{got} vs {oracle}");
    }
    let too_high = AlgebraElement::generator(&m.gens, 0).pow(4).unwrap();
    assert!(matches!(omega.evaluate(&too_high), Err(AlgStateError::DegreeExceeded { .. })));
    let zero = CVec::zeros(m.space.dim);
    assert!(matches!(
        AlgebraicState::from_hilbert(zero, ket, &m.space, m.assignment.clone(), 1),
        Err(AlgStateError::Unnormalizable)
    ));
}

#[test]
fn frame_states_satisfy_constraint_and_gauge_conditions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in [model(ModelKind::NParticle, 4), model(ModelKind::Su2, 6), model(ModelKind::Newtonian, 6)] {
        let psi = raw_kernel_state(&m, &mut rng);
        for fg in &m.frames {
            let rho = fg.frame.rho(2);
            let omega = AlgebraicState::frame_state(&m.space, &m.constraint, &fg.frame, rho, &psi, m.assignment.clone(), 3).unwrap();
            assert!(check_constraint_surface(&omega, &m.c_alg).unwrap() < 1e-10, "{}", m.label());
            assert!(check_frame_gauge(&omega, fg.q, rho).unwrap() < 1e-10, "{}", m.label());
            assert!(omega.value(&vec![0; m.gens.len()]).re > 0.0);
            let wrong = check_frame_gauge(&omega, fg.q, fg.frame.rho(3)).unwrap();
            assert!(wrong > 1e-3, "{}: gauge check is not selective", m.label());
        }
    }
    let m = model(ModelKind::NParticle, 4);
    let kin = m.random_kinematical(&mut rng);
    let fr = &m.frames[0].frame;
    assert!(matches!(
        AlgebraicState::frame_state(&m.space, &m.constraint, fr, 0.0, &kin, m.assignment.clone(), 1),
        Err(AlgStateError::NotPhysical(_))
    ));
}

#[test]
fn reference_frame_conditions_are_selective() {
    let m = model(ModelKind::Newtonian, 6);
    let q_c = AlgebraElement::generator(&m.gens, 0);
    let q_s = AlgebraElement::generator(&m.gens, 2);
    let report = verify_reference_frame(&q_c, &m.c_alg, 2).unwrap();
    assert!(report.passes(), "{report:?}");
    assert!(report.commutant_dim > 0);
    let report = verify_reference_frame(&q_s, &m.c_alg, 2).unwrap();
    assert!(!report.canonical_commutator && !report.passes());
    let scaled = q_c.scale(&Coef::int(2));
    assert!(!verify_reference_frame(&scaled, &m.c_alg, 2).unwrap().canonical_commutator);
}

#[test]
fn positivity_holds_for_vector_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = model(ModelKind::Su2, 6);
    let psi = m.random_kinematical(&mut rng);
    let omega = AlgebraicState::from_hilbert(psi.clone(), psi, &m.space, m.assignment.clone(), 2).unwrap();
    // The lattice q and p are not exactly canonical, so the table-based Gram
    // form is only hermitian on the su(2) generators.
    let mut basis = vec![AlgebraElement::monomial(&m.gens, vec![0; m.gens.len()], 0, Coef::one())];
    basis.extend(m.lie_generators().into_iter().map(|g| AlgebraElement::generator(&m.gens, g)));
    let table = check_almost_positive(&omega, &basis).unwrap();
    let hilbert = check_almost_positive_hilbert(&omega, &basis).unwrap();
    assert!(table.positive() && hilbert.positive(), "{table:?} {hilbert:?}");
    assert!((table.min_eigenvalue - hilbert.min_eigenvalue).abs() < 1e-9);
}

#[test]
fn frame_change_matches_the_target_perspective() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for m in [model(ModelKind::NParticle, 32), model(ModelKind::Su2, 24)] {
        let recipe = m.random_recipe(&mut rng);
        let psi = m.physical(&m.recipe_state(&recipe)).unwrap();
        let (a, b) = (&m.frames[0], &m.frames[1]);
        let pair = FramePair { space: &m.space, constraint: &m.constraint, c_alg: &m.c_alg, from: b, to: a };
        let (rho_a, rho_b) = (a.frame.rho(m.spec.lattice / 2), b.frame.rho(m.spec.lattice / 2));
        let omega_b = AlgebraicState::frame_state(&m.space, &m.constraint, &b.frame, rho_b, &psi, m.assignment.clone(), 2).unwrap();
        let omega_a = AlgebraicState::frame_state(&m.space, &m.constraint, &a.frame, rho_a, &psi, m.assignment.clone(), 2).unwrap();
        let allowed = m.generators_off(a.frame.factor);
        for _ in 0..4 {
            let f = random_observable(&m.gens, &allowed, &mut rng, 2);
            let got = transform_frame(&omega_b, &pair, rho_a, rho_b, &f).unwrap();
            let oracle = omega_a.evaluate(&f).unwrap();
            assert!((got - oracle).norm() < 1e-8 * oracle.norm().max(1.0), "{}: {got} vs {oracle}", m.label());
        }
        let on_target = AlgebraElement::generator(&m.gens, a.q);
        assert!(matches!(transform_frame(&omega_b, &pair, rho_a, rho_b, &on_target), Err(AlgStateError::InvalidObservable(_))));
    }
}
