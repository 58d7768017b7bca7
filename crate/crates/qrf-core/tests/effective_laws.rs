use std::sync::Arc;

use num::complex::Complex64;
use qrf_core::effective::*;
use qrf_core::ncalg::{AlgebraElement, Coef, GeneratorSet, GeneratorSetBuilder};

fn mom(g: &Arc<GeneratorSet>, parts: &[(usize, u16)]) -> Poly {
    let mut n = vec![0u16; g.len()];
    for &(i, e) in parts {
        n[i] += e;
    }
    Poly::moment(&n)
}

fn e(i: usize) -> Poly {
    Poly::expect(i)
}

fn c(n: i64, d: i64) -> Coef {
    Coef::ratio(n, d)
}

/// `iℏ·x`
fn i_hbar(x: Coef) -> Poly {
    Poly::hbar(2).scale(&x.mul_i())
}

fn tower_entry<'a>(t: &'a [(String, MomentFunction)], name: &str) -> &'a Poly {
    t.iter().find(|(n, _)| n == name).map(|(_, f)| f.poly()).unwrap()
}

struct Ideal {
    g: Arc<GeneratorSet>,
    qr: usize,
    pr: usize,
    qs: usize,
    ps: usize,
    c: AlgebraElement,
}

/// `Ĉ = p̂_R + p̂_S²/2`.
fn ideal() -> Ideal {
    let mut b = GeneratorSetBuilder::new();
    let (qr, pr) = b.canonical_pair("q_R", "p_R");
    let (qs, ps) = b.canonical_pair("q_S", "p_S");
    let g = b.build().unwrap();
    let y = |i| AlgebraElement::generator(&g, i);
    let c = &y(pr) + &(&y(ps) * &y(ps)).scale(&c(1, 2));
    Ideal { g, qr, pr, qs, ps, c }
}

#[test]
fn ideal_tower_has_the_i_hbar_half_term() {
    let m = ideal();
    let t = constraint_tower(&m.c, 2);
    let g = &m.g;
    // ⟨Ĉ⟩ = G_S + p_R with G_S expanded to second order
    let gs = &(&e(m.ps) * &e(m.ps)).scale(&c(1, 2)) + &mom(g, &[(m.ps, 2)]).scale(&c(1, 2));
    assert_eq!(tower_entry(&t, "C"), &(&e(m.pr) + &gs));
    assert_eq!(tower_entry(&t, "C_p_R"), &(&mom(g, &[(m.pr, 2)]) + &(&e(m.ps) * &mom(g, &[(m.pr, 1), (m.ps, 1)]))));
    let cq = &(&mom(g, &[(m.qr, 1), (m.pr, 1)]) + &(&e(m.ps) * &mom(g, &[(m.qr, 1), (m.ps, 1)]))) + &i_hbar(c(1, 2));
    assert_eq!(tower_entry(&t, "C_q_R"), &cq);
    // ½⟨[q̂_S, Ĝ_S]⟩ = (iℏ/2) p_S
    let cqs = &(&mom(g, &[(m.pr, 1), (m.qs, 1)]) + &(&e(m.ps) * &mom(g, &[(m.qs, 1), (m.ps, 1)]))) + &(&i_hbar(c(1, 2)) * &e(m.ps));
    assert_eq!(tower_entry(&t, "C_q_S"), &cqs);
}

#[test]
fn zero_system_generator_leaves_frame_conditions() {
    let mut b = GeneratorSetBuilder::new();
    let (q, p) = b.canonical_pair("q_R", "p_R");
    let g = b.build().unwrap();
    let t = constraint_tower(&AlgebraElement::generator(&g, p), 2);
    assert_eq!(tower_entry(&t, "C"), &e(p));
    assert_eq!(tower_entry(&t, "C_p_R"), &mom(&g, &[(p, 2)]));
    assert_eq!(tower_entry(&t, "C_q_R"), &(&mom(&g, &[(q, 1), (p, 1)]) + &i_hbar(c(1, 2))));
}

#[test]
fn gauge_fixing_gives_minus_i_hbar_half() {
    let m = ideal();
    let sol = fix_frame_gauge(&m.c, FrameVars { q: m.qr, p: m.pr }, 2).unwrap();
    let n = {
        let mut n = vec![0; m.g.len()];
        n[m.qr] = 1;
        n[m.pr] = 1;
        n
    };
    assert_eq!(sol.value_of(&Var::Moment(n)).unwrap().poly(), &i_hbar(c(-1, 2)));
    // p_R is eliminated as −⟨Ĝ_S⟩
    let gs = &(&e(m.ps) * &e(m.ps)).scale(&c(-1, 2)) + &mom(&m.g, &[(m.ps, 2)]).scale(&c(-1, 2));
    assert_eq!(sol.value_of(&Var::Expect(m.pr)).unwrap().poly(), &gs);
}

#[test]
fn gauge_solution_rejects_over_order_requests() {
    let m = ideal();
    let sol = fix_frame_gauge(&m.c, FrameVars { q: m.qr, p: m.pr }, 2).unwrap();
    let mut n = vec![0; m.g.len()];
    n[m.pr] = 3;
    assert!(matches!(sol.value_of(&Var::Moment(n)), Err(EffectiveError::InsufficientTower { .. })));
}

#[test]
fn constraint_without_frame_momentum_is_rejected() {
    let m = ideal();
    let y = |i| AlgebraElement::generator(&m.g, i);
    let bad = &y(m.pr) + &(&y(m.qr) * &y(m.ps));
    assert!(matches!(fix_frame_gauge(&bad, FrameVars { q: m.qr, p: m.pr }, 2), Err(EffectiveError::NotIdealConstraint(_))));
}

#[test]
fn gauge_fixed_surface_satisfies_tower_and_c_qr_generates_no_flow() {
    let m = ideal();
    let sol = fix_frame_gauge(&m.c, FrameVars { q: m.qr, p: m.pr }, 2).unwrap();
    let mut s = MomentState::new(&m.g, 2, 0.05);
    s.set_expectation(m.qs, Complex64::new(0.4, 0.0));
    s.set_expectation(m.ps, Complex64::new(-0.3, 0.0));
    s.set_moment(&[0, 0, 2, 0], Complex64::new(0.03, 0.0));
    s.set_moment(&[0, 0, 1, 1], Complex64::new(0.004, 0.0));
    s.set_moment(&[0, 0, 0, 2], Complex64::new(0.02, 0.0));
    sol.apply(&mut s, 0.25).unwrap();
    for (name, f) in constraint_tower(&m.c, 2) {
        assert!(s.evaluate(&f).unwrap().norm() < 1e-14, "{name}");
    }
    let t = constraint_tower(&m.c, 2);
    let cq = &t.iter().find(|(n, _)| n == "C_q_R").unwrap().1;
    let flowed = constraint_flow(&s, cq, 0.3, 30).unwrap();
    assert!(flowed.max_deviation(&s) < 1e-12);
}

struct Newton {
    g: Arc<GeneratorSet>,
    t: usize,
    pc: usize,
    qs: usize,
    ps: usize,
    c: AlgebraElement,
}

fn newton() -> Newton {
    let mut b = GeneratorSetBuilder::new();
    let (t, pc) = b.canonical_pair("t", "p_C");
    let (qs, ps) = b.canonical_pair("q_S", "p_S");
    let g = b.build().unwrap();
    let y = |i| AlgebraElement::generator(&g, i);
    let c = &y(pc) + &(&y(ps) * &y(ps)).scale(&c(1, 2));
    Newton { g, t, pc, qs, ps, c }
}

#[test]
fn newtonian_constraint_expectation() {
    let m = newton();
    let ch = expect_expand_sym(&m.c, 2);
    let expected = &(&e(m.pc) + &(&e(m.ps) * &e(m.ps)).scale(&c(1, 2))) + &mom(&m.g, &[(m.ps, 2)]).scale(&c(1, 2));
    assert_eq!(ch.poly(), &expected);
}

#[test]
fn newtonian_relational_position() {
    let m = newton();
    let alg = DeltaAlgebra::new(&m.g);
    let tau = Poly::param("tau");
    let o = dirac_series(&alg, &m.c, FrameVars { q: m.t, p: m.pc }, &tau, m.qs, 2).unwrap();
    // q_S − (t_C − τ) p_S − Δ(t_C p_S)
    let classical = &e(m.qs) - &(&(&e(m.t) - &tau) * &e(m.ps));
    let full = &classical - &mom(&m.g, &[(m.t, 1), (m.ps, 1)]);
    assert_eq!(o.expect(2), full);
    assert_eq!(o.expect(0), classical);
    assert_eq!(o.expect(0).truncate(0), full.truncate(0));
}

#[test]
fn truncated_newtonian_observable_commutes_with_truncated_constraint() {
    let m = newton();
    let alg = DeltaAlgebra::new(&m.g);
    let o = dirac_series(&alg, &m.c, FrameVars { q: m.t, p: m.pc }, &Poly::param("tau"), m.qs, 2).unwrap();
    let ch = expect_expand_sym(&m.c, 2);
    for order in [0, 2] {
        let of = MomentFunction::new(&m.g, o.expect(order));
        let b = poisson_bracket(&of, &ch.truncate(order)).unwrap().truncate(order);
        assert!(b.is_zero(), "order {order}: {b}");
    }
    // untruncated pair commutes as well
    let of = MomentFunction::new(&m.g, o.expect(2));
    assert!(poisson_bracket(&of, &ch).unwrap().is_zero());
}

#[test]
fn flow_by_constraint_advances_clock_and_keeps_gauge() {
    let m = newton();
    let frame = FrameVars { q: m.t, p: m.pc };
    let sol = fix_frame_gauge(&m.c, frame, 2).unwrap();
    let mut s = MomentState::new(&m.g, 2, 0.1);
    s.set_expectation(m.qs, Complex64::new(0.3, 0.0));
    s.set_expectation(m.ps, Complex64::new(0.7, 0.0));
    s.set_moment(&[0, 0, 2, 0], Complex64::new(0.05, 0.0));
    s.set_moment(&[0, 0, 1, 1], Complex64::new(0.01, 0.0));
    s.set_moment(&[0, 0, 0, 2], Complex64::new(0.06, 0.0));
    sol.apply(&mut s, 0.2).unwrap();
    let ch = expect_expand_sym(&m.c, 2);
    let out = constraint_flow(&s, &ch, 0.5, 50).unwrap();
    assert!((out.expectation(m.t).unwrap() - 0.7).norm() < 1e-12);
    assert!(sol.residual(&out, 0.7).unwrap() < 1e-8);
    // the relational position is constant along the flow
    let alg = DeltaAlgebra::new(&m.g);
    let o = dirac_series(&alg, &m.c, frame, &Poly::param("tau"), m.qs, 2).unwrap();
    let of = MomentFunction::new(&m.g, o.expect(2));
    let mut a = s.clone();
    a.set_param("tau", Complex64::new(1.1, 0.0));
    let mut b = out.clone();
    b.set_param("tau", Complex64::new(1.1, 0.0));
    assert!((a.evaluate(&of).unwrap() - b.evaluate(&of).unwrap()).norm() < 1e-8);
    assert_eq!(constraint_flow(&s, &ch, 0.0, 10).unwrap(), s);
}

struct Particles {
    g: Arc<GeneratorSet>,
    q: Vec<usize>,
    p: Vec<usize>,
    c: AlgebraElement,
}

/// `Ĉ = Σ p̂_i` for `n` free particles.
fn particles(n: usize) -> Particles {
    let mut b = GeneratorSetBuilder::new();
    let names = ["A", "B", "C", "D"];
    let (mut q, mut p) = (Vec::new(), Vec::new());
    for name in &names[..n] {
        let (qi, pi) = b.canonical_pair(&format!("q_{name}"), &format!("p_{name}"));
        q.push(qi);
        p.push(pi);
    }
    let g = b.build().unwrap();
    let mut c = AlgebraElement::zero(&g);
    for &pi in &p {
        c = &c + &AlgebraElement::generator(&g, pi);
    }
    Particles { g, q, p, c }
}

#[test]
fn three_particle_frame_change_laws() {
    let m = particles(3);
    let (a, b, cc) = (0, 1, 2);
    let fc = FrameChange { constraint: m.c.clone(), from: FrameVars { q: m.q[b], p: m.p[b] }, to: FrameVars { q: m.q[a], p: m.p[a] } };
    let map = frame_change_map(&fc, 2).unwrap();
    let g = &m.g;
    let rho_a = Poly::param("rho_q_A");
    let rho_b = Poly::param("rho_q_B");
    let v = |var: Var| map.value_of(&var).unwrap().poly().clone();
    assert_eq!(v(Var::Expect(m.q[b])), &(&rho_b + &rho_a) - &e(m.q[a]));
    assert_eq!(v(Var::Expect(m.p[b])), &(-&e(m.p[a])) - &e(m.p[cc]));
    let var_c = &(&mom(g, &[(m.q[cc], 2)]) + &mom(g, &[(m.q[a], 2)])) - &mom(g, &[(m.q[a], 1), (m.q[cc], 1)]).scale(&c(2, 1));
    let n_var_c = {
        let mut n = vec![0; g.len()];
        n[m.q[cc]] = 2;
        n
    };
    assert_eq!(v(Var::Moment(n_var_c)), var_c);
    let mut n_bc = vec![0; g.len()];
    n_bc[m.q[b]] = 1;
    n_bc[m.q[cc]] = 1;
    assert_eq!(v(Var::Moment(n_bc)), &mom(g, &[(m.q[a], 2)]) - &mom(g, &[(m.q[a], 1), (m.q[cc], 1)]));
}

#[test]
fn four_particle_general_covariance_law() {
    let m = particles(4);
    let (a, b, cc, d) = (0, 1, 2, 3);
    let fc = FrameChange { constraint: m.c.clone(), from: FrameVars { q: m.q[d], p: m.p[d] }, to: FrameVars { q: m.q[a], p: m.p[a] } };
    let g = &m.g;
    let map = frame_change_map(&fc, 2).unwrap();
    let mut n_bc = vec![0; g.len()];
    n_bc[m.q[b]] = 1;
    n_bc[m.q[cc]] = 1;
    let expected = &(&(&mom(g, &[(m.q[b], 1), (m.q[cc], 1)]) + &mom(g, &[(m.q[a], 2)])) - &mom(g, &[(m.q[a], 1), (m.q[b], 1)]))
        - &mom(g, &[(m.q[a], 1), (m.q[cc], 1)]);
    assert_eq!(map.value_of(&Var::Moment(n_bc)).unwrap().poly(), &expected);
}

#[test]
fn commuting_observable_has_frame_independent_uncertainty() {
    let m = particles(3);
    let fc = FrameChange { constraint: m.c.clone(), from: FrameVars { q: m.q[1], p: m.p[1] }, to: FrameVars { q: m.q[0], p: m.p[0] } };
    let pc = AlgebraElement::generator(&m.g, m.p[2]);
    assert_eq!(transform_uncertainty(&fc, &pc, 2).unwrap().poly(), &mom(&m.g, &[(m.p[2], 2)]));
}

#[test]
fn same_frame_round_trip_is_identity() {
    let m = particles(3);
    let f = FrameVars { q: m.q[0], p: m.p[0] };
    let fc = FrameChange { constraint: m.c.clone(), from: f, to: f };
    let sol = fix_frame_gauge(&m.c, f, 2).unwrap();
    let mut s = MomentState::new(&m.g, 2, 0.2);
    let vals = [0.3, -0.2, 0.5, 0.1];
    for (k, &i) in [m.q[1], m.p[1], m.q[2], m.p[2]].iter().enumerate() {
        s.set_expectation(i, Complex64::new(vals[k], 0.0));
    }
    let sys = [m.q[1], m.p[1], m.q[2], m.p[2]];
    for n in multi_indices(m.g.len(), &sys, 2, 2) {
        let w = 0.01 * (1 + n.iter().enumerate().map(|(i, &x)| i * x as usize).sum::<usize>()) as f64;
        s.set_moment(&n, Complex64::new(w, 0.0));
    }
    s.set_moment(&{
        let mut n = vec![0; 6];
        n[m.q[1]] = 1;
        n[m.p[1]] = 1;
        n
    }, Complex64::new(0.02, 0.0));
    sol.apply(&mut s, 0.4).unwrap();
    let out = effective_frame_transform(&s, &fc, 0.4, 0.4, 2).unwrap();
    assert!(out.max_deviation(&s) < 1e-14);
    assert_eq!(out.variables().len(), s.variables().len());
}

struct Spin {
    g: Arc<GeneratorSet>,
    qa: usize,
    pa: usize,
    qb: usize,
    pb: usize,
    jx: usize,
    jy: usize,
    c: AlgebraElement,
}

/// `Ĉ = p̂_A + p̂_B − β Ĵ_z` with integer `β`.
fn spin(beta: i64) -> Spin {
    let mut b = GeneratorSetBuilder::new();
    let (qa, pa) = b.canonical_pair("q_A", "p_A");
    let (qb, pb) = b.canonical_pair("q_B", "p_B");
    let [jx, jy, jz] = b.su2("J_x", "J_y", "J_z");
    let g = b.build().unwrap();
    let y = |i| AlgebraElement::generator(&g, i);
    let c = &(&y(pa) + &y(pb)) - &y(jz).scale(&Coef::int(beta));
    Spin { g, qa, pa, qb, pb, jx, jy, c }
}

#[test]
fn spin_relational_jx_to_second_order() {
    for beta in [1i64, 2] {
        let m = spin(beta);
        let fc = FrameChange { constraint: m.c.clone(), from: FrameVars { q: m.qb, p: m.pb }, to: FrameVars { q: m.qa, p: m.pa } };
        let jx = AlgebraElement::generator(&m.g, m.jx);
        let got = transform_expectation(&fc, &jx, 2).unwrap();
        let bt = Coef::int(beta);
        let theta = (&e(m.qa) - &Poly::param("rho_q_A")).scale(&bt);
        let (cos, sin) = (Poly::trig(false, theta.clone()), Poly::trig(true, theta));
        let o = &(&cos * &e(m.jx)) - &(&sin * &e(m.jy));
        let var_a = mom(&m.g, &[(m.qa, 2)]);
        let expected = &(&(&o - &(&sin * &mom(&m.g, &[(m.qa, 1), (m.jx, 1)])).scale(&bt)) - &(&cos * &mom(&m.g, &[(m.qa, 1), (m.jy, 1)])).scale(&bt))
            - &(&o * &var_a).scale(&(&bt * &bt)).scale(&c(1, 2));
        assert_eq!(got.poly(), &expected, "beta = {beta}");
    }
}

#[test]
fn spin_covariance_q_b_jx() {
    let m = spin(1);
    let fc = FrameChange { constraint: m.c.clone(), from: FrameVars { q: m.qb, p: m.pb }, to: FrameVars { q: m.qa, p: m.pa } };
    let map = frame_change_map(&fc, 2).unwrap();
    let mut n = vec![0; m.g.len()];
    n[m.qb] = 1;
    n[m.jx] = 1;
    let got = map.value_of(&Var::Moment(n)).unwrap().poly().clone();
    let theta = &e(m.qa) - &Poly::param("rho_q_A");
    let (cos, sin) = (Poly::trig(false, theta.clone()), Poly::trig(true, theta));
    let cov_x = mom(&m.g, &[(m.qa, 1), (m.jx, 1)]);
    let cov_y = mom(&m.g, &[(m.qa, 1), (m.jy, 1)]);
    let var_a = mom(&m.g, &[(m.qa, 2)]);
    let bracket = &(&sin * &e(m.jx)) + &(&cos * &e(m.jy));
    let head = &(&sin * &cov_y) - &(&cos * &cov_x);
    // The (Δq_A)² term enters with unit weight.
    assert_eq!(got, &head + &(&bracket * &var_a));
    assert_ne!(got, &head + &(&bracket * &var_a).scale(&c(1, 2)));
    // B = A: imposing the A-gauge conditions on the right-hand side
    let zero = Poly::zero();
    let fixed = got
        .substitute(&Var::Moment(vec![1, 0, 0, 0, 1, 0, 0]), &zero)
        .substitute(&Var::Moment(vec![1, 0, 0, 0, 0, 1, 0]), &zero)
        .substitute(&Var::Moment(vec![2, 0, 0, 0, 0, 0, 0]), &zero);
    assert!(fixed.is_zero());
}

#[test]
fn degenerate_tower_and_branches() {
    let mut b = GeneratorSetBuilder::new();
    let (qr, pr) = b.canonical_pair("q_R", "p_R");
    let h = b.generator("H");
    let g = b.build().unwrap();
    let r = FrameVars { q: qr, p: pr };
    let t = degenerate_tower(&g, r, h);
    let vp = mom(&g, &[(pr, 2)]);
    let vh = mom(&g, &[(h, 2)]);
    let cph = mom(&g, &[(pr, 1), (h, 1)]);
    assert_eq!(tower_entry(&t, "C"), &(&(&(&e(pr) * &e(pr)) - &(&e(h) * &e(h))) + &(&vp - &vh)));
    assert_eq!(tower_entry(&t, "C_p_R"), &(&(&e(pr) * &vp) - &(&e(h) * &cph)).scale(&Coef::int(2)));
    assert_eq!(tower_entry(&t, "C_H"), &(&(&e(pr) * &cph) - &(&e(h) * &vh)).scale(&Coef::int(2)));
    let branches = degenerate_solve(&g, r, h, 2.0).unwrap();
    for br in &branches {
        let s = Coef::int(br.sign as i64);
        assert_eq!(br.p_r.poly(), &e(h).scale(&s));
        assert_eq!(br.var_p.poly(), &vh);
        assert_eq!(br.cov_ph.poly(), &vh.scale(&s));
        assert_eq!(&factor_tower_solution(&g, r, h, br.sign).unwrap(), br);
    }
    assert!(matches!(degenerate_solve(&g, r, h, 1e-9), Err(EffectiveError::NearZeroEnergy(_))));
}

#[test]
fn square_root_expansion() {
    let (h, var) = sqrt_moments(4.0, 0.16).unwrap();
    assert!((h - (2.0 - 0.16 / 64.0)).abs() < 1e-15);
    assert!((var - 0.01).abs() < 1e-15);
    assert!(sqrt_moments(0.0, 0.1).is_err());
}

#[test]
fn bracket_examples() {
    let mut b = GeneratorSetBuilder::new();
    let (q, p) = b.canonical_pair("q", "p");
    let (q2, p2) = b.canonical_pair("q2", "p2");
    let g = b.build().unwrap();
    let ex = |i| MomentFunction::expect(&g, i);
    assert_eq!(poisson_bracket(&ex(q), &ex(p)).unwrap().poly(), &Poly::one());
    assert!(poisson_bracket(&ex(q), &ex(p2)).unwrap().is_zero());
    assert!(poisson_bracket(&ex(q2), &ex(p2)).unwrap() == MomentFunction::new(&g, Poly::one()));
    assert!(poisson_bracket(&MomentFunction::variance(&g, q), &ex(p)).unwrap().is_zero());
    let vv = poisson_bracket(&MomentFunction::variance(&g, q), &MomentFunction::variance(&g, p)).unwrap();
    assert_eq!(vv.poly(), &mom(&g, &[(q, 1), (p, 1)]).scale(&Coef::int(4)));
    // {Δ(q³), Δ(p³)} = 9Δ(q²p²) − 9(Δq)²(Δp)² − (3/2)ℏ²
    let n3 = |i: usize| {
        let mut n = vec![0u16; 4];
        n[i] = 3;
        MomentFunction::moment(&g, &n)
    };
    let got = poisson_bracket(&n3(q), &n3(p)).unwrap();
    let expected = &(&mom(&g, &[(q, 2), (p, 2)]).scale(&Coef::int(9)) - &(&mom(&g, &[(q, 2)]) * &mom(&g, &[(p, 2)])).scale(&Coef::int(9)))
        - &Poly::hbar(4).scale(&c(3, 2));
    assert_eq!(got.poly(), &expected);
}

#[test]
fn truncation_is_linear_and_idempotent() {
    let g = ideal().g;
    let prod = &mom(&g, &[(0, 2)]) * &mom(&g, &[(1, 2)]);
    assert!(prod.truncate(2).is_zero());
    let f = &e(0) + &(&mom(&g, &[(0, 2)]) + &prod);
    assert_eq!(f.truncate(2).truncate(2), f.truncate(2));
    assert_eq!((&f + &f).truncate(3), &f.truncate(3) + &f.truncate(3));
    let k = MomentFunction::new(&g, Poly::var(Var::Class("K".into())));
    assert!(k.truncate(1).is_zero());
    assert!(!k.truncate(2).is_zero());
}

#[test]
fn classical_constraint_elimination_counts_at_order_two() {
    let m = newton();
    // p_C = K − p_S²/2 with K of order two
    let c_class = &e(m.pc) + &(&e(m.ps) * &e(m.ps)).scale(&c(1, 2));
    let f = MomentFunction::new(&m.g, &e(m.pc) * &e(m.ps));
    let out = f.with_class_order(&Var::Expect(m.pc), &c_class, "K").unwrap();
    assert_eq!(out.truncate(0).poly(), &(&(&e(m.ps) * &e(m.ps)) * &e(m.ps)).scale(&c(-1, 2)));
    assert_eq!(out.truncate(2).poly().terms().len(), 2);
}

#[test]
fn moment_table_csv() {
    let m = ideal();
    let mut s = MomentState::new(&m.g, 2, 1.0);
    s.set_expectation(m.qs, Complex64::new(0.5, 0.0));
    s.set_moment(&[0, 0, 2, 0], Complex64::new(0.25, 0.0));
    s.set_moment(&[0, 0, 1, 0], Complex64::new(9.0, 0.0));
    s.set_moment(&[0, 0, 3, 0], Complex64::new(9.0, 0.0));
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variable,order,value_re,value_im");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("(Δq_S)^2,2,"));
}

#[test]
fn moments_of_momentum_eigenstate_and_gaussian() {
    use qrf_core::kinspace::{momentum_operator, tensor_space, FactorSpec};
    use qrf_core::relobs::{position_operator, OrientationFrame};
    let hbar = 1.0;
    let n = 64;
    let dp = 2.0 * std::f64::consts::PI / n as f64;
    let space = tensor_space(vec![FactorSpec::frame("x", n, dp)], hbar).unwrap();
    let mut b = GeneratorSetBuilder::new();
    let (q, p) = b.canonical_pair("q", "p");
    let g = b.build().unwrap();
    let qop = position_operator(&space, 0).unwrap();
    let pop = momentum_operator(&space, 0).unwrap();
    let ops = [Some(&qop), Some(&pop)];
    let mut eig = qrf_core::kinspace::CVec::zeros(n);
    eig[5] = Complex64::new(1.0, 0.0);
    let s = moments_from_operators(&eig, &g, &ops, hbar, 2);
    assert!(s.variance(p).unwrap().norm() < 1e-14);
    // a lattice Gaussian centred in the orientation grid
    let frame = OrientationFrame::new(&space, 0).unwrap();
    let mut amp = qrf_core::kinspace::CVec::zeros(n);
    for (j, rho) in frame.grid().into_iter().enumerate() {
        amp[j] = Complex64::new((-(rho * rho) / (2.0 * 3.0f64.powi(2))).exp(), 0.0);
    }
    let psi = frame.from_orientation(&amp);
    let s = moments_from_operators(&psi, &g, &ops, hbar, 2);
    let prod = s.variance(q).unwrap().re * s.variance(p).unwrap().re;
    assert!(prod >= hbar * hbar / 4.0 - 1e-9, "{prod}");
}
