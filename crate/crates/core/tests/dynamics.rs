use eki_core::diagnostics::{record_step, Quantity};
use eki_core::ensemble::{run, run_with_frame, RunConfig};
use eki_core::idealized::{
    closed_form_projected_misfit, idealized_cov_step, idealized_misfit_map, lowner_gap_monte_carlo,
    run_idealized, IdealizedCov, IdealizedParticle, NoisePairing,
};
use eki_core::linops::spectral_norm;
use eki_core::subspaces::{misfit_contraction, misfit_contraction_constant};
use eki_core::{
    generate, spd_from_dense, DMatrix, DVector, Ensemble, Frame, LinearObserver, ProblemInstance,
    ProblemSpec,
};

fn default_problem() -> ProblemInstance {
    generate(&ProblemSpec::default()).unwrap()
}

fn scalar_observer() -> LinearObserver {
    LinearObserver::new(
        DMatrix::from_element(1, 1, 1.0),
        spd_from_dense(DMatrix::from_element(1, 1, 1.0)).unwrap(),
    )
    .unwrap()
}

#[test]
fn initial_record_of_scalar_example() {
    // v = {0, 2}, y = 1, H = Σ = 1: θ = {−1, 1}, v* = 1, ω = {−1, 1}.
    let obs = scalar_observer();
    let ens = Ensemble::new(DMatrix::from_row_slice(1, 2, &[0.0, 2.0])).unwrap();
    let y = DVector::from_element(1, 1.0);
    let frame = Frame::from_initial(&ens, &obs, &y).unwrap();
    let rec = record_step(&ens, &obs, &y, &frame).unwrap();
    assert_eq!(rec.iter, 0);
    for (got, want) in rec.p_theta.iter().zip([1.0, 1.0]) {
        assert!((got - want).abs() < 1e-14);
    }
    for (got, want) in rec.p_omega.iter().zip([1.0, 1.0]) {
        assert!((got - want).abs() < 1e-14);
    }
    assert!(rec
        .q_theta
        .iter()
        .chain(&rec.n_theta)
        .all(|x| x.abs() < 1e-14));
    // HΓHᵀ = 2, so δ = 2.
    assert!((rec.eigenvalues[0] - 2.0).abs() < 1e-14);
}

#[test]
fn particles_at_the_solution_have_zero_residual() {
    let inst = generate(&ProblemSpec {
        noise_on_data: false,
        ..ProblemSpec::default()
    })
    .unwrap();
    let frame = Frame::from_initial(&inst.ens0, &inst.obs, &inst.y).unwrap();
    let at_solution = Ensemble::new(DMatrix::from_fn(12, 3, |i, _| inst.vstar[i])).unwrap();
    let rec = record_step(&at_solution, &inst.obs, &inst.y, &frame).unwrap();
    let theta = inst.obs.h() * &inst.vstar - &inst.y;
    let want = (&frame.obs_proj.p * &theta).norm();
    for j in 0..3 {
        assert_eq!(rec.p_omega[j], 0.0);
        assert_eq!(rec.q_omega[j], 0.0);
        assert_eq!(rec.n_omega[j], 0.0);
        assert!((rec.p_theta[j] - want).abs() < 1e-14);
    }
}

#[test]
fn q_component_constant_at_fifty() {
    let inst = default_problem();
    let (_, trace) = run(
        &inst.ens0,
        &inst.obs,
        &inst.y,
        &RunConfig::deterministic(50),
    )
    .unwrap();
    assert_eq!(trace.len(), 51);
    for (a, b) in trace.records[50]
        .q_theta
        .iter()
        .zip(&trace.records[0].q_theta)
    {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn trace_norms_are_finite_and_nonnegative() {
    let inst = default_problem();
    let (_, trace) = run(
        &inst.ens0,
        &inst.obs,
        &inst.y,
        &RunConfig::stochastic(30, 1),
    )
    .unwrap();
    for rec in &trace.records {
        for q in Quantity::ALL {
            assert!(rec.get(q).iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }
}

#[test]
fn same_seed_same_stochastic_trace() {
    let inst = default_problem();
    let a = run(
        &inst.ens0,
        &inst.obs,
        &inst.y,
        &RunConfig::stochastic(40, 9),
    )
    .unwrap()
    .1;
    let b = run(
        &inst.ens0,
        &inst.obs,
        &inst.y,
        &RunConfig::stochastic(40, 9),
    )
    .unwrap()
    .1;
    let c = run(
        &inst.ens0,
        &inst.obs,
        &inst.y,
        &RunConfig::stochastic(40, 10),
    )
    .unwrap()
    .1;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn covariance_recursions_agree() {
    let inst = default_problem();
    let mut cov = IdealizedCov::from_ensemble(&inst.ens0, &inst.obs).unwrap();
    for _ in 0..1000 {
        cov = idealized_cov_step(&cov, &inst.obs).unwrap();
        let hgh = inst.obs.h() * &cov.g * inst.obs.h().transpose();
        assert!((&cov.c - hgh).norm() < 1e-9 * (1.0 + cov.c.norm()));
    }
}

#[test]
fn idealized_misfit_map_tends_to_identity_like_one_over_i() {
    let inst = default_problem();
    let frame = Frame::from_initial(&inst.ens0, &inst.obs, &inst.y).unwrap();
    let mut cov = IdealizedCov::from_ensemble(&inst.ens0, &inst.obs).unwrap();
    let n = inst.obs.n();
    let mut scaled = Vec::new();
    for i in 1..=1000usize {
        cov = idealized_cov_step(&cov, &inst.obs).unwrap();
        if [10, 100, 1000].contains(&i) {
            let m = idealized_misfit_map(&cov, &inst.obs).unwrap();
            let gap = spectral_norm(&((m - DMatrix::<f64>::identity(n, n)) * &frame.obs_proj.p));
            scaled.push(gap * i as f64);
        }
    }
    // i·‖(ℳ̃ᵢ − I)𝒫̃‖ stays bounded and settles.
    assert!(scaled.iter().all(|s| *s < 10.0));
    assert!((scaled[2] - scaled[1]).abs() < 0.2 * scaled[1]);
}

#[test]
fn closed_form_at_zero_and_without_noise() {
    let inst = default_problem();
    let frame = Frame::from_initial(&inst.ens0, &inst.obs, &inst.y).unwrap();
    let v0 = inst.ens0.particles().column(1).into_owned();
    let p = IdealizedParticle::from_particle(&v0, &inst.obs, &inst.y, &frame.vstar);
    let b = &frame.obs_basis;
    let at0 = closed_form_projected_misfit(b, &b.delta0, &p.theta, &[], 0).unwrap();
    assert!((&at0 - &frame.obs_proj.p * &p.theta).norm() < 1e-12);

    let zeros = vec![DVector::zeros(inst.obs.n()); 100];
    let a = closed_form_projected_misfit(b, &b.delta0, &p.theta, &zeros, 10).unwrap();
    let c = closed_form_projected_misfit(b, &b.delta0, &p.theta, &zeros, 100).unwrap();
    // Without forcing each coefficient decays like c_ℓ/(i + c_ℓ) ~ 1/i.
    let ratio = 100.0 * c.norm() / (10.0 * a.norm());
    assert!((0.9..1.5).contains(&ratio), "{ratio}");
    assert!(closed_form_projected_misfit(b, &b.delta0, &p.theta, &zeros[..3], 4).is_err());
}

#[test]
fn paired_idealized_run_matches_first_stochastic_step() {
    // C₀ = HΓ₀Hᵀ, so with shared noise the first idealized step equals the
    // first stochastic step.
    let inst = default_problem();
    let frame = Frame::from_initial(&inst.ens0, &inst.obs, &inst.y).unwrap();
    let config = RunConfig::stochastic(1, 77);
    let (_, true_trace) = run_with_frame(&inst.ens0, &inst.obs, &inst.y, &config, &frame).unwrap();
    let paired = run_idealized(
        &inst.ens0,
        &inst.obs,
        &inst.y,
        &frame,
        1,
        77,
        NoisePairing::Paired,
    )
    .unwrap();
    let fresh = run_idealized(
        &inst.ens0,
        &inst.obs,
        &inst.y,
        &frame,
        1,
        77,
        NoisePairing::Fresh,
    )
    .unwrap();
    for (a, b) in true_trace.records[1]
        .p_theta
        .iter()
        .zip(&paired.records[1].p_theta)
    {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(true_trace.records[1]
        .p_theta
        .iter()
        .zip(&fresh.records[1].p_theta)
        .any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn lowner_gap_vanishes_at_zero() {
    let inst = default_problem();
    let s = lowner_gap_monte_carlo(&inst.ens0, &inst.obs, &inst.y, 0, 30, 1).unwrap();
    assert!(s.min_eigenvalue.abs() < 1e-14 && s.trace_gap.abs() < 1e-13);
}

#[test]
fn lowner_gap_scalar_problem() {
    let obs = scalar_observer();
    let ens = Ensemble::new(DMatrix::from_fn(1, 40, |_, j| {
        (j as f64 * 0.37).sin() * 2.0
    }))
    .unwrap();
    let y = DVector::from_element(1, 0.3);
    let s = lowner_gap_monte_carlo(&ens, &obs, &y, 5, 1000, 4).unwrap();
    assert!(s.min_eigenvalue >= -3.0 * s.std_error, "{s:?}");
    assert!(s.whitened_trace_c <= 1.0 / 5.0);
}

#[test]
fn contraction_product_below_constant_over_root_i() {
    for delta0 in [0.1, 1.0, 10.0] {
        let k = misfit_contraction_constant(delta0);
        for i in [1usize, 2, 5, 10, 100, 1000, 10_000] {
            assert!(
                misfit_contraction(delta0, i) < k / (i as f64).sqrt(),
                "δ₀={delta0}, i={i}"
            );
        }
    }
}
