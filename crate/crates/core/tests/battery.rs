use eki_core::diagnostics::{invariant_battery_with_frame, Tolerances};
use eki_core::ensemble::Variant;
use eki_core::{generate, BatteryInput, DMatrix, Frame, ProblemInstance, ProblemSpec};

fn default_problem() -> ProblemInstance {
    generate(&ProblemSpec::default()).unwrap()
}

fn input(inst: &ProblemInstance, variant: Variant, iters: usize) -> BatteryInput<'_> {
    BatteryInput {
        obs: &inst.obs,
        y: &inst.y,
        ens0: &inst.ens0,
        variant,
        iters,
        seed: 3,
    }
}

#[test]
fn deterministic_hundred_iterations_pass() {
    let inst = default_problem();
    let report = eki_core::invariant_battery(
        &input(&inst, Variant::Deterministic, 100),
        &Tolerances::default(),
    );
    assert!(
        report.passed(),
        "{:#?}",
        report.failures().collect::<Vec<_>>()
    );
    assert!(report.get("eigenvector_constancy").unwrap().asserted);
    assert!(report.get("monotone_p_weighted").unwrap().pass);
}

#[test]
fn corrupted_projector_fails_complementarity() {
    let inst = default_problem();
    let mut frame = Frame::from_initial(&inst.ens0, &inst.obs, &inst.y).unwrap();
    let n = frame.obs_proj.dim();
    frame.obs_proj.p += DMatrix::<f64>::identity(n, n) * 0.01;
    let report = invariant_battery_with_frame(
        &input(&inst, Variant::Deterministic, 0),
        &frame,
        &Tolerances::default(),
    );
    assert!(!report.passed());
    assert!(!report.get("obs_projector_complementarity").unwrap().pass);
}

#[test]
fn stochastic_small_ensemble_marks_eigenvectors_not_applicable() {
    let inst = default_problem();
    let report = eki_core::invariant_battery(
        &input(&inst, Variant::Stochastic, 50),
        &Tolerances::default(),
    );
    let c = report.get("eigenvector_constancy").unwrap();
    assert!(c.measured.is_none() && !c.asserted);
    assert_eq!(c.note.as_deref(), Some("not applicable (stochastic)"));
    // Q-components stay put even for true stochastic runs.
    assert!(report.get("constant_q_theta").unwrap().pass);
    assert!(report.get("constant_q_omega").unwrap().pass);
    assert!(!report.get("constant_n_omega").unwrap().asserted);
    assert!(
        report.passed(),
        "{:#?}",
        report.failures().collect::<Vec<_>>()
    );
}

#[test]
fn idealized_battery_passes() {
    let inst = default_problem();
    let report = eki_core::invariant_battery(
        &input(&inst, Variant::IdealizedStochastic, 300),
        &Tolerances::default(),
    );
    assert!(
        report.passed(),
        "{:#?}",
        report.failures().collect::<Vec<_>>()
    );
    assert!(report.get("idealized_cg_consistency").is_some());
}

#[test]
fn absurd_tolerance_fails() {
    let inst = default_problem();
    let report = eki_core::invariant_battery(
        &input(&inst, Variant::Deterministic, 5),
        &Tolerances::uniform(1e-30),
    );
    assert!(!report.passed());
}

#[test]
fn deterministic_long_run_keeps_unpopulated_components() {
    let inst = default_problem();
    let report = eki_core::invariant_battery(
        &input(&inst, Variant::Deterministic, 2000),
        &Tolerances::default(),
    );
    for name in [
        "constant_q_theta",
        "constant_n_theta",
        "constant_q_omega",
        "constant_n_omega",
    ] {
        assert!(report.get(name).unwrap().pass, "{name}");
    }
}
