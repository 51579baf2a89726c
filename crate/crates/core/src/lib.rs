//! Ensemble Kalman inversion for linear forward maps.
//!
//! Deterministic and stochastic EKI, the idealized stochastic iteration, and
//! diagnostics that split particle misfits and residuals into the six
//! fundamental subspaces (observable populated, observable unpopulated and
//! unobservable, in observation and state space).
//!
//! ```
//! use eki_core::{generate, run, ProblemSpec, RunConfig};
//!
//! let inst = generate(&ProblemSpec::default()).unwrap();
//! let (ens, trace) = run(&inst.ens0, &inst.obs, &inst.y, &RunConfig::deterministic(50)).unwrap();
//! assert_eq!(trace.len(), 51);
//! assert_eq!(ens.iteration(), 50);
//! ```

pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod idealized;
pub mod linops;
pub mod problems;
pub mod rng;
pub mod subspaces;

pub use diagnostics::{
    fit_rate, fit_series, invariant_battery, record_step, BatteryInput, Check, Frame, NormKind,
    Quantity, RateFit, Report, RunTrace, Tolerances, TraceRecord,
};
pub use ensemble::{
    eki_step_deterministic, eki_step_stochastic, empirical_stats, kalman_gain, run, run_with_frame,
    Ensemble, EnsembleStats, NoiseDraw, RunConfig, Variant,
};
pub use error::{EkiError, Result};
pub use idealized::{
    closed_form_projected_misfit, lowner_gap_monte_carlo, run_idealized, IdealizedCov,
    IdealizedParticle, LownerSummary, NoisePairing,
};
pub use linops::{
    gen_eig_pencil, spd_from_dense, weighted_pseudoinverse_apply, LinearObserver, SpdMatrix,
};
pub use problems::{generate, ProblemInstance, ProblemSpec};
pub use subspaces::{
    build_observation_basis, build_state_basis, observation_projectors, state_projectors,
    ObservationBasis, ProjectorSet, StateBasis,
};

pub use nalgebra::{DMatrix, DVector};
