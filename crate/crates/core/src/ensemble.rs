//! Particle ensembles and the basic EKI update.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{record_step, Frame, RunTrace};
use crate::error::{dim_check, EkiError, Result};
use crate::linops::{LinearObserver, SpdMatrix};

/// `J` particles in `ℝᵈ` stored column-wise, plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
    iteration: usize,
}

impl Ensemble {
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        Self::at_iteration(particles, 0)
    }

    pub fn at_iteration(particles: DMatrix<f64>, iteration: usize) -> Result<Self> {
        if particles.ncols() < 2 {
            return Err(EkiError::TooFewParticles(particles.ncols()));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(EkiError::InvalidArgument(
                "ensemble contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            particles,
            iteration,
        })
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Ensemble size `J`.
    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.particles.column_mean()
    }

    fn advance(&self, particles: DMatrix<f64>) -> Result<Self> {
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(EkiError::SolveFailure(
                "update produced non-finite particles".into(),
            ));
        }
        Ok(Self {
            particles,
            iteration: self.iteration + 1,
        })
    }
}

/// Empirical statistics of an ensemble seen through an observer.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    /// `Γ`, the `d×d` particle covariance.
    pub cov: DMatrix<f64>,
    /// `H Γ Hᵀ`.
    pub obs_cov: DMatrix<f64>,
    /// `Γ Hᵀ`.
    pub cross_cov: DMatrix<f64>,
}

/// Sample mean and `1/(J−1)`-normalized covariances.
pub fn empirical_stats(ens: &Ensemble, obs: &LinearObserver) -> Result<EnsembleStats> {
    let j = ens.size();
    if j < 2 {
        return Err(EkiError::TooFewParticles(j));
    }
    dim_check(ens.dim() == obs.d(), || {
        format!(
            "ensemble dimension {} but H has {} columns",
            ens.dim(),
            obs.d()
        )
    })?;
    let mean = ens.mean();
    let mut anomalies = ens.particles().clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let scale = 1.0 / (j as f64 - 1.0);
    let obs_anomalies = obs.h() * &anomalies;
    let cov = (&anomalies * anomalies.transpose()) * scale;
    let obs_cov = (&obs_anomalies * obs_anomalies.transpose()) * scale;
    let cross_cov = (&anomalies * obs_anomalies.transpose()) * scale;
    Ok(EnsembleStats {
        mean,
        cov,
        obs_cov,
        cross_cov,
    })
}

/// `K = ΓHᵀ (HΓHᵀ + Σ)⁻¹`, via a Cholesky solve.
pub fn kalman_gain(stats: &EnsembleStats, obs: &LinearObserver) -> Result<DMatrix<f64>> {
    dim_check(
        stats.obs_cov.nrows() == obs.n() && stats.cross_cov.nrows() == obs.d(),
        || "statistics and observer dimensions disagree".into(),
    )?;
    let s = &stats.obs_cov + obs.sigma().matrix();
    let chol = Cholesky::new(s)
        .ok_or_else(|| EkiError::SolveFailure("HΓHᵀ + Σ is not positive definite".into()))?;
    // S Kᵀ = (ΓHᵀ)ᵀ
    let kt = chol.solve(&stats.cross_cov.transpose());
    Ok(kt.transpose())
}

fn check_data(ens: &Ensemble, obs: &LinearObserver, y: &DVector<f64>) -> Result<()> {
    dim_check(ens.dim() == obs.d(), || {
        format!(
            "ensemble dimension {} but H has {} columns",
            ens.dim(),
            obs.d()
        )
    })?;
    dim_check(y.len() == obs.n(), || {
        format!("y has length {}, expected {}", y.len(), obs.n())
    })
}

/// One deterministic EKI step: every particle moves by `K (y − H v)`.
pub fn eki_step_deterministic(
    ens: &Ensemble,
    obs: &LinearObserver,
    y: &DVector<f64>,
) -> Result<Ensemble> {
    check_data(ens, obs, y)?;
    let stats = empirical_stats(ens, obs)?;
    let gain = kalman_gain(&stats, obs)?;
    let mut innov = -(obs.h() * ens.particles());
    for mut col in innov.column_iter_mut() {
        col += y;
    }
    ens.advance(ens.particles() + gain * innov)
}

/// Observation perturbations `ε^{(j)} ~ N(0, Σ)` for one iteration.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    /// `n×J`, one column per particle.
    pub eps: DMatrix<f64>,
    pub stream: NoiseStream,
}

/// Where a [`NoiseDraw`] came from: the run seed and the generator's word
/// position at the start of the draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub word_pos: u128,
}

impl NoiseDraw {
    /// Draws `J` columns, particle by particle, each as `L z`.
    pub fn sample(sigma: &SpdMatrix, particles: usize, seed: u64, rng: &mut ChaCha8Rng) -> Self {
        let word_pos = rng.get_word_pos();
        let mut eps = DMatrix::zeros(sigma.dim(), particles);
        for j in 0..particles {
            eps.set_column(j, &sigma.sample(rng));
        }
        Self {
            eps,
            stream: NoiseStream { seed, word_pos },
        }
    }

    pub fn zeros(n: usize, particles: usize) -> Self {
        Self {
            eps: DMatrix::zeros(n, particles),
            stream: NoiseStream {
                seed: 0,
                word_pos: 0,
            },
        }
    }
}

/// One stochastic EKI step with perturbed observations `y + ε^{(j)}`.
pub fn eki_step_stochastic(
    ens: &Ensemble,
    obs: &LinearObserver,
    y: &DVector<f64>,
    noise: &NoiseDraw,
) -> Result<Ensemble> {
    check_data(ens, obs, y)?;
    if noise.eps.nrows() != obs.n() || noise.eps.ncols() != ens.size() {
        return Err(EkiError::NoiseDimensionMismatch {
            got_rows: noise.eps.nrows(),
            got_cols: noise.eps.ncols(),
            want_rows: obs.n(),
            want_cols: ens.size(),
        });
    }
    let stats = empirical_stats(ens, obs)?;
    let gain = kalman_gain(&stats, obs)?;
    let mut innov = &noise.eps - obs.h() * ens.particles();
    for mut col in innov.column_iter_mut() {
        col += y;
    }
    ens.advance(ens.particles() + gain * innov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Deterministic,
    Stochastic,
    IdealizedStochastic,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Deterministic => "deterministic",
            Variant::Stochastic => "stochastic",
            Variant::IdealizedStochastic => "idealized-stochastic",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = EkiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Variant::Deterministic),
            "stochastic" => Ok(Variant::Stochastic),
            "idealized-stochastic" | "idealized" => Ok(Variant::IdealizedStochastic),
            other => Err(EkiError::InvalidArgument(format!(
                "unknown variant {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunConfig {
    pub variant: Variant,
    pub max_iters: usize,
    /// Stop once `maxⱼ ‖𝒫θ⁽ʲ⁾‖ < stop_tol`; zero disables the check.
    pub stop_tol: f64,
    pub seed: u64,
}

impl RunConfig {
    pub fn deterministic(max_iters: usize) -> Self {
        Self {
            variant: Variant::Deterministic,
            max_iters,
            stop_tol: 0.0,
            seed: 0,
        }
    }

    pub fn stochastic(max_iters: usize, seed: u64) -> Self {
        Self {
            variant: Variant::Stochastic,
            max_iters,
            stop_tol: 0.0,
            seed,
        }
    }
}

/// Runs EKI from `ens0`, recording a trace against projectors frozen at
/// iteration 0.
///
/// Returns the final ensemble; callers wanting a point estimate take its mean.
pub fn run(
    ens0: &Ensemble,
    obs: &LinearObserver,
    y: &DVector<f64>,
    config: &RunConfig,
) -> Result<(Ensemble, RunTrace)> {
    let frame = Frame::from_initial(ens0, obs, y)?;
    run_with_frame(ens0, obs, y, config, &frame)
}

/// As [`run`], with a caller-supplied frame.
pub fn run_with_frame(
    ens0: &Ensemble,
    obs: &LinearObserver,
    y: &DVector<f64>,
    config: &RunConfig,
    frame: &Frame,
) -> Result<(Ensemble, RunTrace)> {
    if config.max_iters < 1 {
        return Err(EkiError::InvalidArgument(
            "max_iters must be at least 1".into(),
        ));
    }
    let stochastic = match config.variant {
        Variant::Deterministic => false,
        Variant::Stochastic => true,
        Variant::IdealizedStochastic => {
            return Err(EkiError::InvalidArgument(
                "the idealized iteration is driven by idealized::run_idealized".into(),
            ))
        }
    };
    check_data(ens0, obs, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = RunTrace::new(config.variant);
    let mut ens = ens0.clone();
    trace.push(record_step(&ens, obs, y, frame)?);
    for _ in 0..config.max_iters {
        ens = if stochastic {
            let noise = NoiseDraw::sample(obs.sigma(), ens.size(), config.seed, &mut rng);
            eki_step_stochastic(&ens, obs, y, &noise)?
        } else {
            eki_step_deterministic(&ens, obs, y)?
        };
        let rec = record_step(&ens, obs, y, frame)?;
        let worst = rec.p_theta.iter().copied().fold(0.0_f64, f64::max);
        trace.push(rec);
        if config.stop_tol > 0.0 && worst < config.stop_tol {
            break;
        }
    }
    Ok((ens, trace))
}
