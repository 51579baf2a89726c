//! Idealized stochastic iterations.
//!
//! The random covariance update of stochastic EKI is replaced by its
//! conditional expectation, giving deterministic covariance recursions
//!
//! ```text
//! C_{i+1} = Σ − Σ(C_i + Σ)⁻¹Σ        (observation space, C₀ = HΓ₀Hᵀ)
//! G_{i+1} = (I + G_iHᵀΣ⁻¹H)⁻¹ G_i    (state space, G₀ = Γ₀)
//! ```
//!
//! Individual particles keep their stochastic forcing:
//! `θ̃ ← M̃θ̃ + (I − M̃)ε` with `M̃ = Σ(C + Σ)⁻¹`, and
//! `ω̃ ← M̃ω̃ + K̃ε` with `K̃ = GHᵀ(HGHᵀ + Σ)⁻¹`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{record_from_vectors, Frame, RunTrace};
use crate::ensemble::{eki_step_stochastic, empirical_stats, Ensemble, NoiseDraw, Variant};
use crate::error::{dim_check, EkiError, Result};
use crate::linops::{symmetric_part, LinearObserver};
use crate::rng::{rng_from_seed, split_seed, FRESH_NOISE_STREAM};
use crate::subspaces::ObservationBasis;

/// The pair `(C_i, G_i)`.
#[derive(Debug, Clone)]
pub struct IdealizedCov {
    pub c: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub iteration: usize,
}

impl IdealizedCov {
    /// Starts from `C₀ = HΓ₀Hᵀ`, `G₀ = Γ₀`.
    pub fn from_ensemble(ens: &Ensemble, obs: &LinearObserver) -> Result<Self> {
        let stats = empirical_stats(ens, obs)?;
        Ok(Self {
            c: stats.obs_cov,
            g: stats.cov,
            iteration: 0,
        })
    }

    pub fn new(c: DMatrix<f64>, g: DMatrix<f64>) -> Self {
        Self { c, g, iteration: 0 }
    }

    fn check(&self, obs: &LinearObserver) -> Result<()> {
        dim_check(
            self.c.nrows() == obs.n()
                && self.c.ncols() == obs.n()
                && self.g.nrows() == obs.d()
                && self.g.ncols() == obs.d(),
            || "idealized covariances do not match the observer".into(),
        )
    }
}

fn spd_cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EkiError::SolveFailure(format!(
            "{what} has non-finite entries"
        )));
    }
    Cholesky::new(m)
        .ok_or_else(|| EkiError::SolveFailure(format!("{what} is not positive definite")))
}

/// One step of both covariance recursions.
pub fn idealized_cov_step(cov: &IdealizedCov, obs: &LinearObserver) -> Result<IdealizedCov> {
    cov.check(obs)?;
    let sigma = obs.sigma().matrix();

    // C(C + Σ)⁻¹Σ, symmetrized.
    let chol = spd_cholesky(&cov.c + sigma, "C + Σ")?;
    let c_next = symmetric_part(&(&cov.c * chol.solve(sigma)));

    // (I + G HᵀΣ⁻¹H)⁻¹ G, symmetrized.
    let d = obs.d();
    let lhs = DMatrix::identity(d, d) + &cov.g * obs.normal_matrix();
    let g_next = lhs
        .lu()
        .solve(&cov.g)
        .ok_or_else(|| EkiError::SolveFailure("I + GHᵀΣ⁻¹H is singular".into()))?;
    let g_next = symmetric_part(&g_next);

    if c_next.iter().chain(g_next.iter()).any(|v| !v.is_finite()) {
        return Err(EkiError::SolveFailure(
            "idealized covariance became non-finite".into(),
        ));
    }
    Ok(IdealizedCov {
        c: c_next,
        g: g_next,
        iteration: cov.iteration + 1,
    })
}

/// `M̃ = Σ(C + Σ)⁻¹`.
pub fn idealized_misfit_map(cov: &IdealizedCov, obs: &LinearObserver) -> Result<DMatrix<f64>> {
    cov.check(obs)?;
    let sigma = obs.sigma().matrix();
    let chol = spd_cholesky(&cov.c + sigma, "C + Σ")?;
    // (C + Σ)⁻¹Σ is the transpose of Σ(C + Σ)⁻¹.
    Ok(chol.solve(sigma).transpose())
}

/// `𝕄̃ = (I + GHᵀΣ⁻¹H)⁻¹`.
pub fn idealized_residual_map(cov: &IdealizedCov, obs: &LinearObserver) -> Result<DMatrix<f64>> {
    cov.check(obs)?;
    let d = obs.d();
    let lhs = DMatrix::identity(d, d) + &cov.g * obs.normal_matrix();
    lhs.try_inverse()
        .ok_or_else(|| EkiError::SolveFailure("I + GHᵀΣ⁻¹H is singular".into()))
}

/// `K̃ = GHᵀ(HGHᵀ + Σ)⁻¹`.
pub fn idealized_gain(cov: &IdealizedCov, obs: &LinearObserver) -> Result<DMatrix<f64>> {
    cov.check(obs)?;
    let gh = &cov.g * obs.h().transpose();
    let s = symmetric_part(&(obs.h() * &gh)) + obs.sigma().matrix();
    let chol = spd_cholesky(s, "HGHᵀ + Σ")?;
    Ok(chol.solve(&gh.transpose()).transpose())
}

/// Idealized misfit `θ̃` and residual `ω̃` of one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealizedParticle {
    pub theta: DVector<f64>,
    pub omega: DVector<f64>,
}

impl IdealizedParticle {
    /// `θ̃₀ = Hv₀ − y`, `ω̃₀ = v₀ − v*`.
    pub fn from_particle(
        v: &DVector<f64>,
        obs: &LinearObserver,
        y: &DVector<f64>,
        vstar: &DVector<f64>,
    ) -> Self {
        Self {
            theta: obs.h() * v - y,
            omega: v - vstar,
        }
    }
}

fn check_eps(eps: &DVector<f64>, obs: &LinearObserver) -> Result<()> {
    dim_check(eps.len() == obs.n(), || {
        format!("ε has length {}, expected {}", eps.len(), obs.n())
    })
}

/// `θ̃ ← M̃θ̃ + (I − M̃)ε`; `ω̃` is left untouched.
pub fn idealized_misfit_step(
    p: &IdealizedParticle,
    cov: &IdealizedCov,
    obs: &LinearObserver,
    eps: &DVector<f64>,
) -> Result<IdealizedParticle> {
    check_eps(eps, obs)?;
    let m = idealized_misfit_map(cov, obs)?;
    let theta = &m * (&p.theta - eps) + eps;
    Ok(IdealizedParticle {
        theta,
        omega: p.omega.clone(),
    })
}

/// `ω̃ ← 𝕄̃ω̃ + K̃ε`; `θ̃` is left untouched.
pub fn idealized_residual_step(
    p: &IdealizedParticle,
    cov: &IdealizedCov,
    obs: &LinearObserver,
    eps: &DVector<f64>,
) -> Result<IdealizedParticle> {
    check_eps(eps, obs)?;
    let m = idealized_residual_map(cov, obs)?;
    let k = idealized_gain(cov, obs)?;
    Ok(IdealizedParticle {
        theta: p.theta.clone(),
        omega: m * &p.omega + k * eps,
    })
}

/// The maps `M̃_i`, `𝕄̃_i`, `K̃_i` for `i = 0..len`, precomputed once since
/// they do not depend on the noise.
#[derive(Debug, Clone)]
pub struct IdealizedSchedule {
    pub misfit_maps: Vec<DMatrix<f64>>,
    pub residual_maps: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    /// `C_0 ..= C_len`.
    pub c: Vec<DMatrix<f64>>,
}

impl IdealizedSchedule {
    pub fn new(cov0: &IdealizedCov, obs: &LinearObserver, len: usize) -> Result<Self> {
        let mut misfit_maps = Vec::with_capacity(len);
        let mut residual_maps = Vec::with_capacity(len);
        let mut gains = Vec::with_capacity(len);
        let mut c = Vec::with_capacity(len + 1);
        let mut cov = cov0.clone();
        c.push(cov.c.clone());
        for _ in 0..len {
            misfit_maps.push(idealized_misfit_map(&cov, obs)?);
            residual_maps.push(idealized_residual_map(&cov, obs)?);
            gains.push(idealized_gain(&cov, obs)?);
            cov = idealized_cov_step(&cov, obs)?;
            c.push(cov.c.clone());
        }
        Ok(Self {
            misfit_maps,
            residual_maps,
            gains,
            c,
        })
    }

    pub fn len(&self) -> usize {
        self.misfit_maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.misfit_maps.is_empty()
    }

    /// Advances `p` through step `i` with forcing `eps`.
    pub fn step(&self, i: usize, p: &mut IdealizedParticle, eps: &DVector<f64>) {
        let m = &self.misfit_maps[i];
        p.theta = m * (&p.theta - eps) + eps;
        p.omega = &self.residual_maps[i] * &p.omega + &self.gains[i] * eps;
    }
}

/// Closed form of `𝒫̃θ̃ᵢ` with `c_ℓ = 1/δ̃_{ℓ,0}`:
///
/// `Σ_ℓ c_ℓ/(i+c_ℓ) Σw_ℓw_ℓᵀ 𝒫̃θ̃₀ + Σ_ℓ 1/(i+c_ℓ) Σw_ℓw_ℓᵀ Σ_{k<i} ε_k`.
pub fn closed_form_projected_misfit(
    basis: &ObservationBasis,
    delta0: &DVector<f64>,
    theta0: &DVector<f64>,
    eps_history: &[DVector<f64>],
    i: usize,
) -> Result<DVector<f64>> {
    let n = basis.n();
    dim_check(theta0.len() == n && delta0.len() >= basis.r, || {
        "θ̃₀ or δ₀ does not match the basis".into()
    })?;
    if eps_history.len() < i {
        return Err(EkiError::InvalidArgument(format!(
            "need {i} noise vectors, got {}",
            eps_history.len()
        )));
    }
    let mut eps_sum = DVector::zeros(n);
    for e in &eps_history[..i] {
        dim_check(e.len() == n, || "noise vector has the wrong length".into())?;
        eps_sum += e;
    }
    let fi = i as f64;
    let mut out = DVector::zeros(n);
    for l in 0..basis.r {
        let w = basis.w.column(l);
        let sw = basis.sigma_w.column(l);
        let c = 1.0 / delta0[l];
        let coef = c / (fi + c) * w.dot(theta0) + w.dot(&eps_sum) / (fi + c);
        out.axpy(coef, &sw, 1.0);
    }
    Ok(out)
}

/// How idealized particles obtain their forcing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePairing {
    /// Same draws as a stochastic run with the same seed.
    Paired,
    /// An independent stream derived from the seed.
    Fresh,
}

impl NoisePairing {
    pub fn seed_for(&self, seed: u64) -> u64 {
        match self {
            NoisePairing::Paired => seed,
            NoisePairing::Fresh => split_seed(seed, FRESH_NOISE_STREAM),
        }
    }
}

/// Runs the idealized iteration for every particle of `ens0`, recording
/// projected norms of `θ̃` and `ω̃` against `frame`.
///
/// With [`NoisePairing::Paired`], particle `j` at iteration `i` receives the
/// same `ε` as in [`crate::ensemble::run`] with the same seed.
pub fn run_idealized(
    ens0: &Ensemble,
    obs: &LinearObserver,
    y: &DVector<f64>,
    frame: &Frame,
    iters: usize,
    seed: u64,
    pairing: NoisePairing,
) -> Result<RunTrace> {
    if iters < 1 {
        return Err(EkiError::InvalidArgument("iters must be at least 1".into()));
    }
    let j = ens0.size();
    let mut cov = IdealizedCov::from_ensemble(ens0, obs)?;
    let mut particles: Vec<IdealizedParticle> = ens0
        .particles()
        .column_iter()
        .map(|v| IdealizedParticle::from_particle(&v.into_owned(), obs, y, &frame.vstar))
        .collect();
    let mut rng = rng_from_seed(pairing.seed_for(seed));
    let mut trace = RunTrace::new(Variant::IdealizedStochastic);
    trace.push(idealized_record(0, &particles, &cov.c, frame));
    for i in 0..iters {
        let noise = NoiseDraw::sample(obs.sigma(), j, seed, &mut rng);
        let m = idealized_misfit_map(&cov, obs)?;
        let mm = idealized_residual_map(&cov, obs)?;
        let k = idealized_gain(&cov, obs)?;
        for (p, eps) in particles.iter_mut().zip(noise.eps.column_iter()) {
            p.theta = &m * (&p.theta - eps) + eps;
            p.omega = &mm * &p.omega + &k * eps;
        }
        cov = idealized_cov_step(&cov, obs)?;
        trace.push(idealized_record(i + 1, &particles, &cov.c, frame));
    }
    Ok(trace)
}

fn idealized_record(
    iter: usize,
    particles: &[IdealizedParticle],
    c: &DMatrix<f64>,
    frame: &Frame,
) -> crate::diagnostics::TraceRecord {
    let thetas = DMatrix::from_columns(
        &particles
            .iter()
            .map(|p| p.theta.clone())
            .collect::<Vec<_>>(),
    );
    let omegas = DMatrix::from_columns(
        &particles
            .iter()
            .map(|p| p.omega.clone())
            .collect::<Vec<_>>(),
    );
    record_from_vectors(iter, &thetas, &omegas, c, frame)
}

/// Sample means of `‖𝒫̃θ̃ᵢ‖²` and `‖ℙ̃ω̃ᵢ‖²` at given iterations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanSquarePoint {
    pub iteration: usize,
    /// One entry per particle.
    pub p_theta_sq: Vec<f64>,
    pub p_omega_sq: Vec<f64>,
    /// Largest drift of `𝒬̃θ̃`, `𝒩̃θ̃`, `ℚ̃ω̃`, `ℕ̃ω̃` from iteration 0 over all
    /// replications and particles.
    pub max_constant_drift: f64,
}

/// Replicates the idealized iteration with independent noise streams
/// `split_seed(seed, rep)` and averages squared projected norms.
///
/// Replications run in parallel; the reduction is a pairwise sum in
/// replication order, so results do not depend on the thread count.
pub fn mean_square_decay(
    ens0: &Ensemble,
    obs: &LinearObserver,
    y: &DVector<f64>,
    frame: &Frame,
    checkpoints: &[usize],
    replications: usize,
    seed: u64,
) -> Result<Vec<MeanSquarePoint>> {
    if replications == 0 || checkpoints.is_empty() {
        return Err(EkiError::InvalidArgument(
            "need at least one replication and one checkpoint".into(),
        ));
    }
    let horizon = *checkpoints.iter().max().expect("nonempty");
    let cov0 = IdealizedCov::from_ensemble(ens0, obs)?;
    let schedule = IdealizedSchedule::new(&cov0, obs, horizon)?;
    let j = ens0.size();
    let start: Vec<IdealizedParticle> = ens0
        .particles()
        .column_iter()
        .map(|v| IdealizedParticle::from_particle(&v.into_owned(), obs, y, &frame.vstar))
        .collect();
    let op = &frame.obs_proj;
    let sp = &frame.state_proj;
    let fixed0: Vec<[DVector<f64>; 4]> = start
        .iter()
        .map(|p| {
            [
                &op.q * &p.theta,
                &op.n * &p.theta,
                &sp.q * &p.omega,
                &sp.n * &p.omega,
            ]
        })
        .collect();

    // Per replication: for each checkpoint, per particle (‖𝒫θ‖², ‖ℙω‖²), plus drift.
    let per_rep: Vec<(Vec<Vec<(f64, f64)>>, f64)> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let stream = split_seed(seed, rep as u64);
            let mut rng = rng_from_seed(stream);
            let mut parts = start.clone();
            let mut out = Vec::with_capacity(checkpoints.len());
            let mut drift = 0.0_f64;
            for i in 0..horizon {
                let noise = NoiseDraw::sample(obs.sigma(), j, stream, &mut rng);
                for (p, eps) in parts.iter_mut().zip(noise.eps.column_iter()) {
                    schedule.step(i, p, &eps.into_owned());
                }
                if checkpoints.contains(&(i + 1)) {
                    let vals = parts
                        .iter()
                        .map(|p| {
                            (
                                (&op.p * &p.theta).norm_squared(),
                                (&sp.p * &p.omega).norm_squared(),
                            )
                        })
                        .collect();
                    out.push(vals);
                    for (p, f) in parts.iter().zip(&fixed0) {
                        let scale = 1.0 + p.theta.norm().max(p.omega.norm());
                        let now = [
                            &op.q * &p.theta,
                            &op.n * &p.theta,
                            &sp.q * &p.omega,
                            &sp.n * &p.omega,
                        ];
                        for (a, b) in now.iter().zip(f) {
                            drift = drift.max((a - b).norm() / scale);
                        }
                    }
                }
            }
            (out, drift)
        })
        .collect();

    let mut sorted: Vec<usize> = checkpoints.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let drift = per_rep.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    let mut points = Vec::with_capacity(sorted.len());
    for (ci, &it) in sorted.iter().enumerate() {
        let mut p_theta_sq = Vec::with_capacity(j);
        let mut p_omega_sq = Vec::with_capacity(j);
        for pj in 0..j {
            let th: Vec<f64> = per_rep.iter().map(|(o, _)| o[ci][pj].0).collect();
            let om: Vec<f64> = per_rep.iter().map(|(o, _)| o[ci][pj].1).collect();
            p_theta_sq.push(pairwise_sum(&th) / replications as f64);
            p_omega_sq.push(pairwise_sum(&om) / replications as f64);
        }
        points.push(MeanSquarePoint {
            iteration: it,
            p_theta_sq,
            p_omega_sq,
            max_constant_drift: drift,
        });
    }
    Ok(points)
}

/// Pairwise (cascade) summation in index order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        len => {
            let mid = len / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

fn pairwise_sum_matrices(xs: &[DMatrix<f64>]) -> DMatrix<f64> {
    match xs.len() {
        1 => xs[0].clone(),
        len => {
            let mid = len / 2;
            pairwise_sum_matrices(&xs[..mid]) + pairwise_sum_matrices(&xs[mid..])
        }
    }
}

/// Monte Carlo estimate of the Löwner gap `C_i − E[HΓᵢHᵀ]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LownerSummary {
    pub iteration: usize,
    pub replications: usize,
    /// Smallest eigenvalue of `C_i − mean(HΓᵢHᵀ)`.
    pub min_eigenvalue: f64,
    /// Standard error of the sample mean of `vᵀHΓᵢHᵀv` along the
    /// corresponding unit eigenvector `v`.
    pub std_error: f64,
    /// `trace(C_i − mean(HΓᵢHᵀ))`.
    pub trace_gap: f64,
    /// `trace(Σ^{-1/2} C_i Σ^{-1/2})`.
    pub whitened_trace_c: f64,
    /// `‖C_i‖_F`, the scale for round-off allowances.
    pub c_norm: f64,
}

impl LownerSummary {
    /// `min_eigenvalue ≥ −(k·SE + floor·(1 + ‖C_i‖))`.
    ///
    /// The round-off floor matters in directions where both sides vanish
    /// identically (e.g. `Ker(Hᵀ)`), where the standard error is zero.
    pub fn within(&self, k_se: f64, floor: f64) -> bool {
        self.min_eigenvalue >= -(k_se * self.std_error + floor * (1.0 + self.c_norm))
    }
}

/// Runs `replications` independent stochastic EKI runs of `iteration` steps
/// from the shared ensemble `ens0` and compares the averaged `HΓᵢHᵀ` with the
/// idealized `C_i`.
pub fn lowner_gap_monte_carlo(
    ens0: &Ensemble,
    obs: &LinearObserver,
    y: &DVector<f64>,
    iteration: usize,
    replications: usize,
    seed: u64,
) -> Result<LownerSummary> {
    if replications < 30 {
        return Err(EkiError::InvalidArgument(format!(
            "Monte Carlo needs at least 30 replications, got {replications}"
        )));
    }
    let mut cov = IdealizedCov::from_ensemble(ens0, obs)?;
    for _ in 0..iteration {
        cov = idealized_cov_step(&cov, obs)?;
    }

    let samples: Vec<DMatrix<f64>> = (0..replications)
        .into_par_iter()
        .map(|rep| -> Result<DMatrix<f64>> {
            let stream = split_seed(seed, rep as u64);
            let mut rng = rng_from_seed(stream);
            let mut ens = ens0.clone();
            for _ in 0..iteration {
                let noise = NoiseDraw::sample(obs.sigma(), ens.size(), stream, &mut rng);
                ens = eki_step_stochastic(&ens, obs, y, &noise)?;
            }
            Ok(empirical_stats(&ens, obs)?.obs_cov)
        })
        .collect::<Result<Vec<_>>>()?;

    let reps = replications as f64;
    let mean = pairwise_sum_matrices(&samples) / reps;
    let gap = symmetric_part(&(&cov.c - &mean));
    let eig = SymmetricEigen::new(gap.clone());
    let (k_min, &min_eigenvalue) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("nonempty spectrum");
    let v = eig.eigenvectors.column(k_min).into_owned();
    let proj: Vec<f64> = samples.iter().map(|s| v.dot(&(s * &v))).collect();
    let proj_mean = pairwise_sum(&proj) / reps;
    let var = proj.iter().map(|x| (x - proj_mean).powi(2)).sum::<f64>() / (reps - 1.0);
    let std_error = (var / reps).sqrt();

    Ok(LownerSummary {
        iteration,
        replications,
        min_eigenvalue,
        std_error,
        trace_gap: gap.trace(),
        whitened_trace_c: obs.sigma().whitened_congruence(&cov.c).trace(),
        c_norm: cov.c.norm(),
    })
}
