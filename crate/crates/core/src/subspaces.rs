//! The six fundamental subspaces of EKI.
//!
//! Observation space `ℝⁿ` is split by a `Σ`-orthonormal eigenbasis `W` of the
//! pencil `(HΓ₀Hᵀ, Σ)`, partitioned at `(r, h)`:
//!
//! * `w₁..w_r`: positive eigenvalues (observable, populated),
//! * `w_{r+1}..w_h`: completion of `Ran(Σ⁻¹H)` (observable, unpopulated),
//! * `w_{h+1}..w_n`: a basis of `Ker(Hᵀ)` (unobservable).
//!
//! State space partners `u_ℓ` satisfy `w_ℓ = Σ⁻¹H u_ℓ`. The oblique projectors
//! built from these bases commute with the misfit and residual iteration maps
//! for every iteration, so the basis is built once and frozen.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::EnsembleStats;
use crate::error::{dim_check, EkiError, Result};
use crate::linops::{
    gen_eig_pencil_with_tol, orthonormal_complement, range_basis, sigma_orthonormal_span,
    LinearObserver, SpdMatrix,
};

#[derive(Debug, Clone)]
pub struct ObservationBasis {
    /// `n×n`, columns `w₁..w_n`, with `WᵀΣW = I`.
    pub w: DMatrix<f64>,
    /// Pencil eigenvalues at the construction iterate; zero beyond `r`.
    pub delta0: DVector<f64>,
    /// Number of positive eigenvalues.
    pub r: usize,
    /// Rank of `H`.
    pub h: usize,
    /// `ΣW`, the dual basis (`(ΣW)ᵀW = I`).
    pub sigma_w: DMatrix<f64>,
}

impl ObservationBasis {
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn populated(&self) -> DMatrix<f64> {
        self.w.columns(0, self.r).into_owned()
    }

    pub fn unpopulated(&self) -> DMatrix<f64> {
        self.w.columns(self.r, self.h - self.r).into_owned()
    }

    pub fn unobservable(&self) -> DMatrix<f64> {
        self.w.columns(self.h, self.n() - self.h).into_owned()
    }
}

/// Builds the observation basis from ensemble statistics (pencil `(HΓHᵀ, Σ)`).
pub fn build_observation_basis(
    stats: &EnsembleStats,
    obs: &LinearObserver,
) -> Result<ObservationBasis> {
    build_observation_basis_from_pencil(&stats.obs_cov, obs)
}

/// Builds the observation basis for the pencil `(a, Σ)`, where `a` is
/// `HΓHᵀ` or the idealized covariance `C`.
pub fn build_observation_basis_from_pencil(
    a: &DMatrix<f64>,
    obs: &LinearObserver,
) -> Result<ObservationBasis> {
    let n = obs.n();
    let sigma = obs.sigma();
    let eig = gen_eig_pencil_with_tol(a, sigma, obs.rank_tol())?;
    let r = eig.pos_count;
    let h = obs.rank();
    if r > h {
        return Err(EkiError::RankDeficiencyInconsistent { r, h });
    }

    let w_pop = eig.vectors.columns(0, r).into_owned();

    let (ran_h, rank) = range_basis(obs.h(), obs.rank_tol());
    debug_assert_eq!(rank, h);

    // Ran(Σ⁻¹H), deflated against the populated block in the Σ inner product.
    let mut cand = sigma.solve(&ran_h);
    if r > 0 {
        let coeffs = w_pop.transpose() * sigma.matrix() * &cand;
        cand -= &w_pop * coeffs;
    }
    let w_unpop = sigma_orthonormal_span(&cand, sigma, h - r);

    // Ker(Hᵀ) is automatically Σ-orthogonal to Ran(Σ⁻¹H).
    let ker_ht = orthonormal_complement(&ran_h);
    let w_unobs = sigma_orthonormal_span(&ker_ht, sigma, n - h);

    let mut w = DMatrix::zeros(n, n);
    w.columns_mut(0, r).copy_from(&w_pop);
    w.columns_mut(r, h - r).copy_from(&w_unpop);
    w.columns_mut(h, n - h).copy_from(&w_unobs);

    let mut delta0 = DVector::zeros(n);
    delta0.rows_mut(0, r).copy_from(&eig.values.rows(0, r));

    let sigma_w = sigma.matrix() * &w;
    Ok(ObservationBasis {
        w,
        delta0,
        r,
        h,
        sigma_w,
    })
}

/// State-space partners `u₁..u_h` of the observation eigenvectors.
#[derive(Debug, Clone)]
pub struct StateBasis {
    /// `d×h`, with `UᵀHᵀΣ⁻¹HU = I_h`.
    pub u: DMatrix<f64>,
    pub r: usize,
    pub h: usize,
}

pub fn build_state_basis(
    basis: &ObservationBasis,
    stats: &EnsembleStats,
    obs: &LinearObserver,
) -> Result<StateBasis> {
    build_state_basis_from_cov(basis, &stats.cov, obs)
}

/// `u_ℓ = Γ Hᵀ w_ℓ / δ_ℓ` for `ℓ ≤ r`, `u_ℓ = H⁺ Σ w_ℓ` for `r < ℓ ≤ h`.
pub fn build_state_basis_from_cov(
    basis: &ObservationBasis,
    cov: &DMatrix<f64>,
    obs: &LinearObserver,
) -> Result<StateBasis> {
    let d = obs.d();
    dim_check(cov.nrows() == d && cov.ncols() == d, || {
        format!(
            "covariance is {}x{}, expected {d}x{d}",
            cov.nrows(),
            cov.ncols()
        )
    })?;
    dim_check(basis.n() == obs.n(), || {
        "basis and observer disagree on n".into()
    })?;
    let (r, h) = (basis.r, basis.h);
    let mut u = DMatrix::zeros(d, h);
    if r > 0 {
        let gh = cov * obs.h().transpose();
        let pop = &gh * basis.populated();
        for l in 0..r {
            u.set_column(l, &(pop.column(l) / basis.delta0[l]));
        }
    }
    if h > r {
        // H⁺Σw = (HᵀΣ⁻¹H)† Hᵀ w
        let completion = obs.normal_pinv() * (obs.h().transpose() * basis.unpopulated());
        u.columns_mut(r, h - r).copy_from(&completion);
    }
    Ok(StateBasis { u, r, h })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Observation,
    State,
}

/// Three complementary oblique projectors for one space.
#[derive(Debug, Clone)]
pub struct ProjectorSet {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub space: Space,
}

/// Frobenius residuals of the projector identities.
#[derive(Debug, Clone, Copy)]
pub struct ProjectorResiduals {
    /// `max ‖X² − X‖` over `X ∈ {P, Q, N}`.
    pub idempotency: f64,
    /// `max ‖XY‖` over ordered pairs of distinct projectors.
    pub annihilation: f64,
    /// `‖P + Q + N − I‖`.
    pub complementarity: f64,
}

impl ProjectorResiduals {
    pub fn max(&self) -> f64 {
        self.idempotency
            .max(self.annihilation)
            .max(self.complementarity)
    }
}

impl ProjectorSet {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn residuals(&self) -> ProjectorResiduals {
        let all = [&self.p, &self.q, &self.n];
        let idempotency = all
            .iter()
            .map(|x| (*x * *x - *x).norm())
            .fold(0.0, f64::max);
        let mut annihilation = 0.0_f64;
        for (a, x) in all.iter().enumerate() {
            for (b, y) in all.iter().enumerate() {
                if a != b {
                    annihilation = annihilation.max((*x * *y).norm());
                }
            }
        }
        let dim = self.dim();
        let complementarity =
            (&self.p + &self.q + &self.n - DMatrix::<f64>::identity(dim, dim)).norm();
        ProjectorResiduals {
            idempotency,
            annihilation,
            complementarity,
        }
    }

    /// `(‖Pv‖, ‖Qv‖, ‖Nv‖)` in the Euclidean norm.
    pub fn component_norms(&self, v: &DVector<f64>) -> (f64, f64, f64) {
        (
            (&self.p * v).norm(),
            (&self.q * v).norm(),
            (&self.n * v).norm(),
        )
    }
}

fn sigma_outer(sigma: &SpdMatrix, block: &DMatrix<f64>) -> DMatrix<f64> {
    if block.ncols() == 0 {
        let n = sigma.dim();
        return DMatrix::zeros(n, n);
    }
    sigma.matrix() * block * block.transpose()
}

/// `𝒫 = ΣW_{1:r}W_{1:r}ᵀ`, `𝒬 = ΣW_{r+1:h}W_{r+1:h}ᵀ`, `𝒩 = ΣW_{h+1:n}W_{h+1:n}ᵀ`.
pub fn observation_projectors(basis: &ObservationBasis, sigma: &SpdMatrix) -> ProjectorSet {
    ProjectorSet {
        p: sigma_outer(sigma, &basis.populated()),
        q: sigma_outer(sigma, &basis.unpopulated()),
        n: sigma_outer(sigma, &basis.unobservable()),
        space: Space::Observation,
    }
}

/// `ℙ = U_{1:r}U_{1:r}ᵀHᵀΣ⁻¹H`, `ℚ = U_{r+1:h}U_{r+1:h}ᵀHᵀΣ⁻¹H`, `ℕ = I − ℙ − ℚ`.
pub fn state_projectors(sbasis: &StateBasis, obs: &LinearObserver) -> ProjectorSet {
    let d = obs.d();
    let normal = obs.normal_matrix();
    let block = |start: usize, count: usize| -> DMatrix<f64> {
        if count == 0 {
            return DMatrix::zeros(d, d);
        }
        let u = sbasis.u.columns(start, count);
        u * (u.transpose() * normal)
    };
    let p = block(0, sbasis.r);
    let q = block(sbasis.r, sbasis.h - sbasis.r);
    let n = DMatrix::identity(d, d) - &p - &q;
    ProjectorSet {
        p,
        q,
        n,
        space: Space::State,
    }
}

/// Deterministic eigenvalue recurrence `δ ← δ/(1+δ)²` applied `i` times.
pub fn predict_eigenvalues_deterministic(delta0: &DVector<f64>, i: usize) -> DVector<f64> {
    delta0.map(|d0| {
        let mut d = d0;
        for _ in 0..i {
            if d == 0.0 {
                break;
            }
            d /= (1.0 + d) * (1.0 + d);
        }
        d
    })
}

/// Closed form `δᵢ = 1/(1/δ₀ + i)` of the idealized recurrence `δ ← δ/(1+δ)`.
pub fn predict_eigenvalues_stochastic(delta0: &DVector<f64>, i: usize) -> DVector<f64> {
    delta0.map(|d0| {
        if d0 > 0.0 {
            1.0 / (1.0 / d0 + i as f64)
        } else {
            0.0
        }
    })
}

/// Bounds `1/(2i) − (c + log i)/(8i²) < δᵢ < 1/(2i)` with `c = 2(1/δ₀ + δ₀ + 1)`.
pub fn eigenvalue_bounds_deterministic(delta0: f64, i: usize) -> Result<(f64, f64)> {
    if !(delta0 > 0.0) || i < 1 {
        return Err(EkiError::InvalidArgument(format!(
            "bounds need δ₀ > 0 and i ≥ 1, got δ₀ = {delta0}, i = {i}"
        )));
    }
    let c = 2.0 * (1.0 / delta0 + delta0 + 1.0);
    let fi = i as f64;
    let upper = 1.0 / (2.0 * fi);
    let lower = upper - (c + fi.ln()) / (8.0 * fi * fi);
    Ok((lower, upper))
}

/// `d_i = Π_{k=0}^{i} (1 + δ_k)⁻¹` under the deterministic recurrence.
pub fn misfit_contraction(delta0: f64, i: usize) -> f64 {
    let mut d = delta0;
    let mut prod = 1.0;
    for _ in 0..=i {
        prod /= 1.0 + d;
        d /= (1.0 + d) * (1.0 + d);
    }
    prod
}

/// Constant `K` with `misfit_contraction(δ₀, i) < K/√i` for all `i ≥ 1`.
///
/// `K = exp(c_∞)/(1 + δ₀)`, where `c_∞` sums the correction terms of the
/// eigenvalue lower bound. The series is summed to `10⁶` terms and the tail
/// is bounded by `(c + 2 + log N)/(8N)`, so `K` errs on the large side.
pub fn misfit_contraction_constant(delta0: f64) -> f64 {
    const TERMS: usize = 1_000_000;
    let c = 2.0 * (1.0 / delta0 + delta0 + 1.0);
    let mut sum = 0.0;
    for k in 1..=TERMS {
        let fk = k as f64;
        let corr = (c + fk.ln()) / (8.0 * fk * fk);
        let gap = 1.0 / (2.0 * fk) - corr;
        sum += corr + 0.5 * gap * gap;
    }
    let big = TERMS as f64;
    sum += (c + 2.0 + big.ln()) / (8.0 * big);
    sum.exp() / (1.0 + delta0)
}
