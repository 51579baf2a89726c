//! Weighted dense linear algebra.
//!
//! Everything here works with a fixed SPD weight `Σ = L Lᵀ`: generalized
//! eigenproblems for pencils `(A, Σ)` are reduced by congruence to a standard
//! symmetric eigenproblem on `L⁻¹ A L⁻ᵀ`, and `Σ`-orthonormal bases are built
//! in whitened coordinates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_check, EkiError, Result};

/// Relative tolerance used for numerical rank and positive-eigenvalue counts.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Relative asymmetry accepted by [`spd_from_dense`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A symmetric positive definite matrix together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    factor: DMatrix<f64>,
}

/// Validates symmetry and factors `m = L Lᵀ`.
///
/// The stored matrix is the exact symmetric part `(m + mᵀ)/2`.
pub fn spd_from_dense(m: DMatrix<f64>) -> Result<SpdMatrix> {
    dim_check(m.is_square(), || {
        format!("SPD input must be square, got {}x{}", m.nrows(), m.ncols())
    })?;
    if m.nrows() == 0 {
        return Err(EkiError::DimensionMismatch("SPD input is empty".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EkiError::NotPositiveDefinite);
    }
    let scale = m.norm();
    let asymmetry = if scale > 0.0 {
        (&m - m.transpose()).norm() / scale
    } else {
        0.0
    };
    if asymmetry > SYMMETRY_TOL {
        return Err(EkiError::NotSymmetric { asymmetry });
    }
    let sym = symmetric_part(&m);
    let chol = Cholesky::new(sym.clone()).ok_or(EkiError::NotPositiveDefinite)?;
    let factor = chol.l();
    if factor.diagonal().iter().any(|&p| !(p > 0.0)) {
        return Err(EkiError::NotPositiveDefinite);
    }
    Ok(SpdMatrix {
        matrix: sym,
        chol,
        factor,
    })
}

impl SpdMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower-triangular `L` with `Σ = L Lᵀ`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `Σ⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `Σ⁻¹ b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ B`.
    pub fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L⁻ᵀ B`.
    pub fn unwhiten_transpose(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor
            .tr_solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Symmetric congruence `L⁻¹ A L⁻ᵀ` for symmetric `A`.
    pub fn whitened_congruence(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let left = self.whiten(a);
        symmetric_part(&self.whiten(&left.transpose()))
    }

    /// One draw from `N(0, Σ)` generated as `L z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z
    }
}

/// Linear forward map `H : ℝᵈ → ℝⁿ` with its noise covariance.
#[derive(Debug, Clone)]
pub struct LinearObserver {
    h: DMatrix<f64>,
    sigma: SpdMatrix,
    rank_h: usize,
    rank_tol: f64,
    sigma_inv_h: DMatrix<f64>,
    normal: DMatrix<f64>,
    normal_pinv: DMatrix<f64>,
}

impl LinearObserver {
    pub fn new(h: DMatrix<f64>, sigma: SpdMatrix) -> Result<Self> {
        Self::with_rank_tol(h, sigma, DEFAULT_RANK_TOL)
    }

    pub fn with_rank_tol(h: DMatrix<f64>, sigma: SpdMatrix, rank_tol: f64) -> Result<Self> {
        dim_check(h.nrows() == sigma.dim(), || {
            format!(
                "H has {} rows but Σ has dimension {}",
                h.nrows(),
                sigma.dim()
            )
        })?;
        dim_check(h.ncols() > 0, || "H has no columns".into())?;
        if !(rank_tol > 0.0 && rank_tol < 1.0) {
            return Err(EkiError::InvalidArgument(format!(
                "rank tolerance must lie in (0, 1), got {rank_tol}"
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(EkiError::InvalidArgument("H has non-finite entries".into()));
        }
        let rank_h = numerical_rank(&h, rank_tol);
        let sigma_inv_h = sigma.solve(&h);
        let normal = symmetric_part(&(h.transpose() * &sigma_inv_h));
        let normal_pinv = truncated_pinv(&normal, rank_h);
        Ok(Self {
            h,
            sigma,
            rank_h,
            rank_tol,
            sigma_inv_h,
            normal,
            normal_pinv,
        })
    }

    /// Observation dimension `n`.
    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    /// State dimension `d`.
    pub fn d(&self) -> usize {
        self.h.ncols()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn sigma(&self) -> &SpdMatrix {
        &self.sigma
    }

    /// Numerical rank `h` of the forward map.
    pub fn rank(&self) -> usize {
        self.rank_h
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    /// `Σ⁻¹ H`.
    pub fn sigma_inv_h(&self) -> &DMatrix<f64> {
        &self.sigma_inv_h
    }

    /// `Hᵀ Σ⁻¹ H`.
    pub fn normal_matrix(&self) -> &DMatrix<f64> {
        &self.normal
    }

    /// `(Hᵀ Σ⁻¹ H)†`, truncated to the top `h` eigenpairs.
    pub fn normal_pinv(&self) -> &DMatrix<f64> {
        &self.normal_pinv
    }

    /// The weighted pseudoinverse `H⁺ = (HᵀΣ⁻¹H)† HᵀΣ⁻¹` as a `d×n` matrix.
    pub fn weighted_pinv(&self) -> DMatrix<f64> {
        &self.normal_pinv * self.sigma_inv_h.transpose()
    }

    /// `‖y‖²_{Σ⁻¹}`.
    pub fn weighted_sq_norm(&self, y: &DVector<f64>) -> f64 {
        y.dot(&self.sigma.solve_vec(y))
    }
}

/// Truncated pseudoinverse of a symmetric PSD matrix keeping `rank` eigenpairs.
fn truncated_pinv(a: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    if rank == 0 {
        return out;
    }
    let (values, vectors) = sorted_symmetric_eigen(a);
    for k in 0..rank.min(n) {
        let lambda = values[k];
        if lambda > 0.0 {
            let v = vectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    symmetric_part(&out)
}

/// Minimum-norm weighted least-squares solution `v* = (HᵀΣ⁻¹H)† HᵀΣ⁻¹ y`.
pub fn weighted_pseudoinverse_apply(
    obs: &LinearObserver,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    dim_check(y.len() == obs.n(), || {
        format!("y has length {}, expected {}", y.len(), obs.n())
    })?;
    let rhs = obs.sigma_inv_h().transpose() * y;
    Ok(obs.normal_pinv() * rhs)
}

/// Result of the generalized eigenproblem `A w = δ Σ w`.
#[derive(Debug, Clone)]
pub struct GenEigResult {
    /// `Σ`-orthonormal eigenvectors, one per column.
    pub vectors: DMatrix<f64>,
    /// Nonincreasing, nonnegative eigenvalues.
    pub values: DVector<f64>,
    /// Number of eigenvalues above `rank_tol · δ₁`.
    pub pos_count: usize,
}

pub fn gen_eig_pencil(a: &DMatrix<f64>, sigma: &SpdMatrix) -> Result<GenEigResult> {
    gen_eig_pencil_with_tol(a, sigma, DEFAULT_RANK_TOL)
}

/// Solves the pencil `(A, Σ)` by congruence with the Cholesky factor of `Σ`.
pub fn gen_eig_pencil_with_tol(
    a: &DMatrix<f64>,
    sigma: &SpdMatrix,
    rank_tol: f64,
) -> Result<GenEigResult> {
    let n = sigma.dim();
    dim_check(a.nrows() == n && a.ncols() == n, || {
        format!(
            "pencil matrix is {}x{}, Σ has dimension {n}",
            a.nrows(),
            a.ncols()
        )
    })?;
    let reduced = sigma.whitened_congruence(&symmetric_part(a));
    let (mut values, q) = sorted_symmetric_eigen(&reduced);
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut vectors = sigma.unwhiten_transpose(&q);
    fix_column_signs(&mut vectors);
    let top = values.iter().copied().fold(0.0_f64, f64::max);
    let pos_count = if top > 0.0 {
        values.iter().filter(|&&v| v > rank_tol * top).count()
    } else {
        0
    };
    Ok(GenEigResult {
        vectors,
        values,
        pos_count,
    })
}

/// Singular values (largest first) and matching left singular vectors.
///
/// Solved as the symmetric eigenproblem of `[0 M; Mᵀ 0]`, whose eigenpairs
/// are `±σ` with vectors `(u; ±v)/√2`. nalgebra's bidiagonal SVD can lose
/// several digits on rank-deficient input (e.g. orthogonal projectors), while
/// its symmetric eigensolver stays backward stable there.
pub fn singular_pairs(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    let mut aug = DMatrix::zeros(rows + cols, rows + cols);
    aug.view_mut((0, rows), (rows, cols)).copy_from(m);
    aug.view_mut((rows, 0), (cols, rows))
        .copy_from(&m.transpose());
    let (values, vectors) = sorted_symmetric_eigen(&aug);
    let sv = DVector::from_iterator(k, values.iter().take(k).map(|x| x.max(0.0)));
    let mut u = vectors.view((0, 0), (rows, k)).into_owned();
    for mut col in u.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col.scale_mut(1.0 / norm);
        }
    }
    (sv, u)
}

/// Singular values, largest first.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    singular_pairs(m).0
}

/// Count of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = singular_values(m);
    let top = sv.iter().copied().fold(0.0_f64, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Symmetric eigendecomposition sorted by eigenvalue, largest first.
///
/// Equal eigenvalues keep the order produced by the solver.
pub fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetric_part(a));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Orthonormal basis of `Ran(m)` from singular vectors, plus the numerical rank.
///
/// Columns are ordered by decreasing singular value and sign-normalized.
pub fn range_basis(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let rows = m.nrows();
    if m.is_empty() {
        return (DMatrix::zeros(rows, 0), 0);
    }
    let (sv, u) = singular_pairs(m);
    let top = sv.iter().copied().fold(0.0_f64, f64::max);
    let kept = if top > 0.0 {
        sv.iter().filter(|&&s| s > rel_tol * top).count()
    } else {
        0
    };
    let mut basis = orthonormalize(u.columns(0, kept).into_owned());
    fix_column_signs(&mut basis);
    (basis, kept)
}

/// Gram-Schmidt (twice) on the columns, keeping their order.
fn orthonormalize(mut cols: DMatrix<f64>) -> DMatrix<f64> {
    for j in 0..cols.ncols() {
        for _ in 0..2 {
            for k in 0..j {
                let qk = cols.column(k).into_owned();
                let proj = qk.dot(&cols.column(j));
                cols.column_mut(j).axpy(-proj, &qk, 1.0);
            }
        }
        let norm = cols.column(j).norm();
        if norm > 0.0 {
            cols.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    cols
}

/// Orthonormal basis of the orthogonal complement of `Ran(basis)` in `ℝᵐ`.
///
/// `basis` must have orthonormal columns.
pub fn orthonormal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let m = basis.nrows();
    let k = basis.ncols();
    let proj = DMatrix::identity(m, m) - basis * basis.transpose();
    let (values, vectors) = sorted_symmetric_eigen(&proj);
    let keep = m - k;
    debug_assert!(keep == 0 || values[keep - 1] > 0.5);
    let mut out = vectors.columns(0, keep).into_owned();
    fix_column_signs(&mut out);
    out
}

/// `Σ`-orthonormal basis for the leading `count` directions of `span(candidates)`.
///
/// Works in whitened coordinates `Lᵀ c`, where the `Σ` inner product is
/// Euclidean, and maps back with `L⁻ᵀ`.
pub fn sigma_orthonormal_span(
    candidates: &DMatrix<f64>,
    sigma: &SpdMatrix,
    count: usize,
) -> DMatrix<f64> {
    let n = sigma.dim();
    if count == 0 || candidates.ncols() == 0 {
        return DMatrix::zeros(n, 0);
    }
    let whitened = sigma.factor().transpose() * candidates;
    let (sv, u) = singular_pairs(&whitened);
    let take = count.min(sv.len());
    let q = orthonormalize(u.columns(0, take).into_owned());
    let mut out = sigma.unwhiten_transpose(&q);
    sigma_mgs_pass(&mut out, sigma);
    fix_column_signs(&mut out);
    out
}

/// One modified Gram-Schmidt sweep in the `Σ` inner product.
fn sigma_mgs_pass(cols: &mut DMatrix<f64>, sigma: &SpdMatrix) {
    let s = sigma.matrix();
    for j in 0..cols.ncols() {
        for k in 0..j {
            let wk = cols.column(k).into_owned();
            let proj = (wk.transpose() * s * cols.column(j))[(0, 0)];
            let mut cj = cols.column_mut(j);
            cj.axpy(-proj, &wk, 1.0);
        }
        let cj = cols.column(j).into_owned();
        let norm = (cj.transpose() * s * &cj)[(0, 0)].sqrt();
        if norm > 0.0 {
            cols.column_mut(j).scale_mut(1.0 / norm);
        }
    }
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

pub fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest principal angle (radians) between `Ran(a)` and `Ran(b)`.
///
/// Computed as `atan2` of the sine `‖(I − QₐQₐᵀ) Q_b‖₂` and the cosine
/// `σ_min(QₐᵀQ_b)`, which keeps both small and near-right angles accurate. Returns `π/2` if the dimensions differ.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (qa, ra) = range_basis(a, DEFAULT_RANK_TOL);
    let (qb, rb) = range_basis(b, DEFAULT_RANK_TOL);
    if ra != rb {
        return std::f64::consts::FRAC_PI_2;
    }
    if ra == 0 {
        return 0.0;
    }
    let resid = &qb - &qa * (qa.transpose() * &qb);
    let sine = spectral_norm(&resid);
    let cosine = singular_values(&(qa.transpose() * &qb))
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    sine.atan2(cosine)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m).iter().copied().fold(0.0_f64, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SVD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let a = gaussian(n, n, rng);
        spd_from_dense(&a * a.transpose() + DMatrix::identity(n, n) * n as f64).unwrap()
    }

    #[test]
    fn identity_factor_is_identity() {
        let s = spd_from_dense(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(s.factor(), &DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn hand_cholesky_two_by_two() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = spd_from_dense(m.clone()).unwrap();
        let l = s.factor();
        assert_relative_eq!(l[(0, 0)], 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(l[(1, 0)], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(l[(1, 1)], 1.5f64.sqrt(), epsilon = 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert!((l * l.transpose() - m).norm() < 1e-14);
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            spd_from_dense(m),
            Err(EkiError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn asymmetric_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(
            spd_from_dense(m),
            Err(EkiError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn pencil_of_zero_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spd(4, &mut rng);
        let res = gen_eig_pencil(&DMatrix::zeros(4, 4), &s).unwrap();
        assert_eq!(res.pos_count, 0);
        assert!(res.values.iter().all(|&v| v == 0.0));
        let gram = res.vectors.transpose() * s.matrix() * &res.vectors;
        assert!((gram - DMatrix::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn pencil_of_sigma_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_spd(5, &mut rng);
        let res = gen_eig_pencil(s.matrix(), &s).unwrap();
        assert_eq!(res.pos_count, 5);
        for v in res.values.iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pencil_diag_two_zero() {
        let s = spd_from_dense(DMatrix::identity(2, 2)).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let res = gen_eig_pencil(&a, &s).unwrap();
        assert_relative_eq!(res.values[0], 2.0, epsilon = 1e-14);
        assert_relative_eq!(res.values[1], 0.0, epsilon = 1e-14);
        assert_eq!(res.pos_count, 1);
        assert_relative_eq!(res.vectors[(0, 0)], 1.0, epsilon = 1e-14);
        assert!(res.vectors[(1, 0)].abs() < 1e-14);
    }

    #[test]
    fn pencil_dimension_mismatch() {
        let s = spd_from_dense(DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(
            gen_eig_pencil(&DMatrix::zeros(2, 2), &s),
            Err(EkiError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn pseudoinverse_identity_observer() {
        let obs = LinearObserver::new(
            DMatrix::identity(3, 3),
            spd_from_dense(DMatrix::identity(3, 3)).unwrap(),
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let v = weighted_pseudoinverse_apply(&obs, &y).unwrap();
        assert!((v - y).norm() < 1e-14);
    }

    #[test]
    fn pseudoinverse_kills_kernel_component() {
        let obs = LinearObserver::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            spd_from_dense(DMatrix::identity(1, 1)).unwrap(),
        )
        .unwrap();
        let v = weighted_pseudoinverse_apply(&obs, &DVector::from_vec(vec![2.0])).unwrap();
        assert_relative_eq!(v[0], 2.0, epsilon = 1e-14);
        assert!(v[1].abs() < 1e-14);
    }

    #[test]
    fn pseudoinverse_matches_restricted_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // 4x6 of rank 3.
        let h = gaussian(4, 3, &mut rng) * gaussian(3, 6, &mut rng);
        let s = random_spd(4, &mut rng);
        let obs = LinearObserver::new(h.clone(), s.clone()).unwrap();
        assert_eq!(obs.rank(), 3);
        let y = DVector::from_fn(4, |_, _| rng.sample(StandardNormal));
        let v = weighted_pseudoinverse_apply(&obs, &y).unwrap();

        // Oracle: minimize over Ran(Hᵀ) with an SVD basis B.
        let svd = SVD::new(h.clone(), false, true);
        let vt = svd.v_t.unwrap();
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap()
        });
        let b = DMatrix::from_fn(6, 3, |r, c| vt[(idx[c], r)]);
        let hb = &h * &b;
        let sinv_hb = s.solve(&hb);
        let lhs = hb.transpose() * &sinv_hb;
        let rhs = sinv_hb.transpose() * &y;
        let c = lhs.lu().solve(&rhs).unwrap();
        let oracle = &b * c;
        assert!((v - oracle).norm() < 1e-8);
    }

    #[test]
    fn numerical_rank_cases() {
        assert_eq!(numerical_rank(&DMatrix::zeros(3, 2), 1e-10), 0);
        assert_eq!(numerical_rank(&DMatrix::identity(3, 3), 1e-10), 3);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        assert_eq!(numerical_rank(&m, 1e-10), 1);
    }

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, k) = range_basis(&gaussian(6, 2, &mut rng), 1e-10);
        assert_eq!(k, 2);
        let c = orthonormal_complement(&b);
        assert_eq!(c.ncols(), 4);
        assert!((c.transpose() * &c - DMatrix::identity(4, 4)).norm() < 1e-12);
        assert!((b.transpose() * &c).norm() < 1e-12);
    }

    #[test]
    fn principal_angle_of_same_span_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian(5, 2, &mut rng);
        let mix = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        assert!(max_principal_angle(&a, &(&a * mix)) < 1e-7);
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_relative_eq!(
            max_principal_angle(&e1, &e2),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn range_basis_of_rank_deficient_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, _) = range_basis(&gaussian(5, 2, &mut rng), 1e-10);
        let comp = DMatrix::identity(5, 5) - &q * q.transpose();
        let (b, k) = range_basis(&comp, 1e-10);
        assert_eq!(k, 3);
        assert!((&comp - &b * b.transpose()).norm() < 1e-13);
        assert!((b.transpose() * &q).norm() < 1e-13);
        let sv = singular_values(&comp);
        assert!((sv[0] - 1.0).abs() < 1e-13 && sv[3].abs() < 1e-13);
    }
}
