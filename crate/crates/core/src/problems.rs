//! Random test problems with prescribed subspace structure, and their
//! on-disk format.
//!
//! Problem files are JSON:
//!
//! ```text
//! { "version": 1, "n", "d", "h", "J", "seed", "noise_on_data",
//!   "sigma": [[..]; n], "H": [[..]; n], "y": [..],
//!   "V0": [[..]; d], "ground_truth": [..], "checksum": "<sha256 hex>" }
//! ```
//!
//! Matrices are row-major arrays of rows. Numbers are written in shortest
//! round-trip form, so loading reproduces every entry bit for bit. The
//! checksum is SHA-256 over a canonical little-endian byte stream of the
//! header integers followed by all matrix entries.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{invariant_battery, BatteryInput, Tolerances};
use crate::ensemble::{Ensemble, Variant};
use crate::error::{EkiError, Result};
use crate::linops::{
    range_basis, spd_from_dense, spectral_norm, weighted_pseudoinverse_apply, LinearObserver,
};
use crate::rng::rng_from_seed;

pub const SCHEMA_VERSION: u32 = 1;
const MAX_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub n: usize,
    pub d: usize,
    pub target_h: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub seed: u64,
    pub noise_on_data: bool,
}

impl Default for ProblemSpec {
    /// Eight observations of twelve states, rank six, five particles.
    fn default() -> Self {
        Self {
            n: 8,
            d: 12,
            target_h: 6,
            j: 5,
            seed: 42,
            noise_on_data: true,
        }
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(EkiError::InvalidArgument("n and d must be positive".into()));
        }
        if self.target_h < 1 || self.target_h > self.n.min(self.d) {
            return Err(EkiError::InvalidArgument(format!(
                "h must satisfy 1 ≤ h ≤ min(n, d) = {}, got {}",
                self.n.min(self.d),
                self.target_h
            )));
        }
        if self.j < 2 {
            return Err(EkiError::TooFewParticles(self.j));
        }
        if self.j <= self.target_h && self.j >= self.d {
            // Then h = d and J particles span all of ℝᵈ ⊇ Ran(Hᵀ).
            return Err(EkiError::InvalidArgument(format!(
                "J = {} particles with J ≤ h always span Ran(Hᵀ) when d = {}",
                self.j, self.d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub spec: ProblemSpec,
    pub obs: LinearObserver,
    pub y: DVector<f64>,
    pub ens0: Ensemble,
    /// Minimum-norm weighted least-squares solution.
    pub vstar: DVector<f64>,
    pub ground_truth: DVector<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Filled column by column.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// `k` orthonormal columns from the QR factorization of a Gaussian matrix.
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, rows, k);
    g.qr().q().columns(0, k).into_owned()
}

/// Draws a random instance. Deterministic in `spec.seed`.
pub fn generate(spec: &ProblemSpec) -> Result<ProblemInstance> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let mut last = String::new();
    for _ in 0..MAX_ATTEMPTS {
        match attempt(spec, &mut rng) {
            Ok(inst) => return Ok(inst),
            Err(e) => last = e.to_string(),
        }
    }
    Err(EkiError::GenerationFailed {
        attempts: MAX_ATTEMPTS,
        reason: last,
    })
}

fn attempt(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> Result<ProblemInstance> {
    let ProblemSpec {
        n,
        d,
        target_h: h,
        j,
        ..
    } = *spec;

    let a = gaussian_matrix(rng, n, n);
    let sigma = (&a * a.transpose() + DMatrix::<f64>::identity(n, n) * n as f64) / n as f64;
    let sigma = spd_from_dense(sigma)?;

    let u = random_orthonormal(rng, n, h);
    let v = random_orthonormal(rng, d, h);
    let (lo, hi) = (0.5_f64.ln(), 2.0_f64.ln());
    let s = DVector::from_fn(h, |_, _| rng.gen_range(lo..hi).exp());
    let hmat = &u * DMatrix::from_diagonal(&s) * v.transpose();

    let ground_truth = gaussian_vector(rng, d);
    let mut y = &hmat * &ground_truth;
    if spec.noise_on_data {
        y += sigma.sample(rng);
    }
    let v0 = gaussian_matrix(rng, d, j);

    build(*spec, hmat, sigma.matrix().clone(), y, v0, ground_truth)
}

/// Assembles and verifies an instance from raw matrices.
fn build(
    spec: ProblemSpec,
    hmat: DMatrix<f64>,
    sigma: DMatrix<f64>,
    y: DVector<f64>,
    v0: DMatrix<f64>,
    ground_truth: DVector<f64>,
) -> Result<ProblemInstance> {
    let obs = LinearObserver::new(hmat, spd_from_dense(sigma)?)?;
    if obs.rank() != spec.target_h {
        return Err(EkiError::InvalidArgument(format!(
            "rank(H) = {} but h = {}",
            obs.rank(),
            spec.target_h
        )));
    }
    let ens0 = Ensemble::new(v0)?;
    if spec.j <= spec.target_h {
        // span(V₀) must not contain Ran(Hᵀ).
        let (ran_ht, _) = range_basis(&obs.h().transpose(), obs.rank_tol());
        let (span_v0, _) = range_basis(ens0.particles(), 1e-12);
        let outside = &ran_ht - &span_v0 * (span_v0.transpose() * &ran_ht);
        if spectral_norm(&outside) < 1e-6 {
            return Err(EkiError::InvalidArgument(
                "initial ensemble spans Ran(Hᵀ)".into(),
            ));
        }
    }
    let vstar = weighted_pseudoinverse_apply(&obs, &y)?;
    let inst = ProblemInstance {
        spec,
        obs,
        y,
        ens0,
        vstar,
        ground_truth,
    };
    let report = inst.battery(Variant::Deterministic, 0, &Tolerances::default());
    if let Some(f) = report.failures().next() {
        return Err(EkiError::InvalidArgument(format!(
            "check {} failed (measured {:?}, tolerance {:e})",
            f.check_name, f.measured, f.tolerance
        )));
    }
    Ok(inst)
}

impl ProblemInstance {
    pub fn battery(
        &self,
        variant: Variant,
        iters: usize,
        tol: &Tolerances,
    ) -> crate::diagnostics::Report {
        invariant_battery(
            &BatteryInput {
                obs: &self.obs,
                y: &self.y,
                ens0: &self.ens0,
                variant,
                iters,
                seed: self.spec.seed,
            },
            tol,
        )
    }

    fn to_file(&self) -> ProblemFile {
        let mut f = ProblemFile {
            version: SCHEMA_VERSION,
            n: self.spec.n,
            d: self.spec.d,
            h: self.spec.target_h,
            j: self.spec.j,
            seed: self.spec.seed,
            noise_on_data: self.spec.noise_on_data,
            sigma: rows(self.obs.sigma().matrix()),
            h_matrix: rows(self.obs.h()),
            y: self.y.iter().copied().collect(),
            v0: rows(self.ens0.particles()),
            ground_truth: self.ground_truth.iter().copied().collect(),
            checksum: String::new(),
        };
        f.checksum = f.compute_checksum();
        f
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_file())
            .expect("problem files contain only finite numbers");
        fs::write(path, text).map_err(|source| EkiError::IoFailure {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EkiError::IoFailure {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema = |detail: String| EkiError::SchemaVersionMismatch {
            expected: SCHEMA_VERSION,
            detail,
        };
        let f: ProblemFile = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        if f.version != SCHEMA_VERSION {
            return Err(schema(format!("file has version {}", f.version)));
        }
        let sigma = matrix(&f.sigma, f.n, f.n).ok_or_else(|| schema("sigma shape".into()))?;
        let hmat = matrix(&f.h_matrix, f.n, f.d).ok_or_else(|| schema("H shape".into()))?;
        let v0 = matrix(&f.v0, f.d, f.j).ok_or_else(|| schema("V0 shape".into()))?;
        if f.y.len() != f.n || f.ground_truth.len() != f.d {
            return Err(schema("vector length".into()));
        }
        let computed = f.compute_checksum();
        if computed != f.checksum {
            return Err(EkiError::ChecksumMismatch {
                stored: f.checksum,
                computed,
            });
        }
        let spec = ProblemSpec {
            n: f.n,
            d: f.d,
            target_h: f.h,
            j: f.j,
            seed: f.seed,
            noise_on_data: f.noise_on_data,
        };
        let obs = LinearObserver::new(hmat, spd_from_dense(sigma)?)?;
        let y = DVector::from_vec(f.y);
        let vstar = weighted_pseudoinverse_apply(&obs, &y)?;
        Ok(Self {
            spec,
            obs,
            y,
            ens0: Ensemble::new(v0)?,
            vstar,
            ground_truth: DVector::from_vec(f.ground_truth),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProblemFile {
    version: u32,
    n: usize,
    d: usize,
    h: usize,
    #[serde(rename = "J")]
    j: usize,
    seed: u64,
    #[serde(default = "default_true")]
    noise_on_data: bool,
    sigma: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    h_matrix: Vec<Vec<f64>>,
    y: Vec<f64>,
    #[serde(rename = "V0")]
    v0: Vec<Vec<f64>>,
    ground_truth: Vec<f64>,
    checksum: String,
}

fn default_true() -> bool {
    true
}

impl ProblemFile {
    fn compute_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.version.to_le_bytes());
        for k in [self.n, self.d, self.h, self.j] {
            hasher.update((k as u64).to_le_bytes());
        }
        hasher.update(self.seed.to_le_bytes());
        hasher.update([u8::from(self.noise_on_data)]);
        let rows = self
            .sigma
            .iter()
            .chain(&self.h_matrix)
            .chain(std::iter::once(&self.y))
            .chain(&self.v0)
            .chain(std::iter::once(&self.ground_truth));
        for row in rows {
            for x in row {
                hasher.update(x.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Option<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut s = ProblemSpec::default();
        assert!(s.validate().is_ok());
        s.j = 1;
        assert!(matches!(s.validate(), Err(EkiError::TooFewParticles(1))));
        let s = ProblemSpec {
            target_h: 9,
            ..ProblemSpec::default()
        };
        assert!(s.validate().is_err());
        let s = ProblemSpec {
            target_h: 0,
            ..ProblemSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn same_seed_same_instance() {
        let a = generate(&ProblemSpec::default()).unwrap();
        let b = generate(&ProblemSpec::default()).unwrap();
        assert_eq!(a.obs.h(), b.obs.h());
        assert_eq!(a.obs.sigma().matrix(), b.obs.sigma().matrix());
        assert_eq!(a.y, b.y);
        assert_eq!(a.ens0.particles(), b.ens0.particles());
    }

    #[test]
    fn rank_and_kernels() {
        let inst = generate(&ProblemSpec::default()).unwrap();
        assert_eq!(inst.obs.rank(), 6);
        let sv = inst.obs.h().clone().singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[0] <= 2.0 && sv[5] >= 0.5);
        assert!(sv[6] < 1e-12);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let a = generate(&ProblemSpec::default()).unwrap();
        let text = serde_json::to_string(&a.to_file()).unwrap();
        let b = ProblemInstance::from_json(&text).unwrap();
        assert_eq!(a.obs.h(), b.obs.h());
        assert_eq!(a.obs.sigma().matrix(), b.obs.sigma().matrix());
        assert_eq!(a.y, b.y);
        assert_eq!(a.ens0.particles(), b.ens0.particles());
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.spec, b.spec);
    }

    #[test]
    fn checksum_detects_edits() {
        let a = generate(&ProblemSpec::default()).unwrap();
        let mut f = a.to_file();
        f.h_matrix[0][0] += 1e-3;
        let text = serde_json::to_string(&f).unwrap();
        assert!(matches!(
            ProblemInstance::from_json(&text),
            Err(EkiError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let a = generate(&ProblemSpec::default()).unwrap();
        let mut f = a.to_file();
        f.version = 2;
        let text = serde_json::to_string(&f).unwrap();
        assert!(matches!(
            ProblemInstance::from_json(&text),
            Err(EkiError::SchemaVersionMismatch { .. })
        ));
    }
}
