//! Multivariate Gaussian estimation, factorization, sampling and the
//! diagonal Wasserstein-2 metric.
//!
//! Covariances are held in f64 for factorization stability; the on-disk format
//! is f32 and the Cholesky factor is recomputed at load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const GAUSSIAN_MAGIC: &[u8; 4] = b"PFGP";
pub const GAUSSIAN_VERSION: u16 = 1;

/// Mean, covariance and cached lower-triangular Cholesky factor of a
/// d-dimensional Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    dim: usize,
}

/// Diagonal view of a Gaussian: per-coordinate mean and standard deviation.
#[derive(Debug, Clone)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Lower-triangular Cholesky factor of a symmetric matrix stored row-major.
///
/// Fails with the offending pivot when the matrix is not positive-definite.
pub fn cholesky(a: &[f64], dim: usize) -> Result<Vec<f64>> {
    if a.len() != dim * dim {
        return Err(Error::Dimension(format!(
            "matrix buffer {} does not match dim {dim}",
            a.len()
        )));
    }
    let mut l = vec![0.0f64; dim * dim];
    for j in 0..dim {
        let mut diag = a[j * dim + j];
        diag -= dot(&l[j * dim..j * dim + j], &l[j * dim..j * dim + j]);
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::Numeric(format!(
                "matrix not positive-definite: pivot {diag:.3e} at column {j}"
            )));
        }
        let djj = diag.sqrt();
        l[j * dim + j] = djj;
        let inv = 1.0 / djj;
        for i in (j + 1)..dim {
            let s = a[i * dim + j] - dot(&l[i * dim..i * dim + j], &l[j * dim..j * dim + j]);
            l[i * dim + j] = s * inv;
        }
    }
    Ok(l)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GaussianParams {
    /// Builds params from an explicit mean and covariance, factorizing eagerly.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        let chol = cholesky(&cov, dim)?;
        Ok(GaussianParams {
            mean,
            cov,
            chol,
            dim,
        })
    }

    /// Assembles params from an already-computed factorization; the caller
    /// guarantees `chol * chol^T == cov`.
    pub(crate) fn from_parts(mean: Vec<f64>, cov: Vec<f64>, chol: Vec<f64>) -> Self {
        let dim = mean.len();
        GaussianParams {
            mean,
            cov,
            chol,
            dim,
        }
    }

    /// Maximum-likelihood mean/covariance of the samples plus `lambda * I`
    /// shrinkage on the diagonal. `N >= 2` equal-length samples required.
    pub fn estimate(samples: &[Vec<f32>], lambda: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Dimension(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        if lambda < 0.0 {
            return Err(Error::Config(format!("shrinkage must be >= 0, got {lambda}")));
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Dimension("samples have unequal lengths".into()));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0f64; dim];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut cov = vec![0.0f64; dim * dim];
        let mut centered = vec![0.0f64; dim];
        for s in samples {
            for (c, (&v, m)) in centered.iter_mut().zip(s.iter().zip(&mean)) {
                *c = v as f64 - m;
            }
            // rank-1 update on the lower triangle only
            for i in 0..dim {
                let ci = centered[i];
                let row = &mut cov[i * dim..i * dim + i + 1];
                for (j, r) in row.iter_mut().enumerate() {
                    *r += ci * centered[j];
                }
            }
        }
        let inv_n = 1.0 / n;
        for i in 0..dim {
            for j in 0..=i {
                let v = cov[i * dim + j] * inv_n;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
            cov[i * dim + i] += lambda;
        }
        GaussianParams::new(mean, cov)
    }

    /// Default shrinkage used by the pipeline: `1e-4 * trace(cov) / d`,
    /// computed on the raw (unshrunk) covariance of the samples.
    pub fn auto_shrinkage(samples: &[Vec<f32>]) -> f64 {
        if samples.len() < 2 {
            return 0.0;
        }
        let dim = samples[0].len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0f64; dim];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v as f64;
            }
        }
        let mut trace = 0.0f64;
        for j in 0..dim {
            let mu = mean[j] / n;
            trace += samples
                .iter()
                .map(|s| {
                    let c = s[j] as f64 - mu;
                    c * c
                })
                .sum::<f64>()
                / n;
        }
        1e-4 * trace / dim as f64
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn chol(&self) -> &[f64] {
        &self.chol
    }

    pub fn cov_trace(&self) -> f64 {
        (0..self.dim).map(|i| self.cov[i * self.dim + i]).sum()
    }

    /// `mean + L u` with `u` i.i.d. standard normal from `rng`.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.sample_with_mahalanobis(rng).0
    }

    /// Sample plus the squared Mahalanobis distance of the draw, which for
    /// `z = mean + L u` is exactly `|u|^2`.
    pub fn sample_with_mahalanobis(&self, rng: &mut RngStream) -> (Vec<f64>, f64) {
        let d = self.dim;
        let mut u = vec![0.0f64; d];
        rng.fill_standard_normal(&mut u);
        let maha2 = dot(&u, &u);
        let mut z = self.mean.clone();
        for i in 0..d {
            z[i] += dot(&self.chol[i * d..i * d + i + 1], &u[..i + 1]);
        }
        (z, maha2)
    }

    /// Log density at `z`, with the quadratic form and log-determinant taken
    /// from the Cholesky factor.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let d = self.dim;
        if z.len() != d {
            return Err(Error::Dimension(format!(
                "point has length {}, expected {d}",
                z.len()
            )));
        }
        // solve L w = z - mean by forward substitution
        let mut w = vec![0.0f64; d];
        for i in 0..d {
            let s = z[i] - self.mean[i] - dot(&self.chol[i * d..i * d + i], &w[..i]);
            w[i] = s / self.chol[i * d + i];
        }
        let quad = dot(&w, &w);
        let logdet: f64 = (0..d).map(|i| self.chol[i * d + i].ln()).sum::<f64>() * 2.0;
        Ok(-0.5 * (quad + d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet))
    }

    /// Per-coordinate diagonal view (mean, sqrt of diagonal variance).
    pub fn diagonal(&self) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: self.mean.clone(),
            sigma: (0..self.dim)
                .map(|i| self.cov[i * self.dim + i].max(0.0).sqrt())
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(GAUSSIAN_MAGIC)?;
        w.write_all(&GAUSSIAN_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for &m in &self.mean {
            w.write_all(&(m as f32).to_le_bytes())?;
        }
        for &c in &self.cov {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a params file; the Cholesky factor is recomputed, not stored.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("params file truncated at magic".into()))?;
        if &magic != GAUSSIAN_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected {GAUSSIAN_MAGIC:?}"
            )));
        }
        let version = read_u16(&mut r)?;
        if version != GAUSSIAN_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let mean = read_f32_vec(&mut r, dim)?.into_iter().map(f64::from).collect();
        let cov = read_f32_vec(&mut r, dim * dim)?
            .into_iter()
            .map(f64::from)
            .collect();
        GaussianParams::new(mean, cov)
    }
}

/// Wasserstein-2 distance between diagonal Gaussians:
/// `sqrt(|mu_p - mu_q|^2 + sum_j (sigma_pj - sigma_qj)^2)`.
pub fn wasserstein2_diag(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    if p.mean.len() != q.mean.len() || p.sigma.len() != q.sigma.len() {
        return Err(Error::Dimension(format!(
            "dimension mismatch: {} vs {}",
            p.mean.len(),
            q.mean.len()
        )));
    }
    let mean_sq: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sig_sq: f64 = p
        .sigma
        .iter()
        .zip(&q.sigma)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((mean_sq + sig_sq).sqrt())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u16".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32_vec(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated f32 payload of {n} values")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
