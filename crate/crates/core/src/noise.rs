//! Adversarial-noise distribution modeling: the seed Gaussian estimated from
//! one attack, per-batch proximal perturbations of it, likelihood-filtered
//! pseudo-noise draws, and Wasserstein-2 proximity reporting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::attack::{extract_noise, run_attack, AttackConfig, AttackKind};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::gaussian::{wasserstein2_diag, DiagonalGaussian, GaussianParams};
use crate::net::ConvNet;
use crate::rng::RngStream;
use crate::tensor::flatten;
use crate::util::{parallel_map, Fnv1a};

pub const BANK_MAGIC: &[u8; 4] = b"PFNB";
pub const BANK_VERSION: u16 = 1;

const STREAM_BANK: u64 = 0xba9c;
const STREAM_PERTURB: u64 = 0x9e27;

/// Flattened noise vectors from one attack over one image subset.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub vectors: Vec<Vec<f32>>,
    pub dim: usize,
    pub attack_name: String,
}

impl NoiseBank {
    pub fn new(vectors: Vec<Vec<f32>>, attack_name: String) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::Dimension(format!(
                "noise bank needs at least 2 vectors, got {}",
                vectors.len()
            )));
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Dimension("noise vectors have unequal lengths".into()));
        }
        Ok(NoiseBank {
            vectors,
            dim,
            attack_name,
        })
    }

    pub fn count(&self) -> usize {
        self.vectors.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        let name = self.attack_name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(self.count() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.vectors {
            for &x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("bank truncated at magic".into()))?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format(format!("bad bank magic {magic:?}")));
        }
        let mut vb = [0u8; 2];
        r.read_exact(&mut vb)
            .map_err(|_| Error::Format("bank truncated at version".into()))?;
        if u16::from_le_bytes(vb) != BANK_VERSION {
            return Err(Error::Format("unsupported bank version".into()));
        }
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)
            .map_err(|_| Error::Format("bank truncated at name".into()))?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("bank truncated in name".into()))?;
        let mut cb = [0u8; 4];
        r.read_exact(&mut cb)
            .map_err(|_| Error::Format("bank truncated at count".into()))?;
        let count = u32::from_le_bytes(cb) as usize;
        r.read_exact(&mut cb)
            .map_err(|_| Error::Format("bank truncated at dim".into()))?;
        let dim = u32::from_le_bytes(cb) as usize;
        let mut vectors = Vec::with_capacity(count);
        let mut buf = vec![0u8; dim * 4];
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("bank truncated in vector {i}")))?;
            vectors.push(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        NoiseBank::new(
            vectors,
            String::from_utf8(name).map_err(|_| Error::Format("bad bank name".into()))?,
        )
    }
}

/// Attacks every indexed sample of `ds` and collects the flattened noise.
pub fn build_noise_bank(
    victim: &ConvNet,
    ds: &LabeledDataset,
    indices: &[usize],
    kind: AttackKind,
    cfg: &AttackConfig,
    workers: usize,
) -> Result<NoiseBank> {
    let results = parallel_map(indices.len(), workers, |j| {
        let i = indices[j];
        let x = &ds.images[i];
        let mut rng = RngStream::new(cfg.seed, STREAM_BANK).split(i as u64);
        let adv = run_attack(kind, victim, None, x, ds.labels[i] as usize, cfg, &mut rng)?;
        let noise = extract_noise(&adv, x, i, kind.as_str())?;
        Ok::<Vec<f32>, Error>(flatten(&noise.eta))
    });
    let mut vectors = Vec::with_capacity(indices.len());
    for r in results {
        vectors.push(r?);
    }
    NoiseBank::new(vectors, kind.as_str().to_string())
}

/// Mean/covariance of the bank with `lambda I` shrinkage; `None` uses the
/// trace-scaled default.
pub fn estimate(bank: &NoiseBank, shrinkage: Option<f64>) -> Result<GaussianParams> {
    let lambda = shrinkage.unwrap_or_else(|| GaussianParams::auto_shrinkage(&bank.vectors));
    GaussianParams::estimate(&bank.vectors, lambda)
}

#[derive(Debug, Clone)]
pub struct PerturbationConfig {
    /// Mean-shift scale in [0,1] pixel units.
    pub eps_mu: f64,
    /// Relative covariance-perturbation scale.
    pub eps_sigma: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            eps_mu: 3.0 / 255.0,
            eps_sigma: 0.005,
            seed: 0,
        }
    }
}

/// One proximal distribution: the per-batch perturbation of the base.
#[derive(Debug)]
pub struct PerturbedGaussian {
    pub batch_index: u64,
    pub params: GaussianParams,
    pub alpha: f64,
    pub beta: f64,
    pub max_abs_m: f64,
    /// Diagonal loading added by PSD repair (0 when none was needed).
    pub loading: f64,
    /// FNV hash of every random draw that shaped this distribution.
    pub draw_hash: u64,
}

impl PerturbedGaussian {
    pub fn diagonal(&self) -> DiagonalGaussian {
        self.params.diagonal()
    }
}

/// Perturbs the base Gaussian into the proximal distribution for one batch:
/// `mean_i = mean + alpha m`, `cov_i = cov + beta * sbar * W` with `m`
/// standard normal, `W` a symmetrized Gaussian matrix normalized to unit
/// spectral radius (`sbar` = mean diagonal), and `alpha ~ U(-eps_mu, eps_mu)`,
/// `beta ~ U(0, eps_sigma)`. Diagonal loading is doubled until the Cholesky
/// factorization succeeds; more than 10 doublings is an error.
pub fn perturb(
    base: &GaussianParams,
    batch_index: u64,
    cfg: &PerturbationConfig,
) -> Result<PerturbedGaussian> {
    let d = base.dim();
    let mut rng = RngStream::new(cfg.seed, STREAM_PERTURB).split(batch_index);
    let mut hash = Fnv1a::new();

    let alpha = rng.uniform(-cfg.eps_mu, cfg.eps_mu);
    let beta = rng.uniform(0.0, cfg.eps_sigma);
    hash.write_f64(alpha);
    hash.write_f64(beta);

    let mut mean = base.mean().to_vec();
    let mut max_abs_m = 0.0f64;
    for mi in mean.iter_mut() {
        let m = rng.standard_normal();
        hash.write_f64(m);
        max_abs_m = max_abs_m.max(m.abs());
        *mi += alpha * m;
    }

    let sbar = base.cov_trace() / d as f64;
    let mut cov = base.cov().to_vec();
    // symmetric Gaussian perturbation drawn directly on the lower triangle,
    // scaled by 1/sqrt(2d) so its spectral radius is ~1
    let spectral = 1.0 / (2.0 * d as f64).sqrt();
    let offdiag = std::f64::consts::FRAC_1_SQRT_2;
    let amp = beta * sbar * spectral;
    for i in 0..d {
        for j in 0..=i {
            let g = rng.standard_normal();
            hash.write_f64(g);
            let v = if i == j { g } else { g * offdiag } * amp;
            cov[i * d + j] += v;
            if i != j {
                cov[j * d + i] += v;
            }
        }
    }

    let base_loading = 1e-6 * sbar.max(f64::MIN_POSITIVE);
    let mut loading = 0.0f64;
    let mut doublings = 0usize;
    let chol = loop {
        let attempt = if loading == 0.0 {
            crate::gaussian::cholesky(&cov, d)
        } else {
            let mut loaded = cov.clone();
            for i in 0..d {
                loaded[i * d + i] += loading;
            }
            crate::gaussian::cholesky(&loaded, d)
        };
        match attempt {
            Ok(l) => {
                if loading > 0.0 {
                    for i in 0..d {
                        cov[i * d + i] += loading;
                    }
                }
                break l;
            }
            Err(_) => {
                if loading == 0.0 {
                    loading = base_loading;
                } else {
                    doublings += 1;
                    if doublings > 10 {
                        return Err(Error::Numeric(format!(
                            "PSD repair failed after 10 doublings (loading {loading:.3e})"
                        )));
                    }
                    loading *= 2.0;
                }
            }
        }
    };

    Ok(PerturbedGaussian {
        batch_index,
        params: GaussianParams::from_parts(mean, cov, chol),
        alpha,
        beta,
        max_abs_m,
        loading,
        draw_hash: hash.finish(),
    })
}

/// Chi-square quantile of the squared Mahalanobis radius for dimension `d`.
pub fn mahalanobis_threshold(quantile: f64, d: usize) -> Result<f64> {
    if !(0.0 < quantile && quantile < 1.0) {
        return Err(Error::Config(format!(
            "likelihood quantile must be in (0,1), got {quantile}"
        )));
    }
    let chi = ChiSquared::new(d as f64)
        .map_err(|e| Error::Numeric(format!("chi-square setup failed: {e}")))?;
    Ok(chi.inverse_cdf(quantile))
}

/// Rejection-samples the perturbed Gaussian, keeping only high-likelihood
/// draws (squared Mahalanobis radius within the chi-square `quantile`), then
/// clips each coordinate into the truncation interval `[-clip_eps, clip_eps]`.
pub fn sample_filtered(
    pg: &PerturbedGaussian,
    quantile: f64,
    clip_eps: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let threshold = mahalanobis_threshold(quantile, pg.params.dim())?;
    for _ in 0..1000 {
        let (mut z, maha2) = pg.params.sample_with_mahalanobis(rng);
        if maha2 <= threshold {
            for v in z.iter_mut() {
                *v = v.clamp(-clip_eps, clip_eps);
            }
            return Ok(z);
        }
    }
    Err(Error::Config(format!(
        "likelihood filter rejected 1000 consecutive draws (quantile {quantile})"
    )))
}

/// Diagonal-W2 distances from the base to each perturbed distribution.
#[derive(Debug, Clone)]
pub struct ProximityReport {
    pub rows: Vec<(u64, f64)>,
    pub max: f64,
}

pub fn proximity_report(
    base: &GaussianParams,
    perturbed: &[PerturbedGaussian],
) -> Result<ProximityReport> {
    let base_diag = base.diagonal();
    let mut rows = Vec::with_capacity(perturbed.len());
    let mut max = 0.0f64;
    for pg in perturbed {
        let dist = wasserstein2_diag(&base_diag, &pg.diagonal())?;
        max = max.max(dist);
        rows.push((pg.batch_index, dist));
    }
    Ok(ProximityReport { rows, max })
}

impl ProximityReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "batch_index,w2_distance")?;
        for (i, d) in &self.rows {
            writeln!(f, "{i},{d}")?;
        }
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn base_gaussian(d: usize) -> GaussianParams {
        let mut rng = RngStream::new(3, 0x9a5e);
        let mean: Vec<f64> = (0..d).map(|_| rng.uniform(-0.01, 0.01)).collect();
        // diagonal-dominant covariance, noise-like scale
        let mut cov = vec![0.0f64; d * d];
        for i in 0..d {
            cov[i * d + i] = rng.uniform(5e-4, 1.5e-3);
        }
        GaussianParams::new(mean, cov).unwrap()
    }

    #[test]
    fn zero_scales_reproduce_the_base() {
        let base = base_gaussian(6);
        let cfg = PerturbationConfig {
            eps_mu: 0.0,
            eps_sigma: 0.0,
            seed: 1,
        };
        let pg = perturb(&base, 3, &cfg).unwrap();
        assert_eq!(pg.alpha, 0.0);
        assert_eq!(pg.beta, 0.0);
        assert_eq!(pg.loading, 0.0);
        for (a, b) in pg.params.mean().iter().zip(base.mean()) {
            assert_eq!(a, b);
        }
        for (a, b) in pg.params.cov().iter().zip(base.cov()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perturbation_is_deterministic_per_batch() {
        let base = base_gaussian(5);
        let cfg = PerturbationConfig {
            eps_mu: 0.01,
            eps_sigma: 0.005,
            seed: 9,
        };
        let a = perturb(&base, 7, &cfg).unwrap();
        let b = perturb(&base, 7, &cfg).unwrap();
        assert_eq!(a.draw_hash, b.draw_hash);
        assert_eq!(a.params.mean(), b.params.mean());
        let c = perturb(&base, 8, &cfg).unwrap();
        assert_ne!(a.draw_hash, c.draw_hash);
    }

    #[test]
    fn w2_distance_matches_direct_recomputation() {
        let base = base_gaussian(8);
        let cfg = PerturbationConfig {
            eps_mu: 3.0 / 255.0,
            eps_sigma: 0.005,
            seed: 4,
        };
        for i in 0..20u64 {
            let pg = perturb(&base, i, &cfg).unwrap();
            let w2 = wasserstein2_diag(&base.diagonal(), &pg.diagonal()).unwrap();
            // recompute from the recorded pieces: the mean part is exactly
            // |mean_i - mean| and the sigma part comes off the diagonals
            let mean_sq: f64 = pg
                .params
                .mean()
                .iter()
                .zip(base.mean())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let sig_sq: f64 = pg
                .diagonal()
                .sigma
                .iter()
                .zip(base.diagonal().sigma.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let direct = (mean_sq + sig_sq).sqrt();
            assert!((w2 - direct).abs() < 1e-12);
            // and the mean shift alone never exceeds the full distance
            assert!(mean_sq.sqrt() <= w2 + 1e-12);
            assert!(pg.alpha.abs() <= cfg.eps_mu);
            assert!(pg.beta >= 0.0 && pg.beta <= cfg.eps_sigma);
        }
    }

    #[test]
    fn distances_grow_with_eps_mu() {
        let base = base_gaussian(6);
        let mut last = -1.0f64;
        for k in 1..=4 {
            let cfg = PerturbationConfig {
                eps_mu: 0.002 * k as f64,
                eps_sigma: 0.0,
                seed: 11,
            };
            let pg = perturb(&base, 5, &cfg).unwrap();
            let w2 = wasserstein2_diag(&base.diagonal(), &pg.diagonal()).unwrap();
            assert!(w2 > last, "w2 {w2} not above {last} at k={k}");
            last = w2;
        }
    }

    #[test]
    fn repair_loading_stays_small_at_default_scale() {
        let base = base_gaussian(32);
        let cfg = PerturbationConfig::default();
        let sbar = base.cov_trace() / 32.0;
        for i in 0..50u64 {
            let pg = perturb(&base, i, &cfg).unwrap();
            assert!(
                pg.loading <= 0.01 * sbar,
                "loading {} above 1% of mean diagonal {}",
                pg.loading,
                sbar
            );
        }
    }

    #[test]
    fn filtered_samples_respect_bound_and_clip() {
        let base = base_gaussian(8);
        let cfg = PerturbationConfig::default();
        let pg = perturb(&base, 0, &cfg).unwrap();
        let threshold = mahalanobis_threshold(0.95, 8).unwrap();
        let mut rng = RngStream::new(5, 1);
        let clip = 0.03;
        for _ in 0..50 {
            let z = sample_filtered(&pg, 0.95, clip, &mut rng).unwrap();
            assert!(z.iter().all(|v| v.abs() <= clip + 1e-12));
            let ld_ok = pg.params.log_density(&z).is_ok();
            assert!(ld_ok);
        }
        // acceptance rate at a very loose quantile is nearly 1
        let mut rng2 = RngStream::new(6, 2);
        let loose = mahalanobis_threshold(0.9999, 8).unwrap();
        let mut accepted = 0;
        let n = 5000;
        for _ in 0..n {
            let (_, maha2) = pg.params.sample_with_mahalanobis(&mut rng2);
            if maha2 <= loose {
                accepted += 1;
            }
        }
        assert!(accepted as f64 / n as f64 >= 0.99);
        let _ = threshold;
    }

    #[test]
    fn impossible_quantile_errors_out() {
        let base = base_gaussian(4);
        let pg = perturb(&base, 0, &PerturbationConfig::default()).unwrap();
        let mut rng = RngStream::new(7, 3);
        let err = sample_filtered(&pg, 1e-12, 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn proximity_of_identical_distributions_is_zero() {
        let base = base_gaussian(5);
        let cfg = PerturbationConfig {
            eps_mu: 0.0,
            eps_sigma: 0.0,
            seed: 2,
        };
        let pgs: Vec<_> = (0..4).map(|i| perturb(&base, i, &cfg).unwrap()).collect();
        let report = proximity_report(&base, &pgs).unwrap();
        assert_eq!(report.max, 0.0);
        assert!(report.rows.iter().all(|&(_, d)| d == 0.0));
    }

    #[test]
    fn bank_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.pfnb");
        let bank = NoiseBank::new(
            vec![vec![0.1f32, -0.2, 0.3], vec![0.0, 0.5, -0.5]],
            "fgsm".into(),
        )
        .unwrap();
        bank.save(&path).unwrap();
        let back = NoiseBank::load(&path).unwrap();
        assert_eq!(back.attack_name, "fgsm");
        assert_eq!(back.dim, 3);
        assert_eq!(back.vectors, bank.vectors);
    }

    #[test]
    fn bank_from_attacks_is_deterministic_and_bounded() {
        let net = ConvNet::new(1, 8, 8, 3, 1).unwrap();
        let mut rng = RngStream::new(2, 0);
        let images: Vec<Tensor> = (0..6)
            .map(|_| {
                Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rng.next_f32()).collect()).unwrap()
            })
            .collect();
        let ds = LabeledDataset {
            labels: (0..6).map(|i| (i % 3) as u8).collect(),
            images,
            name: "t".into(),
            class_count: 3,
            attack_meta: None,
        };
        let cfg = AttackConfig {
            epsilon: 8.0 / 255.0,
            steps: 3,
            ..AttackConfig::default()
        };
        let idx: Vec<usize> = (0..6).collect();
        let a = build_noise_bank(&net, &ds, &idx, AttackKind::Pgd, &cfg, 1).unwrap();
        let b = build_noise_bank(&net, &ds, &idx, AttackKind::Pgd, &cfg, 2).unwrap();
        assert_eq!(a.vectors, b.vectors);
        assert_eq!(a.dim, 64);
        for v in &a.vectors {
            assert!(v.iter().all(|x| x.abs() <= cfg.epsilon + 1e-6));
        }
    }
}
