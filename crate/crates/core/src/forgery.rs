//! Pseudo-adversarial data production and the detector training loop: per
//! batch, perturb the base noise Gaussian, draw filtered noise, localize it
//! with sparse masks, convert half the batch, and take an SGD step.

use crate::dataset::{make_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::gaussian::{wasserstein2_diag, GaussianParams};
use crate::mask::{compose_mask, MaskConfig, SparseMask};
use crate::net::{ConvNet, SgdVelocity, TrainConfig};
use crate::noise::{perturb, sample_filtered, PerturbationConfig, PerturbedGaussian, ProximityReport};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::util::parallel_map;

const STREAM_SAMPLE: u64 = 0x5a3d;

#[derive(Debug, Clone)]
pub struct ForgeryConfig {
    pub perturbation: PerturbationConfig,
    pub mask: MaskConfig,
    /// Chi-square quantile of the likelihood filter.
    pub gamma_p_quantile: f64,
    /// Truncation interval for pseudo-noise coordinates, in pixel units.
    pub epsilon: f64,
    pub batch_size: usize,
    pub detector_train: TrainConfig,
    pub workers: usize,
}

impl Default for ForgeryConfig {
    fn default() -> Self {
        ForgeryConfig {
            perturbation: PerturbationConfig::default(),
            mask: MaskConfig::default(),
            gamma_p_quantile: 0.95,
            epsilon: 8.0 / 255.0,
            batch_size: 64,
            detector_train: TrainConfig::default(),
            workers: 1,
        }
    }
}

/// Half-forged training batch: label 1 marks pseudo-adversarial samples.
#[derive(Debug)]
pub struct PseudoAdvBatch {
    pub images: Vec<Tensor>,
    pub binary_labels: Vec<u8>,
    pub batch_index: u64,
    pub draw_hash: u64,
    /// Diagonal-W2 distance from the base to this batch's distribution.
    pub w2_distance: f64,
    pub loading: f64,
}

/// Injects masked, truncated pseudo-noise into a natural sample. Pixels off
/// the mask support are bit-identical to the input.
pub fn produce_pseudo_adv(
    x: &Tensor,
    pg: &PerturbedGaussian,
    mask: &SparseMask,
    quantile: f64,
    clip_eps: f64,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if pg.params.dim() != x.numel() {
        return Err(Error::Dimension(format!(
            "distribution dim {} does not match image size {}",
            pg.params.dim(),
            x.numel()
        )));
    }
    if mask.bits.shape() != [h, w] {
        return Err(Error::Dimension(format!(
            "mask shape {:?} does not match image plane {h}x{w}",
            mask.bits.shape()
        )));
    }
    let z = sample_filtered(pg, quantile, clip_eps, rng)?;
    let mut out = x.clone();
    let plane = h * w;
    let bits = mask.bits.data();
    let data = out.data_mut();
    for ch in 0..c {
        for p in 0..plane {
            if bits[p] > 0.0 {
                let idx = ch * plane + p;
                data[idx] = (data[idx] + z[idx] as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Sparse mask for one natural sample: Grad-CAM on the victim's predicted
/// class combined with saliency, sparsified by the Sobel mask.
pub fn mask_for_sample(victim: &ConvNet, x: &Tensor, cfg: &MaskConfig) -> Result<SparseMask> {
    let predicted = victim.predict(x)?;
    let cam = victim.gradcam(x, predicted)?;
    compose_mask(x, &cam, cfg)
}

/// Builds the half-forged batch for global batch index `batch_index`. The
/// first half of the (pre-shuffled) batch is converted; masks are memoized in
/// `mask_cache` keyed by dataset index.
pub fn build_batch(
    ds: &LabeledDataset,
    indices: &[usize],
    batch_index: u64,
    victim: &ConvNet,
    base: &GaussianParams,
    cfg: &ForgeryConfig,
    mask_cache: &mut [Option<SparseMask>],
) -> Result<PseudoAdvBatch> {
    if indices.len() % 2 != 0 || indices.is_empty() {
        return Err(Error::Config(format!(
            "batch length must be even and nonzero, got {}",
            indices.len()
        )));
    }
    let pg = perturb(base, batch_index, &cfg.perturbation)?;
    let w2 = wasserstein2_diag(&base.diagonal(), &pg.diagonal())?;
    let half = indices.len() / 2;

    // fill missing masks in parallel, then inject serially
    let missing: Vec<usize> = indices[..half]
        .iter()
        .copied()
        .filter(|&gi| mask_cache[gi].is_none())
        .collect();
    let computed = parallel_map(missing.len(), cfg.workers, |j| {
        mask_for_sample(victim, &ds.images[missing[j]], &cfg.mask)
    });
    for (gi, m) in missing.iter().zip(computed) {
        mask_cache[*gi] = Some(m?);
    }

    let mut images = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for (k, &gi) in indices.iter().enumerate() {
        if k < half {
            let mask = mask_cache[gi].as_ref().expect("mask filled above");
            let mut rng = RngStream::new(cfg.perturbation.seed, STREAM_SAMPLE)
                .split(batch_index)
                .split(k as u64);
            let forged = produce_pseudo_adv(
                &ds.images[gi],
                &pg,
                mask,
                cfg.gamma_p_quantile,
                cfg.epsilon,
                &mut rng,
            )?;
            images.push(forged);
            labels.push(1u8);
        } else {
            images.push(ds.images[gi].clone());
            labels.push(0u8);
        }
    }
    Ok(PseudoAdvBatch {
        images,
        binary_labels: labels,
        batch_index,
        draw_hash: pg.draw_hash,
        w2_distance: w2,
        loading: pg.loading,
    })
}

/// One row of the detector training log.
#[derive(Debug, Clone)]
pub struct BatchLogRow {
    pub epoch: usize,
    pub batch: u64,
    pub loss: f64,
    pub forged_fraction: f64,
    pub draw_hash: u64,
}

#[derive(Debug)]
pub struct DetectorRun {
    pub detector: ConvNet,
    pub log: Vec<BatchLogRow>,
    pub proximity: ProximityReport,
    pub epoch_loss: Vec<f64>,
}

/// Full training procedure: a fresh proximal distribution per batch, masked
/// noise injection into half of each batch, cross-entropy SGD on the rest.
/// The detector never sees a real adversarial sample.
pub fn train_detector(
    ds: &LabeledDataset,
    victim: &ConvNet,
    base: &GaussianParams,
    cfg: &ForgeryConfig,
) -> Result<DetectorRun> {
    let shape = ds.image_shape();
    if base.dim() != shape.iter().product::<usize>() {
        return Err(Error::Dimension(format!(
            "base distribution dim {} does not match image size {}",
            base.dim(),
            shape.iter().product::<usize>()
        )));
    }
    let mut detector = ConvNet::new(
        shape[0],
        shape[1],
        shape[2],
        2,
        cfg.detector_train.seed,
    )
    .map_err(|e| Error::Train(format!("detector init: {e}")))?;
    let mut velocity = SgdVelocity::zeros_like(&detector);
    let mut mask_cache: Vec<Option<SparseMask>> = vec![None; ds.len()];
    let mut log = Vec::new();
    let mut proximity_rows = Vec::new();
    let mut epoch_loss = Vec::with_capacity(cfg.detector_train.epochs);
    let mut batch_counter = 0u64;

    for epoch in 0..cfg.detector_train.epochs {
        let plan_seed = RngStream::new(cfg.detector_train.seed, 0x3a7).split(epoch as u64);
        let plan = make_batches(ds, cfg.batch_size, plan_seed.stream_id())
            .map_err(|e| Error::Train(format!("batch plan (epoch {epoch}): {e}")))?;
        if plan.batch_count() == 0 {
            return Err(Error::Train(format!(
                "dataset of {} samples yields no full batch of {}",
                ds.len(),
                cfg.batch_size
            )));
        }
        let mut loss_sum = 0.0f64;
        for indices in plan.batches() {
            let batch = build_batch(
                ds,
                indices,
                batch_counter,
                victim,
                base,
                cfg,
                &mut mask_cache,
            )
            .map_err(|e| Error::Train(format!("forgery (batch {batch_counter}): {e}")))?;
            let (loss, _) = detector
                .sgd_step(
                    batch.images.iter().zip(batch.binary_labels.iter().copied()),
                    batch.images.len(),
                    cfg.detector_train.learning_rate,
                    cfg.detector_train.momentum,
                    &mut velocity,
                )
                .map_err(|e| Error::Train(format!("sgd (batch {batch_counter}): {e}")))?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "detector loss diverged at batch {batch_counter}"
                )));
            }
            let forged = batch
                .binary_labels
                .iter()
                .filter(|&&l| l == 1)
                .count() as f64
                / batch.binary_labels.len() as f64;
            log.push(BatchLogRow {
                epoch,
                batch: batch_counter,
                loss,
                forged_fraction: forged,
                draw_hash: batch.draw_hash,
            });
            proximity_rows.push((batch.batch_index, batch.w2_distance));
            loss_sum += loss;
            batch_counter += 1;
        }
        epoch_loss.push(loss_sum / plan.batch_count() as f64);
    }

    let max = proximity_rows
        .iter()
        .map(|&(_, d)| d)
        .fold(0.0f64, f64::max);
    Ok(DetectorRun {
        detector,
        log,
        proximity: ProximityReport {
            rows: proximity_rows,
            max,
        },
        epoch_loss,
    })
}

/// Writes the training log CSV: epoch, batch, loss, forged fraction, hash.
pub fn write_training_log(rows: &[BatchLogRow], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,batch,loss,forged_fraction,perturbation_draw_hash")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{:016x}",
            r.epoch, r.batch, r.loss, r.forged_fraction, r.draw_hash
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack;
    use crate::mask::MaskConfig;

    fn noise_base(d: usize, var: f64) -> GaussianParams {
        let mut cov = vec![0.0f64; d * d];
        for i in 0..d {
            cov[i * d + i] = var;
        }
        GaussianParams::new(vec![0.0; d], cov).unwrap()
    }

    fn perturbed(d: usize, var: f64) -> PerturbedGaussian {
        let base = noise_base(d, var);
        perturb(
            &base,
            0,
            &PerturbationConfig {
                eps_mu: 0.0,
                eps_sigma: 0.0,
                seed: 1,
            },
        )
        .unwrap()
    }

    fn mask_of(bits: Vec<f32>, h: usize, w: usize) -> SparseMask {
        SparseMask {
            bits: Tensor::from_vec(&[h, w], bits).unwrap(),
        }
    }

    #[test]
    fn zero_mask_returns_input_bit_exact() {
        let ds = crate::synth::make_dataset(1, 1);
        let x = &ds.images[0];
        let pg = perturbed(784, 1e-3);
        let mask = mask_of(vec![0.0; 784], 28, 28);
        let mut rng = RngStream::new(2, 0);
        let out = produce_pseudo_adv(x, &pg, &mask, 0.95, 8.0 / 255.0, &mut rng).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn tiny_variance_keeps_output_near_input() {
        let ds = crate::synth::make_dataset(1, 2);
        let x = &ds.images[0];
        let pg = perturbed(784, 1e-10);
        let mask = mask_of(vec![1.0; 784], 28, 28);
        let mut rng = RngStream::new(3, 0);
        let out = produce_pseudo_adv(x, &pg, &mask, 0.95, 8.0 / 255.0, &mut rng).unwrap();
        // zero mean, sigma 1e-5: every pixel within a loose multiple of 3 sigma
        assert!(out.linf_distance(x) < 1e-3);
    }

    #[test]
    fn off_mask_pixels_are_bit_identical_and_deviation_bounded() {
        let ds = crate::synth::make_dataset(1, 3);
        let x = &ds.images[0];
        let pg = perturbed(784, 1e-3);
        let mut bits = vec![0.0f32; 784];
        for i in (0..784).step_by(3) {
            bits[i] = 1.0;
        }
        let mask = mask_of(bits.clone(), 28, 28);
        let eps = 8.0 / 255.0;
        let mut rng = RngStream::new(4, 0);
        let out = produce_pseudo_adv(x, &pg, &mask, 0.95, eps as f64, &mut rng).unwrap();
        for (p, (&b, (&xo, &xn))) in bits.iter().zip(x.data().iter().zip(out.data())).enumerate() {
            if b == 0.0 {
                assert!(xo.to_bits() == xn.to_bits(), "pixel {p} changed off-mask");
            } else {
                assert!((xn - xo).abs() <= eps + 1e-6);
            }
        }
    }

    fn small_world() -> (LabeledDataset, ConvNet, GaussianParams) {
        let ds = crate::synth::make_dataset(48, 5);
        let victim = ConvNet::new(1, 28, 28, 10, 6).unwrap();
        let base = noise_base(784, 8e-4);
        (ds, victim, base)
    }

    #[test]
    fn batch_is_half_forged_and_deterministic() {
        let (ds, victim, base) = small_world();
        let cfg = ForgeryConfig {
            batch_size: 8,
            ..ForgeryConfig::default()
        };
        let indices: Vec<usize> = (0..8).collect();
        let mut cache_a: Vec<Option<SparseMask>> = vec![None; ds.len()];
        let a = build_batch(&ds, &indices, 3, &victim, &base, &cfg, &mut cache_a).unwrap();
        assert_eq!(a.binary_labels.iter().filter(|&&l| l == 1).count(), 4);
        assert_eq!(a.binary_labels.iter().filter(|&&l| l == 0).count(), 4);

        let mut cache_b: Vec<Option<SparseMask>> = vec![None; ds.len()];
        let b = build_batch(&ds, &indices, 3, &victim, &base, &cfg, &mut cache_b).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.draw_hash, b.draw_hash);

        // forged samples differ from naturals only on their mask support
        for k in 0..4 {
            let gi = indices[k];
            let mask = cache_a[gi].as_ref().unwrap();
            for p in 0..784 {
                if mask.bits.data()[p] == 0.0 {
                    assert_eq!(a.images[k].data()[p], ds.images[gi].data()[p]);
                }
            }
        }
    }

    #[test]
    fn training_converges_and_never_attacks() {
        let (ds, victim, base) = small_world();
        let cfg = ForgeryConfig {
            batch_size: 8,
            detector_train: TrainConfig {
                learning_rate: 0.05,
                epochs: 3,
                batch_size: 8,
                momentum: 0.9,
                seed: 11,
            },
            ..ForgeryConfig::default()
        };
        let before = attack::invocation_count();
        let run = train_detector(&ds, &victim, &base, &cfg).unwrap();
        assert_eq!(
            attack::invocation_count(),
            before,
            "detector training must not invoke attacks"
        );
        assert_eq!(run.log.len(), 3 * (48 / 8));
        assert!(run.epoch_loss.last().unwrap() < run.epoch_loss.first().unwrap());
        // per-batch distribution freshness
        let mut hashes: Vec<u64> = run.log.iter().map(|r| r.draw_hash).collect();
        hashes.sort_unstable();
        hashes.dedup();
        assert_eq!(hashes.len(), run.log.len(), "duplicate perturbation draws");
        assert_eq!(run.proximity.rows.len(), run.log.len());
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, victim, base) = small_world();
        let cfg = ForgeryConfig {
            batch_size: 8,
            detector_train: TrainConfig {
                learning_rate: 0.05,
                epochs: 2,
                batch_size: 8,
                momentum: 0.9,
                seed: 21,
            },
            ..ForgeryConfig::default()
        };
        let a = train_detector(&ds, &victim, &base, &cfg).unwrap();
        let b = train_detector(&ds, &victim, &base, &cfg).unwrap();
        assert!(a.detector.weights_equal(&b.detector));
    }
}
