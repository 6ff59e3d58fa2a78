//! Shared end-to-end fixture for the heavy acceptance criteria: one trained
//! victim, the FGSM-seeded base Gaussian, the fully-trained detector, and
//! per-attack adversarial evaluation sets. Built once, on first use.

use std::collections::HashMap;
use std::sync::OnceLock;

use pfd_core::attack::{AttackConfig, AttackKind};
use pfd_core::dataset::LabeledDataset;
use pfd_core::eval::{generate_adversarial_set, pick_eval_indices};
use pfd_core::forgery::{train_detector, ForgeryConfig};
use pfd_core::gaussian::GaussianParams;
use pfd_core::net::{ConvNet, TrainConfig};
use pfd_core::noise::{build_noise_bank, estimate};
use pfd_core::rng::RngStream;
use pfd_core::synth;
use pfd_core::tensor::Tensor;

pub const SEED: u64 = 20_240_817;
pub const TRAIN_SIZE: usize = 10_000;
pub const TEST_SIZE: usize = 2_000;
pub const BANK_SIZE: usize = 1_000;
pub const EVAL_SIZE: usize = 500;
pub const WORKERS: usize = 2;

pub struct Fixture {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub victim: ConvNet,
    pub victim_test_accuracy: f64,
    pub base: GaussianParams,
    pub detector: ConvNet,
    pub naturals: Vec<Tensor>,
    pub adv_sets: HashMap<AttackKind, Vec<Tensor>>,
    pub adv_accuracy: HashMap<AttackKind, f64>,
    pub clean_accuracy: f64,
    pub adv_indices: Vec<usize>,
    pub attack_cfg: AttackConfig,
    pub forgery_cfg: ForgeryConfig,
}

pub fn attack_config() -> AttackConfig {
    AttackConfig {
        epsilon: 8.0 / 255.0,
        steps: 10,
        step_size: 2.0 / 255.0,
        decay: 1.0,
        diversity_prob: 0.5,
        alpha_joint: 1.0,
        seed: SEED,
    }
}

pub fn forgery_config() -> ForgeryConfig {
    ForgeryConfig {
        epsilon: 8.0 / 255.0,
        batch_size: 16,
        detector_train: TrainConfig {
            learning_rate: 0.02,
            epochs: 10,
            batch_size: 16,
            momentum: 0.9,
            seed: SEED ^ 0xd7,
        },
        workers: WORKERS,
        ..ForgeryConfig::default()
    }
}

fn build() -> Fixture {
    let t0 = std::time::Instant::now();
    let train = synth::make_dataset(TRAIN_SIZE, SEED);
    let test = synth::make_dataset(TEST_SIZE, SEED ^ 0x7e57);

    let mut victim = ConvNet::new(1, 28, 28, 10, SEED).unwrap();
    let vcfg = TrainConfig {
        learning_rate: 0.02,
        epochs: 5,
        batch_size: 64,
        momentum: 0.9,
        seed: SEED ^ 0x71,
    };
    let idx: Vec<usize> = (0..train.len()).collect();
    victim.train(&train, &idx, &vcfg).unwrap();
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let victim_test_accuracy = victim.accuracy(&test, &test_idx).unwrap();
    eprintln!(
        "[fixture {:.0?}] victim test accuracy {victim_test_accuracy:.4}",
        t0.elapsed()
    );

    let attack_cfg = attack_config();
    let mut bank_rng = RngStream::new(SEED, 0xb1);
    let bank_idx = bank_rng.choose_indices(train.len(), BANK_SIZE);
    let bank = build_noise_bank(
        &victim,
        &train,
        &bank_idx,
        AttackKind::Fgsm,
        &attack_cfg,
        WORKERS,
    )
    .unwrap();
    let base = estimate(&bank, None).unwrap();
    eprintln!("[fixture {:.0?}] base Gaussian estimated", t0.elapsed());

    let forgery_cfg = forgery_config();
    let run = train_detector(&train, &victim, &base, &forgery_cfg).unwrap();
    eprintln!(
        "[fixture {:.0?}] detector trained, epoch losses {:?}",
        t0.elapsed(),
        run.epoch_loss
            .iter()
            .map(|l| (l * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );

    let (nat_idx, adv_idx) = pick_eval_indices(test.len(), EVAL_SIZE, SEED);
    let naturals: Vec<Tensor> = nat_idx.iter().map(|&i| test.images[i].clone()).collect();
    let clean_accuracy = victim.accuracy(&test, &adv_idx).unwrap();
    let mut adv_sets = HashMap::new();
    let mut adv_accuracy = HashMap::new();
    for kind in [
        AttackKind::Pgd,
        AttackKind::Bim,
        AttackKind::Mim,
        AttackKind::Fgsm,
    ] {
        let advs =
            generate_adversarial_set(kind, &victim, None, &test, &adv_idx, &attack_cfg, WORKERS)
                .unwrap();
        let mut correct = 0usize;
        for (&i, adv) in adv_idx.iter().zip(&advs) {
            if victim.predict(adv).unwrap() == test.labels[i] as usize {
                correct += 1;
            }
        }
        adv_accuracy.insert(kind, correct as f64 / advs.len() as f64);
        adv_sets.insert(kind, advs);
    }
    eprintln!(
        "[fixture {:.0?}] eval sets ready (clean {clean_accuracy:.3}, adv {:?})",
        t0.elapsed(),
        adv_accuracy
            .iter()
            .map(|(k, v)| format!("{} {:.3}", k.as_str(), v))
            .collect::<Vec<_>>()
    );

    Fixture {
        train,
        test,
        victim,
        victim_test_accuracy,
        base,
        detector: run.detector,
        naturals,
        adv_sets,
        adv_accuracy,
        clean_accuracy,
        adv_indices: adv_idx,
        attack_cfg,
        forgery_cfg,
    }
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

pub fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(build)
}
