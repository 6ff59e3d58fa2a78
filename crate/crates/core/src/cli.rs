//! Command implementations behind the `pfd` binary. Each command writes its
//! resolved config snapshot next to its outputs and is byte-reproducible for
//! a fixed config and seed.

use std::io::Write;
use std::path::PathBuf;

use crate::attack::AttackKind;
use crate::config::{AblateMode, DatasetKind, RunConfig};
use crate::dataset::{load_cifar10_bin, load_mnist_idx, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_data_size, ablation_initial_attack, generate_adversarial_set, pick_eval_indices,
    run_benchmark, write_report_csv, PipelineEnv,
};
use crate::forgery::{train_detector, write_training_log};
use crate::net::ConvNet;
use crate::noise::{build_noise_bank, estimate, perturb, sample_filtered, NoiseBank};
use crate::rng::RngStream;

const STREAM_TRAIN_SUBSET: u64 = 0x5b1;
const STREAM_TEST_SUBSET: u64 = 0x5b2;
const STREAM_BANK_SUBSET: u64 = 0x5b3;

pub enum Split {
    Train,
    Test,
}

/// Loads the configured dataset split, capped to the configured subset size.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<LabeledDataset> {
    let ds = match (cfg.dataset, &split) {
        (DatasetKind::Mnist, Split::Train) => load_mnist_idx(
            std::path::Path::new(&cfg.mnist_train_images),
            std::path::Path::new(&cfg.mnist_train_labels),
        ),
        (DatasetKind::Mnist, Split::Test) => load_mnist_idx(
            std::path::Path::new(&cfg.mnist_test_images),
            std::path::Path::new(&cfg.mnist_test_labels),
        ),
        (DatasetKind::Cifar10, Split::Train) => {
            load_cifar10_bin(std::path::Path::new(&cfg.cifar_train))
        }
        (DatasetKind::Cifar10, Split::Test) => {
            load_cifar10_bin(std::path::Path::new(&cfg.cifar_test))
        }
    };
    let ds = match ds {
        Ok(ds) => ds,
        Err(Error::Io(e)) => {
            return Err(Error::Config(format!(
                "dataset file missing or unreadable: {e}"
            )))
        }
        Err(other) => return Err(other),
    };
    let (cap, stream) = match split {
        Split::Train => (cfg.train_size, STREAM_TRAIN_SUBSET),
        Split::Test => (cfg.test_size, STREAM_TEST_SUBSET),
    };
    if cap == 0 || cap >= ds.len() {
        Ok(ds)
    } else {
        let mut rng = RngStream::new(cfg.seed, stream);
        let idx = rng.choose_indices(ds.len(), cap);
        Ok(ds.subset(&idx))
    }
}

fn load_victim(cfg: &RunConfig) -> Result<ConvNet> {
    ConvNet::load(&cfg.victim_weights_path()).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "victim weights missing at {}: {io}",
            cfg.victim_weights_path().display()
        )),
        other => other,
    })
}

fn load_detector(cfg: &RunConfig) -> Result<ConvNet> {
    ConvNet::load(&cfg.detector_weights_path()).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "detector weights missing at {}: {io}",
            cfg.detector_weights_path().display()
        )),
        other => other,
    })
}

pub struct TrainVictimOutput {
    pub weights: PathBuf,
    pub log: PathBuf,
    pub test_accuracy: f64,
}

/// Trains the victim classifier and enforces the per-dataset accuracy gate.
pub fn cmd_train_victim(cfg: &RunConfig) -> Result<TrainVictimOutput> {
    cfg.write_snapshot()?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let shape = train.image_shape();
    let mut net = ConvNet::new(shape[0], shape[1], shape[2], train.class_count, cfg.seed)?;
    let indices: Vec<usize> = (0..train.len()).collect();
    let stats = net.train(&train, &indices, &cfg.victim_train_config())?;
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let test_accuracy = net.accuracy(&test, &test_idx)?;

    let weights = cfg.victim_weights_path();
    net.save(&weights)?;
    let log = cfg.out_dir().join("victim_train_log.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&log)?);
        writeln!(f, "phase,epoch,loss,accuracy")?;
        for s in &stats {
            writeln!(f, "train,{},{},{}", s.epoch, s.mean_loss, s.accuracy)?;
        }
        writeln!(f, "test,,,{test_accuracy}")?;
    }
    let gate = cfg.dataset.accuracy_gate();
    if test_accuracy < gate {
        return Err(Error::Train(format!(
            "victim accuracy {test_accuracy:.4} below the {gate} gate for {}",
            cfg.dataset.as_str()
        )));
    }
    Ok(TrainVictimOutput {
        weights,
        log,
        test_accuracy,
    })
}

/// Generates an adversarial set with the configured attack and persists it in
/// the dataset cache format with the attack recorded in the header.
pub fn cmd_attack(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.write_snapshot()?;
    let victim = load_victim(cfg)?;
    let test = load_split(cfg, Split::Test)?;
    let kind = if cfg.whitebox {
        AttackKind::Whitebox
    } else {
        cfg.attack
    };
    let detector = if kind == AttackKind::Whitebox {
        Some(load_detector(cfg)?)
    } else {
        None
    };
    let (_, adv_idx) = pick_eval_indices(test.len(), cfg.eval_size, cfg.seed);
    let advs = generate_adversarial_set(
        kind,
        &victim,
        detector.as_ref(),
        &test,
        &adv_idx,
        &cfg.attack_config(),
        cfg.workers,
    )?;
    let labels: Vec<u8> = adv_idx.iter().map(|&i| test.labels[i]).collect();
    let out = LabeledDataset {
        images: advs,
        labels,
        name: test.name.clone(),
        class_count: test.class_count,
        attack_meta: Some((kind.as_str().to_string(), cfg.epsilon() as f32)),
    };
    let path = cfg.out_dir().join(format!("adv_{}.pfds", kind.as_str()));
    out.save_cache(&path)?;
    Ok(path)
}

/// Builds the initial-attack noise bank from the training split.
pub fn cmd_build_bank(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.write_snapshot()?;
    let victim = load_victim(cfg)?;
    let train = load_split(cfg, Split::Train)?;
    let bank = build_bank_from(cfg, &victim, &train)?;
    let path = cfg.bank_path();
    bank.save(&path)?;
    Ok(path)
}

fn build_bank_from(
    cfg: &RunConfig,
    victim: &ConvNet,
    train: &LabeledDataset,
) -> Result<NoiseBank> {
    let mut rng = RngStream::new(cfg.seed, STREAM_BANK_SUBSET);
    let indices = rng.choose_indices(train.len(), cfg.bank_size);
    build_noise_bank(
        victim,
        train,
        &indices,
        cfg.initial_attack,
        &cfg.attack_config(),
        cfg.workers,
    )
}

pub struct TrainDetectorOutput {
    pub weights: PathBuf,
    pub log: PathBuf,
    pub proximity: PathBuf,
    pub final_epoch_loss: f64,
}

/// Runs the full training procedure: noise bank (loaded or built), base
/// Gaussian estimate, per-batch perturbation forgery, detector SGD.
pub fn cmd_train_detector(cfg: &RunConfig) -> Result<TrainDetectorOutput> {
    cfg.write_snapshot()?;
    let victim = load_victim(cfg)?;
    let train = load_split(cfg, Split::Train)?;
    let bank_path = cfg.bank_path();
    let bank = if bank_path.exists() {
        NoiseBank::load(&bank_path)?
    } else {
        let bank = build_bank_from(cfg, &victim, &train)?;
        bank.save(&bank_path)?;
        bank
    };
    let base = estimate(&bank, cfg.shrinkage)?;
    let run = train_detector(&train, &victim, &base, &cfg.forgery_config())?;

    let weights = cfg.detector_weights_path();
    run.detector.save(&weights)?;
    let log = cfg.out_dir().join("detector_train_log.csv");
    write_training_log(&run.log, &log)?;
    let proximity = cfg.out_dir().join("proximity.csv");
    run.proximity.write_csv(&proximity)?;
    Ok(TrainDetectorOutput {
        weights,
        log,
        proximity,
        final_epoch_loss: *run.epoch_loss.last().unwrap_or(&f64::NAN),
    })
}

/// Evaluates the detector against the configured attack list (or the joint
/// white-box attack) and writes the report plus per-attack ROC curves.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.write_snapshot()?;
    let victim = load_victim(cfg)?;
    let detector = load_detector(cfg)?;
    let test = load_split(cfg, Split::Test)?;
    let attacks: Vec<AttackKind> = if cfg.whitebox {
        vec![AttackKind::Whitebox]
    } else {
        cfg.eval_attacks.clone()
    };
    let results = run_benchmark(
        &detector,
        &victim,
        &test,
        &attacks,
        &cfg.attack_config(),
        cfg.eval_size,
        cfg.seed,
        cfg.config_hash(),
        cfg.workers,
    );
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (kind, result) in results {
        match result {
            Ok(report) => {
                report.write_roc_csv(&cfg.out_dir().join(format!("roc_{}.csv", kind.as_str())))?;
                reports.push(report);
            }
            Err(e) => {
                eprintln!("attack {} failed: {e}", kind.as_str());
                failures.push((kind, e));
            }
        }
    }
    if reports.is_empty() {
        let (kind, e) = failures.into_iter().next().expect("no attacks ran");
        return Err(Error::Train(format!(
            "every attack failed; first ({}): {e}",
            kind.as_str()
        )));
    }
    let path = cfg.out_dir().join("report.csv");
    write_report_csv(&reports, &path)?;
    Ok(path)
}

/// Data-size or initial-attack ablation over the full pipeline.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.write_snapshot()?;
    let victim = load_victim(cfg)?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let env = PipelineEnv {
        victim: &victim,
        train: &train,
        test: &test,
        bank_attack_cfg: cfg.attack_config(),
        eval_attack_cfg: cfg.attack_config(),
        forgery: cfg.forgery_config(),
        shrinkage: cfg.shrinkage,
        eval_size: cfg.eval_size,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        workers: cfg.workers,
    };
    match cfg.ablate_mode {
        AblateMode::DataSize => {
            let rows = ablation_data_size(&env, &cfg.ablate_sizes, cfg.attack)?;
            let path = cfg.out_dir().join("ablate_data_size.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(f, "bank_size,auroc")?;
            for (size, auroc) in rows {
                writeln!(f, "{size},{auroc}")?;
            }
            Ok(path)
        }
        AblateMode::InitialAttack => {
            let matrix = ablation_initial_attack(
                &env,
                &cfg.ablate_initial_attacks,
                &cfg.ablate_test_attacks,
                cfg.bank_size,
            )?;
            let path = cfg.out_dir().join("ablate_initial_attack.csv");
            matrix.write_csv(&path)?;
            Ok(path)
        }
    }
}

/// Exports the noise bank plus a sample of forged pseudo-noise as a flat CSV
/// (one row per vector, coordinates then a source tag).
pub fn cmd_export_noise(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.write_snapshot()?;
    let bank = NoiseBank::load(&cfg.bank_path()).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "noise bank missing at {}: {io}",
            cfg.bank_path().display()
        )),
        other => other,
    })?;
    let base = estimate(&bank, cfg.shrinkage)?;
    let pcfg = cfg.perturbation_config();
    let mut forged = Vec::new();
    let per_batch = 32usize;
    let batches = 8u64;
    for b in 0..batches {
        let pg = perturb(&base, b, &pcfg)?;
        let mut rng = RngStream::new(cfg.seed, 0xe4bb).split(b);
        for _ in 0..per_batch {
            let z = sample_filtered(&pg, cfg.gamma_p_quantile, cfg.epsilon(), &mut rng)?;
            forged.push(z.iter().map(|&v| v as f32).collect::<Vec<f32>>());
        }
    }
    let groups = vec![
        (bank.attack_name.clone(), bank.vectors.clone()),
        ("forged".to_string(), forged),
    ];
    let path = cfg.out_dir().join("noise_export.csv");
    crate::eval::export_noise_csv(&groups, &path)?;
    Ok(path)
}
