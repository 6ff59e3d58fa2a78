//! Run configuration: a strict key=value file merged with command-line
//! overrides. Unknown keys are rejected; every run writes its fully-resolved
//! snapshot next to its outputs. Threshold-style values (`eps_mu`, `gamma_*`)
//! are given on the 0-255 pixel scale and rescaled at use; `epsilon` and
//! `attack_step_size` accept fractions like `8/255`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attack::{AttackConfig, AttackKind};
use crate::error::{Error, Result};
use crate::forgery::ForgeryConfig;
use crate::mask::MaskConfig;
use crate::net::TrainConfig;
use crate::noise::PerturbationConfig;
use crate::util::fnv1a_str;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Victim test-accuracy gate for this dataset.
    pub fn accuracy_gate(&self) -> f64 {
        match self {
            DatasetKind::Mnist => 0.97,
            DatasetKind::Cifar10 => 0.70,
        }
    }

    fn default_epsilon(&self) -> f64 {
        match self {
            DatasetKind::Mnist => 8.0 / 255.0,
            DatasetKind::Cifar10 => 4.0 / 255.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateMode {
    DataSize,
    InitialAttack,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub mnist_train_images: String,
    pub mnist_train_labels: String,
    pub mnist_test_images: String,
    pub mnist_test_labels: String,
    pub cifar_train: String,
    pub cifar_test: String,
    /// Caps on the train/test subsets actually used (0 = everything).
    pub train_size: usize,
    pub test_size: usize,
    pub victim_epochs: usize,
    pub victim_lr: f64,
    pub victim_momentum: f64,
    pub victim_batch_size: usize,
    pub detector_epochs: usize,
    pub detector_lr: f64,
    pub detector_momentum: f64,
    pub batch_size: usize,
    pub bank_size: usize,
    pub initial_attack: AttackKind,
    pub attack: AttackKind,
    epsilon: Option<f64>,
    pub attack_steps: usize,
    pub attack_step_size: f64,
    pub attack_decay: f64,
    pub attack_diversity_prob: f64,
    pub alpha_joint: f64,
    /// Mean-perturbation scale on the 0-255 pixel scale.
    pub eps_mu: f64,
    pub eps_sigma: f64,
    pub gamma_p_quantile: f64,
    /// Mask thresholds on the 0-255 pixel scale.
    pub gamma_s: f64,
    pub gamma_c: f64,
    pub gamma_l: f64,
    /// `None` = trace-scaled default shrinkage.
    pub shrinkage: Option<f64>,
    pub seed: u64,
    pub out_dir: String,
    pub workers: usize,
    pub eval_attacks: Vec<AttackKind>,
    pub eval_size: usize,
    pub whitebox: bool,
    pub ablate_mode: AblateMode,
    pub ablate_sizes: Vec<usize>,
    pub ablate_initial_attacks: Vec<AttackKind>,
    pub ablate_test_attacks: Vec<AttackKind>,
    victim_weights: String,
    detector_weights: String,
    bank_path: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetKind::Mnist,
            mnist_train_images: "data/train-images-idx3-ubyte".into(),
            mnist_train_labels: "data/train-labels-idx1-ubyte".into(),
            mnist_test_images: "data/t10k-images-idx3-ubyte".into(),
            mnist_test_labels: "data/t10k-labels-idx1-ubyte".into(),
            cifar_train: "data/data_batch_1.bin".into(),
            cifar_test: "data/test_batch.bin".into(),
            train_size: 10_000,
            test_size: 2_000,
            victim_epochs: 5,
            victim_lr: 0.01,
            victim_momentum: 0.9,
            victim_batch_size: 64,
            detector_epochs: 10,
            detector_lr: 0.01,
            detector_momentum: 0.9,
            batch_size: 64,
            bank_size: 1000,
            initial_attack: AttackKind::Fgsm,
            attack: AttackKind::Pgd,
            epsilon: None,
            attack_steps: 10,
            attack_step_size: 2.0 / 255.0,
            attack_decay: 1.0,
            attack_diversity_prob: 0.5,
            alpha_joint: 1.0,
            eps_mu: 3.0,
            eps_sigma: 0.005,
            gamma_p_quantile: 0.95,
            gamma_s: 0.0,
            gamma_c: 125.0,
            gamma_l: 100.0,
            shrinkage: None,
            seed: 0,
            out_dir: "out".into(),
            workers: 1,
            eval_attacks: vec![AttackKind::Pgd, AttackKind::Bim, AttackKind::Mim],
            eval_size: 500,
            whitebox: false,
            ablate_mode: AblateMode::DataSize,
            ablate_sizes: vec![100, 1000],
            ablate_initial_attacks: vec![AttackKind::Fgsm, AttackKind::Pgd],
            ablate_test_attacks: vec![AttackKind::Pgd, AttackKind::Bim, AttackKind::Mim],
            victim_weights: String::new(),
            detector_weights: String::new(),
            bank_path: String::new(),
        }
    }
}

fn parse_ratio(v: &str) -> Result<f64> {
    if let Some((num, den)) = v.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad fraction numerator '{num}'")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad fraction denominator '{den}'")))?;
        if d == 0.0 {
            return Err(Error::Config("fraction denominator is zero".into()));
        }
        Ok(n / d)
    } else {
        v.trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad number '{v}'")))
    }
}

fn parse_usize(v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad integer '{v}'")))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean '{other}'"))),
    }
}

fn parse_attacks(v: &str) -> Result<Vec<AttackKind>> {
    v.split(',')
        .map(|s| s.trim().parse::<AttackKind>())
        .collect()
}

impl RunConfig {
    /// Parses a key=value file ('#' starts a comment) over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Applies one key=value pair; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = match value {
                    "mnist" => DatasetKind::Mnist,
                    "cifar10" => DatasetKind::Cifar10,
                    other => return Err(Error::Config(format!("unknown dataset '{other}'"))),
                }
            }
            "mnist_train_images" => self.mnist_train_images = value.into(),
            "mnist_train_labels" => self.mnist_train_labels = value.into(),
            "mnist_test_images" => self.mnist_test_images = value.into(),
            "mnist_test_labels" => self.mnist_test_labels = value.into(),
            "cifar_train" => self.cifar_train = value.into(),
            "cifar_test" => self.cifar_test = value.into(),
            "train_size" => self.train_size = parse_usize(value)?,
            "test_size" => self.test_size = parse_usize(value)?,
            "victim_epochs" => self.victim_epochs = parse_usize(value)?,
            "victim_lr" => self.victim_lr = parse_ratio(value)?,
            "victim_momentum" => self.victim_momentum = parse_ratio(value)?,
            "victim_batch_size" => self.victim_batch_size = parse_usize(value)?,
            "detector_epochs" => self.detector_epochs = parse_usize(value)?,
            "detector_lr" => self.detector_lr = parse_ratio(value)?,
            "detector_momentum" => self.detector_momentum = parse_ratio(value)?,
            "batch_size" => self.batch_size = parse_usize(value)?,
            "bank_size" => self.bank_size = parse_usize(value)?,
            "initial_attack" => self.initial_attack = value.parse()?,
            "attack" => self.attack = value.parse()?,
            "epsilon" => self.epsilon = Some(parse_ratio(value)?),
            "attack_steps" => self.attack_steps = parse_usize(value)?,
            "attack_step_size" => self.attack_step_size = parse_ratio(value)?,
            "attack_decay" => self.attack_decay = parse_ratio(value)?,
            "attack_diversity_prob" => self.attack_diversity_prob = parse_ratio(value)?,
            "alpha_joint" => self.alpha_joint = parse_ratio(value)?,
            "eps_mu" => self.eps_mu = parse_ratio(value)?,
            "eps_sigma" => self.eps_sigma = parse_ratio(value)?,
            "gamma_p_quantile" => self.gamma_p_quantile = parse_ratio(value)?,
            "gamma_s" => self.gamma_s = parse_ratio(value)?,
            "gamma_c" => self.gamma_c = parse_ratio(value)?,
            "gamma_l" => self.gamma_l = parse_ratio(value)?,
            "shrinkage" => {
                self.shrinkage = if value == "auto" {
                    None
                } else {
                    Some(parse_ratio(value)?)
                }
            }
            "seed" => {
                self.seed = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed '{value}'")))?
            }
            "out_dir" => self.out_dir = value.into(),
            "workers" => self.workers = parse_usize(value)?.max(1),
            "eval_attacks" => self.eval_attacks = parse_attacks(value)?,
            "eval_size" => self.eval_size = parse_usize(value)?,
            "whitebox" => self.whitebox = parse_bool(value)?,
            "ablate_mode" => {
                self.ablate_mode = match value {
                    "data_size" => AblateMode::DataSize,
                    "initial_attack" => AblateMode::InitialAttack,
                    other => return Err(Error::Config(format!("unknown ablate_mode '{other}'"))),
                }
            }
            "ablate_sizes" => {
                self.ablate_sizes = value
                    .split(',')
                    .map(|s| parse_usize(s.trim()))
                    .collect::<Result<_>>()?
            }
            "ablate_initial_attacks" => self.ablate_initial_attacks = parse_attacks(value)?,
            "ablate_test_attacks" => self.ablate_test_attacks = parse_attacks(value)?,
            "victim_weights" => self.victim_weights = value.into(),
            "detector_weights" => self.detector_weights = value.into(),
            "bank_path" => self.bank_path = value.into(),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Attack budget in [0,1] units; defaults depend on the dataset.
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| self.dataset.default_epsilon())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn victim_weights_path(&self) -> PathBuf {
        if self.victim_weights.is_empty() {
            self.out_dir().join("victim.pfnw")
        } else {
            PathBuf::from(&self.victim_weights)
        }
    }

    pub fn detector_weights_path(&self) -> PathBuf {
        if self.detector_weights.is_empty() {
            self.out_dir().join("detector.pfnw")
        } else {
            PathBuf::from(&self.detector_weights)
        }
    }

    pub fn bank_path(&self) -> PathBuf {
        if self.bank_path.is_empty() {
            self.out_dir().join("bank.pfnb")
        } else {
            PathBuf::from(&self.bank_path)
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            gamma_s: (self.gamma_s / 255.0) as f32,
            gamma_c: (self.gamma_c / 255.0) as f32,
            gamma_l: (self.gamma_l / 255.0) as f32,
        }
    }

    pub fn perturbation_config(&self) -> PerturbationConfig {
        PerturbationConfig {
            eps_mu: self.eps_mu / 255.0,
            eps_sigma: self.eps_sigma,
            seed: self.seed,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon() as f32,
            steps: self.attack_steps,
            step_size: self.attack_step_size as f32,
            decay: self.attack_decay as f32,
            diversity_prob: self.attack_diversity_prob,
            alpha_joint: self.alpha_joint as f32,
            seed: self.seed,
        }
    }

    pub fn victim_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.victim_lr as f32,
            epochs: self.victim_epochs,
            batch_size: self.victim_batch_size,
            momentum: self.victim_momentum as f32,
            seed: self.seed ^ 0x71c71,
        }
    }

    pub fn forgery_config(&self) -> ForgeryConfig {
        ForgeryConfig {
            perturbation: self.perturbation_config(),
            mask: self.mask_config(),
            gamma_p_quantile: self.gamma_p_quantile,
            epsilon: self.epsilon(),
            batch_size: self.batch_size,
            detector_train: TrainConfig {
                learning_rate: self.detector_lr as f32,
                epochs: self.detector_epochs,
                batch_size: self.batch_size,
                momentum: self.detector_momentum as f32,
                seed: self.seed ^ 0xd7ec7,
            },
            workers: self.workers,
        }
    }

    /// Canonical sorted rendering of the fully-resolved configuration.
    pub fn snapshot(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("dataset", self.dataset.as_str().into());
        map.insert("mnist_train_images", self.mnist_train_images.clone());
        map.insert("mnist_train_labels", self.mnist_train_labels.clone());
        map.insert("mnist_test_images", self.mnist_test_images.clone());
        map.insert("mnist_test_labels", self.mnist_test_labels.clone());
        map.insert("cifar_train", self.cifar_train.clone());
        map.insert("cifar_test", self.cifar_test.clone());
        map.insert("train_size", self.train_size.to_string());
        map.insert("test_size", self.test_size.to_string());
        map.insert("victim_epochs", self.victim_epochs.to_string());
        map.insert("victim_lr", self.victim_lr.to_string());
        map.insert("victim_momentum", self.victim_momentum.to_string());
        map.insert("victim_batch_size", self.victim_batch_size.to_string());
        map.insert("detector_epochs", self.detector_epochs.to_string());
        map.insert("detector_lr", self.detector_lr.to_string());
        map.insert("detector_momentum", self.detector_momentum.to_string());
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("bank_size", self.bank_size.to_string());
        map.insert("initial_attack", self.initial_attack.as_str().into());
        map.insert("attack", self.attack.as_str().into());
        map.insert("epsilon", self.epsilon().to_string());
        map.insert("attack_steps", self.attack_steps.to_string());
        map.insert("attack_step_size", self.attack_step_size.to_string());
        map.insert("attack_decay", self.attack_decay.to_string());
        map.insert(
            "attack_diversity_prob",
            self.attack_diversity_prob.to_string(),
        );
        map.insert("alpha_joint", self.alpha_joint.to_string());
        map.insert("eps_mu", self.eps_mu.to_string());
        map.insert("eps_sigma", self.eps_sigma.to_string());
        map.insert("gamma_p_quantile", self.gamma_p_quantile.to_string());
        map.insert("gamma_s", self.gamma_s.to_string());
        map.insert("gamma_c", self.gamma_c.to_string());
        map.insert("gamma_l", self.gamma_l.to_string());
        map.insert(
            "shrinkage",
            self.shrinkage.map_or("auto".into(), |v| v.to_string()),
        );
        map.insert("seed", self.seed.to_string());
        map.insert("out_dir", self.out_dir.clone());
        map.insert("workers", self.workers.to_string());
        map.insert(
            "eval_attacks",
            self.eval_attacks
                .iter()
                .map(|a| a.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("eval_size", self.eval_size.to_string());
        map.insert("whitebox", self.whitebox.to_string());
        map.insert(
            "ablate_mode",
            match self.ablate_mode {
                AblateMode::DataSize => "data_size".into(),
                AblateMode::InitialAttack => "initial_attack".into(),
            },
        );
        map.insert(
            "ablate_sizes",
            self.ablate_sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "ablate_initial_attacks",
            self.ablate_initial_attacks
                .iter()
                .map(|a| a.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "ablate_test_attacks",
            self.ablate_test_attacks
                .iter()
                .map(|a| a.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "victim_weights",
            self.victim_weights_path().display().to_string(),
        );
        map.insert(
            "detector_weights",
            self.detector_weights_path().display().to_string(),
        );
        map.insert("bank_path", self.bank_path().display().to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a_str(&self.snapshot())
    }

    /// Writes the resolved snapshot into the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("config.resolved.txt");
        std::fs::write(&path, self.snapshot())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_paper_scales() {
        let cfg = RunConfig::default();
        assert!((cfg.epsilon() - 8.0 / 255.0).abs() < 1e-12);
        let mask = cfg.mask_config();
        assert!((mask.gamma_c - 125.0 / 255.0).abs() < 1e-6);
        assert!((mask.gamma_l - 100.0 / 255.0).abs() < 1e-6);
        assert_eq!(mask.gamma_s, 0.0);
        let pert = cfg.perturbation_config();
        assert!((pert.eps_mu - 3.0 / 255.0).abs() < 1e-12);
        assert_eq!(pert.eps_sigma, 0.005);
    }

    #[test]
    fn cifar_epsilon_default_differs() {
        let mut cfg = RunConfig::default();
        cfg.set("dataset", "cifar10").unwrap();
        assert!((cfg.epsilon() - 4.0 / 255.0).abs() < 1e-12);
        cfg.set("epsilon", "8/255").unwrap();
        assert!((cfg.epsilon() - 8.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn file_parsing_with_comments_and_fractions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(
            &p,
            "# experiment\nseed = 7\nepsilon = 4/255  # cifar scale\nbatch_size=32\neval_attacks = pgd, mim\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert!((cfg.epsilon() - 4.0 / 255.0).abs() < 1e-12);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.eval_attacks, vec![AttackKind::Pgd, AttackKind::Mim]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "epsilonn = 0.1\n").unwrap();
        let err = RunConfig::from_file(&p).unwrap_err();
        match err {
            Error::Config(m) => assert!(m.contains("epsilonn"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_take_precedence_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "seed = 3\nworkers = 2\n").unwrap();
        let mut cfg = RunConfig::from_file(&p).unwrap();
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.workers, 2);
    }

    #[test]
    fn snapshot_is_stable_and_hash_sensitive() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.snapshot(), cfg.snapshot());
        let h1 = cfg.config_hash();
        let mut other = cfg.clone();
        other.set("seed", "12345").unwrap();
        assert_ne!(h1, other.config_hash());
        // snapshot shows the resolved epsilon, not the unset option
        assert!(cfg.snapshot().contains("epsilon = 0.03137254901960784"));
    }

    #[test]
    fn default_paths_land_in_out_dir() {
        let mut cfg = RunConfig::default();
        cfg.set("out_dir", "runs/exp1").unwrap();
        assert_eq!(
            cfg.victim_weights_path(),
            PathBuf::from("runs/exp1/victim.pfnw")
        );
        cfg.set("victim_weights", "elsewhere/v.pfnw").unwrap();
        assert_eq!(cfg.victim_weights_path(), PathBuf::from("elsewhere/v.pfnw"));
    }
}
