//! AUROC computation, detector evaluation, the attack benchmark harness,
//! ablation runners and CSV emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::attack::{run_attack, AttackConfig, AttackKind};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::forgery::{train_detector, ForgeryConfig};
use crate::net::ConvNet;
use crate::noise::{build_noise_bank, estimate};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::util::parallel_map;

const STREAM_BALANCE: u64 = 0xba1a;
const STREAM_EVAL_PICK: u64 = 0xe7a1;
const STREAM_ATTACK_EVAL: u64 = 0xa77e;

/// Detector scores with ground-truth binary labels (1 = adversarial).
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Rank-based (Mann-Whitney) AUROC with ties counted one half.
///
/// Rank sums are kept in integer "half units", so the result is exactly the
/// pair-counting value `(wins + ties/2) / (n_pos * n_neg)`.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    if set.scores.len() != set.labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            set.scores.len(),
            set.labels.len()
        )));
    }
    let n_pos = set.labels.iter().filter(|&&l| l == 1).count();
    let n_neg = set.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(
            "AUROC needs at least one sample of each class".into(),
        ));
    }
    if set.scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).unwrap());
    // doubled average rank per tie run keeps everything integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let rank2 = (i as u64 + 1) + (j as u64 + 1); // lo + hi of 1-based ranks
        for &idx in &order[i..=j] {
            if set.labels[idx] == 1 {
                rank2_pos += rank2;
            }
        }
        i = j + 1;
    }
    let u2 = rank2_pos - (n_pos as u64) * (n_pos as u64 + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Exhaustive pair-counting AUROC; the oracle that [`auroc`] must equal.
pub fn auroc_bruteforce(set: &ScoredSet) -> Result<f64> {
    let pos: Vec<f64> = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config(
            "AUROC needs at least one sample of each class".into(),
        ));
    }
    let mut wins2: u64 = 0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins2 += 2;
            } else if p == n {
                wins2 += 1;
            }
        }
    }
    Ok(wins2 as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

/// Empirical ROC with one point per distinct threshold, from (0,0) to (1,1).
pub fn roc_points(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let n_pos = set.labels.iter().filter(|&&l| l == 1).count();
    let n_neg = set.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(
            "ROC needs at least one sample of each class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].partial_cmp(&set.scores[a]).unwrap());
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if set.labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j + 1;
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub attack_name: String,
    pub epsilon: f32,
    pub auroc: f64,
    pub roc: Vec<(f64, f64)>,
    pub n_natural: usize,
    pub n_adv: usize,
    pub seed: u64,
    pub config_hash: u64,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "attack,epsilon,auroc,n_natural,n_adv,seed,config_hash"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:016x}",
            self.attack_name,
            self.epsilon,
            self.auroc,
            self.n_natural,
            self.n_adv,
            self.seed,
            self.config_hash
        )
    }

    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "fpr,tpr")?;
        for (fpr, tpr) in &self.roc {
            writeln!(f, "{fpr},{tpr}")?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn write_report_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{}", EvalReport::csv_header())?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Class-1 probability for each image.
pub fn score_images(detector: &ConvNet, images: &[Tensor], workers: usize) -> Result<Vec<f64>> {
    let scores = parallel_map(images.len(), workers, |i| {
        detector.softmax_probs(&images[i]).map(|p| p[1] as f64)
    });
    scores.into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct ReportMeta {
    pub attack_name: String,
    pub epsilon: f32,
    pub seed: u64,
    pub config_hash: u64,
    pub workers: usize,
}

/// Scores balanced natural/adversarial sets (the larger side is subsampled
/// by seed) and assembles the report.
pub fn evaluate_detector(
    detector: &ConvNet,
    naturals: &[Tensor],
    adversarials: &[Tensor],
    meta: &ReportMeta,
) -> Result<EvalReport> {
    if naturals.is_empty() || adversarials.is_empty() {
        return Err(Error::Config("evaluation sets must be non-empty".into()));
    }
    let n = naturals.len().min(adversarials.len());
    let pick = |count: usize, total: usize, salt: u64| -> Vec<usize> {
        let mut rng = RngStream::new(meta.seed, STREAM_BALANCE).split(salt);
        rng.choose_indices(total, count)
    };
    let nat_idx = pick(n, naturals.len(), 0);
    let adv_idx = pick(n, adversarials.len(), 1);

    let nat: Vec<Tensor> = nat_idx.iter().map(|&i| naturals[i].clone()).collect();
    let adv: Vec<Tensor> = adv_idx.iter().map(|&i| adversarials[i].clone()).collect();
    let mut scores = score_images(detector, &nat, meta.workers)?;
    scores.extend(score_images(detector, &adv, meta.workers)?);
    let mut labels = vec![0u8; n];
    labels.extend(vec![1u8; n]);
    let set = ScoredSet { scores, labels };
    Ok(EvalReport {
        attack_name: meta.attack_name.clone(),
        epsilon: meta.epsilon,
        auroc: auroc(&set)?,
        roc: roc_points(&set)?,
        n_natural: n,
        n_adv: n,
        seed: meta.seed,
        config_hash: meta.config_hash,
    })
}

/// Picks the evaluation naturals and the attack sources from the test set:
/// disjoint halves when the set is large enough, otherwise the same samples.
pub fn pick_eval_indices(
    test_len: usize,
    eval_size: usize,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = RngStream::new(seed, STREAM_EVAL_PICK);
    if test_len >= 2 * eval_size {
        let idx = rng.choose_indices(test_len, 2 * eval_size);
        (
            idx[..eval_size].to_vec(),
            idx[eval_size..].to_vec(),
        )
    } else {
        let idx = rng.choose_indices(test_len, eval_size.min(test_len));
        (idx.clone(), idx)
    }
}

/// Generates the adversarial set for one attack over the given test samples.
pub fn generate_adversarial_set(
    kind: AttackKind,
    victim: &ConvNet,
    detector: Option<&ConvNet>,
    test: &LabeledDataset,
    indices: &[usize],
    cfg: &AttackConfig,
    workers: usize,
) -> Result<Vec<Tensor>> {
    let out = parallel_map(indices.len(), workers, |j| {
        let i = indices[j];
        let mut rng = RngStream::new(cfg.seed, STREAM_ATTACK_EVAL).split(i as u64);
        run_attack(
            kind,
            victim,
            detector,
            &test.images[i],
            test.labels[i] as usize,
            cfg,
            &mut rng,
        )
    });
    out.into_iter().collect()
}

/// Benchmarks the detector against every attack; per-attack failures are
/// recorded and do not stop the run.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    detector: &ConvNet,
    victim: &ConvNet,
    test: &LabeledDataset,
    attacks: &[AttackKind],
    atk_cfg: &AttackConfig,
    eval_size: usize,
    seed: u64,
    config_hash: u64,
    workers: usize,
) -> Vec<(AttackKind, Result<EvalReport>)> {
    let (nat_idx, adv_idx) = pick_eval_indices(test.len(), eval_size, seed);
    let naturals: Vec<Tensor> = nat_idx.iter().map(|&i| test.images[i].clone()).collect();
    attacks
        .iter()
        .map(|&kind| {
            let result = (|| {
                let detector_side = if kind == AttackKind::Whitebox {
                    Some(detector)
                } else {
                    None
                };
                let advs = generate_adversarial_set(
                    kind,
                    victim,
                    detector_side,
                    test,
                    &adv_idx,
                    atk_cfg,
                    workers,
                )?;
                evaluate_detector(
                    detector,
                    &naturals,
                    &advs,
                    &ReportMeta {
                        attack_name: kind.as_str().into(),
                        epsilon: atk_cfg.epsilon,
                        seed,
                        config_hash,
                        workers,
                    },
                )
            })();
            (kind, result)
        })
        .collect()
}

/// Everything the end-to-end ablations need to rebuild the pipeline.
pub struct PipelineEnv<'a> {
    pub victim: &'a ConvNet,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub bank_attack_cfg: AttackConfig,
    pub eval_attack_cfg: AttackConfig,
    pub forgery: ForgeryConfig,
    pub shrinkage: Option<f64>,
    pub eval_size: usize,
    pub seed: u64,
    pub config_hash: u64,
    pub workers: usize,
}

/// Full pipeline for one (initial attack, bank size): bank, base Gaussian,
/// detector.
pub fn train_pipeline_detector(
    env: &PipelineEnv,
    initial: AttackKind,
    bank_size: usize,
) -> Result<ConvNet> {
    let mut rng = RngStream::new(env.seed, 0xba6b ^ initial.as_str().len() as u64);
    let indices = rng.choose_indices(env.train.len(), bank_size);
    let bank = build_noise_bank(
        env.victim,
        env.train,
        &indices,
        initial,
        &env.bank_attack_cfg,
        env.workers,
    )?;
    let base = estimate(&bank, env.shrinkage)?;
    let run = train_detector(env.train, env.victim, &base, &env.forgery)?;
    Ok(run.detector)
}

fn auroc_against(
    env: &PipelineEnv,
    detector: &ConvNet,
    kind: AttackKind,
) -> Result<f64> {
    let reports = run_benchmark(
        detector,
        env.victim,
        env.test,
        &[kind],
        &env.eval_attack_cfg,
        env.eval_size,
        env.seed,
        env.config_hash,
        env.workers,
    );
    reports.into_iter().next().unwrap().1.map(|r| r.auroc)
}

/// Re-runs the whole pipeline per noise-bank size and scores it against one
/// fixed attack. Sizes must be ascending.
pub fn ablation_data_size(
    env: &PipelineEnv,
    sizes: &[usize],
    test_attack: AttackKind,
) -> Result<Vec<(usize, f64)>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bank sizes must be strictly ascending".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let detector = train_pipeline_detector(env, AttackKind::Fgsm, size)?;
        rows.push((size, auroc_against(env, &detector, test_attack)?));
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct AblationMatrix {
    pub initials: Vec<AttackKind>,
    pub tests: Vec<AttackKind>,
    pub aurocs: Vec<Vec<f64>>,
    /// Largest AUROC spread within any test-attack column.
    pub max_column_spread: f64,
}

/// Trains one detector per initial attack and scores each against every test
/// attack.
pub fn ablation_initial_attack(
    env: &PipelineEnv,
    initials: &[AttackKind],
    tests: &[AttackKind],
    bank_size: usize,
) -> Result<AblationMatrix> {
    if initials.is_empty() || tests.is_empty() {
        return Err(Error::Config("ablation lists must be non-empty".into()));
    }
    let mut aurocs = Vec::with_capacity(initials.len());
    for &initial in initials {
        let detector = train_pipeline_detector(env, initial, bank_size)?;
        let mut row = Vec::with_capacity(tests.len());
        for &t in tests {
            row.push(auroc_against(env, &detector, t)?);
        }
        aurocs.push(row);
    }
    let mut max_spread = 0.0f64;
    for col in 0..tests.len() {
        let vals: Vec<f64> = aurocs.iter().map(|r| r[col]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max_spread = max_spread.max(hi - lo);
    }
    Ok(AblationMatrix {
        initials: initials.to_vec(),
        tests: tests.to_vec(),
        aurocs,
        max_column_spread: max_spread,
    })
}

impl AblationMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        let header: Vec<&str> = self.tests.iter().map(|t| t.as_str()).collect();
        writeln!(f, "initial,{}", header.join(","))?;
        for (initial, row) in self.initials.iter().zip(&self.aurocs) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{}", initial.as_str(), cells.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// One row per vector: the coordinates then a source tag (no header, so the
/// row count equals the vector count).
pub fn export_noise_csv(groups: &[(String, Vec<Vec<f32>>)], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for (tag, vectors) in groups {
        for v in vectors {
            let mut row = String::with_capacity(v.len() * 10 + tag.len());
            for x in v {
                row.push_str(&x.to_string());
                row.push(',');
            }
            row.push_str(tag);
            writeln!(f, "{row}")?;
        }
    }
    f.flush()?;
    Ok(())
}
