// temporary calibration harness; removed before release
use pfd_core::attack::{self, AttackConfig, AttackKind};
use pfd_core::eval::{self, ReportMeta};
use pfd_core::forgery::{build_batch, train_detector, ForgeryConfig};
use pfd_core::mask::MaskConfig;
use pfd_core::net::{ConvNet, TrainConfig};
use pfd_core::noise::{build_noise_bank, estimate, NoiseBank};
use pfd_core::rng::RngStream;
use pfd_core::synth;
use std::path::Path;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let train = synth::make_dataset(10_000, 0);
    let test = synth::make_dataset(2_000, 1);
    println!("[{:?}] data ready", t0.elapsed());

    let vw = Path::new("/tmp/calib_victim.pfnw");
    let mut victim = if vw.exists() {
        ConvNet::load(vw).unwrap()
    } else {
        let mut v = ConvNet::new(1, 28, 28, 10, 42).unwrap();
        let vcfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 3,
            batch_size: 64,
            momentum: 0.9,
            seed: 7,
        };
        let stats = v.train(&train, &(0..train.len()).collect::<Vec<_>>(), &vcfg).unwrap();
        for s in &stats {
            println!("victim epoch {} loss {:.4} acc {:.4}", s.epoch, s.mean_loss, s.accuracy);
        }
        v.save(vw).unwrap();
        v
    };
    let test_idx: Vec<usize> = (0..test.len()).collect();
    println!("[{:?}] victim test acc {:.4}", t0.elapsed(), victim.accuracy(&test, &test_idx).unwrap());
    let _ = &mut victim;

    let acfg = AttackConfig {
        epsilon: 8.0 / 255.0,
        steps: 10,
        step_size: 2.0 / 255.0,
        ..AttackConfig::default()
    };
    let idx: Vec<usize> = (0..500).collect();
    for kind in [AttackKind::Fgsm, AttackKind::Pgd] {
        let mut correct = 0;
        for &i in &idx {
            let mut rng = RngStream::new(3, 0x177).split(i as u64);
            let adv = attack::run_attack(kind, &victim, None, &test.images[i], test.labels[i] as usize, &acfg, &mut rng).unwrap();
            if victim.predict(&adv).unwrap() == test.labels[i] as usize {
                correct += 1;
            }
        }
        println!("{} adv accuracy {:.4}", kind.as_str(), correct as f64 / 500.0);
    }

    let bp = Path::new("/tmp/calib_bank.pfnb");
    let bank = if bp.exists() {
        NoiseBank::load(bp).unwrap()
    } else {
        let mut rng = RngStream::new(5, 0xb11);
        let bank_idx = rng.choose_indices(train.len(), 1000);
        let b = build_noise_bank(&victim, &train, &bank_idx, AttackKind::Fgsm, &acfg, 2).unwrap();
        b.save(bp).unwrap();
        b
    };
    let base = estimate(&bank, None).unwrap();
    println!("[{:?}] base ready (trace/d {:.3e})", t0.elapsed(), base.cov_trace() / 784.0);

    // probe masks + forged deltas on a few batches
    let fcfg = ForgeryConfig {
        batch_size: 64,
        detector_train: TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 64,
            momentum: 0.9,
            seed: 9,
        },
        epsilon: 8.0 / 255.0,
        workers: 2,
        ..ForgeryConfig::default()
    };
    let mut mask_cache = vec![None; train.len()];
    let mut dens = Vec::new();
    let mut l1 = Vec::new();
    let mut on_mask_mean = Vec::new();
    for b in 0..4u64 {
        let indices: Vec<usize> = (b as usize * 64..(b as usize + 1) * 64).collect();
        let batch = build_batch(&train, &indices, b, &victim, &base, &fcfg, &mut mask_cache).unwrap();
        for k in 0..32 {
            let gi = indices[k];
            let m = mask_cache[gi].as_ref().unwrap();
            dens.push(m.density());
            let delta: Vec<f32> = batch.images[k]
                .data()
                .iter()
                .zip(train.images[gi].data())
                .map(|(a, b)| (a - b).abs())
                .collect();
            l1.push(delta.iter().sum::<f32>());
            let on: Vec<f32> = delta
                .iter()
                .zip(m.bits.data())
                .filter(|(_, &mb)| mb > 0.0)
                .map(|(&d, _)| d)
                .collect();
            if !on.is_empty() {
                on_mask_mean.push(on.iter().sum::<f32>() / on.len() as f32);
            }
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let avgf = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    println!(
        "mask density mean {:.4} min {:.4} max {:.4}",
        avg(&dens),
        dens.iter().cloned().fold(f64::INFINITY, f64::min),
        dens.iter().cloned().fold(0.0, f64::max)
    );
    println!("forged L1 mean {:.4}, on-mask |delta| mean {:.4}", avgf(&l1), avgf(&on_mask_mean));

    let (nat_idx, adv_idx) = eval::pick_eval_indices(test.len(), 300, 11);
    let naturals: Vec<_> = nat_idx.iter().map(|&i| test.images[i].clone()).collect();
    let advs = eval::generate_adversarial_set(AttackKind::Pgd, &victim, None, &test, &adv_idx, &acfg, 2).unwrap();
    let meta = ReportMeta { attack_name: "pgd".into(), epsilon: acfg.epsilon, seed: 11, config_hash: 0, workers: 2 };

    let advs_fgsm = eval::generate_adversarial_set(AttackKind::Fgsm, &victim, None, &test, &adv_idx, &acfg, 2).unwrap();
    for (lr, bs, mom) in [(0.02f32, 32usize, 0.9f32), (0.02, 16, 0.9), (0.03, 32, 0.95)] {
        println!("--- lr {lr} batch {bs} momentum {mom}");
        let cfg10 = ForgeryConfig {
            batch_size: bs,
            detector_train: TrainConfig {
                learning_rate: lr,
                epochs: 10,
                batch_size: bs,
                momentum: mom,
                seed: 9,
            },
            ..fcfg.clone()
        };
        let t = Instant::now();
        let run = train_detector(&train, &victim, &base, &cfg10).unwrap();
        let losses: Vec<String> = run.epoch_loss.iter().map(|l| format!("{l:.4}")).collect();
        println!("[{:?}] lr {lr} losses {}", t.elapsed(), losses.join(" "));
        let report = eval::evaluate_detector(&run.detector, &naturals, &advs, &meta).unwrap();
        println!("lr {lr} bs {bs} AUROC vs pgd: {:.4}", report.auroc);
        let report_f = eval::evaluate_detector(&run.detector, &naturals, &advs_fgsm, &meta).unwrap();
        println!("lr {lr} AUROC vs fgsm (seed attack): {:.4}", report_f.auroc);

        // diagnostic: mask the real fgsm noise the way training noise was
        // masked; if this scores high, the train/eval gap is the mask itself
        let masked_fgsm: Vec<_> = adv_idx
            .iter()
            .zip(&advs_fgsm)
            .map(|(&i, adv)| {
                let x = &test.images[i];
                let m = pfd_core::forgery::mask_for_sample(&victim, x, &fcfg.mask).unwrap();
                let mut out = x.clone();
                for p in 0..784 {
                    if m.bits.data()[p] > 0.0 {
                        out.data_mut()[p] = adv.data()[p];
                    }
                }
                out
            })
            .collect();
        let report_m = eval::evaluate_detector(&run.detector, &naturals, &masked_fgsm, &meta).unwrap();
        println!("lr {lr} AUROC vs MASKED fgsm: {:.4}", report_m.auroc);
    }
    let _ = MaskConfig::default();
    println!("total {:?}", t0.elapsed());
}
