//! Gradient-based l-infinity attacks: FGSM seeds the noise distribution,
//! BIM/PGD/MIM/DIM and the detector-aware joint attack supply the unseen
//! test surface.

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::net::{cross_entropy, ConvNet};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::util::bilinear_resize;

/// Global invocation counter; lets tests assert that no attack runs inside
/// the detector-training path.
static INVOCATIONS: AtomicU64 = AtomicU64::new(0);

pub fn invocation_count() -> u64 {
    INVOCATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    Mim,
    Dim,
    Whitebox,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::Mim => "mim",
            AttackKind::Dim => "dim",
            AttackKind::Whitebox => "whitebox",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "pgd" => Ok(AttackKind::Pgd),
            "mim" => Ok(AttackKind::Mim),
            "dim" => Ok(AttackKind::Dim),
            "whitebox" => Ok(AttackKind::Whitebox),
            other => Err(Error::Config(format!("unknown attack '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// l-infinity budget in [0,1] pixel units.
    pub epsilon: f32,
    pub steps: usize,
    pub step_size: f32,
    /// MIM momentum decay.
    pub decay: f32,
    /// DIM transform probability.
    pub diversity_prob: f64,
    /// White-box balance between victim and detector losses.
    pub alpha_joint: f32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 2.0 / 255.0,
            decay: 1.0,
            diversity_prob: 0.5,
            alpha_joint: 1.0,
            seed: 0,
        }
    }
}

/// Adversarial noise extracted from one attacked sample.
#[derive(Debug, Clone)]
pub struct NoiseSample {
    pub eta: Tensor,
    pub source_index: usize,
    pub attack_name: String,
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss gradient with respect to the input, `d L(f(x), y) / d x`.
fn input_gradient(net: &ConvNet, x: &Tensor, label: usize) -> Result<Tensor> {
    let cache = net.forward(x)?;
    let (_, lg) = cross_entropy(&cache.logits, label)?;
    Ok(net.backward(&cache, &lg)?.input)
}

fn clip01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Projects `x_adv` onto the epsilon ball around `x` and into [0,1].
fn project(x_adv: &mut Tensor, x: &Tensor, eps: f32) {
    for (a, &o) in x_adv.data_mut().iter_mut().zip(x.data()) {
        *a = clip01(o + (*a - o).clamp(-eps, eps));
    }
}

/// Single-step sign attack: `clip(x + eps * sign(grad))`.
pub fn fgsm(net: &ConvNet, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    INVOCATIONS.fetch_add(1, Ordering::Relaxed);
    let g = input_gradient(net, x, label)?;
    let mut out = x.clone();
    for (o, (&xi, &gi)) in out
        .data_mut()
        .iter_mut()
        .zip(x.data().iter().zip(g.data()))
    {
        *o = clip01(xi + cfg.epsilon * sign(gi));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum IterVariant {
    Plain,
    Momentum,
    Diverse,
}

/// Shared iterative sign-gradient loop behind BIM/PGD/MIM/DIM and the joint
/// attack. `random_start` draws the PGD init uniformly in the epsilon ball.
#[allow(clippy::too_many_arguments)]
fn iterative_attack(
    victim: &ConvNet,
    detector: Option<&ConvNet>,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut RngStream,
    variant: IterVariant,
    random_start: bool,
) -> Result<Tensor> {
    INVOCATIONS.fetch_add(1, Ordering::Relaxed);
    let mut x_adv = x.clone();
    if random_start {
        for v in x_adv.data_mut().iter_mut() {
            *v += rng.uniform(-cfg.epsilon as f64, cfg.epsilon as f64) as f32;
        }
        project(&mut x_adv, x, cfg.epsilon);
    }
    let mut momentum = vec![0.0f32; x.numel()];
    for _ in 0..cfg.steps {
        let grad_input = match variant {
            IterVariant::Diverse => {
                // with probability p, take the gradient on a resized-and-
                // padded copy; the step still lands on original coordinates
                let u = rng.next_f64();
                if u < cfg.diversity_prob {
                    diverse_transform(&x_adv, rng)
                } else {
                    x_adv.clone()
                }
            }
            _ => x_adv.clone(),
        };
        let mut g = input_gradient(victim, &grad_input, label)?;
        if let Some(det) = detector {
            if cfg.alpha_joint != 0.0 {
                // joint objective: also push the detector toward "natural"
                let dg = input_gradient(det, &x_adv, 0)?;
                for (gi, &di) in g.data_mut().iter_mut().zip(dg.data()) {
                    *gi += cfg.alpha_joint * di;
                }
            }
        }
        let step_dir: Vec<f32> = match variant {
            IterVariant::Momentum => {
                let l1: f32 = g.data().iter().map(|v| v.abs()).sum();
                let norm = if l1 > 1e-12 { l1 } else { 1.0 };
                for (m, &gi) in momentum.iter_mut().zip(g.data()) {
                    *m = cfg.decay * *m + gi / norm;
                }
                momentum.iter().map(|&m| sign(m)).collect()
            }
            _ => g.data().iter().map(|&v| sign(v)).collect(),
        };
        for (a, &d) in x_adv.data_mut().iter_mut().zip(&step_dir) {
            *a += cfg.step_size * d;
        }
        project(&mut x_adv, x, cfg.epsilon);
    }
    Ok(x_adv)
}

/// Random resize (to r in [0.9H, H]) plus zero padding back to H x W at a
/// random offset; gradients are read off this copy at original coordinates.
fn diverse_transform(x: &Tensor, rng: &mut RngStream) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let min_h = ((h as f64) * 0.9).ceil() as usize;
    let rh = min_h + rng.uniform_usize(h - min_h + 1);
    let rw = rh * w / h;
    let off_y = rng.uniform_usize(h - rh + 1);
    let off_x = rng.uniform_usize(w - rw + 1);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let resized = bilinear_resize(plane, h, w, rh, rw);
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..rh {
            for xx in 0..rw {
                dst[(y + off_y) * w + xx + off_x] = resized[y * rw + xx];
            }
        }
    }
    out
}

/// Iterative sign attack without random start.
pub fn bim(net: &ConvNet, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    let mut rng = RngStream::new(cfg.seed, 0);
    iterative_attack(net, None, x, label, cfg, &mut rng, IterVariant::Plain, false)
}

/// BIM with a seeded uniform start inside the epsilon ball.
pub fn pgd(
    net: &ConvNet,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    iterative_attack(net, None, x, label, cfg, rng, IterVariant::Plain, true)
}

/// Momentum attack: `g <- decay * g + grad/|grad|_1`, step along `sign(g)`.
pub fn mim(net: &ConvNet, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    let mut rng = RngStream::new(cfg.seed, 0);
    iterative_attack(
        net,
        None,
        x,
        label,
        cfg,
        &mut rng,
        IterVariant::Momentum,
        false,
    )
}

/// Input-diversity attack: per-step random resize-and-pad before the gradient.
pub fn dim(
    net: &ConvNet,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    iterative_attack(net, None, x, label, cfg, rng, IterVariant::Diverse, false)
}

/// White-box joint attack on `L(f(x),y) + alpha * L(f_d(x), natural)`; the
/// attacker sees both the victim and the detector.
pub fn whitebox_joint(
    victim: &ConvNet,
    detector: &ConvNet,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    iterative_attack(
        victim,
        Some(detector),
        x,
        label,
        cfg,
        rng,
        IterVariant::Plain,
        true,
    )
}

/// Dispatch by attack name; `rng` drives the seeded randomness of PGD/DIM.
pub fn run_attack(
    kind: AttackKind,
    victim: &ConvNet,
    detector: Option<&ConvNet>,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    match kind {
        AttackKind::Fgsm => fgsm(victim, x, label, cfg),
        AttackKind::Bim => bim(victim, x, label, cfg),
        AttackKind::Pgd => pgd(victim, x, label, cfg, rng),
        AttackKind::Mim => mim(victim, x, label, cfg),
        AttackKind::Dim => dim(victim, x, label, cfg, rng),
        AttackKind::Whitebox => {
            let det = detector.ok_or_else(|| {
                Error::Config("whitebox attack needs a detector".into())
            })?;
            whitebox_joint(victim, det, x, label, cfg, rng)
        }
    }
}

/// `eta = attacked - original`.
pub fn extract_noise(
    attacked: &Tensor,
    original: &Tensor,
    source_index: usize,
    attack_name: &str,
) -> Result<NoiseSample> {
    if attacked.shape() != original.shape() {
        return Err(Error::Dimension(format!(
            "shape mismatch {:?} vs {:?}",
            attacked.shape(),
            original.shape()
        )));
    }
    let eta = Tensor::from_vec(
        attacked.shape(),
        attacked
            .data()
            .iter()
            .zip(original.data())
            .map(|(&a, &o)| a - o)
            .collect(),
    )?;
    Ok(NoiseSample {
        eta,
        source_index,
        attack_name: attack_name.to_string(),
    })
}
