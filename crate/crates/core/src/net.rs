//! Small convolutional network with hand-written forward and backward passes.
//!
//! The same architecture serves three roles: victim classifier, binary
//! detector (class count 2), and the source of class-activation heatmaps.
//! Topology is fixed: conv3x3(16) - relu - maxpool2 - conv3x3(32) - relu -
//! maxpool2 - dense(128) - relu - dense(logits).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::util::bilinear_resize;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PFNW";
pub const WEIGHTS_VERSION: u16 = 1;

const CONV1_CH: usize = 16;
const CONV2_CH: usize = 32;
const HIDDEN: usize = 128;

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    w: Vec<f32>, // [out][in][3][3]
    b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    in_dim: usize,
    out_dim: usize,
    w: Vec<f32>, // [out][in]
    b: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    pub class_count: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    conv1: Conv,
    conv2: Conv,
    fc1: Dense,
    fc2: Dense,
    /// Bumped on every weight mutation; forward caches record it so a stale
    /// cache cannot silently feed backward.
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Activations retained by [`ConvNet::forward`] for the backward pass.
pub struct ForwardCache {
    input: Tensor,
    c1_pre: Vec<f32>,
    p1: Vec<f32>,
    am1: Vec<u32>,
    c2_pre: Vec<f32>,
    c2_post: Vec<f32>,
    p2: Vec<f32>,
    am2: Vec<u32>,
    f1_pre: Vec<f32>,
    f1_post: Vec<f32>,
    pub logits: Vec<f32>,
    generation: u64,
}

impl ForwardCache {
    /// Post-relu feature maps of the last conv layer (the Grad-CAM source).
    pub fn conv2_activation(&self) -> &[f32] {
        &self.c2_post
    }
}

/// Borrowed parameter buffers and architecture constants.
pub struct WeightsView<'a> {
    pub conv1_w: &'a [f32],
    pub conv1_b: &'a [f32],
    pub conv2_w: &'a [f32],
    pub conv2_b: &'a [f32],
    pub fc1_w: &'a [f32],
    pub fc1_b: &'a [f32],
    pub fc2_w: &'a [f32],
    pub fc2_b: &'a [f32],
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub conv1_ch: usize,
    pub conv2_ch: usize,
    pub hidden: usize,
    pub class_count: usize,
}

/// Per-parameter gradient buffers plus the input and last-conv activation
/// gradients needed by attacks and Grad-CAM.
pub struct Gradients {
    pub conv1_w: Vec<f32>,
    pub conv1_b: Vec<f32>,
    pub conv2_w: Vec<f32>,
    pub conv2_b: Vec<f32>,
    pub fc1_w: Vec<f32>,
    pub fc1_b: Vec<f32>,
    pub fc2_w: Vec<f32>,
    pub fc2_b: Vec<f32>,
    pub input: Tensor,
    pub conv2_act: Vec<f32>,
}

impl ConvNet {
    /// Fresh network with seeded uniform He initialization.
    pub fn new(
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if in_h % 4 != 0 || in_w % 4 != 0 {
            return Err(Error::Dimension(format!(
                "input {in_h}x{in_w} must be divisible by 4 (two 2x2 pools)"
            )));
        }
        let flat = CONV2_CH * (in_h / 4) * (in_w / 4);
        let mut rng = RngStream::new(seed, 0x11e7);
        let conv1 = Conv::init(in_ch, CONV1_CH, &mut rng);
        let conv2 = Conv::init(CONV1_CH, CONV2_CH, &mut rng);
        let fc1 = Dense::init(flat, HIDDEN, &mut rng);
        let fc2 = Dense::init(HIDDEN, class_count, &mut rng);
        Ok(ConvNet {
            class_count,
            in_ch,
            in_h,
            in_w,
            conv1,
            conv2,
            fc1,
            fc2,
            generation: 0,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_ch, self.in_h, self.in_w]
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardCache> {
        if x.shape() != [self.in_ch, self.in_h, self.in_w] {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match net input {:?}",
                x.shape(),
                self.input_shape()
            )));
        }
        let (h, w) = (self.in_h, self.in_w);
        let c1_pre = self.conv1.forward(x.data(), h, w);
        let c1_post = relu(&c1_pre);
        let (p1, am1) = maxpool2(&c1_post, CONV1_CH, h, w);
        let (h1, w1) = (h / 2, w / 2);
        let c2_pre = self.conv2.forward(&p1, h1, w1);
        let c2_post = relu(&c2_pre);
        let (p2, am2) = maxpool2(&c2_post, CONV2_CH, h1, w1);
        let f1_pre = self.fc1.forward(&p2);
        let f1_post = relu(&f1_pre);
        let logits = self.fc2.forward(&f1_post);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(ForwardCache {
            input: x.clone(),
            c1_pre,
            p1,
            am1,
            c2_pre,
            c2_post,
            p2,
            am2,
            f1_pre,
            f1_post,
            logits,
            generation: self.generation,
        })
    }

    /// Backpropagates `loss_grad` (gradient at the logits) through the cache.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: &[f32]) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::Train(format!(
                "stale forward cache: generation {} vs net {}",
                cache.generation, self.generation
            )));
        }
        if loss_grad.len() != self.class_count {
            return Err(Error::Dimension(format!(
                "loss grad length {} != class count {}",
                loss_grad.len(),
                self.class_count
            )));
        }
        let (h, w) = (self.in_h, self.in_w);
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h1 / 2, w1 / 2);

        let (fc2_w_g, fc2_b_g, d_f1post) = self.fc2.backward(&cache.f1_post, loss_grad);
        let d_f1pre = relu_backward(&d_f1post, &cache.f1_pre);
        let (fc1_w_g, fc1_b_g, d_p2) = self.fc1.backward(&cache.p2, &d_f1pre);
        let d_c2post = maxpool2_backward(&d_p2, &cache.am2, CONV2_CH, h1, w1, h2, w2);
        let conv2_act = d_c2post.clone();
        let d_c2pre = relu_backward(&d_c2post, &cache.c2_pre);
        let (conv2_w_g, conv2_b_g, d_p1) = self.conv2.backward(&cache.p1, &d_c2pre, h1, w1);
        let d_c1post = maxpool2_backward(&d_p1, &cache.am1, CONV1_CH, h, w, h1, w1);
        let d_c1pre = relu_backward(&d_c1post, &cache.c1_pre);
        let (conv1_w_g, conv1_b_g, d_x) = self.conv1.backward(cache.input.data(), &d_c1pre, h, w);

        Ok(Gradients {
            conv1_w: conv1_w_g,
            conv1_b: conv1_b_g,
            conv2_w: conv2_w_g,
            conv2_b: conv2_b_g,
            fc1_w: fc1_w_g,
            fc1_b: fc1_b_g,
            fc2_w: fc2_w_g,
            fc2_b: fc2_b_g,
            input: Tensor::from_vec(&[self.in_ch, h, w], d_x)?,
            conv2_act,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(self.forward(x)?.logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn softmax_probs(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn accuracy(&self, ds: &LabeledDataset, indices: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for &i in indices {
            if self.predict(&ds.images[i])? == ds.labels[i] as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / indices.len().max(1) as f64)
    }

    /// SGD with momentum over the given sample indices. Deterministic for a
    /// fixed seed; errors out when the loss stops being finite.
    pub fn train(
        &mut self,
        ds: &LabeledDataset,
        indices: &[usize],
        cfg: &TrainConfig,
    ) -> Result<Vec<EpochStats>> {
        if indices.is_empty() {
            return Err(Error::Train("empty training set".into()));
        }
        let mut velocity = SgdVelocity::zeros_like(self);
        let mut stats = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = indices.to_vec();
        for epoch in 0..cfg.epochs {
            let mut rng = RngStream::new(cfg.seed, 0xe90c).split(epoch as u64);
            rng.shuffle(&mut order);
            let mut loss_sum = 0.0f64;
            let mut correct = 0usize;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let (loss, acc_n) = self.sgd_step(
                    batch.iter().map(|&i| (&ds.images[i], ds.labels[i])),
                    batch.len(),
                    cfg.learning_rate,
                    cfg.momentum,
                    &mut velocity,
                )?;
                if !loss.is_finite() {
                    return Err(Error::Train(format!("loss diverged at epoch {epoch}")));
                }
                loss_sum += loss * batch.len() as f64;
                correct += acc_n;
            }
            stats.push(EpochStats {
                epoch,
                mean_loss: loss_sum / order.len() as f64,
                accuracy: correct as f64 / order.len() as f64,
            });
        }
        Ok(stats)
    }

    /// One accumulated SGD step over a batch; returns (mean loss, correct count).
    pub fn sgd_step<'a>(
        &mut self,
        batch: impl Iterator<Item = (&'a Tensor, u8)>,
        batch_len: usize,
        lr: f32,
        momentum: f32,
        velocity: &mut SgdVelocity,
    ) -> Result<(f64, usize)> {
        let mut acc = SgdVelocity::zeros_like(self);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut n = 0usize;
        for (img, label) in batch {
            let cache = self.forward(img)?;
            let (loss, grad) = cross_entropy(&cache.logits, label as usize)?;
            if argmax(&cache.logits) == label as usize {
                correct += 1;
            }
            loss_sum += loss;
            let g = self.backward(&cache, &grad)?;
            acc.accumulate(&g);
            n += 1;
        }
        if n == 0 || n != batch_len {
            return Err(Error::Train("batch iterator length mismatch".into()));
        }
        let scale = 1.0 / n as f32;
        velocity.momentum_update(&acc, momentum, scale);
        self.apply_velocity(velocity, lr);
        Ok((loss_sum / n as f64, correct))
    }

    fn apply_velocity(&mut self, v: &SgdVelocity, lr: f32) {
        for (buf, vel) in self.param_bufs_mut().into_iter().zip(v.bufs.iter()) {
            for (wi, &vi) in buf.iter_mut().zip(vel) {
                *wi -= lr * vi;
            }
        }
        self.generation += 1;
    }

    fn param_bufs_mut(&mut self) -> [&mut Vec<f32>; 8] {
        [
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
        ]
    }

    fn param_bufs(&self) -> [&Vec<f32>; 8] {
        [
            &self.conv1.w,
            &self.conv1.b,
            &self.conv2.w,
            &self.conv2.b,
            &self.fc1.w,
            &self.fc1.b,
            &self.fc2.w,
            &self.fc2.b,
        ]
    }

    /// Gradient-weighted class-activation heatmap for `class`, upsampled to
    /// the input plane and max-normalized (an all-zero map stays all-zero).
    pub fn gradcam(&self, x: &Tensor, class: usize) -> Result<Tensor> {
        if class >= self.class_count {
            return Err(Error::Dimension(format!(
                "class {class} out of range ({})",
                self.class_count
            )));
        }
        let cache = self.forward(x)?;
        let mut onehot = vec![0.0f32; self.class_count];
        onehot[class] = 1.0;
        let grads = self.backward(&cache, &onehot)?;
        // channel weight = spatial mean of d logit / d activation on the
        // last conv's post-relu plane (in_h/2 x in_w/2)
        let (ah, aw) = (self.in_h / 2, self.in_w / 2);
        let plane = ah * aw;
        let mut cam = vec![0.0f32; plane];
        for k in 0..CONV2_CH {
            let g = &grads.conv2_act[k * plane..(k + 1) * plane];
            let weight: f32 = g.iter().sum::<f32>() / plane as f32;
            let act = &cache.c2_post[k * plane..(k + 1) * plane];
            for (c, &a) in cam.iter_mut().zip(act) {
                *c += weight * a;
            }
        }
        for c in cam.iter_mut() {
            if *c < 0.0 {
                *c = 0.0;
            }
        }
        let mut up = bilinear_resize(&cam, ah, aw, self.in_h, self.in_w);
        let max = up.iter().cloned().fold(0.0f32, f32::max);
        if max > 0.0 {
            for v in up.iter_mut() {
                *v /= max;
            }
        }
        Tensor::from_vec(&[self.in_h, self.in_w], up)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        for v in [self.class_count, self.in_ch, self.in_h, self.in_w] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&4u32.to_le_bytes())?;
        for (kind, i, o) in [
            (0u8, self.conv1.in_ch, self.conv1.out_ch),
            (0u8, self.conv2.in_ch, self.conv2.out_ch),
            (1u8, self.fc1.in_dim, self.fc1.out_dim),
            (1u8, self.fc2.in_dim, self.fc2.out_dim),
        ] {
            w.write_all(&[kind])?;
            w.write_all(&(i as u32).to_le_bytes())?;
            w.write_all(&(o as u32).to_le_bytes())?;
        }
        for buf in self.param_bufs() {
            for &v in buf.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("weights truncated at magic".into()))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format(format!("bad weights magic {magic:?}")));
        }
        let mut vb = [0u8; 2];
        r.read_exact(&mut vb)
            .map_err(|_| Error::Format("weights truncated at version".into()))?;
        if u16::from_le_bytes(vb) != WEIGHTS_VERSION {
            return Err(Error::Format("unsupported weights version".into()));
        }
        let class_count = read_u32(&mut r)? as usize;
        let in_ch = read_u32(&mut r)? as usize;
        let in_h = read_u32(&mut r)? as usize;
        let in_w = read_u32(&mut r)? as usize;
        let layers = read_u32(&mut r)?;
        if layers != 4 {
            return Err(Error::Format(format!("expected 4 layers, got {layers}")));
        }
        let mut headers = Vec::new();
        for _ in 0..4 {
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)
                .map_err(|_| Error::Format("weights truncated in layer header".into()))?;
            let i = read_u32(&mut r)? as usize;
            let o = read_u32(&mut r)? as usize;
            headers.push((kind[0], i, o));
        }
        let mut net = ConvNet::new(in_ch, in_h, in_w, class_count, 0)?;
        let expect = vec![
            (0u8, net.conv1.in_ch, net.conv1.out_ch),
            (0u8, net.conv2.in_ch, net.conv2.out_ch),
            (1u8, net.fc1.in_dim, net.fc1.out_dim),
            (1u8, net.fc2.in_dim, net.fc2.out_dim),
        ];
        if headers != expect {
            return Err(Error::Format(format!(
                "layer headers {headers:?} do not match architecture {expect:?}"
            )));
        }
        for buf in net.param_bufs_mut() {
            let mut bytes = vec![0u8; buf.len() * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Format("weights truncated in payload".into()))?;
            for (v, c) in buf.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        net.generation = 0;
        Ok(net)
    }

    /// Read-only views of every parameter buffer plus the architecture
    /// constants, for external oracles and bindings. Layouts: conv weights
    /// are `[out][in][3][3]`, dense weights `[out][in]`, all row-major.
    pub fn weights_view(&self) -> WeightsView<'_> {
        WeightsView {
            conv1_w: &self.conv1.w,
            conv1_b: &self.conv1.b,
            conv2_w: &self.conv2.w,
            conv2_b: &self.conv2.b,
            fc1_w: &self.fc1.w,
            fc1_b: &self.fc1.b,
            fc2_w: &self.fc2.w,
            fc2_b: &self.fc2.b,
            in_ch: self.in_ch,
            in_h: self.in_h,
            in_w: self.in_w,
            conv1_ch: CONV1_CH,
            conv2_ch: CONV2_CH,
            hidden: HIDDEN,
            class_count: self.class_count,
        }
    }

    pub fn weights_equal(&self, other: &ConvNet) -> bool {
        self.param_bufs()
            .iter()
            .zip(other.param_bufs().iter())
            .all(|(a, b)| a == b)
    }

    /// Test hook: rescale the final layer's weights and biases.
    pub fn scale_output_layer(&mut self, factor: f32) {
        for v in self.fc2.w.iter_mut().chain(self.fc2.b.iter_mut()) {
            *v *= factor;
        }
        self.generation += 1;
    }

    /// Test hook: zero every parameter.
    pub fn zero_weights(&mut self) {
        for buf in self.param_bufs_mut() {
            buf.fill(0.0);
        }
        self.generation += 1;
    }
}

/// Cross-entropy loss and its gradient at the logits:
/// `loss = -log softmax(logits)[label]`, `grad = softmax(logits) - onehot`.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<(f64, Vec<f32>)> {
    if label >= logits.len() {
        return Err(Error::Dimension(format!(
            "label {label} out of range ({})",
            logits.len()
        )));
    }
    let probs = softmax(logits);
    let loss = -(probs[label].max(f32::MIN_POSITIVE) as f64).ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Momentum buffers for SGD, shaped like the network parameters.
pub struct SgdVelocity {
    bufs: [Vec<f32>; 8],
}

impl SgdVelocity {
    pub fn zeros_like(net: &ConvNet) -> Self {
        SgdVelocity {
            bufs: net.param_bufs().map(|b| vec![0.0; b.len()]),
        }
    }

    fn accumulate(&mut self, g: &Gradients) {
        let srcs: [&Vec<f32>; 8] = [
            &g.conv1_w, &g.conv1_b, &g.conv2_w, &g.conv2_b, &g.fc1_w, &g.fc1_b, &g.fc2_w, &g.fc2_b,
        ];
        for (buf, src) in self.bufs.iter_mut().zip(srcs) {
            for (a, &b) in buf.iter_mut().zip(src.iter()) {
                *a += b;
            }
        }
    }

    fn momentum_update(&mut self, acc: &SgdVelocity, momentum: f32, scale: f32) {
        for (v, g) in self.bufs.iter_mut().zip(acc.bufs.iter()) {
            for (vi, &gi) in v.iter_mut().zip(g.iter()) {
                *vi = momentum * *vi + gi * scale;
            }
        }
    }
}

impl Conv {
    fn init(in_ch: usize, out_ch: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (in_ch * 9) as f64).sqrt();
        let w = (0..out_ch * in_ch * 9)
            .map(|_| rng.uniform(-limit, limit) as f32)
            .collect();
        Conv {
            in_ch,
            out_ch,
            w,
            b: vec![0.0; out_ch],
        }
    }

    /// 3x3 convolution, stride 1, zero padding 1; keeps the spatial size.
    fn forward(&self, inp: &[f32], h: usize, w: usize) -> Vec<f32> {
        let plane = h * w;
        let mut out = vec![0.0f32; self.out_ch * plane];
        for o in 0..self.out_ch {
            let out_plane = &mut out[o * plane..(o + 1) * plane];
            out_plane.fill(self.b[o]);
            for i in 0..self.in_ch {
                let src = &inp[i * plane..(i + 1) * plane];
                let wbase = (o * self.in_ch + i) * 9;
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        shifted_axpy(out_plane, src, h, w, dy, dx, self.w[wbase + ky * 3 + kx]);
                    }
                }
            }
        }
        out
    }

    /// Returns (weight grads, bias grads, input grads).
    fn backward(
        &self,
        inp: &[f32],
        dout: &[f32],
        h: usize,
        w: usize,
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let plane = h * w;
        let mut dw = vec![0.0f32; self.w.len()];
        let mut db = vec![0.0f32; self.out_ch];
        let mut dinp = vec![0.0f32; self.in_ch * plane];
        for o in 0..self.out_ch {
            let dout_plane = &dout[o * plane..(o + 1) * plane];
            db[o] += dout_plane.iter().sum::<f32>();
            for i in 0..self.in_ch {
                let src = &inp[i * plane..(i + 1) * plane];
                let dsrc = &mut dinp[i * plane..(i + 1) * plane];
                let wbase = (o * self.in_ch + i) * 9;
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        dw[wbase + ky * 3 + kx] += shifted_dot(dout_plane, src, h, w, dy, dx);
                        shifted_axpy_t(
                            dsrc,
                            dout_plane,
                            h,
                            w,
                            dy,
                            dx,
                            self.w[wbase + ky * 3 + kx],
                        );
                    }
                }
            }
        }
        (dw, db, dinp)
    }
}

/// `dst[y,x] += wv * src[y+dy, x+dx]` over the valid range.
#[inline]
fn shifted_axpy(dst: &mut [f32], src: &[f32], h: usize, w: usize, dy: isize, dx: isize, wv: f32) {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((w as isize - dx).min(w as isize)) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let sx1 = (x1 as isize + dx) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[sy * w + sx0..sy * w + sx1];
        for (di, &si) in d.iter_mut().zip(s) {
            *di += wv * si;
        }
    }
}

/// `sum_{y,x} a[y,x] * b[y+dy, x+dx]` over the valid range.
#[inline]
fn shifted_dot(a: &[f32], b: &[f32], h: usize, w: usize, dy: isize, dx: isize) -> f32 {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((w as isize - dx).min(w as isize)) as usize;
    let mut acc = 0.0f32;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let sx1 = (x1 as isize + dx) as usize;
        let ar = &a[y * w + x0..y * w + x1];
        let br = &b[sy * w + sx0..sy * w + sx1];
        acc += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f32>();
    }
    acc
}

/// `dst[y+dy, x+dx] += wv * src[y,x]`: scatter transpose of [`shifted_axpy`].
#[inline]
fn shifted_axpy_t(dst: &mut [f32], src: &[f32], h: usize, w: usize, dy: isize, dx: isize, wv: f32) {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((w as isize - dx).min(w as isize)) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let sx1 = (x1 as isize + dx) as usize;
        let d = &mut dst[sy * w + sx0..sy * w + sx1];
        let s = &src[y * w + x0..y * w + x1];
        for (di, &si) in d.iter_mut().zip(s) {
            *di += wv * si;
        }
    }
}

fn relu(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

fn relu_backward(dout: &[f32], pre: &[f32]) -> Vec<f32> {
    dout.iter()
        .zip(pre)
        .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
        .collect()
}

/// 2x2 max pooling; ties break to the first element in scan order.
fn maxpool2(inp: &[f32], ch: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; ch * oh * ow];
    let mut am = vec![0u32; ch * oh * ow];
    for c in 0..ch {
        let plane = &inp[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = (2 * y) * w + 2 * x;
                let mut best = plane[best_idx];
                for (py, px) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * y + py) * w + 2 * x + px;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out[c * oh * ow + y * ow + x] = best;
                am[c * oh * ow + y * ow + x] = best_idx as u32;
            }
        }
    }
    (out, am)
}

fn maxpool2_backward(
    dout: &[f32],
    am: &[u32],
    ch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut dinp = vec![0.0f32; ch * h * w];
    for c in 0..ch {
        for i in 0..oh * ow {
            let idx = am[c * oh * ow + i] as usize;
            dinp[c * h * w + idx] += dout[c * oh * ow + i];
        }
    }
    dinp
}

impl Dense {
    fn init(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim)
            .map(|_| rng.uniform(-limit, limit) as f32)
            .collect();
        Dense {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    fn forward(&self, inp: &[f32]) -> Vec<f32> {
        (0..self.out_dim)
            .map(|o| {
                self.b[o]
                    + self.w[o * self.in_dim..(o + 1) * self.in_dim]
                        .iter()
                        .zip(inp)
                        .map(|(&w, &x)| w * x)
                        .sum::<f32>()
            })
            .collect()
    }

    fn backward(&self, inp: &[f32], dout: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut dw = vec![0.0f32; self.w.len()];
        let mut dinp = vec![0.0f32; self.in_dim];
        for o in 0..self.out_dim {
            let g = dout[o];
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let dw_row = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                dw_row[i] = g * inp[i];
                dinp[i] += g * row[i];
            }
        }
        (dw, dout.to_vec(), dinp)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64) -> ConvNet {
        ConvNet::new(1, 8, 8, 3, seed).unwrap()
    }

    fn random_input(seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, 0xf00);
        Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rng.next_f32()).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut net = tiny_net(1);
        net.zero_weights();
        let logits = net.logits(&random_input(2)).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_layer_is_linear_in_its_weights() {
        let mut net = tiny_net(3);
        let x = random_input(4);
        let before = net.logits(&x).unwrap();
        net.scale_output_layer(2.0);
        let after = net.logits(&x).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((2.0 * a - b).abs() < 1e-5, "{a} {b}");
        }
    }

    #[test]
    fn logits_length_matches_class_count() {
        let net = tiny_net(5);
        assert_eq!(net.logits(&random_input(6)).unwrap().len(), 3);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let net = tiny_net(5);
        let bad = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(net.forward(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, grad) = cross_entropy(&[0.0; 10], 4).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-6);
        assert!(grad.iter().sum::<f32>().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_prediction() {
        let mut logits = vec![0.0f32; 5];
        logits[2] = 30.0;
        let (loss, _) = cross_entropy(&logits, 2).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn cross_entropy_grad_sums_to_zero() {
        let (_, grad) = cross_entropy(&[1.0, -2.0, 0.5, 3.0], 1).unwrap();
        assert!(grad.iter().sum::<f32>().abs() < 1e-6);
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let net = tiny_net(7);
        let cache = net.forward(&random_input(8)).unwrap();
        let g = net.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.conv1_w.iter().all(|&v| v == 0.0));
        assert!(g.fc2_w.iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_are_linear_in_loss_grad() {
        let net = tiny_net(9);
        let cache = net.forward(&random_input(10)).unwrap();
        let lg = [0.3f32, -0.7, 0.4];
        let lg2: Vec<f32> = lg.iter().map(|v| v * 2.0).collect();
        let g1 = net.backward(&cache, &lg).unwrap();
        let g2 = net.backward(&cache, &lg2).unwrap();
        for (a, b) in g1.fc1_w.iter().zip(&g2.fc1_w) {
            assert!((2.0 * a - b).abs() < 1e-5);
        }
        for (a, b) in g1.input.data().iter().zip(g2.input.data()) {
            assert!((2.0 * a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = tiny_net(11);
        let cache = net.forward(&random_input(12)).unwrap();
        net.scale_output_layer(1.5);
        assert!(matches!(
            net.backward(&cache, &[1.0, 0.0, 0.0]),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let ds = crate::synth::make_dataset(8, 1);
        let mut net = ConvNet::new(1, 28, 28, 10, 2).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 4,
            momentum: 0.9,
            seed: 3,
        };
        net.train(&ds, &(0..8).collect::<Vec<_>>(), &cfg).unwrap();
        assert!(net.weights_equal(&before));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = crate::synth::make_dataset(32, 4);
        let idx: Vec<usize> = (0..32).collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 8,
            momentum: 0.9,
            seed: 7,
        };
        let mut a = ConvNet::new(1, 28, 28, 10, 5).unwrap();
        let mut b = ConvNet::new(1, 28, 28, 10, 5).unwrap();
        a.train(&ds, &idx, &cfg).unwrap();
        b.train(&ds, &idx, &cfg).unwrap();
        assert!(a.weights_equal(&b));
    }

    #[test]
    fn weight_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.pfnw");
        let net = ConvNet::new(3, 32, 32, 10, 21).unwrap();
        net.save(&path).unwrap();
        let back = ConvNet::load(&path).unwrap();
        assert!(net.weights_equal(&back));
        assert_eq!(back.input_shape(), [3, 32, 32]);
        assert_eq!(back.class_count, 10);
    }

    #[test]
    fn gradcam_is_normalized_and_deterministic() {
        let ds = crate::synth::make_dataset(4, 9);
        let mut net = ConvNet::new(1, 28, 28, 10, 13).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 4,
            momentum: 0.9,
            seed: 1,
        };
        net.train(&ds, &[0, 1, 2, 3], &cfg).unwrap();
        let cam1 = net.gradcam(&ds.images[0], 3).unwrap();
        let cam2 = net.gradcam(&ds.images[0], 3).unwrap();
        assert_eq!(cam1.data(), cam2.data());
        assert_eq!(cam1.shape(), &[28, 28]);
        let max = cam1.data().iter().cloned().fold(0.0f32, f32::max);
        let min = cam1.data().iter().cloned().fold(f32::INFINITY, f32::min);
        assert!(min >= 0.0);
        assert!(max == 1.0 || max == 0.0, "max {max}");
    }

    #[test]
    fn gradcam_zero_head_gives_zero_map() {
        let mut net = tiny_net(15);
        net.zero_weights();
        let cam = net.gradcam(&random_input(16), 0).unwrap();
        assert!(cam.data().iter().all(|&v| v == 0.0));
    }
}
