//! Deterministic synthetic digit corpus.
//!
//! Renders 28x28 grayscale digits from a 5x7 dot-matrix font under randomized
//! affine jitter, stroke blur and speckle noise, and can emit the corpus as
//! standard IDX files so the regular loaders exercise their real code path.
//! Used by tests and demos when no real MNIST files are on disk.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::LabeledDataset;
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::Tensor;

const SIDE: usize = 28;

// 5x7 dot-matrix glyphs, one row per byte, low 5 bits used.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Canonical 28x28 float rendering of a glyph: 3x upscale centered on the canvas.
fn canonical(label: u8) -> [f32; SIDE * SIDE] {
    let mut img = [0.0f32; SIDE * SIDE];
    let glyph = &GLYPHS[label as usize];
    let cell = 3usize;
    let (gw, gh) = (5 * cell, 7 * cell); // 15 x 21
    let (x0, y0) = ((SIDE - gw) / 2, (SIDE - gh) / 2);
    for (row, bits) in glyph.iter().enumerate() {
        for col in 0..5 {
            if bits & (1 << (4 - col)) != 0 {
                for dy in 0..cell {
                    for dx in 0..cell {
                        img[(y0 + row * cell + dy) * SIDE + x0 + col * cell + dx] = 1.0;
                    }
                }
            }
        }
    }
    img
}

fn gaussian_blur(img: &[f32], sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i32;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i * i) as f32 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let n = SIDE as i32;
    let mut tmp = vec![0.0f32; SIDE * SIDE];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x + ki as i32 - radius).clamp(0, n - 1);
                acc += k * img[(y * n + sx) as usize];
            }
            tmp[(y * n + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0f32; SIDE * SIDE];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y + ki as i32 - radius).clamp(0, n - 1);
                acc += k * tmp[(sy * n + x) as usize];
            }
            out[(y * n + x) as usize] = acc;
        }
    }
    out
}

/// Renders one jittered sample of `label` as a 1x28x28 tensor in [0,1].
pub fn render_digit(label: u8, rng: &mut RngStream) -> Tensor {
    let base = canonical(label);
    let theta = rng.uniform(-0.30, 0.30) as f32;
    let scale_x = rng.uniform(0.62, 1.18) as f32;
    let scale_y = rng.uniform(0.62, 1.18) as f32;
    let shear = rng.uniform(-0.28, 0.28) as f32;
    let tx = rng.uniform(-3.5, 3.5) as f32;
    let ty = rng.uniform(-3.5, 3.5) as f32;
    let ink = rng.uniform(0.55, 1.0) as f32;
    let blur_sigma = rng.uniform(0.7, 1.6) as f32;
    let speckle = rng.uniform(0.0, 0.06) as f32;
    let texture_amp = rng.uniform(0.15, 0.45) as f32;

    // mid-frequency background texture: a coarse random grid upsampled
    // bilinearly, fine enough that edge maps pick it up everywhere
    let grid = 12usize;
    let mut coarse = vec![0.0f32; grid * grid];
    for v in coarse.iter_mut() {
        *v = rng.next_f32();
    }
    let texture = crate::util::bilinear_resize(&coarse, grid, grid, SIDE, SIDE);

    // inverse-map each output pixel through the affine transform
    let (sin, cos) = theta.sin_cos();
    let c = (SIDE as f32 - 1.0) / 2.0;
    let mut out = vec![0.0f32; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let dx = x as f32 - c - tx;
            let dy = y as f32 - c - ty;
            // rotate back, unshear, unscale
            let rx = (cos * dx + sin * dy) / scale_x;
            let ry = (-sin * dx + cos * dy) / scale_y;
            let sx = rx - shear * ry + c;
            let sy = ry + c;
            out[y * SIDE + x] = bilinear_at(&base, sx, sy);
        }
    }
    let mut out = gaussian_blur(&out, blur_sigma);
    for (v, &t) in out.iter_mut().zip(&texture) {
        let noise = rng.uniform(-1.0, 1.0) as f32 * speckle;
        // ink over the textured background
        *v = (*v * ink + (1.0 - *v) * texture_amp * t + noise).clamp(0.0, 1.0);
    }
    Tensor::from_vec(&[1, SIDE, SIDE], out).unwrap()
}

fn bilinear_at(img: &[f32; SIDE * SIDE], x: f32, y: f32) -> f32 {
    if x < 0.0 || y < 0.0 || x > (SIDE - 1) as f32 || y > (SIDE - 1) as f32 {
        return 0.0;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(SIDE - 1);
    let y1 = (y0 + 1).min(SIDE - 1);
    let tx = x - x0 as f32;
    let ty = y - y0 as f32;
    let top = img[y0 * SIDE + x0] * (1.0 - tx) + img[y0 * SIDE + x1] * tx;
    let bot = img[y1 * SIDE + x0] * (1.0 - tx) + img[y1 * SIDE + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Deterministic dataset of `count` jittered digits with uniform labels.
pub fn make_dataset(count: usize, seed: u64) -> LabeledDataset {
    let mut label_rng = RngStream::new(seed, 0x51);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = (label_rng.next_u64() % 10) as u8;
        let mut rng = RngStream::new(seed, 0x52).split(i as u64);
        images.push(render_digit(label, &mut rng));
        labels.push(label);
    }
    LabeledDataset {
        images,
        labels,
        name: "synth28".into(),
        class_count: 10,
        attack_meta: None,
    }
}

/// Paths of the four IDX files written by [`write_idx_corpus`].
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Writes a train/test corpus in exact IDX layout (big-endian headers,
/// magic 0x803 for images and 0x801 for labels, u8 pixels).
pub fn write_idx_corpus(
    dir: &Path,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<IdxPaths> {
    std::fs::create_dir_all(dir)?;
    let train = make_dataset(train_count, seed);
    let test = make_dataset(test_count, seed ^ 0x7e57);
    let paths = IdxPaths {
        train_images: dir.join("train-images-idx3-ubyte"),
        train_labels: dir.join("train-labels-idx1-ubyte"),
        test_images: dir.join("t10k-images-idx3-ubyte"),
        test_labels: dir.join("t10k-labels-idx1-ubyte"),
    };
    write_idx_pair(&train, &paths.train_images, &paths.train_labels)?;
    write_idx_pair(&test, &paths.test_images, &paths.test_labels)?;
    Ok(paths)
}

fn write_idx_pair(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + ds.len() * SIDE * SIDE);
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(SIDE as u32).to_be_bytes());
    img.extend_from_slice(&(SIDE as u32).to_be_bytes());
    for t in &ds.images {
        for &v in t.data() {
            img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend_from_slice(&ds.labels);
    let mut fi = std::fs::File::create(images_path)?;
    fi.write_all(&img)?;
    let mut fl = std::fs::File::create(labels_path)?;
    fl.write_all(&lbl)?;
    Ok(())
}
