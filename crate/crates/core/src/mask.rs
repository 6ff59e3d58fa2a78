//! Sparse binary masks that localize pseudo-noise to salient, high-frequency
//! image regions: saliency/CAM proposals intersected with Sobel edges.

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thresholds in [0,1] scale (the CLI rescales 0-255 inputs at load).
#[derive(Debug, Clone)]
pub struct MaskConfig {
    pub gamma_s: f32,
    pub gamma_c: f32,
    pub gamma_l: f32,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            gamma_s: 0.0,
            gamma_c: 125.0 / 255.0,
            gamma_l: 100.0 / 255.0,
        }
    }
}

/// Binary per-pixel mask; values are exactly 0.0 or 1.0.
#[derive(Debug, Clone)]
pub struct SparseMask {
    pub bits: Tensor,
}

impl SparseMask {
    pub fn density(&self) -> f64 {
        let d = self.bits.data();
        d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn subset_of(&self, other: &SparseMask) -> bool {
        self.bits
            .data()
            .iter()
            .zip(other.bits.data())
            .all(|(&a, &b)| a <= b)
    }
}

/// Channel-mean grayscale plane of a CxHxW image.
pub fn to_grayscale(x: &Tensor) -> Vec<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let mut gray = vec![0.0f32; plane];
    for ch in 0..c {
        for (g, &v) in gray.iter_mut().zip(&x.data()[ch * plane..(ch + 1) * plane]) {
            *g += v;
        }
    }
    let inv = 1.0 / c as f32;
    for g in gray.iter_mut() {
        *g *= inv;
    }
    gray
}

fn fft2(data: &mut [Complex<f32>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(0.0f32, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// 3x3 mean filter with periodic (wrap) borders, matching the topology of
/// the frequency grid it is applied to.
fn box3_wrap(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let ym = (y + h - 1) % h;
        let yp = (y + 1) % h;
        for x in 0..w {
            let xm = (x + w - 1) % w;
            let xp = (x + 1) % w;
            let s = src[ym * w + xm]
                + src[ym * w + x]
                + src[ym * w + xp]
                + src[y * w + xm]
                + src[y * w + x]
                + src[y * w + xp]
                + src[yp * w + xm]
                + src[yp * w + x]
                + src[yp * w + xp];
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

fn gaussian_smooth(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
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
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x as i32 + ki as i32 - radius).clamp(0, w as i32 - 1) as usize;
                acc += k * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y as i32 + ki as i32 - radius).clamp(0, h as i32 - 1) as usize;
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn max_normalize(v: &mut [f32]) {
    let max = v.iter().cloned().fold(0.0f32, f32::max);
    if max > 0.0 {
        for x in v.iter_mut() {
            *x /= max;
        }
    }
}

/// Spectral-residual saliency of a grayscale plane, max-normalized to [0,1].
///
/// The image mean is removed first (a constant image has an empty spectrum
/// and maps to all zeros); bins with zero amplitude are excluded from the
/// reconstruction so the log-residual never manufactures energy there.
pub fn saliency_spectral_residual(gray: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    if gray.len() != h * w {
        return Err(Error::Dimension(format!(
            "plane {} does not match {h}x{w}",
            gray.len()
        )));
    }
    // f64 mean so a constant plane centers to exact zeros
    let mean = (gray.iter().map(|&v| v as f64).sum::<f64>() / gray.len() as f64) as f32;
    let mut spec: Vec<Complex<f32>> = gray
        .iter()
        .map(|&v| Complex::new(v - mean, 0.0))
        .collect();
    fft2(&mut spec, h, w, false);

    let amp: Vec<f32> = spec.iter().map(|c| c.norm()).collect();
    let log_amp: Vec<f32> = amp.iter().map(|&a| (a + 1e-12).ln()).collect();
    let smoothed = box3_wrap(&log_amp, h, w);

    for ((s, &a), (&la, &sm)) in spec
        .iter_mut()
        .zip(&amp)
        .zip(log_amp.iter().zip(&smoothed))
    {
        if a > 0.0 {
            let residual = la - sm;
            let phase = *s / a;
            *s = phase * residual.exp();
        } else {
            *s = Complex::new(0.0, 0.0);
        }
    }
    fft2(&mut spec, h, w, true);
    let scale = 1.0 / (h * w) as f32;
    let raw: Vec<f32> = spec.iter().map(|c| (c * scale).norm_sqr()).collect();
    let mut map = gaussian_smooth(&raw, h, w, 2.5);
    max_normalize(&mut map);
    Ok(map)
}

/// Sobel gradient magnitude with replicate borders, max-normalized to [0,1].
pub fn sobel_magnitude(gray: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    if gray.len() != h * w {
        return Err(Error::Dimension(format!(
            "plane {} does not match {h}x{w}",
            gray.len()
        )));
    }
    let at = |y: isize, x: isize| -> f32 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[yy * w + xx]
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            // paired differences cancel exactly on constant regions
            let gx = (at(y - 1, x + 1) - at(y - 1, x - 1))
                + 2.0 * (at(y, x + 1) - at(y, x - 1))
                + (at(y + 1, x + 1) - at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) - at(y - 1, x - 1))
                + 2.0 * (at(y + 1, x) - at(y - 1, x))
                + (at(y + 1, x + 1) - at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    max_normalize(&mut out);
    Ok(out)
}

/// Binary indicator: 1 where `map > gamma`, 0 elsewhere.
pub fn map_indicator(map: &[f32], gamma: f32) -> Vec<f32> {
    map.iter().map(|&v| if v > gamma { 1.0 } else { 0.0 }).collect()
}

/// Mask1 = indicator(saliency, gs) OR indicator(cam, gc);
/// Mask2 = indicator(sobel, gl); result = Mask1 AND Mask2.
pub fn compose_mask(x: &Tensor, cam: &Tensor, cfg: &MaskConfig) -> Result<SparseMask> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if cam.shape() != [h, w] {
        return Err(Error::Dimension(format!(
            "cam shape {:?} does not match image plane {h}x{w}",
            cam.shape()
        )));
    }
    let gray = to_grayscale(x);
    let sal = saliency_spectral_residual(&gray, h, w)?;
    let sob = sobel_magnitude(&gray, h, w)?;
    let m_sal = map_indicator(&sal, cfg.gamma_s);
    let m_cam = map_indicator(cam.data(), cfg.gamma_c);
    let m_edge = map_indicator(&sob, cfg.gamma_l);
    let bits: Vec<f32> = m_sal
        .iter()
        .zip(&m_cam)
        .zip(&m_edge)
        .map(|((&s, &c), &e)| {
            let m1 = if s > 0.0 || c > 0.0 { 1.0 } else { 0.0 };
            m1 * e
        })
        .collect();
    Ok(SparseMask {
        bits: Tensor::from_vec(&[h, w], bits)?,
    })
}

/// Per-mask intermediate maps, for inspection and reporting.
pub fn mask_parts(x: &Tensor, cam: &Tensor, cfg: &MaskConfig) -> Result<(SparseMask, SparseMask)> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let gray = to_grayscale(x);
    let sal = saliency_spectral_residual(&gray, h, w)?;
    let sob = sobel_magnitude(&gray, h, w)?;
    let m_sal = map_indicator(&sal, cfg.gamma_s);
    let m_cam = map_indicator(cam.data(), cfg.gamma_c);
    let mask1: Vec<f32> = m_sal
        .iter()
        .zip(&m_cam)
        .map(|(&s, &c)| if s > 0.0 || c > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let mask2 = map_indicator(&sob, cfg.gamma_l);
    Ok((
        SparseMask {
            bits: Tensor::from_vec(&[h, w], mask1)?,
        },
        SparseMask {
            bits: Tensor::from_vec(&[h, w], mask2)?,
        },
    ))
}

/// Dumps a [0,1] map as a binary PGM (P5) for visual inspection.
pub fn write_pgm(path: &Path, map: &[f32], h: usize, w: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn constant_image_has_zero_saliency() {
        let map = saliency_spectral_residual(&vec![0.6f32; 28 * 28], 28, 28).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saliency_is_normalized() {
        let mut rng = RngStream::new(1, 0);
        let gray: Vec<f32> = (0..28 * 28).map(|_| rng.next_f32()).collect();
        let map = saliency_spectral_residual(&gray, 28, 28).unwrap();
        let max = map.iter().cloned().fold(0.0f32, f32::max);
        assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((max - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_bright_pixel_is_salient() {
        let (h, w) = (28, 28);
        let mut gray = vec![0.0f32; h * w];
        gray[13 * w + 17] = 1.0;
        let map = saliency_spectral_residual(&gray, h, w).unwrap();
        let (mut best, mut best_v) = (0usize, -1.0f32);
        for (i, &v) in map.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let (by, bx) = (best / w, best % w);
        assert!(
            (by as i32 - 13).abs() <= 2 && (bx as i32 - 17).abs() <= 2,
            "peak at ({by},{bx})"
        );
    }

    #[test]
    fn sobel_constant_is_zero() {
        let map = sobel_magnitude(&vec![0.4f32; 16 * 16], 16, 16).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_step_edge_peaks_on_edge_columns() {
        let (h, w) = (8, 8);
        let mut gray = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 4..w {
                gray[y * w + x] = 1.0;
            }
        }
        let map = sobel_magnitude(&gray, h, w).unwrap();
        // hand-computed: |Gx| = 4 on columns 3 and 4, zero elsewhere
        for y in 0..h {
            for x in 0..w {
                let v = map[y * w + x];
                if x == 3 || x == 4 {
                    assert!((v - 1.0).abs() < 1e-6, "({y},{x}) = {v}");
                } else {
                    assert!(v < 1e-6, "({y},{x}) = {v}");
                }
            }
        }
    }

    #[test]
    fn sobel_transposes_with_the_image() {
        let (h, w) = (10, 10);
        let mut rng = RngStream::new(2, 0);
        let gray: Vec<f32> = (0..h * w).map(|_| rng.next_f32()).collect();
        let mut transposed = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                transposed[x * h + y] = gray[y * w + x];
            }
        }
        let a = sobel_magnitude(&gray, h, w).unwrap();
        let b = sobel_magnitude(&transposed, w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert!((a[y * w + x] - b[x * h + y]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(map_indicator(&[0.2, 0.6], 0.5), vec![0.0, 1.0]);
        assert_eq!(map_indicator(&[0.0, 0.3, 1.0], 1.0), vec![0.0, 0.0, 0.0]);
        assert_eq!(map_indicator(&[0.0, 0.3], 0.0), vec![0.0, 1.0]);
    }

    #[test]
    fn indicator_is_idempotent_under_rebinarization() {
        let mut rng = RngStream::new(3, 0);
        let map: Vec<f32> = (0..100).map(|_| rng.next_f32()).collect();
        let once = map_indicator(&map, 0.4);
        let twice = map_indicator(&once, 0.5);
        assert_eq!(once, twice);
    }

    fn textured_image(seed: u64) -> Tensor {
        crate::synth::make_dataset(1, seed).images[0].clone()
    }

    fn flat_cam(h: usize, w: usize, v: f32) -> Tensor {
        Tensor::filled(&[h, w], v)
    }

    #[test]
    fn gamma_l_one_empties_the_mask() {
        let x = textured_image(4);
        let cam = flat_cam(28, 28, 1.0);
        let cfg = MaskConfig {
            gamma_s: 0.0,
            gamma_c: 0.0,
            gamma_l: 1.0,
        };
        let mask = compose_mask(&x, &cam, &cfg).unwrap();
        assert_eq!(mask.density(), 0.0);
    }

    #[test]
    fn mask_is_subset_of_mask2() {
        for seed in 0..5u64 {
            let x = textured_image(seed);
            let cam = flat_cam(28, 28, (seed as f32) / 5.0);
            let cfg = MaskConfig::default();
            let mask = compose_mask(&x, &cam, &cfg).unwrap();
            let (_, m2) = mask_parts(&x, &cam, &cfg).unwrap();
            assert!(mask.subset_of(&m2));
            assert!(mask.bits.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn mask1_all_ones_reduces_to_mask2() {
        let x = textured_image(6);
        // strictly positive saliency everywhere is not guaranteed, so force
        // the CAM branch on instead: gamma_c below every CAM value
        let cam = flat_cam(28, 28, 0.9);
        let cfg = MaskConfig {
            gamma_s: 0.0,
            gamma_c: 0.5,
            gamma_l: 0.0,
        };
        let mask = compose_mask(&x, &cam, &cfg).unwrap();
        let (_, m2) = mask_parts(&x, &cam, &cfg).unwrap();
        assert_eq!(mask.bits.data(), m2.bits.data());
    }

    #[test]
    fn raising_thresholds_never_adds_pixels() {
        let x = textured_image(7);
        let cam = {
            let gray = to_grayscale(&x);
            Tensor::from_vec(&[28, 28], gray).unwrap()
        };
        let lo = MaskConfig {
            gamma_s: 0.1,
            gamma_c: 0.2,
            gamma_l: 0.1,
        };
        for (ds, dc, dl) in [(0.2, 0.0, 0.0), (0.0, 0.3, 0.0), (0.0, 0.0, 0.25)] {
            let hi = MaskConfig {
                gamma_s: lo.gamma_s + ds,
                gamma_c: lo.gamma_c + dc,
                gamma_l: lo.gamma_l + dl,
            };
            let m_lo = compose_mask(&x, &cam, &lo).unwrap();
            let m_hi = compose_mask(&x, &cam, &hi).unwrap();
            assert!(m_hi.subset_of(&m_lo));
        }
    }

    #[test]
    fn sobel_sparsifies_the_proposal() {
        // intersection with the edge mask must shrink the proposal on
        // textured images at default thresholds
        let mut d_mask = 0.0;
        let mut d_m1 = 0.0;
        for seed in 0..20u64 {
            let x = textured_image(100 + seed);
            let cam = flat_cam(28, 28, 0.8);
            let cfg = MaskConfig::default();
            let mask = compose_mask(&x, &cam, &cfg).unwrap();
            let (m1, _) = mask_parts(&x, &cam, &cfg).unwrap();
            d_mask += mask.density();
            d_m1 += m1.density();
        }
        assert!(
            d_mask < d_m1,
            "mask density {d_mask} not below proposal density {d_m1}"
        );
    }

    #[test]
    fn pgm_dump_writes_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n255\n".len() + 4);
    }
}
