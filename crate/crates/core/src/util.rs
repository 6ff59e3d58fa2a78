//! Small shared helpers: hashing, deterministic worker pools, plane resizing.

/// FNV-1a over raw bytes; used for config hashes and perturbation-draw hashes.
#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write_bytes(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write_u64(v.to_bits());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a_str(s: &str) -> u64 {
    let mut h = Fnv1a::new();
    h.write_bytes(s.as_bytes());
    h.finish()
}

/// Maps `f` over `0..n` with up to `workers` threads, collecting results in
/// index order. Each index is computed independently and serially, so the
/// output is identical for every worker count.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 || n < 2 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slots) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|v| v.unwrap()).collect()
}

/// Bilinear resize of an `h x w` row-major plane to `oh x ow`.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), h * w);
    let mut out = vec![0.0f32; oh * ow];
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * ow + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_matches_serial() {
        let serial = parallel_map(37, 1, |i| i * i);
        let parallel = parallel_map(37, 4, |i| i * i);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn bilinear_identity() {
        let src = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_resize(&src, 2, 2, 2, 2), src);
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let src = vec![0.7f32; 9];
        let out = bilinear_resize(&src, 3, 3, 7, 7);
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a_str(""), 0xcbf2_9ce4_8422_2325);
        assert_ne!(fnv1a_str("a"), fnv1a_str("b"));
    }
}
