//! Image dataset ingestion: IDX (MNIST layout), CIFAR-10 binary batches, the
//! internal cache format, and deterministic batch plans.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"PFDS";
pub const CACHE_VERSION: u16 = 1;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub name: String,
    pub class_count: usize,
    /// Attack name and epsilon when this set holds adversarial images.
    pub attack_meta: Option<(String, f32)>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// New dataset holding the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
            class_count: self.class_count,
            attack_meta: self.attack_meta.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        for (i, img) in self.images.iter().enumerate() {
            if !img.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
                return Err(Error::Format(format!("image {i} has pixels outside [0,1]")));
            }
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= self.class_count)
        {
            return Err(Error::Format(format!(
                "label {bad} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let shape = self.image_shape();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        write_str(&mut w, &self.name)?;
        w.write_all(&(self.class_count as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let (attack, eps) = match &self.attack_meta {
            Some((name, eps)) => (name.as_str(), *eps),
            None => ("", 0.0),
        };
        write_str(&mut w, attack)?;
        w.write_all(&eps.to_le_bytes())?;
        for img in &self.images {
            for &v in img.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for &l in &self.labels {
            w.write_all(&[l])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("cache truncated at magic".into()))?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format(format!("bad cache magic {magic:?}")));
        }
        let version = read_u16_le(&mut r)?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let name = read_str(&mut r)?;
        let class_count = read_u32_le(&mut r)? as usize;
        let count = read_u32_le(&mut r)? as usize;
        let c = read_u32_le(&mut r)? as usize;
        let h = read_u32_le(&mut r)? as usize;
        let w = read_u32_le(&mut r)? as usize;
        let attack = read_str(&mut r)?;
        let mut eps_b = [0u8; 4];
        r.read_exact(&mut eps_b)
            .map_err(|_| Error::Format("cache truncated at epsilon".into()))?;
        let eps = f32::from_le_bytes(eps_b);
        let per = c * h * w;
        let mut images = Vec::with_capacity(count);
        let mut buf = vec![0u8; per * 4];
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("cache truncated in image {i}")))?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            images.push(Tensor::from_vec(&[c, h, w], data)?);
        }
        let mut labels = vec![0u8; count];
        r.read_exact(&mut labels)
            .map_err(|_| Error::Format("cache truncated in labels".into()))?;
        let ds = LabeledDataset {
            images,
            labels,
            name,
            class_count,
            attack_meta: if attack.is_empty() {
                None
            } else {
                Some((attack, eps))
            },
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Reads the IDX image/label pair (big-endian dims, magic 0x803/0x801) as
/// 1xHxW tensors scaled into [0,1].
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let magic = read_u32_be_at(&img_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x} at byte 0, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be_at(&img_bytes, 4)? as usize;
    let h = read_u32_be_at(&img_bytes, 8)? as usize;
    let w = read_u32_be_at(&img_bytes, 12)? as usize;
    let need = 16 + count * h * w;
    if img_bytes.len() < need {
        return Err(Error::Format(format!(
            "image file truncated: {} bytes, need {need} (offset {})",
            img_bytes.len(),
            img_bytes.len()
        )));
    }

    let lmagic = read_u32_be_at(&lbl_bytes, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {lmagic:#010x} at byte 0, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32_be_at(&lbl_bytes, 4)? as usize;
    if lcount != count {
        return Err(Error::Format(format!(
            "{count} images but {lcount} labels"
        )));
    }
    if lbl_bytes.len() < 8 + count {
        return Err(Error::Format(format!(
            "label file truncated at byte {}",
            lbl_bytes.len()
        )));
    }

    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * h * w;
        let data: Vec<f32> = img_bytes[start..start + h * w]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        images.push(Tensor::from_vec(&[1, h, w], data)?);
    }
    let labels = lbl_bytes[8..8 + count].to_vec();
    let ds = LabeledDataset {
        images,
        labels,
        name: "mnist".into(),
        class_count: 10,
        attack_meta: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads a CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes
/// (channel-major R,G,B planes of 32x32).
pub fn load_cifar10_bin(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        let data: Vec<f32> = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Tensor::from_vec(&[3, 32, 32], data)?);
    }
    let ds = LabeledDataset {
        images,
        labels,
        name: "cifar10".into(),
        class_count: 10,
        attack_meta: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Deterministic shuffled batching; the trailing ragged batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub order: Vec<usize>,
    pub seed: u64,
}

impl BatchPlan {
    pub fn batch_count(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order
            .chunks_exact(self.batch_size)
    }
}

/// Shuffles `0..ds.len()` by `seed` into even batches. Batch size must be even
/// because half of every batch gets converted downstream.
pub fn make_batches(ds: &LabeledDataset, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size must be even and >= 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = RngStream::new(seed, 0xba7c);
    rng.shuffle(&mut order);
    Ok(BatchPlan {
        batch_size,
        order,
        seed,
    })
}

fn read_u32_be_at(bytes: &[u8], at: usize) -> Result<u32> {
    if bytes.len() < at + 4 {
        return Err(Error::Format(format!("file truncated at byte {at}")));
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u16_le(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid utf8 string".into()))
}

fn read_u16_le(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u16".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32_le(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(count: usize, h: usize, w: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(count as u32).to_be_bytes());
        img.extend_from_slice(&(h as u32).to_be_bytes());
        img.extend_from_slice(&(w as u32).to_be_bytes());
        for i in 0..count * h * w {
            img.push((i % 256) as u8);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&(count as u32).to_be_bytes());
        for i in 0..count {
            lbl.push((i % 10) as u8);
        }
        (img, lbl)
    }

    #[test]
    fn idx_loads_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lbl) = idx_pair(3, 4, 4);
        img[16] = 255; // first pixel of first image
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), &[1, 4, 4]);
        assert_eq!(ds.images[0].data()[0], 1.0);
        assert_eq!(ds.labels, vec![0, 1, 2]);
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lbl) = idx_pair(1, 2, 2);
        img[3] = 0x99;
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        match err {
            Error::Format(m) => assert!(m.contains("magic"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_reports_truncation_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = idx_pair(2, 3, 3);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &img[..img.len() - 5]).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        match err {
            Error::Format(m) => assert!(m.contains("truncated"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cifar_record_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        let p = dir.path().join("batch.bin");
        std::fs::write(&p, &rec).unwrap();
        let ds = load_cifar10_bin(&p).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 7);
        assert_eq!(ds.image_shape(), &[3, 32, 32]);
    }

    #[test]
    fn cifar_count_is_length_over_record() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = vec![1u8; CIFAR_RECORD * 5];
        let p = dir.path().join("b.bin");
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(load_cifar10_bin(&p).unwrap().len(), 5);
    }

    #[test]
    fn cifar_rejects_partial_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        std::fs::write(&p, vec![0u8; CIFAR_RECORD + 1]).unwrap();
        assert!(matches!(
            load_cifar10_bin(&p).unwrap_err(),
            Error::Format(_)
        ));
    }

    fn tiny_ds(n: usize) -> LabeledDataset {
        LabeledDataset {
            images: (0..n)
                .map(|i| Tensor::filled(&[1, 2, 2], (i % 5) as f32 / 10.0))
                .collect(),
            labels: (0..n).map(|i| (i % 3) as u8).collect(),
            name: "tiny".into(),
            class_count: 3,
            attack_meta: None,
        }
    }

    #[test]
    fn batches_drop_ragged_tail() {
        let plan = make_batches(&tiny_ds(10), 4, 1).unwrap();
        assert_eq!(plan.batch_count(), 2);
        assert_eq!(plan.batches().count(), 2);
    }

    #[test]
    fn batches_same_seed_same_order() {
        let a = make_batches(&tiny_ds(16), 4, 9).unwrap();
        let b = make_batches(&tiny_ds(16), 4, 9).unwrap();
        assert_eq!(a.order, b.order);
        let c = make_batches(&tiny_ds(16), 4, 10).unwrap();
        assert_ne!(a.order, c.order);
    }

    #[test]
    fn odd_batch_size_rejected() {
        assert!(matches!(
            make_batches(&tiny_ds(10), 3, 0).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_ds(6);
        ds.images[2].data_mut()[1] = 0.123_456_79;
        ds.attack_meta = Some(("pgd".into(), 8.0 / 255.0));
        let p = dir.path().join("set.pfds");
        ds.save_cache(&p).unwrap();
        let back = LabeledDataset::load_cache(&p).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.name, ds.name);
        assert_eq!(back.attack_meta, ds.attack_meta);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!(a.data(), b.data());
        }
    }
}
