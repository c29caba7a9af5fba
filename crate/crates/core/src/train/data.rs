//! Raw binary datasets and the synthetic separable set.
//!
//! A dataset directory holds `images.bin` and `labels.bin`; the byte layout
//! is documented in `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const IMAGES_MAGIC: &[u8; 4] = b"MNIM";
pub const LABELS_MAGIC: &[u8; 4] = b"MNLB";
pub const DATA_VERSION: u32 = 1;
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    /// `(N, C, H, W)`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.n() != labels.len() {
            return Err(Error::Format(format!("{} images but {} labels", images.n(), labels.len())));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the listed samples into one batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [_, c, h, w] = self.images.shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new([idx.len(), c, h, w], data).expect("batch shape"), labels)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let [n, c, h, w] = self.images.shape();
        let mut img = Vec::with_capacity(25 + self.images.len() * T::DTYPE.size());
        img.extend_from_slice(IMAGES_MAGIC);
        img.extend_from_slice(&DATA_VERSION.to_le_bytes());
        img.extend_from_slice(&(n as u64).to_le_bytes());
        for d in [c, h, w] {
            img.extend_from_slice(&(d as u32).to_le_bytes());
        }
        img.push(T::DTYPE.tag());
        for &v in self.images.data() {
            v.write_le(&mut img);
        }
        fs::write(dir.join(IMAGES_FILE), img)?;

        let mut lab = Vec::with_capacity(16 + 4 * n);
        lab.extend_from_slice(LABELS_MAGIC);
        lab.extend_from_slice(&DATA_VERSION.to_le_bytes());
        lab.extend_from_slice(&(n as u64).to_le_bytes());
        for &l in &self.labels {
            lab.extend_from_slice(&(l as u32).to_le_bytes());
        }
        fs::write(dir.join(LABELS_FILE), lab)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let images = read_images(&fs::read(dir.join(IMAGES_FILE))?)?;
        let labels = read_labels(&fs::read(dir.join(LABELS_FILE))?)?;
        Self::new(images, labels)
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn expect_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<u64> {
    if r.take(4)? != magic {
        return Err(Error::Format(format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap())));
    }
    let version = r.u32()?;
    if version != DATA_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    r.u64()
}

/// Parses an image file into the requested element type.
pub fn read_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes);
    let n = expect_header(&mut r, IMAGES_MAGIC)? as usize;
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    if r.remaining() != count * dtype.size() {
        return Err(Error::Format(format!("image payload has {} bytes, expected {}", r.remaining(), count * dtype.size())));
    }
    let payload = r.take(count * dtype.size())?;
    let data = payload
        .chunks_exact(dtype.size())
        .map(|b| match dtype {
            DType::F32 => T::from_f64_lossy(f32::read_le(b) as f64),
            DType::F64 => T::from_f64_lossy(f64::read_le(b)),
        })
        .collect();
    Tensor::new([n, c, h, w], data)
}

pub fn read_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes);
    let n = expect_header(&mut r, LABELS_MAGIC)? as usize;
    if r.remaining() != n.saturating_mul(4) {
        return Err(Error::Format(format!("label payload has {} bytes, expected {}", r.remaining(), n * 4)));
    }
    (0..n).map(|_| r.u32().map(|v| v as usize)).collect()
}

/// Two-class separable set: `x = s·μ + noise` with `s = ±1`, resampled until
/// `s·⟨x, μ⟩ >= margin·|μ|²`, so the hyperplane `⟨x, μ⟩ = 0` separates the classes.
pub fn synthetic_separable<T: Scalar>(n: usize, size: usize, seed: u64) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = 3 * size * size;
    let mu: Vec<f64> = (0..per)
        .map(|idx| {
            let c = idx / (size * size);
            let y = (idx / size) % size;
            let level = [0.6, -0.6, 0.3][c];
            level * (1.0 + 0.5 * (y as f64 / size as f64 - 0.5))
        })
        .collect();
    let mu2: f64 = mu.iter().map(|v| v * v).sum();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let s = if label == 1 { 1.0 } else { -1.0 };
        loop {
            let x: Vec<f64> = mu
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * m + 0.8 * z
                })
                .collect();
            let proj: f64 = x.iter().zip(&mu).map(|(a, b)| a * b).sum();
            if s * proj >= 0.5 * mu2 {
                data.extend(x.into_iter().map(T::from_f64_lossy));
                break;
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new([n, 3, size, size], data).expect("shape"), labels).expect("labels")
}
