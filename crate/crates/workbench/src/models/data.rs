//! Synthetic labeled datasets and their on-disk format.
//!
//! All inputs live in `[0,1]^d`; labels are 1-based (`1..=K`). Files are
//! binary: a 12-byte header of three little-endian `u32` values `{d, n, K}`,
//! followed by `n * d` little-endian `f64` inputs (row-major), followed by
//! `n` little-endian `u32` labels.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub inputs: Vec<Tensor>,
    /// 1-based class labels.
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.inputs.iter().zip(self.labels.iter().copied())
    }

    /// Deterministic split into (train, held-out) parts.
    pub fn split(&self, train_fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let take = |range: std::ops::Range<usize>| Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            inputs: self.inputs[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        };
        (take(0..cut), take(cut..self.len()))
    }

    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Gaussians2d,
    Rings2d,
    GridPatterns64,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussians2d" => Ok(DatasetKind::Gaussians2d),
            "rings2d" => Ok(DatasetKind::Rings2d),
            "gridpatterns64" => Ok(DatasetKind::GridPatterns64),
            other => Err(Error::invalid(format!("unknown dataset kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Gaussians2d => "gaussians2d",
            DatasetKind::Rings2d => "rings2d",
            DatasetKind::GridPatterns64 => "gridpatterns64",
        }
    }
}

pub fn generate(kind: DatasetKind, n: usize, seed: u64) -> Dataset {
    match kind {
        DatasetKind::Gaussians2d => gaussians2d(n, seed),
        DatasetKind::Rings2d => rings2d(n, seed),
        DatasetKind::GridPatterns64 => grid_patterns64(n, seed),
    }
}

/// Two Gaussian blobs in the unit square, one per class.
pub fn gaussians2d(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = [(0.3, 0.3), (0.7, 0.7)];
    let std = 0.07;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (mx, my) = means[class];
        let x = (mx + std * gauss(&mut rng)).clamp(0.0, 1.0);
        let y = (my + std * gauss(&mut rng)).clamp(0.0, 1.0);
        inputs.push(Tensor::vector(vec![x, y]));
        labels.push(class + 1);
    }
    Dataset { dim: 2, num_classes: 2, inputs, labels }
}

/// Two concentric rings around the center of the unit square. Not linearly
/// separable.
pub fn rings2d(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radii = [0.12, 0.32];
    let noise = 0.025;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let angle = rng.gen_range(0.0..2.0 * PI);
        let r = radii[class] + noise * gauss(&mut rng);
        let x = (0.5 + r * angle.cos()).clamp(0.0, 1.0);
        let y = (0.5 + r * angle.sin()).clamp(0.0, 1.0);
        inputs.push(Tensor::vector(vec![x, y]));
        labels.push(class + 1);
    }
    Dataset { dim: 2, num_classes: 2, inputs, labels }
}

/// 8x8 synthetic "digit grid": four noisy binary patterns (horizontal
/// stripes, vertical stripes, checkerboard, quadrant blocks).
pub fn grid_patterns64(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = |class: usize, r: usize, c: usize| -> f64 {
        let on = match class {
            0 => r % 2 == 0,
            1 => c % 2 == 0,
            2 => (r + c) % 2 == 0,
            _ => (r < 4) == (c < 4),
        };
        if on {
            0.8
        } else {
            0.2
        }
    };
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 4;
        let mut data = Vec::with_capacity(64);
        for r in 0..8 {
            for c in 0..8 {
                let v = pattern(class, r, c) + rng.gen_range(-0.15..0.15);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        inputs.push(Tensor::vector(data));
        labels.push(class + 1);
    }
    Dataset { dim: 64, num_classes: 4, inputs, labels }
}

pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(dataset.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.num_classes as u32).to_le_bytes());
    for x in &dataset.inputs {
        for &v in x.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &y in &dataset.labels {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 12 {
        return Err(Error::invalid("dataset file truncated"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    let (dim, n, k) = (u32_at(0), u32_at(4), u32_at(8));
    let expect = 12 + n * dim * 8 + n * 4;
    if buf.len() != expect {
        return Err(Error::invalid(format!(
            "dataset file length {} does not match header (expected {expect})",
            buf.len()
        )));
    }
    let mut inputs = Vec::with_capacity(n);
    let mut offset = 12;
    for _ in 0..n {
        let mut data = Vec::with_capacity(dim);
        for _ in 0..dim {
            data.push(f64::from_le_bytes(buf[offset..offset + 8].try_into().unwrap()));
            offset += 8;
        }
        inputs.push(Tensor::vector(data));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = u32_at(offset);
        offset += 4;
        if y == 0 || y > k {
            return Err(Error::invalid(format!("label {y} outside 1..={k}")));
        }
        labels.push(y);
    }
    Ok(Dataset { dim, num_classes: k, inputs, labels })
}
