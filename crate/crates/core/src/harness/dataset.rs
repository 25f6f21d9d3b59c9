//! Embedding files and the Gaussian-cluster generator.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "G2GEMB1\0"  u32 version=1  u32 d_h  u32 L  u64 count
//! count x { u32 label  u8 has_aug  f32[d_h*L] base  [f32[d_h*L] augmented] }
//! ```
//!
//! Feature blocks are row-major `d_h x L`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{G2gError, Result};
use crate::matrix::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"G2GEMB1\0";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub label: u32,
    pub base: Matrix,
    pub augmented: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub d_h: usize,
    pub tokens: usize,
    pub split: Split,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingDataset {
    pub fn new(d_h: usize, tokens: usize, split: Split) -> Self {
        EmbeddingDataset {
            d_h,
            tokens,
            split,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, r: EmbeddingRecord) -> Result<()> {
        let want = (self.d_h, self.tokens);
        if r.base.shape() != want || r.augmented.as_ref().is_some_and(|a| a.shape() != want) {
            return Err(G2gError::shape(
                "embedding record",
                format!("record of class {} is not {}x{}", r.label, self.d_h, self.tokens),
            ));
        }
        self.records.push(r);
        Ok(())
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.records.iter().map(|r| r.label).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn has_augmented(&self) -> bool {
        self.records.iter().any(|r| r.augmented.is_some())
    }

    /// Rejects a `d_h` that cannot be cut into `segments` equal parts.
    pub fn check_segments(&self, segments: usize) -> Result<()> {
        if segments == 0 || self.d_h % segments != 0 {
            return Err(G2gError::Config(format!(
                "embedding d_h = {} is not divisible by pipeline.S = {segments}",
                self.d_h
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(EMBEDDING_MAGIC);
        w.u32(EMBEDDING_VERSION);
        w.u32(self.d_h as u32);
        w.u32(self.tokens as u32);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u32(r.label);
            w.u8(r.augmented.is_some() as u8);
            w.f32s(r.base.data());
            if let Some(a) = &r.augmented {
                w.f32s(a.data());
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], split: Split) -> Result<Self> {
        let mut r = Reader::new(bytes, "embedding file");
        r.magic(EMBEDDING_MAGIC)?;
        let version = r.u32("version")?;
        if version != EMBEDDING_VERSION {
            return Err(G2gError::Version {
                what: "embedding file",
                found: version,
                expected: EMBEDDING_VERSION,
            });
        }
        let d_h = r.u32("d_h")? as usize;
        let tokens = r.u32("L")? as usize;
        let count = r.u64("record count")?;
        if d_h == 0 || tokens == 0 {
            return Err(G2gError::Config("embedding file declares a zero dimension".into()));
        }
        let n = d_h * tokens;
        let mut ds = EmbeddingDataset::new(d_h, tokens, split);
        for i in 0..count {
            let label = r.u32("label")?;
            let has_aug = r.u8("has_aug")?;
            if has_aug > 1 {
                return Err(G2gError::Truncated {
                    what: "embedding file",
                    detail: format!("record {i} has has_aug = {has_aug}"),
                });
            }
            let base = Matrix::from_vec(d_h, tokens, r.f32s(n, "base feature")?)?;
            let augmented = match has_aug {
                1 => Some(Matrix::from_vec(d_h, tokens, r.f32s(n, "augmented feature")?)?),
                _ => None,
            };
            ds.records.push(EmbeddingRecord { label, base, augmented });
        }
        r.finish()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, split)
    }
}

/// Loads an embedding file and checks it against the configured segment count.
pub fn load_embeddings(path: &Path, split: Split, segments: usize) -> Result<EmbeddingDataset> {
    let ds = EmbeddingDataset::load(path, split)?;
    ds.check_segments(segments)?;
    Ok(ds)
}

/// Shape of a synthetic dataset pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub d_h: usize,
    pub tokens: usize,
    pub sigma: f64,
    pub aug_sigma: f64,
    pub seed: u64,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Gaussian clouds of width `sigma` around standard-normal class centres in
/// `R^{d_h x L}`. Labels are `0..classes`; every record carries an augmented
/// view `base + N(0, aug_sigma)`. Values are rounded to single precision so
/// a file round trip is exact.
pub fn synth_generate(spec: &SynthSpec) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if !(spec.sigma > 0.0 && spec.sigma.is_finite()) || !(spec.aug_sigma >= 0.0 && spec.aug_sigma.is_finite()) {
        return Err(G2gError::Config(format!(
            "synthetic cluster sigma must be > 0 and aug sigma >= 0, got {} and {}",
            spec.sigma, spec.aug_sigma
        )));
    }
    if spec.d_h == 0 || spec.tokens == 0 {
        return Err(G2gError::Config("synthetic d_h and L must be positive".into()));
    }
    let n = spec.d_h * spec.tokens;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let cloud = Normal::new(0.0, spec.sigma).expect("valid std");
    let aug = Normal::new(0.0, spec.aug_sigma).expect("valid std");
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..n).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let sample = |c: &[f64], rng: &mut ChaCha8Rng| -> Result<EmbeddingRecord> {
        let base: Vec<f64> = c.iter().map(|v| round_f32(v + cloud.sample(rng))).collect();
        let a: Vec<f64> = base.iter().map(|v| round_f32(v + aug.sample(rng))).collect();
        Ok(EmbeddingRecord {
            label: 0,
            base: Matrix::from_vec(spec.d_h, spec.tokens, base)?,
            augmented: Some(Matrix::from_vec(spec.d_h, spec.tokens, a)?),
        })
    };
    let mut train = EmbeddingDataset::new(spec.d_h, spec.tokens, Split::Train);
    let mut test = EmbeddingDataset::new(spec.d_h, spec.tokens, Split::Test);
    for (y, c) in centers.iter().enumerate() {
        for _ in 0..spec.train_per_class {
            train.records.push(EmbeddingRecord { label: y as u32, ..sample(c, &mut rng)? });
        }
        for _ in 0..spec.test_per_class {
            test.records.push(EmbeddingRecord { label: y as u32, ..sample(c, &mut rng)? });
        }
    }
    Ok((train, test))
}
