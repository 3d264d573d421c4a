//! Labeled multi-modal token features and the GAFX file format.
//!
//! A [`FixtureSet`] stands in for the output of frozen image/text encoders:
//! every sample carries `N` image tokens and `N` text tokens of width `E`.
//! Values are float64 in memory and float32 on disk; the synthetic generator
//! rounds every value through f32 so generated sets survive a write/read
//! cycle bit-for-bit.
//!
//! GAFX layout (little-endian):
//!
//! ```text
//! "GAFX" | version u32 = 1 | num_samples u32 | N u32 | E u32 | K u32
//! per sample: label u32 | N*E f32 image tokens | N*E f32 text tokens  (row-major)
//! ```

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor2;

pub const GAFX_MAGIC: [u8; 4] = *b"GAFX";
pub const GAFX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    /// N×E.
    pub image_tokens: Tensor2,
    /// N×E.
    pub text_tokens: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    samples: Vec<Sample>,
    tokens_per_modality: usize,
    embed_dim: usize,
    num_classes: usize,
}

impl FixtureSet {
    pub fn new(
        samples: Vec<Sample>,
        tokens_per_modality: usize,
        embed_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if tokens_per_modality == 0 || embed_dim == 0 {
            return Err(Error::Config(format!(
                "token count ({tokens_per_modality}) and dim ({embed_dim}) must be >= 1"
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let shape = (tokens_per_modality, embed_dim);
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: num_classes,
                });
            }
            if s.image_tokens.shape() != shape || s.text_tokens.shape() != shape {
                return Err(Error::Shape(format!(
                    "sample {i}: image {:?} / text {:?}, expected {shape:?}",
                    s.image_tokens.shape(),
                    s.text_tokens.shape()
                )));
            }
            if !s.image_tokens.is_finite() || !s.text_tokens.is_finite() {
                return Err(Error::NonFinite(format!("sample {i} tokens")));
            }
        }
        Ok(Self {
            samples,
            tokens_per_modality,
            embed_dim,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tokens_per_modality(&self) -> usize {
        self.tokens_per_modality
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }

    /// Subset by index, in the order given.
    pub fn select(&self, indices: &[usize]) -> FixtureSet {
        FixtureSet {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.header_only()
        }
    }

    /// Copy with every text token set to zero: the image-only ablation.
    /// Zero-norm tokens have similarity 0 to everything, so they never join
    /// the graph.
    pub fn without_text(&self) -> FixtureSet {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.text_tokens.data_mut().fill(0.0);
        }
        out
    }

    fn header_only(&self) -> FixtureSet {
        FixtureSet {
            samples: Vec::new(),
            tokens_per_modality: self.tokens_per_modality,
            embed_dim: self.embed_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let as_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} = {v}")))
        };
        let mut w = Writer::new();
        w.bytes(&GAFX_MAGIC);
        w.u32(GAFX_VERSION);
        w.u32(as_u32(self.samples.len(), "num_samples")?);
        w.u32(as_u32(self.tokens_per_modality, "N")?);
        w.u32(as_u32(self.embed_dim, "E")?);
        w.u32(as_u32(self.num_classes, "K")?);
        for s in &self.samples {
            w.u32(s.label as u32);
            for &v in s.image_tokens.data().iter().chain(s.text_tokens.data()) {
                w.f32(v as f32);
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(GAFX_MAGIC)?;
        r.version(GAFX_VERSION)?;
        let num_samples = r.u32()? as usize;
        let n = r.u32()? as usize;
        let e = r.u32()? as usize;
        let k = r.u32()? as usize;
        let per_matrix = binio::checked_product(&[n, e], "tokens x dim")?;
        let per_sample = binio::checked_product(&[per_matrix, 2, 4], "sample payload")?
            .checked_add(4)
            .ok_or_else(|| Error::DimensionOverflow("sample payload".into()))?;
        let payload = binio::checked_product(&[per_sample, num_samples], "total payload")?;
        if r.remaining() < payload {
            return Err(Error::Truncated {
                offset: bytes.len(),
                needed: payload - r.remaining(),
            });
        }
        if n == 0 || e == 0 || k < 2 {
            return Err(Error::Config(format!("header has N={n}, E={e}, K={k}")));
        }

        let mut samples = Vec::with_capacity(num_samples);
        for _ in 0..num_samples {
            let label = r.u32()? as usize;
            let mut read_matrix = || -> Result<Tensor2> {
                let data = (0..per_matrix)
                    .map(|_| r.f32().map(f64::from))
                    .collect::<Result<Vec<_>>>()?;
                Tensor2::from_vec(n, e, data)
            };
            let image_tokens = read_matrix()?;
            let text_tokens = read_matrix()?;
            samples.push(Sample {
                label,
                image_tokens,
                text_tokens,
            });
        }
        r.finish()?;
        FixtureSet::new(samples, n, e, k)
    }
}

pub fn write_fixture(set: &FixtureSet, path: &Path) -> Result<()> {
    binio::write_atomic(path, &set.to_bytes()?)
}

pub fn read_fixture(path: &Path) -> Result<FixtureSet> {
    FixtureSet::from_bytes(&binio::read_file(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub tokens: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub modality_correlation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            num_classes: 4,
            tokens: 8,
            dim: 16,
            class_separation: 3.0,
            noise_sigma: 1.0,
            modality_correlation: 0.5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.tokens == 0 || self.dim == 0 {
            return Err(Error::Config("tokens and dim must be >= 1".into()));
        }
        if self.num_samples < self.num_classes {
            return Err(Error::Config(format!(
                "num_samples ({}) must be >= num_classes ({})",
                self.num_samples, self.num_classes
            )));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config("class_separation must be finite and >= 0".into()));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_correlation) {
            return Err(Error::Config("modality_correlation must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

// Stream identifiers for SplitMix64::derive.
const STREAM_IMAGE_MEANS: u64 = 1;
const STREAM_TEXT_MEANS: u64 = 2;
const STREAM_SAMPLES: u64 = 3;

fn class_means(rng: &mut SplitMix64, classes: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = if norm > 0.0 { scale / norm } else { 0.0 };
            v.iter_mut().for_each(|x| *x *= s);
            v
        })
        .collect()
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Gaussian class clusters in token space.
///
/// Each class `k` gets an image mean `μ_k` and an independent text mean `ν_k`,
/// both of norm `class_separation` in random directions. Labels cycle
/// through the classes (`i % K`). For token `j` of a sample:
///
/// ```text
/// image_j = μ_k + σ·z
/// text_j  = c·image_j + (1 − c)·ν_k + σ·z'
/// ```
///
/// with `c = modality_correlation`, so text tokens track the sample's image
/// tokens the way a caption agrees with its image.
pub fn generate_synthetic(config: &SynthConfig) -> Result<FixtureSet> {
    config.validate()?;
    let (n, e, k) = (config.tokens, config.dim, config.num_classes);
    let mu = class_means(
        &mut SplitMix64::derive(config.seed, STREAM_IMAGE_MEANS),
        k,
        e,
        config.class_separation,
    );
    let nu = class_means(
        &mut SplitMix64::derive(config.seed, STREAM_TEXT_MEANS),
        k,
        e,
        config.class_separation,
    );
    let mut rng = SplitMix64::derive(config.seed, STREAM_SAMPLES);
    let sigma = config.noise_sigma;
    let c = config.modality_correlation;

    let mut samples = Vec::with_capacity(config.num_samples);
    for i in 0..config.num_samples {
        let label = i % k;
        let mut image = Tensor2::zeros(n, e);
        let mut text = Tensor2::zeros(n, e);
        for j in 0..n {
            for d in 0..e {
                let img = mu[label][d] + sigma * rng.gaussian();
                let txt = c * img + (1.0 - c) * nu[label][d] + sigma * rng.gaussian();
                image.set(j, d, round_f32(img));
                text.set(j, d, round_f32(txt));
            }
        }
        samples.push(Sample {
            label,
            image_tokens: image,
            text_tokens: text,
        });
    }
    FixtureSet::new(samples, n, e, k)
}

/// Stratified, seeded train/test split.
///
/// The train size is `round(len · train_fraction)`; it is apportioned across
/// classes by largest remainder so per-class proportions match the fraction
/// as closely as the counts allow. Both halves keep the input order.
pub fn split(
    set: &FixtureSet,
    train_fraction: f64,
    seed: u64,
) -> Result<(FixtureSet, FixtureSet)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let total = set.len();
    let target = (total as f64 * train_fraction).round() as usize;
    if target == 0 || target >= total {
        return Err(Error::Config(format!(
            "fraction {train_fraction} of {total} samples leaves an empty split"
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes()];
    for (i, label) in set.labels().enumerate() {
        by_class[label].push(i);
    }
    let quotas: Vec<f64> = by_class
        .iter()
        .map(|m| m.len() as f64 * train_fraction)
        .collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    // Largest fractional part first; ties go to the lower class index.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut missing = target - take.iter().sum::<usize>();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            missing -= 1;
        }
    }

    let mut train_idx = Vec::with_capacity(target);
    for (class, members) in by_class.iter_mut().enumerate() {
        SplitMix64::derive(seed, class as u64).shuffle(members);
        train_idx.extend_from_slice(&members[..take[class]]);
    }
    train_idx.sort_unstable();
    let mut in_train = vec![false; total];
    train_idx.iter().for_each(|&i| in_train[i] = true);
    let test_idx: Vec<usize> = (0..total).filter(|&i| !in_train[i]).collect();
    Ok((set.select(&train_idx), set.select(&test_idx)))
}
