//! Datasets: a parametric synthetic generator, IDX files, and epoch batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::FeatureTensor;
use crate::noise::{Component, NoiseStream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in [−1, 1] with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: FeatureTensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: FeatureTensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.batch() == 0 {
            return Err(Error::Empty("dataset has no samples".into()));
        }
        if images.batch() != labels.len() {
            return Err(Error::shape(format!("{} images but {} labels", images.batch(), labels.len())));
        }
        if num_classes < 2 {
            return Err(Error::domain("a dataset needs at least two classes"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!("label {l} out of range for {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::domain("pixel values must lie in [-1, 1]"));
        }
        let s = images.shape();
        if s[2] != s[3] {
            return Err(Error::shape(format!("images must be square, got {}x{}", s[2], s[3])));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn images(&self) -> &FeatureTensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.sample(i)
    }

    /// The samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (FeatureTensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.images.sample_len());
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let mut shape = self.images.shape();
        shape[0] = indices.len();
        let images = FeatureTensor::new(data, shape).expect("gathered pixels are finite");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.gather(indices);
        Self::new(images, labels, self.num_classes)
    }

    /// Count of each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// One class of the synthetic generator: a Gaussian blob plus horizontal
/// stripes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPattern {
    /// Blob centre as fractions of the image side, (x, y).
    pub blob: [f64; 2],
    /// Stripe cycles across the image height; 0 disables stripes.
    pub stripe_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// One pattern per class.
    pub classes: Vec<ClassPattern>,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
    /// Blob standard deviation as a fraction of the side.
    #[serde(default = "default_blob_width")]
    pub blob_width: f64,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_blob_width() -> f64 {
    0.15
}

fn default_channels() -> usize {
    1
}

impl SynthSpec {
    /// `k` classes with blobs spread on a circle and distinct stripe
    /// frequencies.
    pub fn default_for(k: usize, noise: f64) -> Self {
        let classes = (0..k)
            .map(|c| {
                let a = std::f64::consts::TAU * c as f64 / k as f64;
                ClassPattern { blob: [0.5 + 0.25 * a.cos(), 0.5 + 0.25 * a.sin()], stripe_frequency: (c + 1) as f64 }
            })
            .collect();
        Self { classes, noise, blob_width: default_blob_width(), channels: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("synthetic data needs at least two classes".into()));
        }
        if !(self.noise >= 0.0) || !(self.blob_width > 0.0) || self.channels == 0 {
            return Err(Error::Config("synthetic noise must be ≥ 0, blob width > 0, channels ≥ 1".into()));
        }
        Ok(())
    }

    /// The noiseless image of class `k`.
    pub fn template(&self, k: usize, side: usize) -> Vec<f64> {
        let p = &self.classes[k];
        let s = side as f64;
        let w = self.blob_width * s;
        let mut plane = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let dx = fx - p.blob[0] * s;
                let dy = fy - p.blob[1] * s;
                let blob = (-(dx * dx + dy * dy) / (2.0 * w * w)).exp();
                let stripe = (std::f64::consts::TAU * p.stripe_frequency * fy / s).sin();
                plane.push((-0.6 + 1.4 * blob + 0.2 * stripe).clamp(-1.0, 1.0));
            }
        }
        plane.repeat(self.channels)
    }

    /// Noise levels strictly below this keep every sample closer to its own
    /// template than to any other, so nearest-template classification is
    /// exact: ‖noise‖₂ ≤ level·√(c·ρ²) < d_min/2, and clamping to [−1, 1]
    /// never moves a sample further from its template.
    pub fn separability_threshold(&self, side: usize) -> f64 {
        let t: Vec<Vec<f64>> = (0..self.classes.len()).map(|k| self.template(k, side)).collect();
        let mut d_min = f64::INFINITY;
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                let d = t[i].iter().zip(&t[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                d_min = d_min.min(d);
            }
        }
        d_min / (2.0 * ((self.channels * side * side) as f64).sqrt())
    }
}

/// `n` images, labels assigned round-robin, each pixel perturbed by
/// U(−noise, noise) and clamped to [−1, 1].
pub fn synth_dataset(spec: &SynthSpec, n: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 || side == 0 {
        return Err(Error::Empty("synthetic dataset of size zero".into()));
    }
    let k = spec.classes.len();
    let templates: Vec<Vec<f64>> = (0..k).map(|c| spec.template(c, side)).collect();
    let mut stream = NoiseStream::new(seed, Component::Data, 0, 0);
    let mut data = Vec::with_capacity(n * templates[0].len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        for &v in &templates[label] {
            let u = 2.0 * stream.uniform() - 1.0;
            data.push((v + spec.noise * u).clamp(-1.0, 1.0));
        }
        labels.push(label);
    }
    let images = FeatureTensor::new(data, [n, spec.channels, side, side])?;
    LabeledDataset::new(images, labels, k)
}

/// Assigns each image to the class whose template is nearest in ℓ₂.
pub fn nearest_template(spec: &SynthSpec, side: usize, image: &[f64]) -> usize {
    (0..spec.classes.len())
        .map(|k| {
            let t = spec.template(k, side);
            (k, t.iter().zip(image).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .expect("at least two classes")
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::IdxTruncated { expected: at + 4, found: bytes.len() })
}

pub fn pixel_to_unit(p: u8) -> f64 {
    2.0 * p as f64 / 255.0 - 1.0
}

pub fn unit_to_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Parses IDX image and label payloads; the class count is the largest label
/// plus one (at least two).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::IdxCountMismatch { images: n, labels: n_labels });
    }
    if rows != cols {
        return Err(Error::shape(format!("idx images must be square, got {rows}x{cols}")));
    }
    let want = 16 + n * rows * cols;
    if images.len() != want {
        return Err(Error::IdxTruncated { expected: want, found: images.len() });
    }
    if labels.len() != 8 + n {
        return Err(Error::IdxTruncated { expected: 8 + n, found: labels.len() });
    }
    let data = images[16..].iter().map(|&p| pixel_to_unit(p)).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&l| l as usize).collect();
    let k = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(FeatureTensor::new(data, [n, 1, rows, cols])?, labels, k)
}

pub fn read_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?)
}

/// IDX payloads of a single-channel dataset.
pub fn encode_idx(data: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if data.channels() != 1 {
        return Err(Error::shape("idx holds single-channel images only"));
    }
    if data.num_classes() > 256 {
        return Err(Error::domain("idx labels are single bytes"));
    }
    let n = data.len() as u32;
    let side = data.side() as u32;
    let mut img = Vec::with_capacity(16 + data.images().data().len());
    for v in [IDX_IMAGES_MAGIC, n, side, side] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.images().data().iter().map(|&v| unit_to_pixel(v)));
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(data.labels().iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn write_idx(data: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    let (img, lab) = encode_idx(data)?;
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}

/// `batches` disjoint batches of `batch_size` indices drawn from a fresh
/// permutation of `0..n`.
pub fn subsample_batches(n: usize, batch_size: usize, batches: usize, stream: &mut NoiseStream) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batches == 0 {
        return Err(Error::Config("batch size and batches per epoch must be positive".into()));
    }
    if batch_size * batches > n {
        return Err(Error::Config(format!("{batches} batches of {batch_size} exceed the {n} samples")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(stream.rng());
    Ok(perm.chunks(batch_size).take(batches).map(<[usize]>::to_vec).collect())
}

/// Subsampling rate of one step: batch size over dataset size.
pub fn sampling_rate(batch_size: usize, n: usize) -> f64 {
    batch_size as f64 / n as f64
}

/// The dataset with sample `index` removed.
pub fn make_neighbor(data: &LabeledDataset, index: usize) -> Result<LabeledDataset> {
    if index >= data.len() {
        return Err(Error::domain(format!("index {index} out of range for {} samples", data.len())));
    }
    if data.len() == 1 {
        return Err(Error::Empty("removing the only sample leaves an empty dataset".into()));
    }
    let keep: Vec<usize> = (0..data.len()).filter(|&i| i != index).collect();
    data.subset(&keep)
}
