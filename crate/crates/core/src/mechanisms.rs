//! DP primitives: simplified instance normalization (SIN), batch feature
//! aggregation with and without Gaussian noise, per-sample gradient clipping,
//! top-k gradient compression and the DPSGD update.

use serde::{Deserialize, Serialize};

use crate::accountant::agg_sensitivity;
use crate::error::{Error, Result};
use crate::noise::NoiseStream;

/// Variance stabilizer inside the SIN square root. Small enough that a map
/// with variance 1e-3 keeps its norm within 1e-4 relative of √(HW).
pub const SIN_EPS: f64 = 1e-7;

/// Batch of feature maps laid out as (batch, maps, height, width), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    data: Vec<f64>,
    shape: [usize; 4],
}

impl FeatureTensor {
    pub fn new(data: Vec<f64>, shape: [usize; 4]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!("{} values for shape {:?}", data.len(), shape)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("feature tensor holds non-finite values"));
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { data: vec![0.0; shape.iter().product()], shape }
    }

    /// Stacks equally shaped samples of `(maps, h, w)` into a batch.
    pub fn from_samples(samples: &[Vec<f64>], maps: usize, h: usize, w: usize) -> Result<Self> {
        let per = maps * h * w;
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return Err(Error::shape(format!("sample of {} values, expected {per}", s.len())));
            }
            data.extend_from_slice(s);
        }
        Self::new(data, [samples.len(), maps, h, w])
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn maps(&self) -> usize {
        self.shape[1]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn map_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, i: usize, j: usize) -> &[f64] {
        let n = self.map_len();
        let off = i * self.sample_len() + j * n;
        &self.data[off..off + n]
    }

    /// Side p of square maps; errors on non-square maps.
    pub fn square_side(&self) -> Result<usize> {
        if self.shape[2] != self.shape[3] {
            return Err(Error::shape(format!(
                "aggregation needs square maps, got {}x{}",
                self.shape[2], self.shape[3]
            )));
        }
        Ok(self.shape[2])
    }
}

/// Standardizes one map in place of `out`: (x − μ)/√(σ² + ε), population variance.
pub fn sin_map(x: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + SIN_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

/// Gradient of a loss through [`sin_map`]: given the map's input `x` and the
/// loss gradient `dy` w.r.t. its output, accumulates into `dx`.
pub fn sin_map_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + SIN_EPS).sqrt();
    let dy_mean = dy.iter().sum::<f64>() / n;
    let dot = dy.iter().zip(x).map(|(g, v)| g * (v - mean)).sum::<f64>();
    let k = dot / (n * s * s * s);
    for ((d, g), v) in dx.iter_mut().zip(dy).zip(x) {
        *d += (g - dy_mean) / s - (v - mean) * k;
    }
}

/// Simplified instance normalization: every (sample, map) is standardized
/// independently, with no learnable center or scale.
pub fn sin_normalize(t: &FeatureTensor) -> FeatureTensor {
    let mut out = vec![0.0; t.data.len()];
    let n = t.map_len();
    for (src, dst) in t.data.chunks(n).zip(out.chunks_mut(n)) {
        sin_map(src, dst);
    }
    FeatureTensor { data: out, shape: t.shape }
}

/// Sums each sample's concatenated maps over the batch; length m·H·W.
/// Samples are reduced in ascending index order.
pub fn aggregate(t: &FeatureTensor) -> Result<Vec<f64>> {
    if t.batch() == 0 {
        return Err(Error::Empty("aggregate over an empty batch".into()));
    }
    let mut acc = vec![0.0; t.sample_len()];
    for i in 0..t.batch() {
        for (a, v) in acc.iter_mut().zip(t.sample(i)) {
            *a += v;
        }
    }
    Ok(acc)
}

/// Gaussian noise parameters: the standard deviation is `sigma * sensitivity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub sensitivity: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, sensitivity: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(sensitivity > 0.0) {
            return Err(Error::domain(format!(
                "noise needs sigma > 0 and sensitivity > 0, got {sigma}, {sensitivity}"
            )));
        }
        Ok(Self { sigma, sensitivity })
    }

    /// Noise for the SIN aggregate of `maps` square maps of side `side`.
    pub fn for_aggregate(sigma: f64, maps: usize, side: usize) -> Result<Self> {
        Self::new(sigma, agg_sensitivity(maps, side)?)
    }

    pub fn std(&self) -> f64 {
        self.sigma * self.sensitivity
    }

    /// Errors unless the configured sensitivity is √m·p for these maps.
    pub fn check_aggregate(&self, maps: usize, side: usize) -> Result<()> {
        let actual = agg_sensitivity(maps, side)?;
        if (self.sensitivity - actual).abs() > 1e-12 * actual {
            return Err(Error::SensitivityMismatch { expected: self.sensitivity, actual });
        }
        Ok(())
    }
}

/// Aggregate plus N(0, (σ·√m·p)²) noise on every coordinate.
pub fn dp_aggregate(t: &FeatureTensor, noise: &NoiseSpec, stream: &mut NoiseStream) -> Result<Vec<f64>> {
    noise.check_aggregate(t.maps(), t.square_side()?)?;
    let mut acc = aggregate(t)?;
    add_gaussian(&mut acc, noise.std(), stream);
    Ok(acc)
}

pub(crate) fn add_gaussian(v: &mut [f64], std: f64, stream: &mut NoiseStream) {
    for x in v.iter_mut() {
        *x += std * stream.gaussian();
    }
}

/// ℓ₂ clipping threshold; `f64::INFINITY` disables clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub threshold: f64,
}

impl ClipSpec {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::domain(format!("clip threshold must be positive, got {threshold}")));
        }
        Ok(Self { threshold })
    }

    pub fn disabled() -> Self {
        Self { threshold: f64::INFINITY }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// min{1, u/‖v‖}·v
pub fn clip_gradient(v: &[f64], spec: ClipSpec) -> Vec<f64> {
    let mut out = v.to_vec();
    clip_in_place(&mut out, spec);
    out
}

fn clip_in_place(v: &mut [f64], spec: ClipSpec) {
    let norm = l2_norm(v);
    if norm > spec.threshold {
        let scale = spec.threshold / norm;
        for x in v.iter_mut() {
            *x *= scale;
        }
    }
}

/// Number of entries kept by [`top_k_compress`]: ⌈fraction·len⌉.
pub fn top_k_count(len: usize, keep_fraction: f64) -> usize {
    // Tolerate representation error so that e.g. 0.9·10 keeps 9, not 10.
    let raw = keep_fraction * len as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
    k.min(len)
}

/// Zeroes all but the ⌈fraction·len⌉ largest-magnitude entries. Ties go to
/// the lower index.
pub fn top_k_compress(v: &[f64], keep_fraction: f64) -> Result<Vec<f64>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::domain(format!("keep fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let k = top_k_count(v.len(), keep_fraction);
    if k == v.len() {
        return Ok(v.to_vec());
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let order = |a: &usize, b: &usize| v[*b].abs().total_cmp(&v[*a].abs()).then(a.cmp(b));
    let mut out = vec![0.0; v.len()];
    if k > 0 {
        idx.select_nth_unstable_by(k - 1, order);
        for &i in &idx[..k] {
            out[i] = v[i];
        }
    }
    Ok(out)
}

/// Per-sample gradient privatization shared by every DPSGD path:
/// optional top-k, clipping at u, summation in ascending sample order, then
/// `(1/B)·(Σ + σ·u·ξ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip: ClipSpec,
    pub sigma: f64,
    /// Fraction of entries kept per sample; `None` disables compression.
    pub top_k: Option<f64>,
}

impl DpSgdConfig {
    pub fn noise_std(&self) -> f64 {
        if self.sigma == 0.0 {
            0.0
        } else {
            self.sigma * self.clip.threshold
        }
    }
}

/// Sum of compressed and clipped per-sample gradients, without noise.
pub fn clipped_sum(per_sample: &[Vec<f64>], clip: ClipSpec, top_k: Option<f64>) -> Result<Vec<f64>> {
    let dim = per_sample.first().map(Vec::len).ok_or_else(|| Error::Empty("no per-sample gradients".into()))?;
    let mut sum = vec![0.0; dim];
    for g in per_sample {
        if g.len() != dim {
            return Err(Error::shape(format!("per-sample gradient of length {}, expected {dim}", g.len())));
        }
        let mut g = match top_k {
            Some(f) => top_k_compress(g, f)?,
            None => g.clone(),
        };
        clip_in_place(&mut g, clip);
        for (s, x) in sum.iter_mut().zip(&g) {
            *s += x;
        }
    }
    Ok(sum)
}

/// (1/B)·[Σ clip(topk(gᵢ)) + σ·u·ξ]
pub fn noisy_mean_gradient(per_sample: &[Vec<f64>], cfg: &DpSgdConfig, stream: &mut NoiseStream) -> Result<Vec<f64>> {
    if !(cfg.sigma >= 0.0) {
        return Err(Error::domain(format!("sigma must be nonnegative, got {}", cfg.sigma)));
    }
    if cfg.sigma > 0.0 && !cfg.clip.threshold.is_finite() {
        return Err(Error::domain("noise requires a finite clipping threshold"));
    }
    let mut sum = clipped_sum(per_sample, cfg.clip, cfg.top_k)?;
    let std = cfg.noise_std();
    if std > 0.0 {
        add_gaussian(&mut sum, std, stream);
    }
    let inv_b = 1.0 / per_sample.len() as f64;
    for s in sum.iter_mut() {
        *s *= inv_b;
    }
    Ok(sum)
}

/// One DPSGD update: w − η·[(1/B)·Σ clip(gᵢ) + (σ·u/B)·ξ], in place.
pub fn dpsgd_step(
    per_sample: &[Vec<f64>],
    cfg: &DpSgdConfig,
    learning_rate: f64,
    params: &mut [f64],
    stream: &mut NoiseStream,
) -> Result<()> {
    if let Some(g) = per_sample.first() {
        if g.len() != params.len() {
            return Err(Error::shape(format!(
                "{} parameters but gradients of length {}",
                params.len(),
                g.len()
            )));
        }
    }
    let step = noisy_mean_gradient(per_sample, cfg, stream)?;
    for (w, g) in params.iter_mut().zip(&step) {
        *w -= learning_rate * g;
    }
    Ok(())
}
