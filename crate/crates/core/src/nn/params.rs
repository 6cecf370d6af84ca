use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseStream;

/// Weight initialization; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// N(0, std²) for every weight.
    Fixed(f64),
    /// N(0, gain²/fan_in), fan_in being the inputs feeding one output unit.
    FanIn(f64),
}

impl WeightInit {
    pub fn std(&self, fan_in: usize) -> f64 {
        match *self {
            WeightInit::Fixed(s) => s,
            WeightInit::FanIn(gain) => gain / (fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (WeightInit::Fixed(v) | WeightInit::FanIn(v)) = *self;
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("weight init scale must be positive and finite, got {v}")))
        }
    }
}

/// Weights are laid out [out, in, …] except the generator's transposed
/// convolutions, [in, out, k, k], where stride 2 leaves in·(k/2)² taps per
/// output pixel.
fn fan_in(group: &str, t: &TensorMeta) -> usize {
    match (group, t.shape.as_slice()) {
        ("deconv", [c_in, _, kh, kw]) => c_in * (kh / 2).max(1) * (kw / 2).max(1),
        (_, [_, rest @ ..]) => rest.iter().product(),
        _ => 1,
    }
}

/// Location of one tensor inside its group's flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<f64>,
    pub tensors: Vec<TensorMeta>,
    pub frozen: bool,
}

impl ParamGroup {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), values: Vec::new(), tensors: Vec::new(), frozen: false }
    }

    /// Appends a tensor and returns its offset.
    pub(crate) fn push(&mut self, name: &str, shape: &[usize]) -> usize {
        let offset = self.values.len();
        let meta = TensorMeta { name: name.to_string(), shape: shape.to_vec(), offset };
        self.values.resize(offset + meta.len(), 0.0);
        self.tensors.push(meta);
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Named parameter groups of one network, each with a freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    groups: Vec<ParamGroup>,
}

impl ModelParams {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        Self { groups }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn by_index(&self, i: usize) -> &ParamGroup {
        &self.groups[i]
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.groups[i].values
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let g = self.group_mut(name).ok_or_else(|| Error::Config(format!("no parameter group `{name}`")))?;
        g.frozen = frozen;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    /// Gaussian init of every tensor whose name starts with `w` or `emb`;
    /// biases stay zero.
    pub fn init_gaussian(&mut self, std: f64, stream: &mut NoiseStream) {
        self.init_weights(WeightInit::Fixed(std), std, stream);
    }

    /// Draws weights per `init` and label embeddings from N(0, embedding_std²),
    /// tensor by tensor in layout order; biases stay zero.
    pub fn init_weights(&mut self, init: WeightInit, embedding_std: f64, stream: &mut NoiseStream) {
        for g in &mut self.groups {
            for t in &g.tensors {
                let s = if t.name.starts_with("emb") {
                    embedding_std
                } else if t.name.starts_with('w') {
                    init.std(fan_in(&g.name, t))
                } else {
                    continue;
                };
                for v in &mut g.values[t.range()] {
                    *v = s * stream.gaussian();
                }
            }
        }
    }

    /// θ ← θ − η·g for each listed group; frozen groups are an error.
    pub fn sgd_step(&mut self, grads: &Grads, groups: &[usize], learning_rate: f64) -> Result<()> {
        for &i in groups {
            let g = &mut self.groups[i];
            if g.frozen {
                return Err(Error::Frozen(g.name.clone()));
            }
            for (w, d) in g.values.iter_mut().zip(&grads.groups[i]) {
                *w -= learning_rate * d;
            }
        }
        Ok(())
    }

    /// Adds `-learning_rate * step` to the concatenation of `groups`.
    pub fn apply_flat(&mut self, groups: &[usize], step: &[f64], learning_rate: f64) -> Result<()> {
        let total: usize = groups.iter().map(|&i| self.groups[i].len()).sum();
        if total != step.len() {
            return Err(Error::shape(format!("update of length {} for {total} parameters", step.len())));
        }
        let mut off = 0;
        for &i in groups {
            let g = &mut self.groups[i];
            if g.frozen {
                return Err(Error::Frozen(g.name.clone()));
            }
            let n = g.len();
            for (w, d) in g.values.iter_mut().zip(&step[off..off + n]) {
                *w -= learning_rate * d;
            }
            off += n;
        }
        Ok(())
    }

    /// Concatenated values of `groups`.
    pub fn flat(&self, groups: &[usize]) -> Vec<f64> {
        groups.iter().flat_map(|&i| self.groups[i].values.iter().copied()).collect()
    }
}

/// Gradient buffers mirroring a [`ModelParams`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub groups: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self { groups: params.groups.iter().map(|g| vec![0.0; g.len()]).collect() }
    }

    pub fn flat(&self, groups: &[usize]) -> Vec<f64> {
        groups.iter().flat_map(|&i| self.groups[i].iter().copied()).collect()
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}
