//! A small differentiable network engine with exactly the layers the
//! discriminator, classifier and generator need: halving convolutions,
//! doubling transposed convolutions, fully connected layers, label
//! embeddings and an injectable SIN + aggregation point.
//!
//! Forward passes record a tape; backward passes replay it and can return
//! full-batch gradients, per-sample gradients of chosen parameter groups, and
//! gradients w.r.t. the input images.

mod checkpoint;
mod critic;
mod generator;
pub mod layers;
pub mod loss;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use critic::{Backward, BackwardRequest, Critic, CriticForward, CriticTape, ForwardMode, Head, LabelChannel};
pub use generator::{GenForward, GenTape, Generator};
pub use params::{Grads, ModelParams, ParamGroup, TensorMeta, WeightInit};

/// Convolution kernel size; every conv halves and every transposed conv
/// doubles the spatial side (stride 2, padding 1).
pub const KERNEL: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the pre-activation input.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Conv layer counts of conv1 / conv2* / conv3*, written `C2-C1-x`; a
/// missing conv3* is written `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Layout {
    pub conv1: usize,
    pub conv2: usize,
    pub conv3: usize,
}

impl Layout {
    pub fn new(conv1: usize, conv2: usize, conv3: usize) -> Self {
        Self { conv1, conv2, conv3 }
    }

    pub fn total(&self) -> usize {
        self.conv1 + self.conv2 + self.conv3
    }

    /// Number of conv layers in front of the aggregation point.
    pub fn pre_agg(&self) -> usize {
        self.conv1 + self.conv2
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = |n: usize| if n == 0 { "x".to_string() } else { format!("C{n}") };
        write!(f, "{}-{}-{}", part(self.conv1), part(self.conv2), part(self.conv3))
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("layout `{s}` must look like C2-C1-x")));
        }
        let parse = |p: &str| -> Result<usize> {
            match p {
                "x" | "X" | "×" => Ok(0),
                _ => p
                    .strip_prefix('C')
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad layout component `{p}` in `{s}`"))),
            }
        };
        Ok(Layout::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
    }
}

impl TryFrom<String> for Layout {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Layout> for String {
    fn from(l: Layout) -> String {
        l.to_string()
    }
}

/// Architecture shared by the classifier C, the discriminator D and (mirrored)
/// the generator G.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub layout: Layout,
    /// Filters of every conv layer, front to back.
    pub filters: Vec<usize>,
    /// Width of the first FC layer; the second maps to the output.
    pub fc_hidden: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub label_embedding_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub image_side: usize,
    pub channels: usize,
}

fn default_latent_dim() -> usize {
    100
}

fn default_activation() -> Activation {
    Activation::LeakyRelu
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.layout;
        if l.conv1 == 0 || l.conv2 == 0 {
            return Err(Error::Config(format!("layout {l} needs at least one conv1 and one conv2* layer")));
        }
        if self.filters.len() != l.total() {
            return Err(Error::Config(format!(
                "layout {l} has {} conv layers but {} filter counts",
                l.total(),
                self.filters.len()
            )));
        }
        if self.filters.iter().any(|&k| k == 0) {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        let scale = 1usize << l.total();
        if self.image_side == 0 || self.image_side % scale != 0 {
            return Err(Error::Config(format!(
                "image side {} must be a positive multiple of 2^{}",
                self.image_side,
                l.total()
            )));
        }
        if self.channels == 0 || self.fc_hidden == 0 || self.latent_dim == 0 {
            return Err(Error::Config("channels, fc_hidden and latent_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Spatial side after conv layer `j` (1-based); `side_after(0)` is the input side.
    pub fn side_after(&self, j: usize) -> usize {
        self.image_side >> j
    }

    /// Number of maps m entering the aggregation.
    pub fn agg_maps(&self) -> usize {
        self.filters[self.layout.pre_agg() - 1]
    }

    /// Side p of the maps entering the aggregation.
    pub fn agg_side(&self) -> usize {
        self.side_after(self.layout.pre_agg())
    }

    /// Side of the per-class label map concatenated after the first conv layer.
    pub fn label_map_side(&self) -> usize {
        self.side_after(1)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}
