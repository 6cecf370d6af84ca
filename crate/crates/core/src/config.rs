//! Run configuration, loaded from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::{agg_sensitivity, Allocation, CalibrationTarget, ComponentPlan};
use crate::data::{read_idx, sampling_rate, synth_dataset, LabeledDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::nn::NetConfig;
use crate::trainer::{EvalConfig, Hyper, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Class templates plus uniform pixel noise.
    Synthetic {
        n_train: usize,
        n_test: usize,
        num_classes: usize,
        /// Uniform noise half-width.
        noise: f64,
        /// Seed of the dataset draw, independent of the run seed.
        #[serde(default)]
        data_seed: u64,
        /// Explicit class patterns; derived from `num_classes` and `noise` when absent.
        #[serde(default)]
        patterns: Option<SynthSpec>,
    },
    /// MNIST-style IDX files. Relative paths resolve against the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub allocation: Allocation,
    /// Calibration lands in [(1 − tolerance)·ε, ε].
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Not part of the digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataSource,
    pub net: NetConfig,
    pub schedule: TrainSchedule,
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative IDX paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let DataSource::Idx { train_images, train_labels, test_images, test_labels } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.hyper.validate()?;
        let p = &self.privacy;
        if !(p.epsilon > 0.0) || !p.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", p.epsilon)));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", p.delta)));
        }
        if !(p.tolerance > 0.0 && p.tolerance < 1.0) {
            return Err(Error::Config(format!("tolerance must lie in (0, 1), got {}", p.tolerance)));
        }
        p.allocation.budgets(p.epsilon).map_err(|e| Error::Config(e.to_string()))?;
        if let DataSource::Synthetic { n_train, n_test, num_classes, noise, patterns, .. } = &self.data {
            if *n_train == 0 || *n_test == 0 {
                return Err(Error::Config("synthetic train and test sizes must be positive".into()));
            }
            if *num_classes != self.net.num_classes {
                return Err(Error::Config(format!(
                    "data has {num_classes} classes, network expects {}",
                    self.net.num_classes
                )));
            }
            let spec = patterns.clone().unwrap_or_else(|| SynthSpec::default_for(*num_classes, *noise));
            spec.validate()?;
            if spec.classes.len() != *num_classes || spec.channels != self.net.channels {
                return Err(Error::Config("synthetic patterns disagree with the network's classes or channels".into()));
            }
            self.schedule.validate(*n_train)?;
        }
        self.eval.weight_init.validate()?;
        if let Some(net) = &self.eval.net {
            net.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = RunConfig { out_dir: None, ..self.clone() };
        Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes")).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// (train, test).
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let (train, test) = match &self.data {
            DataSource::Synthetic { n_train, n_test, num_classes, noise, data_seed, patterns } => {
                let spec = patterns.clone().unwrap_or_else(|| SynthSpec::default_for(*num_classes, *noise));
                let all = synth_dataset(&spec, n_train + n_test, self.net.image_side, *data_seed)?;
                let train = all.subset(&(0..*n_train).collect::<Vec<_>>())?;
                let test = all.subset(&(*n_train..n_train + n_test).collect::<Vec<_>>())?;
                (train, test)
            }
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                (read_idx(train_images, train_labels)?, read_idx(test_images, test_labels)?)
            }
        };
        for d in [&train, &test] {
            if d.side() != self.net.image_side || d.channels() != self.net.channels {
                return Err(Error::Config(format!(
                    "dataset images are {}×{}×{}, network expects {}×{}×{}",
                    d.channels(),
                    d.side(),
                    d.side(),
                    self.net.channels,
                    self.net.image_side,
                    self.net.image_side
                )));
            }
            if d.num_classes() > self.net.num_classes {
                return Err(Error::Config("dataset has more classes than the network".into()));
            }
        }
        self.schedule.validate(train.len())?;
        Ok((train, test))
    }

    /// Sensitivities, sampling rates and release counts of the three
    /// components for a training set of `n` samples.
    pub fn calibration_target(&self, n: usize) -> Result<CalibrationTarget> {
        let s = &self.schedule;
        let h = &self.hyper;
        Ok(CalibrationTarget {
            epsilon_total: self.privacy.epsilon,
            delta: self.privacy.delta,
            allocation: self.privacy.allocation,
            conv1: ComponentPlan {
                sensitivity: h.clip_conv1,
                sampling_rate: sampling_rate(s.batch_size, n),
                iterations: s.classifier_updates(n),
            },
            conv2: ComponentPlan {
                sensitivity: h.clip_conv2,
                sampling_rate: sampling_rate(s.mu * s.batch_size, n),
                iterations: s.conv2_updates(n),
            },
            dpagg: ComponentPlan {
                sensitivity: agg_sensitivity(self.net.agg_maps(), self.net.agg_side())?,
                sampling_rate: sampling_rate(s.batch_size, n),
                iterations: s.total_batches(n),
            },
        })
    }
}
