//! The training procedure: DP classifier pre-training, conv1 transfer,
//! asymmetric GAN training, sample generation and downstream evaluation.
//!
//! Random streams (component, epoch, batch) used by the trainer:
//!
//! ```text
//! Init     (0, 0) classifier   (0, 1) discriminator   (0, 2) generator
//! Shuffle  (e, 0) classifier epoch e    (e, 1) GAN epoch e
//! Conv1    (e, b) DPSGD noise, classifier batch b of epoch e
//! DpAgg    (e, b) real aggregate noise, GAN batch b of epoch e
//! FakeAgg  (e, b) fake aggregate noise
//! Conv2    (e, b) DPSGD noise of the conv2* step closing at batch b
//! Latent, Labels  (e, 2b) fakes for the discriminator   (e, 2b+1) for the generator step
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, default_orders, rdp_to_dp, CalibrationReport, MechanismConfig, PrivacySpec};
use crate::config::RunConfig;
use crate::data::{sampling_rate, subsample_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::mechanisms::{add_gaussian, clipped_sum, noisy_mean_gradient, ClipSpec, DpSgdConfig, FeatureTensor, NoiseSpec};
use crate::nn::loss::{bce_with_logit, class_fractions, cross_entropy_with_logits, mse_fraction_with_logits};
use crate::nn::{BackwardRequest, Critic, ForwardMode, Generator, Head, LabelChannel, ModelParams, NetConfig, ParamGroup, WeightInit};
use crate::noise::{Component, NoiseSource, NoiseStream};

/// Batching and update cadence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    /// B: samples per batch.
    pub batch_size: usize,
    /// Batches per epoch; defaults to ⌊N/B⌋.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    /// E: GAN epochs.
    pub epochs: usize,
    /// μ: conv3*/FC* updates per conv2* update.
    #[serde(default = "default_mu")]
    pub mu: usize,
    /// Discriminator updates per generator update.
    #[serde(default = "default_n_critic")]
    pub n_critic: usize,
    /// Classifier pre-training epochs.
    pub classifier_epochs: usize,
}

fn default_mu() -> usize {
    8
}

fn default_n_critic() -> usize {
    1
}

impl TrainSchedule {
    pub fn batches(&self, n: usize) -> usize {
        self.batches_per_epoch.unwrap_or(n / self.batch_size.max(1))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.classifier_epochs == 0 {
            return Err(Error::Config("batch size, epochs and classifier epochs must be positive".into()));
        }
        if self.mu == 0 || self.n_critic == 0 {
            return Err(Error::Config("mu and n_critic must be at least 1".into()));
        }
        let b = self.batches(n);
        if b == 0 || b * self.batch_size > n {
            return Err(Error::Config(format!(
                "{b} batches of {} do not fit in {n} samples",
                self.batch_size
            )));
        }
        if self.mu * self.batch_size > n {
            return Err(Error::Config(format!("mu·B = {} exceeds the {n} samples", self.mu * self.batch_size)));
        }
        Ok(())
    }

    /// Total GAN batches E·𝔹; also the number of conv3*/FC* updates and
    /// noisy aggregate releases.
    pub fn total_batches(&self, n: usize) -> u64 {
        (self.epochs * self.batches(n)) as u64
    }

    /// ⌊E·𝔹/μ⌋.
    pub fn conv2_updates(&self, n: usize) -> u64 {
        self.total_batches(n) / self.mu as u64
    }

    /// ⌊E·𝔹/n_critic⌋.
    pub fn generator_updates(&self, n: usize) -> u64 {
        self.total_batches(n) / self.n_critic as u64
    }

    /// E_c·𝔹.
    pub fn classifier_updates(&self, n: usize) -> u64 {
        (self.classifier_epochs * self.batches(n)) as u64
    }
}

/// Learning rates, clipping and switches that are not privacy budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    #[serde(default = "default_classifier_lr")]
    pub classifier_lr: f64,
    /// Applied to a clipped sum divided by μB, so it is large.
    #[serde(default = "default_conv2_lr")]
    pub conv2_lr: f64,
    /// Applied to gradients of a score computed from a sum over B samples.
    #[serde(default = "default_post_lr")]
    pub post_lr: f64,
    #[serde(default = "default_generator_lr")]
    pub generator_lr: f64,
    /// Weight init of C, D and G.
    #[serde(default = "default_weight_init")]
    pub weight_init: WeightInit,
    /// Init std of the label embeddings of D and G.
    #[serde(default = "default_embedding_init_std")]
    pub embedding_init_std: f64,
    /// u₁.
    #[serde(default = "default_clip_conv1")]
    pub clip_conv1: f64,
    /// u₂.
    #[serde(default = "default_clip_conv2")]
    pub clip_conv2: f64,
    /// Fraction of per-sample gradient entries kept before clipping; 1 keeps all.
    #[serde(default = "default_top_k")]
    pub top_k: f64,
    /// Add noise to the fake aggregate too.
    #[serde(default)]
    pub fake_noise: bool,
    /// What the generator step sees of the discriminator.
    #[serde(default)]
    pub generator_view: GeneratorView,
}

/// How fresh fakes pass the discriminator in the generator step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorView {
    /// Raw pre-aggregation features straight into conv3*.
    Raw,
    /// B·SIN(features): what the aggregate of B copies of the sample would be.
    Replicated,
    /// The fresh fake batch aggregated without noise, as in the
    /// discriminator step.
    #[default]
    Batch,
}

fn default_classifier_lr() -> f64 {
    0.05
}

fn default_conv2_lr() -> f64 {
    30.0
}

fn default_post_lr() -> f64 {
    5e-4
}

fn default_generator_lr() -> f64 {
    0.005
}

fn default_weight_init() -> WeightInit {
    WeightInit::FanIn(1.0)
}

fn default_embedding_init_std() -> f64 {
    3.0
}

fn default_clip_conv1() -> f64 {
    1.0
}

fn default_clip_conv2() -> f64 {
    0.03
}

fn default_top_k() -> f64 {
    0.9
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            classifier_lr: default_classifier_lr(),
            conv2_lr: default_conv2_lr(),
            post_lr: default_post_lr(),
            generator_lr: default_generator_lr(),
            weight_init: default_weight_init(),
            embedding_init_std: default_embedding_init_std(),
            clip_conv1: default_clip_conv1(),
            clip_conv2: default_clip_conv2(),
            top_k: default_top_k(),
            fake_noise: false,
            generator_view: GeneratorView::default(),
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.classifier_lr, self.conv2_lr, self.post_lr, self.generator_lr];
        if lrs.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        self.weight_init.validate()?;
        if !(self.embedding_init_std > 0.0) || !(self.clip_conv1 > 0.0) || !(self.clip_conv2 > 0.0) {
            return Err(Error::Config("embedding_init_std and clipping thresholds must be positive".into()));
        }
        if !(self.top_k > 0.0 && self.top_k <= 1.0) {
            return Err(Error::Config(format!("top_k must lie in (0, 1], got {}", self.top_k)));
        }
        Ok(())
    }

    fn top_k(&self) -> Option<f64> {
        (self.top_k < 1.0).then_some(self.top_k)
    }

    fn dpsgd(&self, clip: f64, sigma: f64) -> Result<DpSgdConfig> {
        Ok(DpSgdConfig { clip: ClipSpec::new(clip)?, sigma, top_k: self.top_k() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Classifier,
    Gan,
}

/// Which parameters one ledger record updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Updated {
    /// Classifier step: DPSGD on conv1, SGD on the rest.
    Classifier,
    /// conv3* and FC* of the discriminator.
    Post,
    /// conv2* (and the label embedding) of the discriminator.
    Conv2,
    Generator,
}

impl fmt::Display for Updated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Updated::Classifier => "classifier",
            Updated::Post => "post",
            Updated::Conv2 => "conv2",
            Updated::Generator => "generator",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub phase: Phase,
    /// 1-based batch index within the phase.
    pub step: u64,
    pub updated: Updated,
    pub loss: f64,
    /// (ε, δ) guarantee of all private releases so far.
    pub epsilon: f64,
    pub streams: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub records: Vec<LedgerRecord>,
}

impl RunLedger {
    pub fn count(&self, updated: Updated) -> u64 {
        self.records.iter().filter(|r| r.updated == updated).count() as u64
    }

    pub fn losses(&self, updated: Updated) -> Vec<f64> {
        self.records.iter().filter(|r| r.updated == updated).map(|r| r.loss).collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("ledger record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Running (ε, δ) of the releases made so far, from per-step RDP curves.
#[derive(Debug, Clone)]
pub struct PrivacyTracker {
    orders: Vec<u32>,
    delta: f64,
    /// Per-step RDP of conv1, conv2*, the aggregate, per order.
    steps: [Vec<f64>; 3],
}

impl PrivacyTracker {
    pub fn new(spec: &PrivacySpec) -> Result<Self> {
        let orders = default_orders();
        let curve = |m: &MechanismConfig| -> Result<Vec<f64>> { orders.iter().map(|&a| m.step_rdp(a)).collect() };
        let steps = [curve(&spec.conv1)?, curve(&spec.conv2)?, curve(&spec.dpagg)?];
        Ok(Self { orders, delta: spec.delta, steps })
    }

    /// ε after `counts` = (T₁, T₂, T₃) releases.
    pub fn epsilon(&self, counts: [u64; 3]) -> f64 {
        if counts == [0; 3] {
            return 0.0;
        }
        self.orders
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                let rdp: f64 = (0..3).map(|c| counts[c] as f64 * self.steps[c][k]).sum();
                rdp_to_dp(a, rdp, self.delta).expect("validated order and delta")
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn init(params: ModelParams, weights: WeightInit, embedding_std: f64, stream: &mut NoiseStream) -> ModelParams {
    let mut p = params;
    p.init_weights(weights, embedding_std, stream);
    p
}

/// Classifier C: the discriminator's trunk with a zero label map and a
/// softmax head predicting the batch's class fractions through plain
/// aggregation.
pub fn classifier_net(net: &NetConfig) -> Result<Critic> {
    Critic::new(net, Head::Classes, LabelChannel::Zero)
}

pub fn discriminator_net(net: &NetConfig) -> Result<Critic> {
    Critic::new(net, Head::Score, LabelChannel::Embedded)
}

/// Pre-trains the classifier: SGD on conv2*/conv3*/FC*, DPSGD (clip u₁,
/// noise σ₁) on conv1 through per-sample paths. Returns the conv1 group only.
pub fn train_classifier(
    data: &LabeledDataset,
    net: &NetConfig,
    schedule: &TrainSchedule,
    hyper: &Hyper,
    sigma1: f64,
    source: &mut NoiseSource,
    ledger: &mut RunLedger,
    tracker: &PrivacyTracker,
) -> Result<ModelParams> {
    schedule.validate(data.len())?;
    let c = classifier_net(net)?;
    let mut params = init(c.zero_params(), hyper.weight_init, hyper.embedding_init_std, &mut source.stream(Component::Init, 0, 0));
    let conv1 = [c.conv1_group()];
    let rest = [c.conv2_group(), c.conv3_group(), c.fc_group()];
    let cfg = hyper.dpsgd(hyper.clip_conv1, sigma1)?;
    let k = data.num_classes();
    let bpe = schedule.batches(data.len());
    let mut step = 0u64;
    for epoch in 0..schedule.classifier_epochs as u64 {
        let batches = subsample_batches(data.len(), schedule.batch_size, bpe, &mut source.stream(Component::Shuffle, epoch, 0))?;
        for (b, idx) in batches.iter().enumerate() {
            step += 1;
            let (x, y) = data.gather(idx);
            let out = c.forward(&params, &x, &[], ForwardMode::WithAgg)?;
            let (loss, dl) = mse_fraction_with_logits(&out.logits[0], &class_fractions(&y, k));
            let req = BackwardRequest { full: &rest, per_sample: &conv1, input_grads: false };
            let back = c.backward(&params, &out.tape, &[dl], req)?;
            let mut noise = source.stream(Component::Conv1, epoch, b as u64);
            let private = noisy_mean_gradient(&back.per_sample, &cfg, &mut noise)?;
            params.sgd_step(&back.grads, &rest, hyper.classifier_lr)?;
            params.apply_flat(&conv1, &private, hyper.classifier_lr)?;
            ledger.records.push(LedgerRecord {
                phase: Phase::Classifier,
                step,
                updated: Updated::Classifier,
                loss,
                epsilon: tracker.epsilon([step, 0, 0]),
                streams: vec![noise.id()],
            });
        }
    }
    let conv1 = params.by_index(c.conv1_group()).clone();
    Ok(ModelParams::new(vec![conv1]))
}

/// Fresh discriminator parameters with the classifier's conv1 copied in and
/// frozen.
pub fn transfer_conv1(classifier: &ModelParams, d: &Critic, hyper: &Hyper, stream: &mut NoiseStream) -> Result<ModelParams> {
    let mut params = init(d.zero_params(), hyper.weight_init, hyper.embedding_init_std, stream);
    let src = classifier
        .group("conv1")
        .ok_or_else(|| Error::Config("classifier parameters have no conv1 group".into()))?;
    let dst = params.group_mut("conv1").expect("discriminator has conv1");
    if src.tensors != dst.tensors {
        return Err(Error::Config("classifier and discriminator conv1 layouts differ".into()));
    }
    dst.values.clone_from(&src.values);
    dst.frozen = true;
    Ok(params)
}

/// Noise multipliers of the GAN phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanNoise {
    /// σ₂ for the conv2* DPSGD step.
    pub sigma2: f64,
    /// σ₃ for the real aggregate.
    pub sigma3: f64,
}

struct CachedBatch {
    indices: Vec<usize>,
    fake: FeatureTensor,
    fake_labels: Vec<usize>,
}

/// Mutable state of a GAN run.
pub struct GanState {
    pub g: Generator,
    pub gp: ModelParams,
    pub d: Critic,
    pub dp: ModelParams,
}

fn fake_batch(
    g: &Generator,
    gp: &ModelParams,
    n: usize,
    k: usize,
    source: &mut NoiseSource,
    epoch: u64,
    batch: u64,
) -> Result<(crate::nn::GenForward, Vec<usize>, [u64; 2])> {
    let mut ls = source.stream(Component::Labels, epoch, batch);
    let labels: Vec<usize> = (0..n).map(|_| ls.uniform_usize(k)).collect();
    let mut zs = source.stream(Component::Latent, epoch, batch);
    let z = g.sample_latent(n, &mut zs);
    Ok((g.forward(gp, &z, &labels)?, labels, [ls.id(), zs.id()]))
}

/// Asymmetric GAN training. Per global batch i (1-based):
/// (a) real and fake aggregates through the noisy aggregation, BCE with
///     targets 1/0, SGD on conv3* and FC*;
/// (b) if μ | i, per-sample conv2* (and label-embedding) gradients over the
///     last μ cached batches through plain aggregation, top-k, clipped at
///     u₂, noised with σ₂·u₂, averaged over μ·B;
/// (c) if n_critic | i, non-saturating generator step through the
///     per-sample discriminator.
#[allow(clippy::too_many_arguments)]
pub fn train_gan(
    data: &LabeledDataset,
    state: &mut GanState,
    schedule: &TrainSchedule,
    hyper: &Hyper,
    noise: GanNoise,
    source: &mut NoiseSource,
    ledger: &mut RunLedger,
    tracker: &PrivacyTracker,
    classifier_releases: u64,
) -> Result<()> {
    schedule.validate(data.len())?;
    hyper.validate()?;
    let GanState { g, gp, d, dp } = state;
    if !dp.by_index(d.conv1_group()).frozen {
        return Err(Error::Config("discriminator conv1 must be frozen before GAN training".into()));
    }
    let net = d.config().clone();
    let b_size = schedule.batch_size;
    let k = data.num_classes();
    let agg_noise = NoiseSpec::for_aggregate(noise.sigma3, net.agg_maps(), net.agg_side())?;
    let post = d.post_agg_groups();
    let mut conv2: Vec<usize> = vec![d.conv2_group()];
    conv2.extend(d.embedding_group());
    let cfg2 = hyper.dpsgd(hyper.clip_conv2, noise.sigma2)?;
    let window = schedule.mu * b_size;
    let all_g = g.groups();
    let bpe = schedule.batches(data.len());
    let mut cache: VecDeque<CachedBatch> = VecDeque::with_capacity(schedule.mu);
    let (mut step, mut t2) = (0u64, 0u64);

    for epoch in 0..schedule.epochs as u64 {
        let batches = subsample_batches(data.len(), b_size, bpe, &mut source.stream(Component::Shuffle, epoch, 1))?;
        for (b, idx) in batches.into_iter().enumerate() {
            let b = b as u64;
            step += 1;

            // (a) post-aggregation update
            let (fake, fake_labels, _) = fake_batch(g, gp, b_size, k, source, epoch, 2 * b)?;
            let fake = fake.images;
            let (x, y) = data.gather(&idx);
            let mut real_noise = source.stream(Component::DpAgg, epoch, b);
            let real = d.forward(dp, &x, &y, ForwardMode::WithDpAgg { noise: agg_noise, stream: &mut real_noise })?;
            let mut streams = vec![real_noise.id()];
            let fake_out = if hyper.fake_noise {
                let mut s = source.stream(Component::FakeAgg, epoch, b);
                streams.push(s.id());
                d.forward(dp, &fake, &fake_labels, ForwardMode::WithDpAgg { noise: agg_noise, stream: &mut s })?
            } else {
                d.forward(dp, &fake, &fake_labels, ForwardMode::WithAgg)?
            };
            let (lr, dr) = bce_with_logit(real.logits[0][0], 1.0);
            let (lf, df) = bce_with_logit(fake_out.logits[0][0], 0.0);
            let req = BackwardRequest { full: &post, ..Default::default() };
            let mut grads = d.backward(dp, &real.tape, &[vec![dr]], req)?.grads;
            grads.add(&d.backward(dp, &fake_out.tape, &[vec![df]], req)?.grads);
            dp.sgd_step(&grads, &post, hyper.post_lr)?;
            ledger.records.push(LedgerRecord {
                phase: Phase::Gan,
                step,
                updated: Updated::Post,
                loss: lr + lf,
                epsilon: tracker.epsilon([classifier_releases, t2, step]),
                streams,
            });
            if cache.len() == schedule.mu {
                cache.pop_front();
            }
            cache.push_back(CachedBatch { indices: idx, fake, fake_labels });

            // (b) conv2* update over the cached window
            if step % schedule.mu as u64 == 0 {
                let mut per_individual: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                let mut fake_grads = Vec::with_capacity(window);
                let mut loss = 0.0;
                let req = BackwardRequest { full: &[], per_sample: &conv2, input_grads: false };
                for cb in &cache {
                    let (x, y) = data.gather(&cb.indices);
                    let out = d.forward(dp, &x, &y, ForwardMode::WithAgg)?;
                    let (l, dl) = bce_with_logit(out.logits[0][0], 1.0);
                    loss += l;
                    let back = d.backward(dp, &out.tape, &[vec![dl]], req)?;
                    // A sample seen twice in the window (possible across an
                    // epoch boundary) is one individual: its paths are summed
                    // before clipping.
                    for (&i, gi) in cb.indices.iter().zip(back.per_sample) {
                        match per_individual.get_mut(&i) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, v)| *a += v),
                            None => {
                                per_individual.insert(i, gi);
                            }
                        }
                    }
                    let out = d.forward(dp, &cb.fake, &cb.fake_labels, ForwardMode::WithAgg)?;
                    let (l, dl) = bce_with_logit(out.logits[0][0], 0.0);
                    loss += l;
                    fake_grads.extend(d.backward(dp, &out.tape, &[vec![dl]], req)?.per_sample);
                }
                let real: Vec<Vec<f64>> = per_individual.into_values().collect();
                let mut noise_stream = source.stream(Component::Conv2, epoch, b);
                let mut update = clipped_sum(&real, cfg2.clip, cfg2.top_k)?;
                let std = cfg2.noise_std();
                if std > 0.0 {
                    add_gaussian(&mut update, std, &mut noise_stream);
                }
                let fake_sum = clipped_sum(&fake_grads, cfg2.clip, cfg2.top_k)?;
                for (u, f) in update.iter_mut().zip(&fake_sum) {
                    *u = (*u + f) / window as f64;
                }
                dp.apply_flat(&conv2, &update, hyper.conv2_lr)?;
                t2 += 1;
                ledger.records.push(LedgerRecord {
                    phase: Phase::Gan,
                    step,
                    updated: Updated::Conv2,
                    loss,
                    epsilon: tracker.epsilon([classifier_releases, t2, step]),
                    streams: vec![noise_stream.id()],
                });
            }

            // (c) generator update
            if step % schedule.n_critic as u64 == 0 {
                let (gen, labels, ids) = fake_batch(g, gp, b_size, k, source, epoch, 2 * b + 1)?;
                let mode = match hyper.generator_view {
                    GeneratorView::Raw => ForwardMode::PerSample,
                    GeneratorView::Replicated => ForwardMode::PerSampleNormalized { scale: b_size as f64 },
                    GeneratorView::Batch => ForwardMode::WithAgg,
                };
                let out = d.forward(dp, &gen.images, &labels, mode)?;
                let rows = out.logits.len() as f64;
                let mut loss = 0.0;
                let mut dl = Vec::with_capacity(out.logits.len());
                for l in &out.logits {
                    let (li, gi) = bce_with_logit(l[0], 1.0);
                    loss += li / rows;
                    dl.push(vec![gi / rows]);
                }
                let back = d.backward(dp, &out.tape, &dl, BackwardRequest { input_grads: true, ..Default::default() })?;
                let grads = g.backward(gp, &gen.tape, &back.input_grads)?;
                gp.sgd_step(&grads, &all_g, hyper.generator_lr)?;
                ledger.records.push(LedgerRecord {
                    phase: Phase::Gan,
                    step,
                    updated: Updated::Generator,
                    loss,
                    epsilon: tracker.epsilon([classifier_releases, t2, step]),
                    streams: ids.to_vec(),
                });
            }
        }
    }
    Ok(())
}

/// `count` samples; labels cycle through the classes unless given.
pub fn generate_samples(
    g: &Generator,
    gp: &ModelParams,
    labels: Option<&[usize]>,
    count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let k = g.config().num_classes;
    let labels: Vec<usize> = match labels {
        Some(l) if !l.is_empty() => (0..count).map(|i| l[i % l.len()]).collect(),
        _ => (0..count).map(|i| i % k).collect(),
    };
    if count == 0 {
        return Err(Error::Empty("no samples requested".into()));
    }
    let mut data = Vec::new();
    for (chunk, ls) in labels.chunks(256).enumerate() {
        let mut zs = NoiseStream::new(seed, Component::Latent, u64::from(u32::MAX), chunk as u64);
        let z = g.sample_latent(ls.len(), &mut zs);
        data.extend(g.forward(gp, &z, ls)?.images.into_data());
    }
    let c = g.config();
    let images = FeatureTensor::new(data, [count, c.channels, c.image_side, c.image_side])?;
    LabeledDataset::new(images, labels, k)
}

/// Downstream evaluation: a plain CNN trained without privacy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Classifier architecture; the run's network when absent.
    #[serde(default)]
    pub net: Option<NetConfig>,
    #[serde(default = "default_eval_epochs")]
    pub epochs: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_init")]
    pub weight_init: WeightInit,
    /// Synthetic samples generated per class for evaluation.
    #[serde(default = "default_eval_per_class")]
    pub samples_per_class: usize,
}

fn default_eval_epochs() -> usize {
    10
}

fn default_eval_batch() -> usize {
    32
}

fn default_eval_lr() -> f64 {
    0.05
}

fn default_eval_per_class() -> usize {
    500
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            net: None,
            epochs: default_eval_epochs(),
            batch_size: default_eval_batch(),
            learning_rate: default_eval_lr(),
            weight_init: default_weight_init(),
            samples_per_class: default_eval_per_class(),
        }
    }
}

/// Trains a fresh CNN on `train` and returns its accuracy on `test`.
pub fn eval_downstream(train: &LabeledDataset, test: &LabeledDataset, net: &NetConfig, cfg: &EvalConfig, seed: u64) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("evaluation needs nonempty train and test sets".into()));
    }
    if train.num_classes() != test.num_classes() || train.side() != test.side() || train.channels() != test.channels() {
        return Err(Error::shape("train and test sets differ in classes or image shape"));
    }
    let net = NetConfig { num_classes: train.num_classes(), ..net.clone() };
    let c = Critic::new(&net, Head::Classes, LabelChannel::None)?;
    let mut params = init(c.zero_params(), cfg.weight_init, 1.0, &mut NoiseStream::new(seed, Component::Eval, 0, 0));
    let groups: Vec<usize> = (0..params.groups().len()).collect();
    let bs = cfg.batch_size.min(train.len()).max(1);
    let bpe = train.len() / bs;
    for epoch in 0..cfg.epochs as u64 {
        let batches = subsample_batches(train.len(), bs, bpe, &mut NoiseStream::new(seed, Component::Eval, epoch + 1, 0))?;
        for idx in batches {
            let (x, y) = train.gather(&idx);
            let out = c.forward(&params, &x, &[], ForwardMode::PerSample)?;
            let dl: Vec<Vec<f64>> = out
                .logits
                .iter()
                .zip(&y)
                .map(|(l, &t)| cross_entropy_with_logits(l, t).1.into_iter().map(|v| v / bs as f64).collect())
                .collect();
            let back = c.backward(&params, &out.tape, &dl, BackwardRequest { full: &groups, ..Default::default() })?;
            params.sgd_step(&back.grads, &groups, cfg.learning_rate)?;
        }
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..test.len()).collect();
    for idx in all.chunks(256) {
        let (x, y) = test.gather(idx);
        let out = c.forward(&params, &x, &[], ForwardMode::PerSample)?;
        for (l, &t) in out.logits.iter().zip(&y) {
            let pred = l.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
            correct += (pred == t) as usize;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Sampling rates (γ₁, γ₂, γ₃) for a dataset of `n` samples.
pub fn sampling_rates(schedule: &TrainSchedule, n: usize) -> [f64; 3] {
    [
        sampling_rate(schedule.batch_size, n),
        sampling_rate(schedule.mu * schedule.batch_size, n),
        sampling_rate(schedule.batch_size, n),
    ]
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: CalibrationReport,
    pub spec: PrivacySpec,
    /// (T₁, T₂, T₃) used by the accountant.
    pub planned: [u64; 3],
    /// Noisy releases actually drawn from the noise source, same order.
    pub released: [u64; 3],
    /// ε recomputed from the released counts.
    pub achieved_epsilon: f64,
    pub ledger: RunLedger,
    pub generator: ModelParams,
    pub discriminator: ModelParams,
    pub conv1_before_gan: ParamGroup,
}

/// Calibrates the budget for `cfg` on a training set of `n` samples.
pub fn calibrate(cfg: &RunConfig, n: usize) -> Result<CalibrationReport> {
    let target = cfg.calibration_target(n)?;
    calibrate_sigma(&target, &default_orders(), cfg.privacy.tolerance)
}

/// Calibration, classifier pre-training, conv1 transfer and GAN training,
/// followed by an audit of the noisy releases against the accountant.
pub fn run_pipeline(cfg: &RunConfig, train: &LabeledDataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let n = train.len();
    let target = cfg.calibration_target(n)?;
    let report = calibrate_sigma(&target, &default_orders(), cfg.privacy.tolerance)?;
    let sigmas = report.sigmas();
    let spec = target.with_sigmas(sigmas);
    let tracker = PrivacyTracker::new(&spec)?;
    let planned = [spec.conv1.iterations, spec.conv2.iterations, spec.dpagg.iterations];

    let mut source = NoiseSource::new(cfg.seed);
    let mut ledger = RunLedger::default();
    let conv1 = train_classifier(train, &cfg.net, &cfg.schedule, &cfg.hyper, sigmas[0], &mut source, &mut ledger, &tracker)?;
    let d = discriminator_net(&cfg.net)?;
    let dp = transfer_conv1(&conv1, &d, &cfg.hyper, &mut source.stream(Component::Init, 0, 1))?;
    let g = Generator::new(&cfg.net)?;
    let gp = init(g.zero_params(), cfg.hyper.weight_init, cfg.hyper.embedding_init_std, &mut source.stream(Component::Init, 0, 2));
    let conv1_before_gan = dp.by_index(d.conv1_group()).clone();
    let mut state = GanState { g, gp, d, dp };
    let noise = GanNoise { sigma2: sigmas[1], sigma3: sigmas[2] };
    train_gan(train, &mut state, &cfg.schedule, &cfg.hyper, noise, &mut source, &mut ledger, &tracker, planned[0])?;

    let released = [Component::Conv1, Component::Conv2, Component::DpAgg].map(|c| source.count(c));
    if released != planned {
        return Err(Error::Config(format!("noisy releases {released:?} differ from the accounted {planned:?}")));
    }
    let achieved_epsilon = tracker.epsilon(released);
    if achieved_epsilon > cfg.privacy.epsilon {
        return Err(Error::BudgetExhausted { achieved: achieved_epsilon, target: cfg.privacy.epsilon });
    }
    Ok(RunOutcome {
        report,
        spec,
        planned,
        released,
        achieved_epsilon,
        ledger,
        generator: state.gp,
        discriminator: state.dp,
        conv1_before_gan,
    })
}

/// Generates `eval.samples_per_class` images per class from a trained
/// generator and scores them on `test`.
pub fn evaluate_generator(cfg: &RunConfig, generator: &ModelParams, test: &LabeledDataset) -> Result<f64> {
    let g = Generator::new(&cfg.net)?;
    let count = cfg.eval.samples_per_class * cfg.net.num_classes;
    let synthetic = generate_samples(&g, generator, None, count, cfg.seed)?;
    let net = cfg.eval.net.as_ref().unwrap_or(&cfg.net);
    eval_downstream(&synthetic, test, net, &cfg.eval, cfg.seed)
}
