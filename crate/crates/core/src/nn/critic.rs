//! The conv trunk shared by the classifier C and the discriminator D.
//!
//! ```text
//! image → conv1 layers → [⊕ label map after the first layer] → conv2* layers
//!       → (SIN → Σ over batch [+ noise])   in aggregated modes
//!       → conv3* layers → FC → FC → sigmoid | softmax
//! ```

use super::layers::*;
use super::loss::{sigmoid, softmax};
use super::params::{Grads, ModelParams, ParamGroup};
use super::{Activation, NetConfig, INIT_STD, KERNEL};
use crate::error::{Error, Result};
use crate::mechanisms::{add_gaussian, sin_map, sin_map_backward, FeatureTensor, NoiseSpec};
use crate::noise::NoiseStream;

const CONV1: usize = 0;
const CONV2: usize = 1;
const CONV3: usize = 2;
const FC: usize = 3;
const EMBEDDING: usize = 4;

/// Output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// One sigmoid score (the discriminator).
    Score,
    /// Softmax over the classes (the classifier, or a plain CNN).
    Classes,
}

/// What is concatenated to the first conv layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelChannel {
    /// A learned per-class map (conditional discriminator).
    Embedded,
    /// A constant zero map: the layer shapes match the discriminator's while
    /// labels are ignored.
    Zero,
    /// Nothing.
    None,
}

/// How the batch passes the aggregation point.
pub enum ForwardMode<'a> {
    /// SIN, sum over the batch, then Gaussian noise of std σ·√m·p.
    WithDpAgg { noise: NoiseSpec, stream: &'a mut NoiseStream },
    /// SIN and sum over the batch, no noise.
    WithAgg,
    /// No SIN, no aggregation: one output per sample.
    PerSample,
    /// One output per sample from `scale`·SIN(features), i.e. the plain
    /// aggregate of a batch made of `scale` copies of the sample.
    PerSampleNormalized { scale: f64 },
}

#[derive(Debug, Clone)]
struct ConvMeta {
    group: usize,
    w: usize,
    b: usize,
    in_c: usize,
    out_c: usize,
    in_side: usize,
}

impl ConvMeta {
    fn w_len(&self) -> usize {
        self.out_c * self.in_c * KERNEL * KERNEL
    }
}

#[derive(Debug, Clone)]
struct LinearMeta {
    w: usize,
    b: usize,
    fan_in: usize,
    out: usize,
}

/// Gradient w.r.t. a sample's features of ⟨dy, scale·SIN(features)⟩.
fn sin_backward(feature: &[f64], dy: &[f64], map_len: usize, scale: f64) -> Vec<f64> {
    let mut dx = vec![0.0; feature.len()];
    let scaled: Vec<f64>;
    let dy = if scale == 1.0 {
        dy
    } else {
        scaled = dy.iter().map(|v| v * scale).collect();
        &scaled
    };
    for ((x, dy), d) in feature.chunks(map_len).zip(dy.chunks(map_len)).zip(dx.chunks_mut(map_len)) {
        sin_map_backward(x, dy, d);
    }
    dx
}

/// Splits a group buffer into the weight and bias slices of one layer; the
/// bias always follows the weight.
fn wb_mut(buf: &mut [f64], w: usize, w_len: usize, b: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[w..w + w_len], &mut hi[..b_len])
}

#[derive(Debug, Clone)]
pub struct Critic {
    cfg: NetConfig,
    head: Head,
    label: LabelChannel,
    convs: Vec<ConvMeta>,
    fc1: LinearMeta,
    fc2: LinearMeta,
    /// Offset of the class table inside the embedding group.
    embedding: Option<usize>,
    template: ModelParams,
}

#[derive(Debug, Clone)]
struct PreTape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    feature: Vec<f64>,
    label: usize,
}

#[derive(Debug, Clone)]
struct PostTape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    fc1_in: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc2_in: Vec<f64>,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct CriticTape {
    aggregated: bool,
    /// Per-sample rows were SIN-normalized and scaled by this factor.
    row_sin: Option<f64>,
    pre: Vec<PreTape>,
    post: Vec<PostTape>,
    agg_input: Option<Vec<f64>>,
}

impl CriticTape {
    pub fn is_aggregated(&self) -> bool {
        self.aggregated
    }

    pub fn batch(&self) -> usize {
        self.pre.len()
    }

    /// Input of the post-aggregation network (aggregated modes only).
    pub fn aggregate(&self) -> Option<&[f64]> {
        self.agg_input.as_deref()
    }
}

pub struct CriticForward {
    /// One row per aggregate (aggregated modes) or per sample.
    pub logits: Vec<Vec<f64>>,
    /// Sigmoid score or softmax fractions per row.
    pub outputs: Vec<Vec<f64>>,
    pub tape: CriticTape,
}

impl CriticForward {
    /// First output of every row; the score for a discriminator.
    pub fn scores(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o[0]).collect()
    }
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardRequest<'a> {
    /// Groups whose batch gradient is accumulated.
    pub full: &'a [usize],
    /// Groups whose per-sample gradients are returned, concatenated in order.
    pub per_sample: &'a [usize],
    /// Gradients w.r.t. every input image.
    pub input_grads: bool,
}

pub struct Backward {
    /// Batch gradient; groups not listed in `full` are zero.
    pub grads: Grads,
    pub per_sample: Vec<Vec<f64>>,
    pub input_grads: Vec<Vec<f64>>,
    /// ∂loss/∂(aggregate) in aggregated modes.
    pub aggregate_grad: Option<Vec<f64>>,
}

impl Critic {
    pub fn new(cfg: &NetConfig, head: Head, label: LabelChannel) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.layout;
        let mut groups = vec![
            ParamGroup::new("conv1"),
            ParamGroup::new("conv2"),
            ParamGroup::new("conv3"),
            ParamGroup::new("fc"),
        ];
        let mut convs = Vec::new();
        let mut in_c = cfg.channels;
        for (j, &out_c) in cfg.filters.iter().enumerate() {
            let group = if j < l.conv1 {
                CONV1
            } else if j < l.pre_agg() {
                CONV2
            } else {
                CONV3
            };
            if j == 1 && label != LabelChannel::None {
                in_c += 1;
            }
            let w = groups[group].push(&format!("w{j}"), &[out_c, in_c, KERNEL, KERNEL]);
            let b = groups[group].push(&format!("b{j}"), &[out_c]);
            convs.push(ConvMeta { group, w, b, in_c, out_c, in_side: cfg.side_after(j) });
            in_c = out_c;
        }
        let flat = cfg.filters[l.total() - 1] * cfg.side_after(l.total()).pow(2);
        let out = match head {
            Head::Score => 1,
            Head::Classes => cfg.num_classes,
        };
        let fc1 = LinearMeta {
            w: groups[FC].push("w_fc1", &[cfg.fc_hidden, flat]),
            b: groups[FC].push("b_fc1", &[cfg.fc_hidden]),
            fan_in: flat,
            out: cfg.fc_hidden,
        };
        let fc2 = LinearMeta {
            w: groups[FC].push("w_fc2", &[out, cfg.fc_hidden]),
            b: groups[FC].push("b_fc2", &[out]),
            fan_in: cfg.fc_hidden,
            out,
        };
        let embedding = if label == LabelChannel::Embedded {
            let mut g = ParamGroup::new("embedding");
            let off = g.push("emb", &[cfg.num_classes, cfg.label_map_side().pow(2)]);
            groups.push(g);
            Some(off)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), head, label, convs, fc1, fc2, embedding, template: ModelParams::new(groups) })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn label_channel(&self) -> LabelChannel {
        self.label
    }

    /// Zero-valued parameters with this network's layout.
    pub fn zero_params(&self) -> ModelParams {
        self.template.clone()
    }

    /// Weights ~ N(0, 0.02²), biases zero.
    pub fn init_params(&self, stream: &mut NoiseStream) -> ModelParams {
        let mut p = self.zero_params();
        p.init_gaussian(INIT_STD, stream);
        p
    }

    pub fn conv1_group(&self) -> usize {
        CONV1
    }

    pub fn conv2_group(&self) -> usize {
        CONV2
    }

    pub fn conv3_group(&self) -> usize {
        CONV3
    }

    pub fn fc_group(&self) -> usize {
        FC
    }

    pub fn embedding_group(&self) -> Option<usize> {
        self.embedding.map(|_| EMBEDDING)
    }

    /// Groups in front of the aggregation point.
    pub fn pre_agg_groups(&self) -> Vec<usize> {
        let mut g = vec![CONV1, CONV2];
        g.extend(self.embedding_group());
        g
    }

    /// Groups behind the aggregation point.
    pub fn post_agg_groups(&self) -> Vec<usize> {
        vec![CONV3, FC]
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let ok = params.groups().len() == self.template.groups().len()
            && params
                .groups()
                .iter()
                .zip(self.template.groups())
                .all(|(a, b)| a.name == b.name && a.tensors == b.tensors);
        if ok {
            Ok(())
        } else {
            Err(Error::shape("parameters do not match the network layout"))
        }
    }

    fn act(&self) -> Activation {
        self.cfg.activation
    }

    fn resolve_labels(&self, labels: &[usize], n: usize) -> Result<Vec<usize>> {
        if self.label != LabelChannel::Embedded {
            return Ok(vec![0; n]);
        }
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.cfg.num_classes) {
            return Err(Error::domain(format!("label {bad} out of range for {} classes", self.cfg.num_classes)));
        }
        Ok(labels.to_vec())
    }

    /// Runs the network. `labels` is only read with an embedded label channel.
    pub fn forward(
        &self,
        params: &ModelParams,
        images: &FeatureTensor,
        labels: &[usize],
        mode: ForwardMode<'_>,
    ) -> Result<CriticForward> {
        self.check_params(params)?;
        let c = &self.cfg;
        let n = images.batch();
        if n == 0 {
            return Err(Error::Empty("critic batch".into()));
        }
        if images.shape()[1..] != [c.channels, c.image_side, c.image_side] {
            return Err(Error::shape(format!(
                "images of shape {:?}, network expects (n, {}, {}, {})",
                images.shape(),
                c.channels,
                c.image_side,
                c.image_side
            )));
        }
        let labels = self.resolve_labels(labels, n)?;
        let (aggregated, noise, row_sin) = match mode {
            ForwardMode::PerSample => (false, None, None),
            ForwardMode::PerSampleNormalized { scale } => {
                if !scale.is_finite() || scale <= 0.0 {
                    return Err(Error::domain(format!("normalization scale must be positive, got {scale}")));
                }
                (false, None, Some(scale))
            }
            ForwardMode::WithAgg => (true, None, None),
            ForwardMode::WithDpAgg { noise, stream } => {
                noise.check_aggregate(c.agg_maps(), c.agg_side())?;
                (true, Some((noise, stream)), None)
            }
        };
        let pre: Vec<PreTape> = (0..n).map(|i| self.forward_pre(params, images.sample(i), labels[i])).collect();
        let (rows, agg_input) = if aggregated {
            let mut agg = self.aggregate_features(&pre);
            if let Some((spec, stream)) = noise {
                add_gaussian(&mut agg, spec.std(), stream);
            }
            (vec![agg.clone()], Some(agg))
        } else if let Some(scale) = row_sin {
            let rows = pre
                .iter()
                .map(|t| {
                    let mut row = self.aggregate_features(std::slice::from_ref(t));
                    row.iter_mut().for_each(|v| *v *= scale);
                    row
                })
                .collect();
            (rows, None)
        } else {
            (pre.iter().map(|t| t.feature.clone()).collect(), None)
        };
        let mut logits = Vec::with_capacity(rows.len());
        let mut post = Vec::with_capacity(rows.len());
        for row in rows {
            let (tape, l) = self.forward_post(params, row);
            post.push(tape);
            logits.push(l);
        }
        let outputs = logits
            .iter()
            .map(|l| match self.head {
                Head::Score => vec![sigmoid(l[0])],
                Head::Classes => softmax(l),
            })
            .collect();
        Ok(CriticForward { logits, outputs, tape: CriticTape { aggregated, row_sin, pre, post, agg_input } })
    }

    fn aggregate_features(&self, pre: &[PreTape]) -> Vec<f64> {
        let len = self.cfg.agg_side().pow(2);
        let mut acc = vec![0.0; pre[0].feature.len()];
        let mut buf = vec![0.0; len];
        for t in pre {
            for (src, dst) in t.feature.chunks(len).zip(acc.chunks_mut(len)) {
                sin_map(src, &mut buf);
                for (a, v) in dst.iter_mut().zip(&buf) {
                    *a += v;
                }
            }
        }
        acc
    }

    fn forward_pre(&self, params: &ModelParams, image: &[f64], label: usize) -> PreTape {
        let n_pre = self.cfg.layout.pre_agg();
        let mut x = image.to_vec();
        let mut inputs = Vec::with_capacity(n_pre);
        let mut pres = Vec::with_capacity(n_pre);
        for (j, m) in self.convs[..n_pre].iter().enumerate() {
            if j == 1 {
                let len = self.cfg.label_map_side().pow(2);
                match (self.label, self.embedding) {
                    (LabelChannel::Embedded, Some(off)) => {
                        x.extend_from_slice(&params.values(EMBEDDING)[off + label * len..off + (label + 1) * len])
                    }
                    (LabelChannel::Zero, _) => x.resize(x.len() + len, 0.0),
                    _ => {}
                }
            }
            let w = params.values(m.group);
            let pre = conv_forward(&x, m.in_c, m.in_side, &w[m.w..m.w + m.w_len()], &w[m.b..m.b + m.out_c], m.out_c);
            let next = activate(&pre, self.act());
            inputs.push(std::mem::replace(&mut x, next));
            pres.push(pre);
        }
        PreTape { inputs, pre: pres, feature: x, label }
    }

    fn forward_post(&self, params: &ModelParams, input: Vec<f64>) -> (PostTape, Vec<f64>) {
        let n_pre = self.cfg.layout.pre_agg();
        let mut x = input;
        let mut inputs = Vec::new();
        let mut pres = Vec::new();
        for m in &self.convs[n_pre..] {
            let w = params.values(m.group);
            let pre = conv_forward(&x, m.in_c, m.in_side, &w[m.w..m.w + m.w_len()], &w[m.b..m.b + m.out_c], m.out_c);
            let next = activate(&pre, self.act());
            inputs.push(std::mem::replace(&mut x, next));
            pres.push(pre);
        }
        let w = params.values(FC);
        let (f1, f2) = (&self.fc1, &self.fc2);
        let fc1_pre = linear_forward(&x, &w[f1.w..f1.w + f1.out * f1.fan_in], &w[f1.b..f1.b + f1.out], f1.out);
        let fc2_in = activate(&fc1_pre, self.act());
        let logits = linear_forward(&fc2_in, &w[f2.w..f2.w + f2.out * f2.fan_in], &w[f2.b..f2.b + f2.out], f2.out);
        (PostTape { inputs, pre: pres, fc1_in: x, fc1_pre, fc2_in }, logits)
    }

    /// Back-propagates `dlogits` (one row per output row of the forward pass).
    ///
    /// In aggregated modes a sample's gradient is the part flowing through its
    /// own path into the sum; these add up to the batch gradient. Per-sample
    /// gradients of post-aggregation groups only exist in `PerSample` mode.
    pub fn backward(
        &self,
        params: &ModelParams,
        tape: &CriticTape,
        dlogits: &[Vec<f64>],
        req: BackwardRequest<'_>,
    ) -> Result<Backward> {
        self.check_params(params)?;
        if dlogits.len() != tape.post.len() || dlogits.iter().any(|d| d.len() != self.fc2.out) {
            return Err(Error::shape("logit gradients do not match the forward pass"));
        }
        let n_groups = params.groups().len();
        for &g in req.full.iter().chain(req.per_sample) {
            if g >= n_groups {
                return Err(Error::Config(format!("no parameter group {g}")));
            }
            if params.by_index(g).frozen {
                return Err(Error::Frozen(params.by_index(g).name.clone()));
            }
        }
        let post_groups = self.post_agg_groups();
        let post_per_sample = req.per_sample.iter().any(|g| post_groups.contains(g));
        if tape.aggregated && post_per_sample {
            return Err(Error::Config(
                "per-sample gradients of post-aggregation groups need a PerSample forward pass".into(),
            ));
        }
        let wanted: Vec<bool> = (0..n_groups).map(|g| req.full.contains(&g) || req.per_sample.contains(&g)).collect();
        let pre_needed = req.input_grads || self.pre_agg_groups().iter().any(|&g| wanted[g]);

        let mut grads = Grads::zeros_like(params);
        let mut d_rows = Vec::with_capacity(tape.post.len());
        let mut row_grads = Vec::new();
        for (t, dl) in tape.post.iter().zip(dlogits) {
            if post_per_sample {
                let mut g = Grads::zeros_like(params);
                d_rows.push(self.backward_post(params, t, dl, &mut g, &wanted));
                row_grads.push(g);
            } else {
                d_rows.push(self.backward_post(params, t, dl, &mut grads, &wanted));
            }
        }

        let mut per_sample = Vec::new();
        let mut input_grads = Vec::new();
        if pre_needed || !req.per_sample.is_empty() {
            let map_len = self.cfg.agg_side().pow(2);
            for (i, t) in tape.pre.iter().enumerate() {
                let d_feat = match (tape.aggregated, tape.row_sin) {
                    (true, _) => sin_backward(&t.feature, &d_rows[0], map_len, 1.0),
                    (false, Some(scale)) => sin_backward(&t.feature, &d_rows[i], map_len, scale),
                    (false, None) => d_rows[i].clone(),
                };
                if req.per_sample.is_empty() {
                    if let Some(d) = self.backward_pre(params, t, d_feat, &mut grads, &wanted, req.input_grads) {
                        input_grads.push(d);
                    }
                } else {
                    let mut g = row_grads.get(i).cloned().unwrap_or_else(|| Grads::zeros_like(params));
                    if let Some(d) = self.backward_pre(params, t, d_feat, &mut g, &wanted, req.input_grads) {
                        input_grads.push(d);
                    }
                    per_sample.push(g.flat(req.per_sample));
                    grads.add(&g);
                }
            }
        }
        for (i, g) in grads.groups.iter_mut().enumerate() {
            if !req.full.contains(&i) {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let aggregate_grad = tape.aggregated.then(|| d_rows[0].clone());
        Ok(Backward { grads, per_sample, input_grads, aggregate_grad })
    }

    /// Gradient w.r.t. the row's input; parameter gradients of wanted groups
    /// are accumulated into `g`.
    fn backward_post(&self, params: &ModelParams, t: &PostTape, dl: &[f64], g: &mut Grads, wanted: &[bool]) -> Vec<f64> {
        let act = self.act();
        let w = params.values(FC);
        let (f1, f2) = (&self.fc1, &self.fc2);
        let mut dh = vec![0.0; f2.fan_in];
        let mut dx = vec![0.0; f1.fan_in];
        {
            let gfc = wanted[FC].then(|| wb_mut(&mut g.groups[FC], f2.w, f2.out * f2.fan_in, f2.b, f2.out));
            linear_backward(&t.fc2_in, &w[f2.w..f2.w + f2.out * f2.fan_in], dl, gfc, Some(&mut dh));
        }
        activate_backward(&t.fc1_pre, &mut dh, act);
        {
            let gfc = wanted[FC].then(|| wb_mut(&mut g.groups[FC], f1.w, f1.out * f1.fan_in, f1.b, f1.out));
            linear_backward(&t.fc1_in, &w[f1.w..f1.w + f1.out * f1.fan_in], &dh, gfc, Some(&mut dx));
        }
        let n_pre = self.cfg.layout.pre_agg();
        for (k, m) in self.convs[n_pre..].iter().enumerate().rev() {
            activate_backward(&t.pre[k], &mut dx, act);
            let mut din = vec![0.0; t.inputs[k].len()];
            let w = params.values(m.group);
            let gw = wanted[m.group].then(|| wb_mut(&mut g.groups[m.group], m.w, m.w_len(), m.b, m.out_c));
            conv_backward(&t.inputs[k], m.in_c, m.in_side, &w[m.w..m.w + m.w_len()], m.out_c, &dx, gw, Some(&mut din));
            dx = din;
        }
        dx
    }

    /// Back-propagates one sample's feature gradient to the wanted pre-aggregation
    /// groups and, if asked, to the image.
    fn backward_pre(
        &self,
        params: &ModelParams,
        t: &PreTape,
        d_feat: Vec<f64>,
        g: &mut Grads,
        wanted: &[bool],
        input_grad: bool,
    ) -> Option<Vec<f64>> {
        let act = self.act();
        let n_pre = self.cfg.layout.pre_agg();
        let emb_wanted = self.embedding.is_some() && wanted.get(EMBEDDING).copied().unwrap_or(false);
        // Layer j needs its input gradient if anything below it (or the image,
        // or the label map entering layer 1) wants a gradient.
        let need_in = |j: usize| {
            input_grad || self.convs[..j].iter().any(|m| wanted[m.group]) || (j == 1 && emb_wanted)
        };
        let mut d = d_feat;
        for j in (0..n_pre).rev() {
            let m = &self.convs[j];
            let want_w = wanted[m.group];
            let want_in = need_in(j);
            if !want_w && !want_in {
                return None;
            }
            activate_backward(&t.pre[j], &mut d, act);
            let w = params.values(m.group);
            let mut din = want_in.then(|| vec![0.0; t.inputs[j].len()]);
            let gw = want_w.then(|| wb_mut(&mut g.groups[m.group], m.w, m.w_len(), m.b, m.out_c));
            conv_backward(&t.inputs[j], m.in_c, m.in_side, &w[m.w..m.w + m.w_len()], m.out_c, &d, gw, din.as_deref_mut());
            let mut din = din?;
            if j == 1 && self.label != LabelChannel::None {
                let len = self.cfg.label_map_side().pow(2);
                let label_grad = din.split_off(din.len() - len);
                if let (true, Some(off)) = (emb_wanted, self.embedding) {
                    let row = &mut g.groups[EMBEDDING][off + t.label * len..off + (t.label + 1) * len];
                    for (a, b) in row.iter_mut().zip(&label_grad) {
                        *a += b;
                    }
                }
            }
            d = din;
        }
        input_grad.then_some(d)
    }
}
