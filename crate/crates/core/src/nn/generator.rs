//! The generator: the discriminator's trunk run backwards.
//!
//! ```text
//! [z ⊕ emb(label)] → FC → FC → (k_L, ρ/2^L, ρ/2^L) → transposed convs → tanh
//! ```

use super::layers::*;
use super::params::{Grads, ModelParams, ParamGroup};
use super::{Activation, NetConfig, INIT_STD, KERNEL};
use crate::error::{Error, Result};
use crate::mechanisms::FeatureTensor;
use crate::noise::NoiseStream;

const EMBEDDING: usize = 0;
const FC: usize = 1;
const DECONV: usize = 2;

#[derive(Debug, Clone)]
struct DeconvMeta {
    w: usize,
    b: usize,
    in_c: usize,
    out_c: usize,
    in_side: usize,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: NetConfig,
    deconvs: Vec<DeconvMeta>,
    fc1: (usize, usize),
    fc2: (usize, usize),
    hidden: usize,
    base: usize,
    template: ModelParams,
}

#[derive(Debug, Clone)]
struct SampleTape {
    input: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc2_in: Vec<f64>,
    fc2_pre: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    label: usize,
}

#[derive(Debug, Clone)]
pub struct GenTape {
    samples: Vec<SampleTape>,
}

pub struct GenForward {
    pub images: FeatureTensor,
    pub tape: GenTape,
}

impl Generator {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let total = cfg.layout.total();
        let mut emb = ParamGroup::new("embedding");
        emb.push("emb", &[cfg.num_classes, cfg.label_embedding_dim]);
        let mut fc = ParamGroup::new("fc");
        let input = cfg.latent_dim + cfg.label_embedding_dim;
        let hidden = cfg.fc_hidden;
        let base = cfg.filters[total - 1] * cfg.side_after(total).pow(2);
        let fc1 = (fc.push("w_fc1", &[hidden, input]), fc.push("b_fc1", &[hidden]));
        let fc2 = (fc.push("w_fc2", &[base, hidden]), fc.push("b_fc2", &[base]));
        let mut dc = ParamGroup::new("deconv");
        let mut deconvs = Vec::new();
        for j in (0..total).rev() {
            let in_c = cfg.filters[j];
            let out_c = if j == 0 { cfg.channels } else { cfg.filters[j - 1] };
            let w = dc.push(&format!("w{j}"), &[in_c, out_c, KERNEL, KERNEL]);
            let b = dc.push(&format!("b{j}"), &[out_c]);
            deconvs.push(DeconvMeta { w, b, in_c, out_c, in_side: cfg.side_after(j + 1) });
        }
        Ok(Self {
            cfg: cfg.clone(),
            deconvs,
            fc1,
            fc2,
            hidden,
            base,
            template: ModelParams::new(vec![emb, fc, dc]),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn zero_params(&self) -> ModelParams {
        self.template.clone()
    }

    /// Weights and the label table ~ N(0, 0.02²), biases zero.
    pub fn init_params(&self, stream: &mut NoiseStream) -> ModelParams {
        let mut p = self.zero_params();
        p.init_gaussian(INIT_STD, stream);
        p
    }

    /// Indices of every parameter group.
    pub fn groups(&self) -> Vec<usize> {
        vec![EMBEDDING, FC, DECONV]
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
            Err(Error::shape("parameters do not match the generator layout"))
        }
    }

    fn act(&self) -> Activation {
        self.cfg.activation
    }

    /// Draws `labels.len()` latent vectors from `stream`.
    pub fn sample_latent(&self, n: usize, stream: &mut NoiseStream) -> Vec<Vec<f64>> {
        (0..n).map(|_| stream.gaussian_vec(self.cfg.latent_dim, 1.0)).collect()
    }

    pub fn forward(&self, params: &ModelParams, z: &[Vec<f64>], labels: &[usize]) -> Result<GenForward> {
        self.check_params(params)?;
        let c = &self.cfg;
        if z.len() != labels.len() {
            return Err(Error::shape(format!("{} latent vectors for {} labels", z.len(), labels.len())));
        }
        if z.is_empty() {
            return Err(Error::Empty("generator batch".into()));
        }
        if let Some(bad) = z.iter().find(|v| v.len() != c.latent_dim) {
            return Err(Error::shape(format!("latent dimension {} (expected {})", bad.len(), c.latent_dim)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c.num_classes) {
            return Err(Error::domain(format!("label {bad} out of range for {} classes", c.num_classes)));
        }
        let act = self.act();
        let emb = params.values(EMBEDDING);
        let fcw = params.values(FC);
        let dw = params.values(DECONV);
        let e = c.label_embedding_dim;
        let mut data = Vec::with_capacity(z.len() * c.channels * c.image_side * c.image_side);
        let mut samples = Vec::with_capacity(z.len());
        for (zi, &label) in z.iter().zip(labels) {
            let mut input = zi.clone();
            input.extend_from_slice(&emb[label * e..(label + 1) * e]);
            let n_in = input.len();
            let fc1_pre = linear_forward(&input, &fcw[self.fc1.0..self.fc1.0 + self.hidden * n_in], &fcw[self.fc1.1..], self.hidden);
            let fc2_in = activate(&fc1_pre, act);
            let fc2_pre =
                linear_forward(&fc2_in, &fcw[self.fc2.0..self.fc2.0 + self.base * self.hidden], &fcw[self.fc2.1..], self.base);
            let mut x = activate(&fc2_pre, act);
            let mut inputs = Vec::with_capacity(self.deconvs.len());
            let mut pres = Vec::with_capacity(self.deconvs.len());
            for (k, m) in self.deconvs.iter().enumerate() {
                let wl = m.in_c * m.out_c * KERNEL * KERNEL;
                let pre = deconv_forward(&x, m.in_c, m.in_side, &dw[m.w..m.w + wl], &dw[m.b..m.b + m.out_c], m.out_c);
                let last = k + 1 == self.deconvs.len();
                let next = if last { activate(&pre, Activation::Tanh) } else { activate(&pre, act) };
                inputs.push(std::mem::replace(&mut x, next));
                pres.push(pre);
            }
            data.extend_from_slice(&x);
            samples.push(SampleTape { input, fc1_pre, fc2_in, fc2_pre, inputs, pre: pres, label });
        }
        let images = FeatureTensor::new(data, [z.len(), c.channels, c.image_side, c.image_side])?;
        Ok(GenForward { images, tape: GenTape { samples } })
    }

    /// Batch gradient of every group given ∂loss/∂image for each sample.
    pub fn backward(&self, params: &ModelParams, tape: &GenTape, d_images: &[Vec<f64>]) -> Result<Grads> {
        self.check_params(params)?;
        let img_len = self.cfg.channels * self.cfg.image_side * self.cfg.image_side;
        if d_images.len() != tape.samples.len() || d_images.iter().any(|d| d.len() != img_len) {
            return Err(Error::shape("image gradients do not match the forward pass"));
        }
        if let Some(g) = params.groups().iter().find(|g| g.frozen) {
            return Err(Error::Frozen(g.name.clone()));
        }
        let act = self.act();
        let fcw = params.values(FC);
        let dw = params.values(DECONV);
        let e = self.cfg.label_embedding_dim;
        let mut grads = Grads::zeros_like(params);
        for (t, d) in tape.samples.iter().zip(d_images) {
            let mut d = d.clone();
            for (k, m) in self.deconvs.iter().enumerate().rev() {
                let last = k + 1 == self.deconvs.len();
                activate_backward(&t.pre[k], &mut d, if last { Activation::Tanh } else { act });
                let wl = m.in_c * m.out_c * KERNEL * KERNEL;
                let mut din = vec![0.0; t.inputs[k].len()];
                let (lo, hi) = grads.groups[DECONV].split_at_mut(m.b);
                let gw = (&mut lo[m.w..m.w + wl], &mut hi[..m.out_c]);
                deconv_backward(&t.inputs[k], m.in_c, m.in_side, &dw[m.w..m.w + wl], m.out_c, &d, Some(gw), Some(&mut din));
                d = din;
            }
            activate_backward(&t.fc2_pre, &mut d, act);
            let n_in = t.input.len();
            let mut dh = vec![0.0; self.hidden];
            {
                let (lo, hi) = grads.groups[FC].split_at_mut(self.fc2.1);
                let gw = (&mut lo[self.fc2.0..self.fc2.0 + self.base * self.hidden], &mut hi[..self.base]);
                linear_backward(&t.fc2_in, &fcw[self.fc2.0..self.fc2.0 + self.base * self.hidden], &d, Some(gw), Some(&mut dh));
            }
            activate_backward(&t.fc1_pre, &mut dh, act);
            let mut din = vec![0.0; n_in];
            {
                let (lo, hi) = grads.groups[FC].split_at_mut(self.fc1.1);
                let gw = (&mut lo[self.fc1.0..self.fc1.0 + self.hidden * n_in], &mut hi[..self.hidden]);
                linear_backward(&t.input, &fcw[self.fc1.0..self.fc1.0 + self.hidden * n_in], &dh, Some(gw), Some(&mut din));
            }
            let row = &mut grads.groups[EMBEDDING][t.label * e..(t.label + 1) * e];
            for (a, b) in row.iter_mut().zip(&din[self.cfg.latent_dim..]) {
                *a += b;
            }
        }
        Ok(grads)
    }
}
