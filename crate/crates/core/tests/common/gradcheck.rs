//! Analytic gradients against central finite differences.

use dpaf_core::mechanisms::{FeatureTensor, NoiseSpec};
use dpaf_core::nn::loss::{bce_with_logit, class_fractions, cross_entropy_with_logits, mse_fraction_with_logits};
use dpaf_core::nn::{
    Activation, BackwardRequest, Critic, ForwardMode, Generator, Grads, Head, LabelChannel, Layout, ModelParams,
    NetConfig,
};
use dpaf_core::noise::{Component, NoiseStream};

const H: f64 = 1e-4;
const REL: f64 = 1e-4;
/// Components below this magnitude are compared absolutely; central
/// differences cannot resolve them relatively.
const FLOOR: f64 = 1e-8;

pub fn config(activation: Activation) -> NetConfig {
    NetConfig {
        layout: Layout::new(1, 1, 1),
        filters: vec![3, 4, 2],
        fc_hidden: 5,
        latent_dim: 4,
        label_embedding_dim: 3,
        num_classes: 3,
        activation,
        image_side: 8,
        channels: 1,
    }
}

fn deep_config() -> NetConfig {
    NetConfig { layout: Layout::new(2, 1, 0), filters: vec![2, 3, 4], image_side: 16, ..config(Activation::LeakyRelu) }
}

pub fn images(n: usize, side: usize, seed: u64) -> FeatureTensor {
    let mut s = NoiseStream::new(seed, Component::Data, 0, 0);
    FeatureTensor::new(s.gaussian_vec(n * side * side, 0.8), [n, 1, side, side]).unwrap()
}

pub fn random_params(mut p: ModelParams, std: f64, seed: u64) -> ModelParams {
    let mut s = NoiseStream::new(seed, Component::Init, 0, 0);
    p.init_gaussian(std, &mut s);
    // nonzero biases so every bias gradient path is exercised
    for g in 0..p.groups().len() {
        let name = p.by_index(g).name.clone();
        let group = p.group_mut(&name).unwrap();
        for t in group.tensors.clone() {
            if t.name.starts_with('b') {
                for v in &mut group.values[t.range()] {
                    *v = 0.1 * s.gaussian();
                }
            }
        }
    }
    assert!(p.num_params() <= 5000, "{} parameters", p.num_params());
    p
}

fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < FLOOR {
        (analytic - numeric).abs() < FLOOR
    } else {
        (analytic - numeric).abs() <= REL * scale
    }
}

/// Checks every coordinate of `groups` against central differences of `loss`.
fn check_params(label: &str, params: &ModelParams, groups: &[usize], grads: &Grads, loss: impl Fn(&ModelParams) -> f64) {
    let mut checked = 0;
    for &g in groups {
        let name = params.by_index(g).name.clone();
        for k in 0..params.by_index(g).len() {
            let mut up = params.clone();
            up.group_mut(&name).unwrap().values[k] += H;
            let mut dn = params.clone();
            dn.group_mut(&name).unwrap().values[k] -= H;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * H);
            let a = grads.groups[g][k];
            assert!(close(a, fd), "{label}: group {name}[{k}] analytic {a} vs numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

fn check_inputs(label: &str, x: &FeatureTensor, grads: &[Vec<f64>], loss: impl Fn(&FeatureTensor) -> f64) {
    let len = x.sample_len();
    for i in 0..x.batch() {
        for k in 0..len {
            let mut up = x.data().to_vec();
            up[i * len + k] += H;
            let mut dn = x.data().to_vec();
            dn[i * len + k] -= H;
            let up = FeatureTensor::new(up, x.shape()).unwrap();
            let dn = FeatureTensor::new(dn, x.shape()).unwrap();
            let fd = (loss(&up) - loss(&dn)) / (2.0 * H);
            assert!(close(grads[i][k], fd), "{label}: input {i}[{k}] analytic {} vs numeric {fd}", grads[i][k]);
        }
    }
}

pub fn all_groups(p: &ModelParams) -> Vec<usize> {
    (0..p.groups().len()).collect()
}

pub fn discriminator_through_sin_and_aggregation() {
    for (cfg, seed) in [(config(Activation::LeakyRelu), 1), (config(Activation::Tanh), 2), (deep_config(), 3)] {
        let d = Critic::new(&cfg, Head::Score, LabelChannel::Embedded).unwrap();
        let p = random_params(d.zero_params(), 0.4, seed);
        let x = images(3, cfg.image_side, seed + 10);
        let labels = [2, 0, 1];
        for target in [0.0, 1.0] {
            let loss = |p: &ModelParams, x: &FeatureTensor| {
                let out = d.forward(p, x, &labels, ForwardMode::WithAgg).unwrap();
                bce_with_logit(out.logits[0][0], target).0
            };
            let out = d.forward(&p, &x, &labels, ForwardMode::WithAgg).unwrap();
            let dl = vec![vec![bce_with_logit(out.logits[0][0], target).1]];
            let groups = all_groups(&p);
            let req = BackwardRequest { full: &groups, per_sample: &[], input_grads: true };
            let back = d.backward(&p, &out.tape, &dl, req).unwrap();
            check_params("agg", &p, &groups, &back.grads, |q| loss(q, &x));
            check_inputs("agg", &x, &back.input_grads, |y| loss(&p, y));
        }
    }
}

pub fn discriminator_through_noisy_aggregation() {
    let cfg = config(Activation::LeakyRelu);
    let d = Critic::new(&cfg, Head::Score, LabelChannel::Embedded).unwrap();
    let p = random_params(d.zero_params(), 0.4, 4);
    let x = images(4, 8, 5);
    let labels = [0, 1, 2, 1];
    let spec = NoiseSpec::for_aggregate(0.7, cfg.agg_maps(), cfg.agg_side()).unwrap();
    let run = |p: &ModelParams| {
        let mut s = NoiseStream::new(77, Component::DpAgg, 0, 0);
        d.forward(p, &x, &labels, ForwardMode::WithDpAgg { noise: spec, stream: &mut s }).unwrap()
    };
    let out = run(&p);
    let dl = vec![vec![bce_with_logit(out.logits[0][0], 1.0).1]];
    let groups = all_groups(&p);
    let back = d.backward(&p, &out.tape, &dl, BackwardRequest { full: &groups, ..Default::default() }).unwrap();
    check_params("dpagg", &p, &groups, &back.grads, |q| bce_with_logit(run(q).logits[0][0], 1.0).0);
}

pub fn discriminator_per_sample_mode() {
    let cfg = config(Activation::LeakyRelu);
    let d = Critic::new(&cfg, Head::Score, LabelChannel::Embedded).unwrap();
    let p = random_params(d.zero_params(), 0.4, 6);
    let x = images(3, 8, 7);
    let labels = [1, 1, 0];
    let targets = [1.0, 0.0, 1.0];
    let loss = |p: &ModelParams, x: &FeatureTensor| {
        let out = d.forward(p, x, &labels, ForwardMode::PerSample).unwrap();
        out.logits.iter().zip(targets).map(|(l, t)| bce_with_logit(l[0], t).0).sum::<f64>()
    };
    let out = d.forward(&p, &x, &labels, ForwardMode::PerSample).unwrap();
    let dl: Vec<Vec<f64>> = out.logits.iter().zip(targets).map(|(l, t)| vec![bce_with_logit(l[0], t).1]).collect();
    let groups = all_groups(&p);
    let back = d.backward(&p, &out.tape, &dl, BackwardRequest { full: &groups, per_sample: &groups, input_grads: true }).unwrap();
    check_params("per-sample", &p, &groups, &back.grads, |q| loss(q, &x));
    check_inputs("per-sample", &x, &back.input_grads, |y| loss(&p, y));
}

pub fn classifier_fraction_mse_through_aggregation() {
    for act in [Activation::LeakyRelu, Activation::Tanh] {
        let cfg = config(act);
        let c = Critic::new(&cfg, Head::Classes, LabelChannel::Zero).unwrap();
        let p = random_params(c.zero_params(), 0.5, 8);
        let x = images(4, 8, 9);
        let target = class_fractions(&[0, 2, 2, 1], 3);
        let loss = |p: &ModelParams| {
            let out = c.forward(p, &x, &[], ForwardMode::WithAgg).unwrap();
            mse_fraction_with_logits(&out.logits[0], &target).0
        };
        let out = c.forward(&p, &x, &[], ForwardMode::WithAgg).unwrap();
        let dl = vec![mse_fraction_with_logits(&out.logits[0], &target).1];
        let groups = all_groups(&p);
        let back = c.backward(&p, &out.tape, &dl, BackwardRequest { full: &groups, ..Default::default() }).unwrap();
        check_params("mse", &p, &groups, &back.grads, loss);
    }
}

pub fn plain_cnn_cross_entropy() {
    let cfg = config(Activation::LeakyRelu);
    let c = Critic::new(&cfg, Head::Classes, LabelChannel::None).unwrap();
    let p = random_params(c.zero_params(), 0.5, 10);
    let x = images(3, 8, 11);
    let labels = [2, 0, 1];
    let loss = |p: &ModelParams| {
        let out = c.forward(p, &x, &[], ForwardMode::PerSample).unwrap();
        out.logits.iter().zip(labels).map(|(l, y)| cross_entropy_with_logits(l, y).0).sum::<f64>()
    };
    let out = c.forward(&p, &x, &[], ForwardMode::PerSample).unwrap();
    let dl: Vec<Vec<f64>> = out.logits.iter().zip(labels).map(|(l, y)| cross_entropy_with_logits(l, y).1).collect();
    let groups = all_groups(&p);
    let back = c.backward(&p, &out.tape, &dl, BackwardRequest { full: &groups, ..Default::default() }).unwrap();
    check_params("ce", &p, &groups, &back.grads, loss);
}

pub fn generator_alone_and_through_the_discriminator() {
    let cfg = config(Activation::LeakyRelu);
    let g = Generator::new(&cfg).unwrap();
    let gp = random_params(g.zero_params(), 0.4, 12);
    let mut s = NoiseStream::new(13, Component::Latent, 0, 0);
    let z = g.sample_latent(3, &mut s);
    let labels = [0, 2, 1];
    let weights = s.gaussian_vec(3 * 64, 1.0);

    let linear = |p: &ModelParams| {
        let out = g.forward(p, &z, &labels).unwrap();
        out.images.data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
    };
    let out = g.forward(&gp, &z, &labels).unwrap();
    let d_img: Vec<Vec<f64>> = weights.chunks(64).map(<[f64]>::to_vec).collect();
    let grads = g.backward(&gp, &out.tape, &d_img).unwrap();
    check_params("generator", &gp, &g.groups(), &grads, linear);

    // non-saturating generator loss through a per-sample discriminator
    let d = Critic::new(&cfg, Head::Score, LabelChannel::Embedded).unwrap();
    let dp = random_params(d.zero_params(), 0.4, 14);
    let chained = |p: &ModelParams| {
        let imgs = g.forward(p, &z, &labels).unwrap().images;
        let out = d.forward(&dp, &imgs, &labels, ForwardMode::PerSample).unwrap();
        out.logits.iter().map(|l| bce_with_logit(l[0], 1.0).0).sum::<f64>()
    };
    let dout = d.forward(&dp, &out.images, &labels, ForwardMode::PerSample).unwrap();
    let dl: Vec<Vec<f64>> = dout.logits.iter().map(|l| vec![bce_with_logit(l[0], 1.0).1]).collect();
    let back = d.backward(&dp, &dout.tape, &dl, BackwardRequest { input_grads: true, ..Default::default() }).unwrap();
    let grads = g.backward(&gp, &out.tape, &back.input_grads).unwrap();
    check_params("generator via D", &gp, &g.groups(), &grads, chained);
}

pub fn per_sample_gradients_follow_each_path() {
    let cfg = config(Activation::LeakyRelu);
    let d = Critic::new(&cfg, Head::Score, LabelChannel::Embedded).unwrap();
    let p = random_params(d.zero_params(), 0.4, 15);
    let x = images(4, 8, 16);
    let labels = [0, 1, 2, 0];
    let pre = d.pre_agg_groups();
    let out = d.forward(&p, &x, &labels, ForwardMode::WithAgg).unwrap();
    let dl = vec![vec![bce_with_logit(out.logits[0][0], 1.0).1]];
    let back = d.backward(&p, &out.tape, &dl, BackwardRequest { full: &pre, per_sample: &pre, input_grads: false }).unwrap();

    // the sum over samples is the batch gradient
    let full = back.grads.flat(&pre);
    let mut sum = vec![0.0; full.len()];
    for g in &back.per_sample {
        for (a, b) in sum.iter_mut().zip(g) {
            *a += b;
        }
    }
    for (a, b) in sum.iter().zip(&full) {
        assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-12), "{a} vs {b}");
    }

    // sample i's gradient is ⟨∂L/∂A, SIN(f_i(θ))⟩ differentiated in θ
    let da = back.aggregate_grad.clone().unwrap();
    for i in 0..4 {
        let xi = FeatureTensor::new(x.sample(i).to_vec(), [1, 1, 8, 8]).unwrap();
        let path = |q: &ModelParams| {
            let o = d.forward(q, &xi, &labels[i..=i], ForwardMode::WithAgg).unwrap();
            o.tape.aggregate().unwrap().iter().zip(&da).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Grads::zeros_like(&p);
        let mut off = 0;
        for &grp in &pre {
            let n = p.by_index(grp).len();
            g.groups[grp].copy_from_slice(&back.per_sample[i][off..off + n]);
            off += n;
        }
        check_params("path", &p, &pre, &g, path);
    }

    // a batch of one: per-sample equals full
    let x1 = FeatureTensor::new(x.sample(0).to_vec(), [1, 1, 8, 8]).unwrap();
    let out = d.forward(&p, &x1, &labels[..1], ForwardMode::WithAgg).unwrap();
    let dl = vec![vec![0.3]];
    let back = d.backward(&p, &out.tape, &dl, BackwardRequest { full: &pre, per_sample: &pre, input_grads: false }).unwrap();
    assert_eq!(back.per_sample[0], back.grads.flat(&pre));
}

/// Every check, by name.
pub const CASES: &[(&str, fn())] = &[
    ("discriminator_through_sin_and_aggregation", discriminator_through_sin_and_aggregation),
    ("discriminator_through_noisy_aggregation", discriminator_through_noisy_aggregation),
    ("discriminator_per_sample_mode", discriminator_per_sample_mode),
    ("classifier_fraction_mse_through_aggregation", classifier_fraction_mse_through_aggregation),
    ("plain_cnn_cross_entropy", plain_cnn_cross_entropy),
    ("generator_alone_and_through_the_discriminator", generator_alone_and_through_the_discriminator),
    ("per_sample_gradients_follow_each_path", per_sample_gradients_follow_each_path),
];
