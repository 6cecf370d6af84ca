//! Small networks, schedules and the reduction checks shared by the trainer
//! tests and the acceptance run.

use dpaf_core::accountant::{Allocation, CalibrationTarget, ComponentPlan};
use dpaf_core::data::{subsample_batches, synth_dataset, LabeledDataset, SynthSpec};
use dpaf_core::nn::loss::{bce_with_logit, class_fractions, mse_fraction_with_logits};
use dpaf_core::nn::{Activation, BackwardRequest, ForwardMode, Generator, Layout, ModelParams, NetConfig};
use dpaf_core::noise::{Component, NoiseSource, NoiseStream};
use dpaf_core::trainer::{
    classifier_net, discriminator_net, train_classifier, train_gan, transfer_conv1, GanNoise, GanState, GeneratorView,
    Hyper, PrivacyTracker, RunLedger, TrainSchedule, Updated,
};

pub fn net() -> NetConfig {
    NetConfig {
        layout: Layout::new(1, 1, 1),
        filters: vec![2, 2, 2],
        fc_hidden: 4,
        latent_dim: 3,
        label_embedding_dim: 2,
        num_classes: 2,
        activation: Activation::LeakyRelu,
        image_side: 8,
        channels: 1,
    }
}

pub fn toy(n: usize, seed: u64) -> LabeledDataset {
    synth_dataset(&SynthSpec::default_for(2, 0.2), n, 8, seed).unwrap()
}

pub fn schedule(batches: usize, epochs: usize, mu: usize, n_critic: usize) -> TrainSchedule {
    TrainSchedule { batch_size: 2, batches_per_epoch: Some(batches), epochs, mu, n_critic, classifier_epochs: 1 }
}

pub fn tracker() -> PrivacyTracker {
    let plan = ComponentPlan { sensitivity: 1.0, sampling_rate: 0.1, iterations: 10 };
    let target = CalibrationTarget {
        epsilon_total: 10.0,
        delta: 1e-5,
        allocation: Allocation::Percent([10.0, 80.0, 10.0]),
        conv1: plan,
        conv2: plan,
        dpagg: plan,
    };
    PrivacyTracker::new(&target.with_sigmas([1.0; 3])).unwrap()
}

/// Hyperparameters with clipping, compression and noise out of the way.
pub fn open_hyper() -> Hyper {
    Hyper { clip_conv1: 1e12, clip_conv2: 1e12, top_k: 1.0, fake_noise: false, ..Hyper::default() }
}

pub fn gan_state(data: &LabeledDataset, hyper: &Hyper, seed: u64) -> (GanState, NoiseSource, RunLedger) {
    let mut source = NoiseSource::new(seed);
    let mut ledger = RunLedger::default();
    let conv1 = train_classifier(data, &net(), &schedule(4, 1, 1, 1), hyper, 1.0, &mut source, &mut ledger, &tracker())
        .unwrap();
    let d = discriminator_net(&net()).unwrap();
    let dp = transfer_conv1(&conv1, &d, hyper, &mut source.stream(Component::Init, 0, 1)).unwrap();
    let g = Generator::new(&net()).unwrap();
    let mut gp = g.zero_params();
    gp.init_weights(hyper.weight_init, hyper.embedding_init_std, &mut source.stream(Component::Init, 0, 2));
    (GanState { g, gp, d, dp }, source, RunLedger::default())
}

pub fn gan_counts(batches: usize, epochs: usize, mu: usize, n_critic: usize) -> (RunLedger, [u64; 3]) {
    let data = toy(32, 1);
    // noise on the fake aggregate too, so every noisy release is counted
    let hyper = Hyper { fake_noise: true, ..Hyper::default() };
    let (mut state, mut source, mut ledger) = gan_state(&data, &hyper, 5);
    let before = [Component::Conv2, Component::DpAgg, Component::FakeAgg].map(|c| source.count(c));
    let s = schedule(batches, epochs, mu, n_critic);
    let noise = GanNoise { sigma2: 1.0, sigma3: 1.0 };
    train_gan(&data, &mut state, &s, &hyper, noise, &mut source, &mut ledger, &tracker(), 0).unwrap();
    let after = [Component::Conv2, Component::DpAgg, Component::FakeAgg].map(|c| source.count(c));
    (ledger, [0, 1, 2].map(|i| after[i] - before[i]))
}

/// Runs `steps` private classifier steps with vanishing noise and no
/// clipping next to plain SGD and compares the traces.
pub fn classifier_reduces_to_plain_sgd(steps: usize) {
    let data = toy(32, 4);
    let s = schedule(steps, 1, 1, 1);
    let hyper = Hyper { classifier_lr: 0.1, ..open_hyper() };
    let mut ledger = RunLedger::default();
    let mut source = NoiseSource::new(11);
    let conv1 = train_classifier(&data, &net(), &s, &hyper, 1e-30, &mut source, &mut ledger, &tracker()).unwrap();

    let c = classifier_net(&net()).unwrap();
    let mut params = c.zero_params();
    params.init_weights(hyper.weight_init, hyper.embedding_init_std, &mut NoiseStream::new(11, Component::Init, 0, 0));
    let all: Vec<usize> = (0..params.groups().len()).collect();
    let batches = subsample_batches(32, 2, steps, &mut NoiseStream::new(11, Component::Shuffle, 0, 0)).unwrap();
    let mut reference = Vec::new();
    for idx in &batches {
        let (x, y) = data.gather(idx);
        let out = c.forward(&params, &x, &[], ForwardMode::WithAgg).unwrap();
        let (loss, dl) = mse_fraction_with_logits(&out.logits[0], &class_fractions(&y, 2));
        reference.push(loss);
        let back = c.backward(&params, &out.tape, &[dl], BackwardRequest { full: &all, ..Default::default() }).unwrap();
        // The private path averages per-sample gradients over the batch.
        let mut g = back.grads;
        g.groups[c.conv1_group()].iter_mut().for_each(|v| *v /= 2.0);
        params.sgd_step(&g, &all, hyper.classifier_lr).unwrap();
    }
    for (a, b) in ledger.losses(Updated::Classifier).iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    for (a, b) in conv1.groups()[0].values.iter().zip(&params.by_index(c.conv1_group()).values) {
        assert!((a - b).abs() <= 1e-6);
    }
}

/// One step of the asymmetric schedule with μ = n_critic = 1 and every
/// privacy mechanism off, written as an ordinary conditional GAN step.
pub fn reference_gan_step(
    state: &mut GanState,
    data: &LabeledDataset,
    idx: &[usize],
    hyper: &Hyper,
    seed: u64,
    b: u64,
) -> [f64; 3] {
    let GanState { g, gp, d, dp } = state;
    let n = idx.len();
    let fakes = |gp: &ModelParams, batch: u64| {
        let mut ls = NoiseStream::new(seed, Component::Labels, 0, batch);
        let labels: Vec<usize> = (0..n).map(|_| ls.uniform_usize(2)).collect();
        let z = g.sample_latent(n, &mut NoiseStream::new(seed, Component::Latent, 0, batch));
        (g.forward(gp, &z, &labels).unwrap(), labels)
    };
    let (x, y) = data.gather(idx);
    let (fake, fl) = fakes(gp, 2 * b);
    let post = d.post_agg_groups();
    let conv2 = [d.conv2_group(), d.embedding_group().unwrap()];
    let step_d = |dp: &mut ModelParams, groups: &[usize], lr: f64, scale: f64| {
        let r = d.forward(dp, &x, &y, ForwardMode::WithAgg).unwrap();
        let f = d.forward(dp, &fake.images, &fl, ForwardMode::WithAgg).unwrap();
        let (lr_, dr) = bce_with_logit(r.logits[0][0], 1.0);
        let (lf, df) = bce_with_logit(f.logits[0][0], 0.0);
        let req = BackwardRequest { full: groups, ..Default::default() };
        let mut grads = d.backward(dp, &r.tape, &[vec![dr]], req).unwrap().grads;
        grads.add(&d.backward(dp, &f.tape, &[vec![df]], req).unwrap().grads);
        for gr in grads.groups.iter_mut() {
            gr.iter_mut().for_each(|v| *v *= scale);
        }
        dp.sgd_step(&grads, groups, lr).unwrap();
        lr_ + lf
    };
    let l_post = step_d(dp, &post, hyper.post_lr, 1.0);
    let l_conv2 = step_d(dp, &conv2, hyper.conv2_lr, 1.0 / n as f64);

    let (gen, labels) = fakes(gp, 2 * b + 1);
    let mode = match hyper.generator_view {
        GeneratorView::Raw => ForwardMode::PerSample,
        GeneratorView::Replicated => ForwardMode::PerSampleNormalized { scale: n as f64 },
        GeneratorView::Batch => ForwardMode::WithAgg,
    };
    let out = d.forward(dp, &gen.images, &labels, mode).unwrap();
    let rows = out.logits.len() as f64;
    let mut loss = 0.0;
    let dl: Vec<Vec<f64>> = out
        .logits
        .iter()
        .map(|l| {
            let (li, gi) = bce_with_logit(l[0], 1.0);
            loss += li / rows;
            vec![gi / rows]
        })
        .collect();
    let back = d.backward(dp, &out.tape, &dl, BackwardRequest { input_grads: true, ..Default::default() }).unwrap();
    let grads = g.backward(gp, &gen.tape, &back.input_grads).unwrap();
    gp.sgd_step(&grads, &g.groups(), hyper.generator_lr).unwrap();
    [l_post, l_conv2, loss]
}

/// Same for the GAN phase with μ = n_critic = 1.
pub fn gan_reduces_to_plain_conditional_gan(view: GeneratorView, steps: usize) {
    let data = toy(32, 6);
    let hyper = Hyper { generator_view: view, ..open_hyper() };
    let (mut state, mut source, mut ledger) = gan_state(&data, &hyper, 21);
    let mut reference = GanState { g: state.g.clone(), gp: state.gp.clone(), d: state.d.clone(), dp: state.dp.clone() };
    let s = schedule(steps, 1, 1, 1);
    let noise = GanNoise { sigma2: 1e-30, sigma3: 1e-30 };
    train_gan(&data, &mut state, &s, &hyper, noise, &mut source, &mut ledger, &tracker(), 0).unwrap();

    let batches = subsample_batches(32, 2, steps, &mut NoiseStream::new(21, Component::Shuffle, 0, 1)).unwrap();
    let mut expected = Vec::new();
    for (b, idx) in batches.iter().enumerate() {
        expected.push(reference_gan_step(&mut reference, &data, idx, &hyper, 21, b as u64));
    }
    for (k, u) in [Updated::Post, Updated::Conv2, Updated::Generator].into_iter().enumerate() {
        let got = ledger.losses(u);
        assert_eq!(got.len(), steps);
        for (a, e) in got.iter().zip(&expected) {
            assert!((a - e[k]).abs() <= 1e-6, "{view:?} {u}: {a} vs {}", e[k]);
        }
    }
    for (a, b) in state.gp.groups().iter().zip(reference.gp.groups()) {
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

