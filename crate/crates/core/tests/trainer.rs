use dpaf_core::accountant::{Allocation, CalibrationTarget, ComponentPlan, PrivacySpec};
use dpaf_core::config::{DataSource, PrivacyConfig, RunConfig};
use dpaf_core::data::{synth_dataset, LabeledDataset, SynthSpec};
use dpaf_core::nn::{ForwardMode, ModelParams, NetConfig, WeightInit};
use dpaf_core::noise::{Component, NoiseSource, NoiseStream};
use dpaf_core::trainer::{
    discriminator_net, eval_downstream, run_pipeline, train_classifier, train_gan, transfer_conv1,
    EvalConfig, GanNoise, GanState, GeneratorView, Hyper, PrivacyTracker, RunLedger, TrainSchedule, Updated,
};
use proptest::prelude::*;

mod common;

use common::fixtures::{self, gan_counts, gan_state, net, open_hyper, schedule, toy, tracker};

#[test]
fn canonical_schedule_counts() {
    let (ledger, released) = gan_counts(16, 1, 8, 3);
    assert_eq!(ledger.count(Updated::Post), 16);
    assert_eq!(ledger.count(Updated::Conv2), 2);
    assert_eq!(ledger.count(Updated::Generator), 5);
    assert_eq!(released, [2, 16, 16]);
    let s = schedule(16, 1, 8, 3);
    assert_eq!((s.total_batches(32), s.conv2_updates(32), s.generator_updates(32)), (16, 2, 5));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn schedule_counts_match_formulas(batches in 1usize..8, epochs in 1usize..3, mu in 1usize..5, n_critic in 1usize..5) {
        let (ledger, released) = gan_counts(batches, epochs, mu, n_critic);
        let total = (batches * epochs) as u64;
        prop_assert_eq!(ledger.count(Updated::Post), total);
        prop_assert_eq!(ledger.count(Updated::Conv2), total / mu as u64);
        prop_assert_eq!(ledger.count(Updated::Generator), total / n_critic as u64);
        prop_assert_eq!(released, [total / mu as u64, total, total]);
        let s = schedule(batches, epochs, mu, n_critic);
        prop_assert_eq!(s.conv2_updates(32), total / mu as u64);
        prop_assert_eq!(s.generator_updates(32), total / n_critic as u64);
    }
}

#[test]
fn classifier_counts_and_learns() {
    let data = toy(64, 2);
    let s = TrainSchedule { classifier_epochs: 3, ..schedule(8, 1, 1, 1) };
    let mut ledger = RunLedger::default();
    let mut source = NoiseSource::new(3);
    let hyper = Hyper { classifier_lr: 0.2, weight_init: WeightInit::Fixed(0.3), ..open_hyper() };
    let conv1 = train_classifier(&data, &net(), &s, &hyper, 1e-30, &mut source, &mut ledger, &tracker()).unwrap();
    assert_eq!(conv1.groups().len(), 1);
    assert_eq!(conv1.groups()[0].name, "conv1");
    assert_eq!(ledger.count(Updated::Classifier), s.classifier_updates(64));
    assert_eq!(source.count(Component::Conv1), 24);
    let losses = ledger.losses(Updated::Classifier);
    let head: f64 = losses[..6].iter().sum();
    let tail: f64 = losses[losses.len() - 6..].iter().sum();
    assert!(tail < head, "{losses:?}");
}

#[test]
fn classifier_reduces_to_plain_sgd() {
    fixtures::classifier_reduces_to_plain_sgd(5);
}

#[test]
fn gan_reduces_to_plain_conditional_gan() {
    for view in [GeneratorView::Raw, GeneratorView::Replicated, GeneratorView::Batch] {
        fixtures::gan_reduces_to_plain_conditional_gan(view, 5);
    }
}

#[test]
fn transfer_copies_and_freezes_conv1() {
    let data = toy(32, 7);
    let hyper = Hyper::default();
    let mut ledger = RunLedger::default();
    let mut source = NoiseSource::new(1);
    let conv1 = train_classifier(&data, &net(), &schedule(4, 1, 1, 1), &hyper, 1.0, &mut source, &mut ledger, &tracker())
        .unwrap();
    let d = discriminator_net(&net()).unwrap();
    let a = transfer_conv1(&conv1, &d, &hyper, &mut NoiseStream::new(1, Component::Init, 0, 1)).unwrap();
    let b = transfer_conv1(&conv1, &d, &hyper, &mut NoiseStream::new(2, Component::Init, 0, 1)).unwrap();
    let bits = |p: &ModelParams| p.by_index(d.conv1_group()).values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let src: Vec<u64> = conv1.groups()[0].values.iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits(&a), src);
    assert_eq!(bits(&b), src);
    assert!(a.by_index(d.conv1_group()).frozen);
    assert_ne!(a.by_index(d.conv2_group()).values, b.by_index(d.conv2_group()).values);

    let wrong = NetConfig { filters: vec![3, 2, 2], ..net() };
    let d2 = discriminator_net(&wrong).unwrap();
    assert!(transfer_conv1(&conv1, &d2, &hyper, &mut NoiseStream::new(1, Component::Init, 0, 1)).is_err());
}

fn small_run_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        out_dir: None,
        data: DataSource::Synthetic { n_train: 48, n_test: 16, num_classes: 2, noise: 0.2, data_seed: 0, patterns: None },
        net: net(),
        schedule: TrainSchedule { batch_size: 4, batches_per_epoch: None, epochs: 2, mu: 3, n_critic: 2, classifier_epochs: 2 },
        privacy: PrivacyConfig {
            epsilon: 5.0,
            delta: 1e-5,
            allocation: Allocation::Absolute { conv1: 0.5, dpagg: 0.5 },
            tolerance: 0.01,
        },
        hyper: Hyper::default(),
        eval: EvalConfig::default(),
    }
}

#[test]
fn pipeline_audit_matches_accountant() {
    let cfg = small_run_config(9);
    let (train, _) = cfg.datasets().unwrap();
    let run = run_pipeline(&cfg, &train).unwrap();
    assert_eq!(run.released, run.planned);
    assert_eq!(run.planned, [24, 8, 24]);
    assert_eq!(
        [Updated::Classifier, Updated::Conv2, Updated::Post].map(|u| run.ledger.count(u)),
        run.planned
    );
    assert!(run.achieved_epsilon <= cfg.privacy.epsilon);
    assert!(run.achieved_epsilon >= (1.0 - cfg.privacy.tolerance) * cfg.privacy.epsilon);
    let last = run.ledger.records.last().unwrap();
    assert!((last.epsilon - run.achieved_epsilon).abs() < 1e-12);
    let eps: Vec<f64> = run.ledger.records.iter().map(|r| r.epsilon).collect();
    assert!(eps.windows(2).all(|w| w[0] <= w[1]));
    // conv1 stays bit-identical through GAN training.
    let d = discriminator_net(&cfg.net).unwrap();
    assert_eq!(run.discriminator.by_index(d.conv1_group()), &run.conv1_before_gan);
    // The ledger is one JSON object per line.
    let jsonl = run.ledger.to_jsonl();
    assert_eq!(jsonl.lines().count(), run.ledger.records.len());
    let again = run_pipeline(&cfg, &train).unwrap();
    assert_eq!(again.ledger, run.ledger);
    assert_eq!(again.generator, run.generator);
}

#[test]
fn gan_requires_frozen_conv1() {
    let data = toy(32, 8);
    let hyper = Hyper::default();
    let (mut state, mut source, mut ledger) = gan_state(&data, &hyper, 2);
    let name = state.dp.by_index(state.d.conv1_group()).name.clone();
    state.dp.set_frozen(&name, false).unwrap();
    let noise = GanNoise { sigma2: 1.0, sigma3: 1.0 };
    let r = train_gan(&data, &mut state, &schedule(2, 1, 1, 1), &hyper, noise, &mut source, &mut ledger, &tracker(), 0);
    assert!(r.is_err());
}

#[test]
fn discriminator_separates_real_and_fake_without_privacy() {
    let data = toy(64, 10);
    let mut ok = 0;
    for seed in 0..5 {
        let hyper = Hyper { post_lr: 0.02, conv2_lr: 0.05, ..open_hyper() };
        let (mut state, mut source, mut ledger) = gan_state(&data, &hyper, seed);
        let probe: Vec<usize> = (0..8).collect();
        let (x, y) = data.gather(&probe);
        let mut zs = NoiseStream::new(seed, Component::Eval, 0, 0);
        let z = state.g.sample_latent(8, &mut zs);
        let scores = |s: &GanState| {
            let fake = s.g.forward(&s.gp, &z, &y).unwrap().images;
            let r = s.d.forward(&s.dp, &x, &y, ForwardMode::WithAgg).unwrap().scores()[0];
            let f = s.d.forward(&s.dp, &fake, &y, ForwardMode::WithAgg).unwrap().scores()[0];
            (r, f)
        };
        let (r0, f0) = scores(&state);
        let noise = GanNoise { sigma2: 1e-30, sigma3: 1e-30 };
        let s = TrainSchedule { batch_size: 8, ..schedule(8, 1, 1, 1000) };
        train_gan(&data, &mut state, &s, &hyper, noise, &mut source, &mut ledger, &tracker(), 0).unwrap();
        let (r1, f1) = scores(&state);
        ok += (r1 > r0 && f1 < f0) as usize;
    }
    assert!(ok >= 3, "{ok} of 5 seeds");
}

#[test]
fn downstream_eval_sanity() {
    let spec = SynthSpec::default_for(2, 0.3);
    let all = synth_dataset(&spec, 400, 8, 12).unwrap();
    let train = all.subset(&(0..300).collect::<Vec<_>>()).unwrap();
    let test = all.subset(&(300..400).collect::<Vec<_>>()).unwrap();
    let cfg = EvalConfig { epochs: 10, batch_size: 16, ..EvalConfig::default() };
    let acc = eval_downstream(&train, &test, &net(), &cfg, 1).unwrap();
    assert!(acc >= 0.95, "{acc}");
    assert_eq!(eval_downstream(&train, &test, &net(), &cfg, 1).unwrap(), acc);

    let mut rng = NoiseStream::new(3, Component::Eval, 9, 9);
    let shuffled: Vec<usize> = (0..train.len()).map(|_| rng.uniform_usize(2)).collect();
    let noisy = LabeledDataset::new(train.images().clone(), shuffled, 2).unwrap();
    let mut accs: Vec<f64> = (0..5).map(|s| eval_downstream(&noisy, &test, &net(), &cfg, s).unwrap()).collect();
    accs.sort_by(f64::total_cmp);
    assert!((accs[2] - 0.5).abs() <= 0.1, "{accs:?}");
}

#[test]
fn tracker_matches_total_epsilon() {
    let spec: PrivacySpec = {
        let plan = ComponentPlan { sensitivity: 1.0, sampling_rate: 0.05, iterations: 100 };
        CalibrationTarget {
            epsilon_total: 3.0,
            delta: 1e-5,
            allocation: Allocation::Percent([10.0, 80.0, 10.0]),
            conv1: plan,
            conv2: plan,
            dpagg: plan,
        }
        .with_sigmas([1.5, 1.0, 2.0])
    };
    let t = PrivacyTracker::new(&spec).unwrap();
    let (eps, _) = dpaf_core::accountant::dpaf_total_epsilon(&spec, &dpaf_core::accountant::default_orders()).unwrap();
    assert!((t.epsilon([100, 100, 100]) - eps).abs() <= 1e-9 * eps);
    assert_eq!(t.epsilon([0, 0, 0]), 0.0);
    assert!(t.epsilon([10, 10, 10]) < t.epsilon([10, 20, 10]));
}
