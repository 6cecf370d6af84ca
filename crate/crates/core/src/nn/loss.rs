//! Loss heads. Every function returns the loss and its gradient w.r.t. the
//! pre-activation logits the network produced.

/// Scores are clamped to [1e-7, 1 − 1e-7] before the logarithm.
pub const BCE_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Binary cross-entropy of a score in (0,1) against a {0,1} target.
pub fn loss_bce(score: f64, target: f64) -> f64 {
    let s = score.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(target * s.ln() + (1.0 - target) * (1.0 - s).ln())
}

/// ∂BCE/∂score; zero where the clamp is active.
pub fn bce_grad_score(score: f64, target: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&score) {
        return 0.0;
    }
    -target / score + (1.0 - target) / (1.0 - score)
}

/// BCE on `sigmoid(logit)`: (loss, ∂loss/∂logit).
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let s = sigmoid(logit);
    let grad = if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&s) { s - target } else { 0.0 };
    (loss_bce(s, target), grad)
}

/// Mean squared error between predicted and true class fractions.
pub fn loss_mse_fraction(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "fraction vectors differ in length");
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// MSE on `softmax(logits)`: (loss, ∂loss/∂logits).
pub fn mse_fraction_with_logits(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let n = p.len() as f64;
    let dp: Vec<f64> = p.iter().zip(target).map(|(a, t)| 2.0 * (a - t) / n).collect();
    let dot: f64 = dp.iter().zip(&p).map(|(g, a)| g * a).sum();
    let dl = p.iter().zip(&dp).map(|(a, g)| a * (g - dot)).collect();
    (loss_mse_fraction(&p, target), dl)
}

/// Softmax cross-entropy against a class index: (loss, ∂loss/∂logits).
pub fn cross_entropy_with_logits(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[label].max(1e-300).ln();
    p[label] -= 1.0;
    (loss, p)
}

/// Fraction of each class among `labels`.
pub fn class_fractions(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut f = vec![0.0; num_classes];
    for &l in labels {
        f[l] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    f.iter_mut().for_each(|v| *v /= n);
    f
}
