//! Rényi-DP accounting for the three privatized components of the pipeline:
//! DPSGD on conv1 (classifier phase), DPSGD on conv2* and the noisy feature
//! aggregate in the discriminator.
//!
//! Every mechanism is a subsampled Gaussian mechanism. Per-step RDP curves are
//! amplified by subsampling without replacement, composed additively over
//! steps and components, and converted to (ε, δ)-DP once at the end.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest order of the default α grid.
pub const DEFAULT_MAX_ORDER: u32 = 256;

/// Search bracket for noise multipliers.
pub const SIGMA_MIN: f64 = 1e-2;
pub const SIGMA_MAX: f64 = 1e6;
pub const BISECTION_MAX_ITERS: usize = 200;
pub const BISECTION_REL_TOL: f64 = 1e-6;

// Terms smaller than 1e-300 of the running maximum are dropped from the
// log-space sum.
const LOG_DROP_THRESHOLD: f64 = -690.775_527_898_213_7;

/// Integer orders 2..=256.
pub fn default_orders() -> Vec<u32> {
    (2..=DEFAULT_MAX_ORDER).collect()
}

/// One privatized component: a Gaussian mechanism of ℓ₂-sensitivity `sensitivity`
/// whose noise standard deviation is `noise_multiplier * sensitivity`, applied
/// `iterations` times to subsamples drawn at rate `sampling_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub sensitivity: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub iterations: u64,
}

impl MechanismConfig {
    pub fn new(sensitivity: f64, noise_multiplier: f64, sampling_rate: f64, iterations: u64) -> Result<Self> {
        let cfg = Self { sensitivity, noise_multiplier, sampling_rate, iterations };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sensitivity > 0.0) {
            return Err(Error::domain(format!("sensitivity must be positive, got {}", self.sensitivity)));
        }
        if !(self.noise_multiplier > 0.0) {
            return Err(Error::domain(format!(
                "noise multiplier must be positive, got {}",
                self.noise_multiplier
            )));
        }
        check_rate(self.sampling_rate)
    }

    /// Standard deviation of the Gaussian noise added per release.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.sensitivity
    }

    /// Per-step RDP at order `alpha`, after subsampling amplification.
    pub fn step_rdp(&self, alpha: u32) -> Result<f64> {
        subsampled_rdp(alpha, self.sampling_rate, self.sensitivity, self.noise_std())
    }

    /// RDP after all `iterations` steps at order `alpha`.
    pub fn total_rdp(&self, alpha: u32) -> Result<f64> {
        if self.iterations == 0 {
            return Ok(0.0);
        }
        Ok(self.iterations as f64 * self.step_rdp(alpha)?)
    }

    pub fn curve(&self, orders: &[u32]) -> Result<RdpCurve> {
        let epsilons = orders.iter().map(|&a| self.total_rdp(a)).collect::<Result<Vec<_>>>()?;
        RdpCurve::new(orders.to_vec(), epsilons)
    }
}

/// Map from integer order α to an RDP bound ε(α).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<u32>,
    epsilons: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<u32>, epsilons: Vec<f64>) -> Result<Self> {
        if orders.len() != epsilons.len() {
            return Err(Error::shape(format!(
                "{} orders but {} epsilons",
                orders.len(),
                epsilons.len()
            )));
        }
        check_orders(&orders)?;
        if let Some(e) = epsilons.iter().find(|e| !(**e >= 0.0)) {
            return Err(Error::domain(format!("RDP values must be nonnegative, got {e}")));
        }
        Ok(Self { orders, epsilons })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn get(&self, alpha: u32) -> Option<f64> {
        self.orders.iter().position(|&a| a == alpha).map(|i| self.epsilons[i])
    }

    pub fn scaled(&self, k: f64) -> RdpCurve {
        RdpCurve {
            orders: self.orders.clone(),
            epsilons: self.epsilons.iter().map(|e| e * k).collect(),
        }
    }

    /// Best (ε, α) after conversion to (ε, δ)-DP over this curve's orders.
    pub fn to_dp(&self, delta: f64) -> Result<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for (&alpha, &eps) in self.orders.iter().zip(&self.epsilons) {
            let dp = rdp_to_dp(alpha, eps, delta)?;
            if best.map_or(true, |(b, _)| dp < b) {
                best = Some((dp, alpha));
            }
        }
        best.ok_or_else(|| Error::Empty("order grid".into()))
    }
}

fn check_orders(orders: &[u32]) -> Result<()> {
    if let Some(&a) = orders.iter().find(|&&a| a < 2) {
        return Err(Error::domain(format!("orders must be >= 2, got {a}")));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain("orders must be strictly increasing"));
    }
    Ok(())
}

fn check_rate(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("sampling rate must lie in (0, 1], got {gamma}")))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// RDP of the Gaussian mechanism: α·u²/(2σ²), with σ the noise standard deviation.
pub fn gaussian_rdp(alpha: u32, sensitivity: f64, sigma: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::domain(format!("order must be >= 2, got {alpha}")));
    }
    if !(sensitivity > 0.0) || !(sigma > 0.0) {
        return Err(Error::domain(format!(
            "sensitivity and sigma must be positive, got u={sensitivity}, sigma={sigma}"
        )));
    }
    Ok(alpha as f64 * sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// Pointwise sum of RDP curves sharing one order grid.
pub fn compose_rdp(curves: &[RdpCurve]) -> Result<RdpCurve> {
    let (first, rest) = curves.split_first().ok_or_else(|| Error::Empty("no curves to compose".into()))?;
    let mut out = first.clone();
    for c in rest {
        if c.orders != out.orders {
            return Err(Error::shape("RDP curves have mismatched order grids"));
        }
        for (acc, e) in out.epsilons.iter_mut().zip(&c.epsilons) {
            *acc += e;
        }
    }
    Ok(out)
}

fn ln_factorial_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(4097);
        let mut acc = KahanSum::default();
        t.push(0.0);
        for k in 1..=4096u32 {
            acc.add((k as f64).ln());
            t.push(acc.value());
        }
        t
    })
}

fn ln_factorial(n: u32) -> f64 {
    let table = ln_factorial_table();
    if let Some(&v) = table.get(n as usize) {
        return v;
    }
    let mut acc = KahanSum::default();
    acc.add(table[table.len() - 1]);
    for k in table.len() as u32..=n {
        acc.add((k as f64).ln());
    }
    acc.value()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

#[derive(Debug, Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// log(Σ exp(terms)); terms more than 1e-300 below the maximum are dropped.
fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = KahanSum::default();
    for &t in terms {
        let d = t - max;
        if d >= LOG_DROP_THRESHOLD {
            acc.add(d.exp());
        }
    }
    max + acc.value().ln()
}

/// log(1 + e^x) without overflow or cancellation.
fn ln_one_plus_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// RDP of the Gaussian mechanism under subsampling without replacement at
/// rate `gamma`, for integer order `alpha` (σ is the noise standard deviation).
///
/// The bound for a Gaussian base mechanism has ε(∞) = ∞, so the
/// `min{2, (e^{ε(∞)} − 1)^j}` factors are 2. The sum is evaluated in log space.
pub fn subsampled_rdp(alpha: u32, gamma: f64, sensitivity: f64, sigma: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::domain(format!("order must be >= 2, got {alpha}")));
    }
    check_rate(gamma)?;
    if !(sensitivity > 0.0) || !(sigma > 0.0) {
        return Err(Error::domain(format!(
            "sensitivity and sigma must be positive, got u={sensitivity}, sigma={sigma}"
        )));
    }
    // ε(j) = j·c with c = u²/(2σ²)
    let c = sensitivity * sensitivity / (2.0 * sigma * sigma);
    if c == 0.0 {
        return Ok(0.0);
    }
    let ln_gamma = gamma.ln();
    let mut terms = Vec::with_capacity(alpha as usize - 1);

    // j = 2: γ²·C(α,2)·min{4(e^{ε(2)} − 1), 2e^{ε(2)}}
    let eps2 = 2.0 * c;
    let ln_min = if eps2 < std::f64::consts::LN_2 {
        4f64.ln() + eps2.exp_m1().ln()
    } else {
        std::f64::consts::LN_2 + eps2
    };
    terms.push(2.0 * ln_gamma + ln_binomial(alpha, 2) + ln_min);

    // j ≥ 3: γ^j·C(α,j)·e^{(j−1)ε(j)}·2
    for j in 3..=alpha {
        let jf = j as f64;
        terms.push(jf * ln_gamma + ln_binomial(alpha, j) + (jf - 1.0) * jf * c + std::f64::consts::LN_2);
    }

    let ln_s = log_sum_exp(&terms);
    if ln_s == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok(ln_one_plus_exp(ln_s) / (alpha as f64 - 1.0))
}

/// Conversion from (α, ε)-RDP to (ε + log(1/δ)/(α−1), δ)-DP.
pub fn rdp_to_dp(alpha: u32, eps_rdp: f64, delta: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::domain(format!("order must be >= 2, got {alpha}")));
    }
    check_delta(delta)?;
    Ok(eps_rdp + (-delta.ln()) / (alpha as f64 - 1.0))
}

/// How the total budget is split across conv1, conv2* and the noisy aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Allocation {
    /// Percentages (x₁, x₂, x₃) of the total budget; must sum to 100.
    Percent([f64; 3]),
    /// Absolute budgets for conv1 and the aggregate; conv2* takes the rest.
    Absolute { conv1: f64, dpagg: f64 },
}

impl Allocation {
    /// Per-component budgets (ε₁, ε₂, ε₃) for a total budget.
    pub fn budgets(&self, epsilon_total: f64) -> Result<[f64; 3]> {
        if !(epsilon_total > 0.0) || !epsilon_total.is_finite() {
            return Err(Error::domain(format!("total epsilon must be positive, got {epsilon_total}")));
        }
        match *self {
            Allocation::Percent(p) => {
                if p.iter().any(|x| !(*x >= 0.0)) {
                    return Err(Error::domain("allocation percentages must be nonnegative"));
                }
                let sum: f64 = p.iter().sum();
                if (sum - 100.0).abs() > 1e-9 {
                    return Err(Error::domain(format!("allocation percentages sum to {sum}, not 100")));
                }
                Ok(p.map(|x| x * epsilon_total / 100.0))
            }
            Allocation::Absolute { conv1, dpagg } => {
                if !(conv1 >= 0.0) || !(dpagg >= 0.0) {
                    return Err(Error::domain("absolute budgets must be nonnegative"));
                }
                if conv1 + dpagg >= epsilon_total {
                    return Err(Error::domain(format!(
                        "absolute budgets {conv1} + {dpagg} leave nothing of {epsilon_total} for conv2*"
                    )));
                }
                Ok([conv1, epsilon_total - conv1 - dpagg, dpagg])
            }
        }
    }

    pub fn shares(&self, epsilon_total: f64) -> Result<[f64; 3]> {
        Ok(self.budgets(epsilon_total)?.map(|b| b / epsilon_total))
    }
}

/// Names of the three privatized components, in accounting order.
pub const COMPONENT_NAMES: [&str; 3] = ["conv1", "conv2", "dpagg"];

/// A fully specified privacy configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon_total: f64,
    pub delta: f64,
    pub conv1: MechanismConfig,
    pub conv2: MechanismConfig,
    pub dpagg: MechanismConfig,
    pub allocation: Allocation,
}

impl PrivacySpec {
    pub fn components(&self) -> [&MechanismConfig; 3] {
        [&self.conv1, &self.conv2, &self.dpagg]
    }

    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        self.allocation.budgets(self.epsilon_total)?;
        for c in self.components() {
            c.validate()?;
        }
        Ok(())
    }
}

/// Sensitivity, sampling rate and step count of a component whose noise is
/// yet to be calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentPlan {
    pub sensitivity: f64,
    pub sampling_rate: f64,
    pub iterations: u64,
}

impl ComponentPlan {
    pub fn with_sigma(&self, noise_multiplier: f64) -> MechanismConfig {
        MechanismConfig {
            sensitivity: self.sensitivity,
            noise_multiplier,
            sampling_rate: self.sampling_rate,
            iterations: self.iterations,
        }
    }
}

/// A privacy target without noise multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub epsilon_total: f64,
    pub delta: f64,
    pub allocation: Allocation,
    pub conv1: ComponentPlan,
    pub conv2: ComponentPlan,
    pub dpagg: ComponentPlan,
}

impl CalibrationTarget {
    pub fn plans(&self) -> [&ComponentPlan; 3] {
        [&self.conv1, &self.conv2, &self.dpagg]
    }

    pub fn with_sigmas(&self, sigmas: [f64; 3]) -> PrivacySpec {
        PrivacySpec {
            epsilon_total: self.epsilon_total,
            delta: self.delta,
            conv1: self.conv1.with_sigma(sigmas[0]),
            conv2: self.conv2.with_sigma(sigmas[1]),
            dpagg: self.dpagg.with_sigma(sigmas[2]),
            allocation: self.allocation,
        }
    }
}

/// Composed RDP of all three components at order `alpha`.
pub fn total_rdp(spec: &PrivacySpec, alpha: u32) -> Result<f64> {
    let mut sum = 0.0;
    for c in spec.components() {
        if c.iterations > 0 {
            sum += c.total_rdp(alpha)?;
        }
    }
    Ok(sum)
}

/// Minimum over `orders` of the composed (ε, δ)-DP guarantee, with the
/// minimizing order. Ties resolve to the smallest order.
pub fn dpaf_total_epsilon(spec: &PrivacySpec, orders: &[u32]) -> Result<(f64, u32)> {
    if orders.is_empty() {
        return Err(Error::Empty("order grid".into()));
    }
    check_orders(orders)?;
    check_delta(spec.delta)?;
    let mut best: Option<(f64, u32)> = None;
    for &alpha in orders {
        let eps = rdp_to_dp(alpha, total_rdp(spec, alpha)?, spec.delta)?;
        if best.map_or(true, |(b, _)| eps < b) {
            best = Some((eps, alpha));
        }
    }
    Ok(best.expect("nonempty grid"))
}

/// Result of noise calibration for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCalibration {
    pub name: String,
    /// Share of the total budget allocated to the component.
    pub epsilon_budget: f64,
    pub sigma: f64,
    pub iterations: u64,
    pub sampling_rate: f64,
    pub sensitivity: f64,
}

/// Serializable outcome of [`calibrate_sigma`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub components: Vec<ComponentCalibration>,
    pub alpha: u32,
    pub target_epsilon: f64,
    pub achieved_epsilon: f64,
    pub delta: f64,
}

impl CalibrationReport {
    pub fn sigmas(&self) -> [f64; 3] {
        [self.components[0].sigma, self.components[1].sigma, self.components[2].sigma]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Smallest σ in the search bracket with `iterations · ε'(α, σ) ≤ budget`.
/// `None` when even the largest σ does not fit the budget.
fn bisect_sigma(plan: &ComponentPlan, alpha: u32, budget: f64) -> Result<Option<f64>> {
    let rdp = |sigma: f64| plan.with_sigma(sigma).total_rdp(alpha);
    if rdp(SIGMA_MAX)? > budget {
        return Ok(None);
    }
    if rdp(SIGMA_MIN)? <= budget {
        return Ok(Some(SIGMA_MIN));
    }
    // Bisect in log space; `hi` always satisfies the budget.
    let (mut lo, mut hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if rdp(mid.exp())? <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < BISECTION_REL_TOL {
            return Ok(Some(hi.exp()));
        }
    }
    Err(Error::NoConvergence(format!("sigma bisection at order {alpha}")))
}

/// Calibrates per-component noise multipliers for a total (ε, δ) target.
///
/// For each order α, the post-conversion RDP budget `ε − log(1/δ)/(α−1)` is
/// split across components by allocation share and each σ is bisected
/// independently. The order minimizing the largest σ wins. If the composed
/// guarantee (minimized over the whole grid) then undershoots
/// `(1 − tolerance)·ε`, all σ's are shrunk by a common factor until it lands in
/// `[(1 − tolerance)·ε, ε]`.
pub fn calibrate_sigma(target: &CalibrationTarget, orders: &[u32], tolerance: f64) -> Result<CalibrationReport> {
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(Error::domain(format!("tolerance must lie in (0, 1), got {tolerance}")));
    }
    if orders.is_empty() {
        return Err(Error::Empty("order grid".into()));
    }
    check_orders(orders)?;
    check_delta(target.delta)?;
    let budgets = target.allocation.budgets(target.epsilon_total)?;
    let shares = budgets.map(|b| b / target.epsilon_total);
    for (plan, name) in target.plans().into_iter().zip(COMPONENT_NAMES) {
        check_rate(plan.sampling_rate)?;
        if !(plan.sensitivity > 0.0) {
            return Err(Error::domain(format!("{name}: sensitivity must be positive")));
        }
    }
    for ((plan, share), name) in target.plans().into_iter().zip(shares).zip(COMPONENT_NAMES) {
        if plan.iterations > 0 && share <= 0.0 {
            return Err(Error::Infeasible(format!("{name} runs {} steps with a zero budget", plan.iterations)));
        }
    }

    let ln_inv_delta = -target.delta.ln();
    let mut best: Option<(f64, [f64; 3], u32)> = None;
    let mut blocked: Option<&str> = None;
    for &alpha in orders {
        let remaining = target.epsilon_total - ln_inv_delta / (alpha as f64 - 1.0);
        if remaining <= 0.0 {
            continue;
        }
        let mut sigmas = [SIGMA_MIN; 3];
        let mut feasible = true;
        for (i, plan) in target.plans().into_iter().enumerate() {
            if plan.iterations == 0 {
                continue;
            }
            match bisect_sigma(plan, alpha, shares[i] * remaining)? {
                Some(s) => sigmas[i] = s,
                None => {
                    feasible = false;
                    blocked = Some(COMPONENT_NAMES[i]);
                    break;
                }
            }
        }
        if !feasible {
            continue;
        }
        let max_sigma = sigmas.iter().copied().fold(0.0, f64::max);
        if best.map_or(true, |(b, _, _)| max_sigma < b) {
            best = Some((max_sigma, sigmas, alpha));
        }
    }
    let (_, mut sigmas, _) = best.ok_or_else(|| {
        let top = orders[orders.len() - 1];
        Error::Infeasible(match blocked {
            // The subsampled bound keeps a floor as σ grows, set by γ and T.
            Some(name) => format!(
                "{name}: the subsampled bound stays above its share of epsilon {} at every order up to {top}, \
                 whatever the noise; lower its sampling rate or iteration count",
                target.epsilon_total
            ),
            None => format!(
                "epsilon {} cannot absorb log(1/delta)/(alpha-1) at any order up to {top}",
                target.epsilon_total
            ),
        })
    })?;

    let eval = |s: [f64; 3]| dpaf_total_epsilon(&target.with_sigmas(s), orders);
    let (mut achieved, mut alpha) = eval(sigmas)?;
    let floor = (1.0 - tolerance) * target.epsilon_total;
    if achieved < floor {
        // Common rescaling; `hi` keeps the achieved epsilon within the target.
        let (mut lo, mut hi) = ((SIGMA_MIN / 10.0).ln(), 0.0f64);
        let mut converged = false;
        for _ in 0..BISECTION_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            let scaled = sigmas.map(|s| s * mid.exp());
            let (eps, a) = eval(scaled)?;
            if eps <= target.epsilon_total {
                hi = mid;
                if eps >= floor {
                    sigmas = scaled;
                    achieved = eps;
                    alpha = a;
                    converged = true;
                    break;
                }
            } else {
                lo = mid;
            }
        }
        if !converged {
            return Err(Error::NoConvergence("common sigma rescaling".into()));
        }
    }

    let components = target
        .plans()
        .into_iter()
        .enumerate()
        .map(|(i, plan)| ComponentCalibration {
            name: COMPONENT_NAMES[i].to_string(),
            epsilon_budget: budgets[i],
            sigma: sigmas[i],
            iterations: plan.iterations,
            sampling_rate: plan.sampling_rate,
            sensitivity: plan.sensitivity,
        })
        .collect();
    Ok(CalibrationReport {
        components,
        alpha,
        target_epsilon: target.epsilon_total,
        achieved_epsilon: achieved,
        delta: target.delta,
    })
}

/// ℓ₂-sensitivity √m·p of SIN followed by batch aggregation over `m` maps of
/// side `p`.
pub fn agg_sensitivity(maps: usize, side: usize) -> Result<f64> {
    if maps == 0 || side == 0 {
        return Err(Error::domain(format!("maps and side must be >= 1, got m={maps}, p={side}")));
    }
    Ok((maps as f64).sqrt() * side as f64)
}

/// Aggregation sensitivity when the aggregate sits behind conv layer `layer`
/// (0 = raw image) of a halving conv stack with the given filter counts.
pub fn agg_sensitivity_at_layer(input_side: usize, channels: usize, filters: &[usize], layer: usize) -> Result<f64> {
    if layer > filters.len() {
        return Err(Error::domain(format!("layer {layer} out of range for {} conv layers", filters.len())));
    }
    if channels == 0 || input_side == 0 {
        return Err(Error::domain("input side and channels must be positive"));
    }
    let scale = 1usize << layer;
    if input_side % scale != 0 {
        return Err(Error::domain(format!("input side {input_side} not divisible by 2^{layer}")));
    }
    let maps: f64 = channels as f64 * filters[..layer].iter().map(|&k| k as f64).product::<f64>();
    Ok(maps.sqrt() * (input_side / scale) as f64)
}

/// Ratio of aggregation sensitivity behind consecutive layers: √k/2.
pub fn layer_sensitivity_ratio(filters: usize) -> f64 {
    (filters as f64).sqrt() / 2.0
}
