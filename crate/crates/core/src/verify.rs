//! Numerical checks of the pseudo-gradient's defining properties.
//!
//! - k = 1 reproduces the cross-entropy gradient (finite differences).
//! - Σ_j f_j = 0 for random bias vectors and exponents.
//! - For k ≠ 1 the pseudo-gradient field has asymmetric mixed partials, so
//!   it is not the gradient of any cost.
//! - The expected cross-entropy of the threshold distribution is minimized
//!   away from threshold 0.
//! - A hidden unit with identical outgoing weights receives no update.

use ndarray::{Array2, ArrayView2};
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{init_network, Activation, InitScheme, Network, ParamSet};
use crate::pseudograd::{f_k, prediction_bias, pseudo_gradient, BiasVector, Sensitivity};
use crate::seed::rng_for;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RELATIVE_TOLERANCE: f64 = 1e-4;
pub const FD_ABSOLUTE_FLOOR: f64 = 1e-8;
pub const CONSTRAINT_TOLERANCE: f64 = 1e-12;
/// Asymmetry below this is finite-difference noise.
pub const SYMMETRY_NOISE: f64 = 1e-6;
pub const STATIONARITY_TOLERANCE: f64 = 1e-12;

/// Finite-difference comparison of an analytic gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub worst_param: String,
    pub step: f64,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.max_relative_error <= FD_RELATIVE_TOLERANCE
    }
}

fn cross_entropy_at(net: &Network, x: &[f64], y: usize) -> Result<f64> {
    let trace = net.forward(x)?;
    Ok(-trace.probabilities_of(0)[y].max(1e-300).ln())
}

/// Compares `analytic(net, x, y)` with central differences of −log p_y.
///
/// An entry counts as matching when its absolute error is within
/// [`FD_ABSOLUTE_FLOOR`]; otherwise its relative error enters the report.
pub fn check_gradient_with<F>(net: &Network, x: &[f64], y: usize, analytic: F) -> Result<FdReport>
where
    F: Fn(&Network, &[f64], usize) -> Result<ParamSet>,
{
    let g = analytic(net, x, y)?;
    net.params().check_congruent(&g)?;
    let mut probe = net.clone();
    let mut report = FdReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst_param: String::new(),
        step: FD_STEP,
    };
    for id in net.params().ids() {
        let original = net.params().get(id);
        *probe.params_mut().get_mut(id) = original + FD_STEP;
        let up = cross_entropy_at(&probe, x, y)?;
        *probe.params_mut().get_mut(id) = original - FD_STEP;
        let down = cross_entropy_at(&probe, x, y)?;
        *probe.params_mut().get_mut(id) = original;

        let numeric = (up - down) / (2.0 * FD_STEP);
        let exact = g.get(id);
        let abs = (numeric - exact).abs();
        report.max_absolute_error = report.max_absolute_error.max(abs);
        if abs > FD_ABSOLUTE_FLOOR {
            let rel = abs / numeric.abs().max(exact.abs());
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst_param = id.to_string();
            }
        }
    }
    Ok(report)
}

/// Pseudo-gradient at k = 1 against finite differences of the loss.
pub fn check_k1_gradient(net: &Network, x: &[f64], y: usize) -> Result<FdReport> {
    check_gradient_with(net, x, y, |n, x, y| {
        pseudo_gradient(n, x, y, Sensitivity::CROSS_ENTROPY)
    })
}

/// Cross-entropy gradient by backpropagating the prediction bias ε.
pub fn cross_entropy_gradient(net: &Network, x: &[f64], y: usize) -> Result<ParamSet> {
    let trace = net.forward(x)?;
    let bias = prediction_bias(trace.probabilities_of(0), y)?;
    let delta = ArrayView2::from_shape((1, bias.eps().len()), bias.eps()).expect("one row");
    net.backprop_from_delta(&trace, delta)
}

/// Random network for derivative checks: `[input, hidden..., classes]`
/// with weights and biases drawn from U(−scale, scale).
pub fn random_network<R: Rng + ?Sized>(
    sizes: &[usize],
    activation: Activation,
    scale: f64,
    rng: &mut R,
) -> Result<Network> {
    let mut net = init_network(
        sizes,
        activation,
        InitScheme::Uniform {
            low: -scale,
            high: scale,
        },
        rng,
    )?;
    let dist = Uniform::new(-scale, scale).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for layer in net.params_mut().layers_mut() {
        layer.bias.iter_mut().for_each(|b| *b = dist.sample(rng));
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub samples: usize,
    pub failures: usize,
    /// Largest |Σ_j f_j| / max_j |f_j| seen.
    pub worst_ratio: f64,
    pub worst_k: f64,
    /// Samples at k = 1 where f differed from ε.
    pub identity_failures: usize,
}

impl ConstraintReport {
    pub fn passes(&self) -> bool {
        self.failures == 0 && self.identity_failures == 0
    }
}

/// Random probability vector with 2..=10 classes (flat Dirichlet).
fn random_probabilities<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let n = rng.random_range(2..=10);
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| d / total).collect()
}

/// Samples random bias vectors and log-uniform k in `[k_low, k_high]`, and
/// checks |Σ_j f_j| ≤ 1e-12 · max_j |f_j| for each.
pub fn check_constraint_suite<R: Rng + ?Sized>(
    n_samples: usize,
    k_low: f64,
    k_high: f64,
    rng: &mut R,
) -> Result<ConstraintReport> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    Sensitivity::new(k_low)?;
    Sensitivity::new(k_high)?;
    if k_low > k_high {
        return Err(Error::InvalidConfig(format!("empty k range [{k_low}, {k_high}]")));
    }
    let (ln_lo, ln_hi) = (k_low.ln(), k_high.ln());
    let mut report = ConstraintReport {
        samples: n_samples,
        failures: 0,
        worst_ratio: 0.0,
        worst_k: k_low,
        identity_failures: 0,
    };
    for _ in 0..n_samples {
        let p = random_probabilities(rng);
        let y = rng.random_range(0..p.len());
        let k = if k_low == k_high {
            k_low
        } else {
            rng.random_range(ln_lo..=ln_hi).exp()
        };
        let bias = prediction_bias(&p, y)?;
        let f = f_k(&bias, Sensitivity::new(k)?);
        let (ok, ratio) = constraint_holds(&f);
        if !ok {
            report.failures += 1;
        }
        if ratio > report.worst_ratio {
            report.worst_ratio = ratio;
            report.worst_k = k;
        }
        if k == 1.0
            && f.iter()
                .zip(bias.eps())
                .any(|(a, e)| (a - e).abs() > CONSTRAINT_TOLERANCE)
        {
            report.identity_failures += 1;
        }
    }
    Ok(report)
}

/// Whether |Σ f| ≤ 1e-12 · max|f|, and the ratio itself.
pub fn constraint_holds(f: &[f64]) -> (bool, f64) {
    let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sum: f64 = f.iter().sum();
    if scale == 0.0 {
        return (sum == 0.0, 0.0);
    }
    let ratio = sum.abs() / scale;
    (ratio <= CONSTRAINT_TOLERANCE, ratio)
}

/// Cross partials of the pseudo-gradient field at two softmax weights.
///
/// With y the first class, θ1 is the weight from hidden unit 0 into
/// output 0 and θ2 the weight from hidden unit 0 into output 1. A cost
/// whose gradient is g would force ∂g(θ1)/∂θ2 = ∂g(θ2)/∂θ1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedPartialReport {
    pub k: f64,
    /// ∂g(θ1)/∂θ2.
    pub d_theta1_d_theta2: f64,
    /// ∂g(θ2)/∂θ1.
    pub d_theta2_d_theta1: f64,
    pub gap: f64,
    /// k·h²·p1·(1−p1)^(k−1)·|p2 − q(1−p1)|, q = p2^k / (p2^k + p3^k).
    pub predicted_gap: f64,
    pub probabilities: [f64; 3],
    pub hidden_activation: f64,
    /// p2^(k−1)(1−p1) / (p2^k + p3^k); equals 1 exactly when symmetric.
    pub condition_ratio: f64,
}

impl MixedPartialReport {
    pub fn condition_holds(&self) -> bool {
        (self.condition_ratio - 1.0).abs() <= 1e-9
    }

    pub fn is_symmetric(&self) -> bool {
        self.gap <= SYMMETRY_NOISE
    }
}

/// About 4.5% of draws are generic.
const MIXED_PARTIAL_ATTEMPTS: u64 = 2000;

/// Builds a generic 3-class, one-hidden-layer network and measures the
/// asymmetry of the pseudo-gradient's mixed partials by central
/// differences of g.
///
/// Generic means every p_j ∈ [0.15, 0.7], |p2 − p3| ≥ 0.2 and |h| ≥ 0.6 for
/// the hidden unit feeding θ1 and θ2. By the closed form, these bounds
/// keep the gap above 1.4e-3 at k = 2 and k = 0.5.
pub fn check_mixed_partials(k: f64, seed: u64) -> Result<MixedPartialReport> {
    let k = Sensitivity::new(k)?;
    for attempt in 0..MIXED_PARTIAL_ATTEMPTS {
        let mut rng = rng_for(seed, &[attempt]);
        let net = random_network(&[3, 4, 3], Activation::Tanh, 1.5, &mut rng)?;
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let trace = net.forward(&x)?;
        let p = trace.probabilities_of(0);
        let h = trace.activations[0][[0, 0]];
        let generic = p.iter().all(|&v| (0.15..=0.7).contains(&v))
            && (p[1] - p[2]).abs() >= 0.2
            && h.abs() >= 0.6;
        if !generic {
            continue;
        }
        return mixed_partials_at(&net, &x, k, [p[0], p[1], p[2]], h);
    }
    Err(Error::Setup(format!(
        "no generic network after {MIXED_PARTIAL_ATTEMPTS} reseeds"
    )))
}

fn mixed_partials_at(
    net: &Network,
    x: &[f64],
    k: Sensitivity,
    p: [f64; 3],
    h: f64,
) -> Result<MixedPartialReport> {
    let y = 0;
    let last = net.params().layers().len() - 1;
    let theta1 = crate::network::ParamId::Weight { layer: last, row: 0, col: 0 };
    let theta2 = crate::network::ParamId::Weight { layer: last, row: 1, col: 0 };

    let derivative = |of: crate::network::ParamId, wrt: crate::network::ParamId| -> Result<f64> {
        let mut probe = net.clone();
        let base = net.params().get(wrt);
        *probe.params_mut().get_mut(wrt) = base + FD_STEP;
        let up = pseudo_gradient(&probe, x, y, k)?.get(of);
        *probe.params_mut().get_mut(wrt) = base - FD_STEP;
        let down = pseudo_gradient(&probe, x, y, k)?.get(of);
        Ok((up - down) / (2.0 * FD_STEP))
    };
    let d12 = derivative(theta1, theta2)?;
    let d21 = derivative(theta2, theta1)?;

    let kv = k.get();
    let [p1, p2, p3] = p;
    let denom = p2.powf(kv) + p3.powf(kv);
    let q = p2.powf(kv) / denom;
    let predicted_gap = kv * h * h * p1 * (1.0 - p1).powf(kv - 1.0) * (p2 - q * (1.0 - p1)).abs();
    let condition_ratio = p2.powf(kv - 1.0) * (1.0 - p1) / denom;

    Ok(MixedPartialReport {
        k: kv,
        d_theta1_d_theta2: d12,
        d_theta2_d_theta1: d21,
        gap: (d12 - d21).abs(),
        predicted_gap,
        probabilities: p,
        hidden_activation: h,
        condition_ratio,
    })
}

/// Minimizer of the expected cross-entropy of the threshold distribution
/// for the 1-input, 2-class linear network, parameterized by the logit
/// difference z_1 − z_0 = w·x + b.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyCeOptimum {
    pub w: f64,
    pub b: f64,
    /// −b/w, matching [`crate::experiment::decision_threshold`].
    pub threshold: f64,
    pub cross_entropy: f64,
    pub iterations: usize,
}

/// log(1 + e^u) without overflow.
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Composite Simpson rule on [a, b] with `points` nodes (odd, ≥ 3).
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, points: usize) -> f64 {
    let points = if points.is_multiple_of(2) { points + 1 } else { points }.max(3);
    let intervals = points - 1;
    let h = (b - a) / intervals as f64;
    let mut sum = f(a) + f(b);
    for i in 1..intervals {
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += weight * f(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// Expected cross-entropy, gradient and Hessian in (w, b) over the
/// threshold distribution: x ~ U[−1, 1], class 1 exactly on [0, α].
///
/// CE = ½ (∫_{−1}^0 sp(u) + ∫_0^α sp(−u) + ∫_α^1 sp(u)) dx with u = wx + b
/// and sp the softplus.
pub fn toy_expected_ce(w: f64, b: f64, alpha: f64, points: usize) -> (f64, [f64; 2]) {
    let (ce, grad, _) = toy_expected_ce_with_hessian(w, b, alpha, points);
    (ce, grad)
}

fn toy_expected_ce_with_hessian(
    w: f64,
    b: f64,
    alpha: f64,
    points: usize,
) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    // Per x: loss, dloss/du and d²loss/du² for either label.
    let terms = |x: f64, positive: bool| -> [f64; 6] {
        let u = w * x + b;
        let (loss, slope) = if positive {
            (softplus(-u), -logistic(-u))
        } else {
            (softplus(u), logistic(u))
        };
        let s = logistic(u);
        let curve = s * (1.0 - s);
        [loss, slope * x, slope, curve * x * x, curve * x, curve]
    };
    let mut acc = [0.0; 6];
    for (lo, hi, positive) in [(-1.0, 0.0, false), (0.0, alpha, true), (alpha, 1.0, false)] {
        for (i, a) in acc.iter_mut().enumerate() {
            *a += 0.5 * simpson(|x| terms(x, positive)[i], lo, hi, points);
        }
    }
    (acc[0], [acc[1], acc[2]], [[acc[3], acc[4]], [acc[4], acc[5]]])
}

const CE_STARTS: [(f64, f64); 4] = [(1.0, 0.0), (5.0, -0.5), (0.1, 0.1), (10.0, 0.0)];
const CE_MAX_ITERATIONS: usize = 500;
const CE_GRADIENT_TOLERANCE: f64 = 1e-8;

/// Minimizes the expected toy cross-entropy from several starts and
/// returns the best minimizer.
///
/// Each start takes damped Newton steps, falling back to the negative
/// gradient when the Newton direction is not a descent direction, with
/// Armijo backtracking on both.
pub fn toy_ce_threshold(alpha: f64, quadrature_points: usize) -> Result<ToyCeOptimum> {
    if !(alpha > 0.5 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0.5, 1), got {alpha}"
        )));
    }
    let mut best: Option<ToyCeOptimum> = None;
    for &(w0, b0) in &CE_STARTS {
        let Some(found) = descend(w0, b0, alpha, quadrature_points) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| found.cross_entropy < b.cross_entropy) {
            best = Some(found);
        }
    }
    let best = best.ok_or_else(|| {
        Error::Convergence(format!("no restart converged within {CE_MAX_ITERATIONS} steps"))
    })?;
    if best.w == 0.0 {
        return Err(Error::Convergence("minimizer is a constant classifier".into()));
    }
    Ok(best)
}

fn descend(mut w: f64, mut b: f64, alpha: f64, points: usize) -> Option<ToyCeOptimum> {
    let (mut ce, mut grad, mut hess) = toy_expected_ce_with_hessian(w, b, alpha, points);
    for iteration in 0..CE_MAX_ITERATIONS {
        let norm2 = grad[0] * grad[0] + grad[1] * grad[1];
        if norm2.sqrt() <= CE_GRADIENT_TOLERANCE {
            return Some(ToyCeOptimum {
                w,
                b,
                threshold: -b / w,
                cross_entropy: ce,
                iterations: iteration,
            });
        }
        let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
        let mut dir = [
            -(hess[1][1] * grad[0] - hess[0][1] * grad[1]) / det,
            -(hess[0][0] * grad[1] - hess[1][0] * grad[0]) / det,
        ];
        let mut slope = dir[0] * grad[0] + dir[1] * grad[1];
        if !(slope < 0.0) || !dir.iter().all(|d| d.is_finite()) {
            dir = [-grad[0], -grad[1]];
            slope = -norm2;
        }
        let mut step = 1.0;
        loop {
            let (nw, nb) = (w + step * dir[0], b + step * dir[1]);
            let (nce, ngrad, nhess) = toy_expected_ce_with_hessian(nw, nb, alpha, points);
            if nce <= ce + 1e-4 * step * slope {
                if nw == w && nb == b {
                    return None;
                }
                w = nw;
                b = nb;
                ce = nce;
                grad = ngrad;
                hess = nhess;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return None;
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityReport {
    pub k: f64,
    pub activation: Activation,
    /// Largest |g| over the input weights and bias of the equal-weight unit.
    pub max_abs: f64,
    /// Same quantity before the outgoing weights were equalized.
    pub control_max_abs: f64,
}

impl StationarityReport {
    pub fn passes(&self) -> bool {
        self.max_abs <= STATIONARITY_TOLERANCE
    }
}

/// Equalizes all softmax weights out of hidden unit 0 and measures the
/// pseudo-gradient of that unit's incoming parameters on random examples.
pub fn check_equal_weight_stationarity(
    k: f64,
    activation: Activation,
    seed: u64,
) -> Result<StationarityReport> {
    let k = Sensitivity::new(k)?;
    let mut rng = rng_for(seed, &[]);
    let mut net = random_network(&[4, 5, 4], activation, 1.0, &mut rng)?;
    // Keeps unit 0 mostly in the active region of relu.
    net.params_mut().layers_mut()[0].bias[0] = 1.5;
    let examples: Vec<(Vec<f64>, usize)> = (0..10)
        .map(|_| {
            let x = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            (x, rng.random_range(0..4))
        })
        .collect();

    let unit_max = |net: &Network| -> Result<f64> {
        let mut m = 0.0f64;
        for (x, y) in &examples {
            let g = pseudo_gradient(net, x, *y, k)?;
            let first = &g.layers()[0];
            m = first.weights.row(0).iter().fold(m, |m, v| m.max(v.abs()));
            m = m.max(first.bias[0].abs());
        }
        Ok(m)
    };

    let control_max_abs = unit_max(&net)?;
    let common = 0.7;
    let classes = net.n_classes();
    let out = &mut net.params_mut().layers_mut()[1].weights;
    for j in 0..classes {
        out[[j, 0]] = common;
    }
    let max_abs = unit_max(&net)?;
    Ok(StationarityReport {
        k: k.get(),
        activation,
        max_abs,
        control_max_abs,
    })
}

/// One line of verification output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub check: String,
    pub k: Option<f64>,
    pub metric: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub ks: Vec<f64>,
    pub seed: u64,
    pub gradient_networks: usize,
    pub constraint_samples: usize,
    /// Replaces backpropagation with a deliberately wrong variant so the
    /// gradient check must fail.
    pub inject_mutant: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            ks: crate::pseudograd::K_GRID.to_vec(),
            seed: 0,
            gradient_networks: 20,
            constraint_samples: 100_000,
            inject_mutant: false,
        }
    }
}

/// Backprop with the hidden-layer sensitivities scaled by 1.01.
pub fn mutant_gradient(net: &Network, x: &[f64], y: usize) -> Result<ParamSet> {
    let mut g = cross_entropy_gradient(net, x, y)?;
    let hidden = g.layers().len() - 1;
    for layer in &mut g.layers_mut()[..hidden] {
        layer.weights.mapv_inplace(|v| v * 1.01);
        layer.bias.mapv_inplace(|v| v * 1.01);
    }
    Ok(g)
}

/// Runs every check across `cfg.ks`.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<Verdict>> {
    let mut verdicts = Vec::new();
    let ks: Vec<f64> = cfg
        .ks
        .iter()
        .map(|&k| Sensitivity::new(k).map(Sensitivity::get))
        .collect::<Result<_>>()?;
    if ks.is_empty() {
        return Err(Error::InvalidConfig("empty k sweep".into()));
    }

    // Gradient equivalence at k = 1.
    let mut worst = 0.0f64;
    for i in 0..cfg.gradient_networks {
        let mut rng = rng_for(cfg.seed, &[0xFD, i as u64]);
        let net = random_network(&[4, 5, 3], Activation::Tanh, 1.0, &mut rng)?;
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = rng.random_range(0..3);
        let report = if cfg.inject_mutant {
            check_gradient_with(&net, &x, y, mutant_gradient)?
        } else {
            check_k1_gradient(&net, &x, y)?
        };
        worst = worst.max(report.max_relative_error);
    }
    verdicts.push(Verdict {
        check: "k1_gradient_finite_difference".into(),
        k: Some(1.0),
        metric: "max_relative_error",
        value: worst,
        tolerance: FD_RELATIVE_TOLERANCE,
        pass: worst <= FD_RELATIVE_TOLERANCE,
    });

    let k_low = ks.iter().copied().fold(f64::INFINITY, f64::min);
    let k_high = ks.iter().copied().fold(0.0, f64::max);
    let constraint = check_constraint_suite(
        cfg.constraint_samples,
        k_low,
        k_high,
        &mut rng_for(cfg.seed, &[0xC0]),
    )?;
    verdicts.push(Verdict {
        check: "constraint_sum_zero".into(),
        k: None,
        metric: "worst_ratio",
        value: constraint.worst_ratio,
        tolerance: CONSTRAINT_TOLERANCE,
        pass: constraint.passes(),
    });

    for &k in &ks {
        let report = check_mixed_partials(k, cfg.seed)?;
        let agrees = (report.gap - report.predicted_gap).abs()
            <= SYMMETRY_NOISE + 1e-3 * report.predicted_gap;
        let consistent = report.is_symmetric() == report.condition_holds();
        let expected = report.is_symmetric() == (k == 1.0);
        verdicts.push(Verdict {
            check: "mixed_partials_asymmetry".into(),
            k: Some(k),
            metric: "gap",
            value: report.gap,
            tolerance: SYMMETRY_NOISE,
            pass: agrees && consistent && expected,
        });
    }

    let optimum = toy_ce_threshold(0.95, 2001)?;
    verdicts.push(Verdict {
        check: "toy_ce_threshold_positive".into(),
        k: None,
        metric: "threshold",
        value: optimum.threshold,
        tolerance: 0.0,
        pass: optimum.threshold > 0.0,
    });

    for &k in &ks {
        let mut worst = 0.0f64;
        for activation in Activation::ALL {
            let report = check_equal_weight_stationarity(k, activation, cfg.seed)?;
            worst = worst.max(report.max_abs);
        }
        verdicts.push(Verdict {
            check: "equal_weight_stationarity".into(),
            k: Some(k),
            metric: "max_abs",
            value: worst,
            tolerance: STATIONARITY_TOLERANCE,
            pass: worst <= STATIONARITY_TOLERANCE,
        });
    }
    Ok(verdicts)
}

/// Builds a one-row matrix view helper for callers assembling deltas.
pub fn row_matrix(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("one row")
}

/// f_k evaluated on an explicit probability vector.
pub fn f_k_of_probabilities(p: &[f64], y: usize, k: f64) -> Result<Vec<f64>> {
    let bias: BiasVector = prediction_bias(p, y)?;
    Ok(f_k(&bias, Sensitivity::new(k)?))
}
