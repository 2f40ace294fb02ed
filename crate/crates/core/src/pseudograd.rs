//! Prediction bias, the sensitivity family f_k and pseudo-gradient assembly.
//!
//! For an example with true class y and predicted probabilities p, the
//! prediction bias is ε_j = p_j − [j = y]. Cross-entropy backpropagation
//! seeds the output layer with ε; here it is seeded with f_k(ε) instead:
//!
//! ```text
//! f_y = −|ε_y|^k
//! f_j = |ε_y|^k · ε_j^k / Σ_{i≠y} ε_i^k      (j ≠ y)
//! ```
//!
//! so Σ_j f_j = 0 and a hidden unit with identical outgoing weights receives
//! no update. k = 1 reproduces the cross-entropy gradient; k < 1 flattens
//! the influence of large biases and k > 1 amplifies it.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{softmax_in_place, Network, ParamSet};

/// Below this |ε_y| the example counts as perfectly predicted and f_k is 0.
pub const DEGENERATE_BIAS: f64 = 1e-12;

/// The `k` values examined for shallow networks, largest first.
pub const K_GRID: [f64; 7] = [4.0, 2.0, 1.0, 0.5, 0.25, 0.125, 0.0625];

/// Sensitivity exponent k, finite and strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Sensitivity(f64);

impl Sensitivity {
    pub const CROSS_ENTROPY: Sensitivity = Sensitivity(1.0);

    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() && k > 0.0 {
            Ok(Sensitivity(k))
        } else {
            Err(Error::InvalidConfig(format!(
                "sensitivity k must be finite and > 0, got {k}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// x^k for x ≥ 0. Exponents 2^n with |n| ≤ 4 use exact squarings or
    /// correctly rounded square roots instead of `powf`.
    #[inline]
    pub fn pow(self, x: f64) -> f64 {
        let k = self.0;
        if k == 1.0 {
            x
        } else if k == 2.0 {
            x * x
        } else if k == 4.0 {
            let s = x * x;
            s * s
        } else if k == 0.5 {
            x.sqrt()
        } else if k == 0.25 {
            x.sqrt().sqrt()
        } else if k == 0.125 {
            x.sqrt().sqrt().sqrt()
        } else if k == 0.0625 {
            x.sqrt().sqrt().sqrt().sqrt()
        } else {
            x.powf(k)
        }
    }
}

impl TryFrom<f64> for Sensitivity {
    type Error = Error;

    fn try_from(k: f64) -> Result<Self> {
        Sensitivity::new(k)
    }
}

impl From<Sensitivity> for f64 {
    fn from(k: Sensitivity) -> f64 {
        k.0
    }
}

/// Signed gap between predicted probabilities and the one-hot target.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector {
    eps: Vec<f64>,
    y: usize,
}

impl BiasVector {
    /// Wraps an existing bias vector, checking the label and finiteness.
    pub fn new(eps: Vec<f64>, y: usize) -> Result<Self> {
        if y >= eps.len() {
            return Err(Error::Index {
                index: y,
                len: eps.len(),
            });
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("bias vector must be finite".into()));
        }
        Ok(BiasVector { eps, y })
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn label(&self) -> usize {
        self.y
    }
}

/// ε_j = p_j − 1 for j = y, p_j otherwise.
pub fn prediction_bias(p: &[f64], y: usize) -> Result<BiasVector> {
    if y >= p.len() {
        return Err(Error::Index {
            index: y,
            len: p.len(),
        });
    }
    let mut eps = p.to_vec();
    eps[y] -= 1.0;
    BiasVector::new(eps, y)
}

/// Evaluates f_k on a bias vector.
pub fn f_k(bias: &BiasVector, k: Sensitivity) -> Vec<f64> {
    let mut out = vec![0.0; bias.eps.len()];
    sensitivity_into(&bias.eps, bias.y, k, &mut out);
    out
}

/// Writes f_k(eps) into `out`. `eps` and `out` have the same length.
///
/// Off-class entries are divided by their maximum before exponentiation;
/// the normalized ratio is scale-invariant and the raw powers would
/// underflow for tiny biases at large k.
#[inline(always)]
pub(crate) fn sensitivity_into(eps: &[f64], y: usize, k: Sensitivity, out: &mut [f64]) {
    let n = eps.len();
    let target = eps[y].abs();
    if target < DEGENERATE_BIAS {
        out.fill(0.0);
        return;
    }
    if k == Sensitivity::CROSS_ENTROPY {
        out.copy_from_slice(eps);
        return;
    }
    let mut max_off = 0.0f64;
    for (j, &e) in eps.iter().enumerate() {
        if j != y && e > max_off {
            max_off = e;
        }
    }
    if !(max_off > 0.0) {
        out.fill(0.0);
        return;
    }
    let magnitude = k.pow(target);
    let mut total = 0.0;
    for j in 0..n {
        if j == y {
            out[j] = 0.0;
        } else {
            let ratio = eps[j].max(0.0) / max_off;
            out[j] = if ratio == 1.0 { 1.0 } else { k.pow(ratio) };
            total += out[j];
        }
    }
    let scale = magnitude / total;
    for o in out.iter_mut() {
        *o *= scale;
    }
    out[y] = -magnitude;
}

/// Output-layer seeds f_k(ε) for every row of a probability matrix.
pub fn sensitivity_deltas(
    probabilities: ArrayView2<'_, f64>,
    labels: &[usize],
    k: Sensitivity,
) -> Result<Array2<f64>> {
    let (rows, classes) = probabilities.dim();
    if labels.len() != rows {
        return Err(Error::shape(format!("{rows} labels"), labels.len()));
    }
    let probabilities = probabilities.as_standard_layout();
    let flat = probabilities.as_slice().expect("standard layout");
    let mut deltas = vec![0.0; rows * classes];
    let mut eps = vec![0.0; classes];
    for ((p, out), &y) in flat
        .chunks_exact(classes)
        .zip(deltas.chunks_exact_mut(classes))
        .zip(labels)
    {
        if y >= classes {
            return Err(Error::Index {
                index: y,
                len: classes,
            });
        }
        eps.copy_from_slice(p);
        eps[y] -= 1.0;
        sensitivity_into(&eps, y, k, out);
    }
    Ok(Array2::from_shape_vec((rows, classes), deltas).expect("rows × classes"))
}

/// Pseudo-gradient of a single example.
pub fn pseudo_gradient(net: &Network, x: &[f64], y: usize, k: Sensitivity) -> Result<ParamSet> {
    let trace = net.forward(x)?;
    let bias = prediction_bias(trace.probabilities_of(0), y)?;
    let delta = f_k(&bias, k);
    let delta = ArrayView2::from_shape((1, delta.len()), &delta).expect("one row");
    net.backprop_from_delta(&trace, delta)
}

/// Mean of the per-example pseudo-gradients over a batch of rows.
pub fn minibatch_pseudo_gradient(
    net: &Network,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    k: Sensitivity,
) -> Result<ParamSet> {
    if inputs.nrows() == 0 {
        return Err(Error::InvalidInput("empty minibatch".into()));
    }
    let mut g = if net.params().layers().len() == 1 {
        linear_pseudo_gradient_sum(net, inputs, labels, k)?
    } else {
        let trace = net.forward_batch(inputs)?;
        let deltas = sensitivity_deltas(trace.probabilities.view(), labels, k)?;
        net.backprop_from_delta(&trace, deltas.view())?
    };
    g.scale(1.0 / inputs.nrows() as f64);
    Ok(g)
}

/// Summed pseudo-gradient of a network without hidden layers, one row at a
/// time and without a batch trace.
fn linear_pseudo_gradient_sum(
    net: &Network,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    k: Sensitivity,
) -> Result<ParamSet> {
    let (rows, fan_in) = inputs.dim();
    if fan_in != net.input_dim() {
        return Err(Error::shape(format!("input width {}", net.input_dim()), fan_in));
    }
    if labels.len() != rows {
        return Err(Error::shape(format!("{rows} labels"), labels.len()));
    }
    let classes = net.n_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index { index: y, len: classes });
    }
    let layer = &net.params().layers()[0];
    let weights = layer.weights.as_standard_layout();
    let w = weights.as_slice().expect("standard layout");
    let b = layer.bias.as_slice().expect("contiguous bias");
    let inputs = inputs.as_standard_layout();
    let xs = inputs.as_slice().expect("standard layout");

    let mut gw = vec![0.0; classes * fan_in];
    let mut gb = vec![0.0; classes];
    match (fan_in, classes) {
        (1, 2) => linear_kernel::<1, 2>(w, b, xs, labels, k, 1, 2, &mut gw, &mut gb),
        _ => linear_kernel::<0, 0>(w, b, xs, labels, k, fan_in, classes, &mut gw, &mut gb),
    }
    let mut grad = ParamSet::zeros_like(net.params());
    let out = &mut grad.layers_mut()[0];
    out.weights
        .as_slice_mut()
        .expect("standard layout")
        .copy_from_slice(&gw);
    out.bias.as_slice_mut().expect("contiguous bias").copy_from_slice(&gb);
    Ok(grad)
}

/// Row loop shared by every layer shape. Nonzero `F`/`C` fix the fan-in and
/// class count at compile time so the small inner loops unroll.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn linear_kernel<const F: usize, const C: usize>(
    w: &[f64],
    b: &[f64],
    xs: &[f64],
    labels: &[usize],
    k: Sensitivity,
    fan_in: usize,
    classes: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let fan_in = if F > 0 { F } else { fan_in };
    let classes = if C > 0 { C } else { classes };
    let mut z = vec![0.0; classes];
    let mut delta = vec![0.0; classes];
    for (x, &y) in xs.chunks_exact(fan_in).zip(labels) {
        for j in 0..classes {
            let mut acc = 0.0;
            for l in 0..fan_in {
                acc += x[l] * w[j * fan_in + l];
            }
            z[j] = acc + b[j];
        }
        softmax_in_place(&mut z[..classes]);
        z[y] -= 1.0;
        sensitivity_into(&z[..classes], y, k, &mut delta[..classes]);
        for j in 0..classes {
            let dj = delta[j];
            gb[j] += dj;
            for l in 0..fan_in {
                gw[j * fan_in + l] += dj * x[l];
            }
        }
    }
}

/// Points (ε_y, |f_y|) with ε_y = −m for each magnitude m of the grid.
pub fn f_curve(k: Sensitivity, magnitudes: &[f64]) -> Vec<(f64, f64)> {
    magnitudes
        .iter()
        .map(|&m| (-m, k.pow(m.abs())))
        .collect()
}

/// `i / points` for i = 1..=points.
pub fn unit_grid(points: usize) -> Vec<f64> {
    (1..=points).map(|i| i as f64 / points as f64).collect()
}

/// Writes curves as CSV with header `epsilon_y,abs_f_y,k`.
pub fn write_curves_csv<W: Write>(out: W, ks: &[Sensitivity], magnitudes: &[f64]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["epsilon_y", "abs_f_y", "k"])?;
    for &k in ks {
        for (eps, value) in f_curve(k, magnitudes) {
            writer.write_record([eps.to_string(), value.to_string(), k.get().to_string()])?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_powers_agree_with_powf() {
        for k in K_GRID {
            let sk = Sensitivity::new(k).unwrap();
            for x in [1e-300, 1e-12, 0.001, 0.3, 0.5, 0.999_999, 1.0, 7.5] {
                let fast = sk.pow(x);
                let slow = x.powf(k);
                assert!((fast - slow).abs() <= 4.0 * f64::EPSILON * slow, "k={k} x={x}");
            }
        }
        assert_eq!(Sensitivity::new(3.0).unwrap().pow(2.0), 8.0);
    }

    #[test]
    fn linear_stream_matches_batched_trace() {
        use crate::network::{init_network, Activation, InitScheme};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let net = init_network(&[3, 4], Activation::Tanh, InitScheme::Uniform { low: -1.0, high: 1.0 }, &mut rng)
            .unwrap();
        let xs = Array2::from_shape_fn((9, 3), |_| rng.random_range(-1.0..1.0));
        let ys: Vec<usize> = (0..9).map(|i| i % 4).collect();
        for k in [0.25, 1.0, 3.0] {
            let k = Sensitivity::new(k).unwrap();
            let streamed = minibatch_pseudo_gradient(&net, xs.view(), &ys, k).unwrap();
            let trace = net.forward_batch(xs.view()).unwrap();
            let deltas = sensitivity_deltas(trace.probabilities.view(), &ys, k).unwrap();
            let mut batched = net.backprop_from_delta(&trace, deltas.view()).unwrap();
            batched.scale(1.0 / 9.0);
            for (a, b) in streamed.values().zip(batched.values()) {
                assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
            }
        }
        assert!(matches!(
            minibatch_pseudo_gradient(&net, xs.view(), &[9; 9], Sensitivity::CROSS_ENTROPY),
            Err(Error::Index { .. })
        ));
    }
    use crate::network::{init_network, Activation, InitScheme};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn k(v: f64) -> Sensitivity {
        Sensitivity::new(v).unwrap()
    }

    #[test]
    fn prediction_bias_examples() {
        let b = prediction_bias(&[0.5, 0.3, 0.2], 0).unwrap();
        assert_eq!(b.eps(), &[-0.5, 0.3, 0.2]);
        let b = prediction_bias(&[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(b.eps(), &[0.0, 0.0, 0.0]);
        let b = prediction_bias(&[0.1, 0.9], 0).unwrap();
        assert_eq!(b.eps(), &[-0.9, 0.9]);
        assert!(matches!(
            prediction_bias(&[0.5, 0.5], 2),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn sensitivity_validation() {
        assert!(Sensitivity::new(0.0).is_err());
        assert!(Sensitivity::new(-1.0).is_err());
        assert!(Sensitivity::new(f64::NAN).is_err());
        assert!(Sensitivity::new(f64::INFINITY).is_err());
        assert!(serde_json::from_str::<Sensitivity>("-2.0").is_err());
        assert_eq!(serde_json::from_str::<Sensitivity>("0.5").unwrap().get(), 0.5);
    }

    #[test]
    fn f_k_identity_at_one() {
        let b = BiasVector::new(vec![-0.7, 0.1, 0.25, 0.35], 0).unwrap();
        assert_eq!(f_k(&b, k(1.0)), b.eps());
    }

    #[test]
    fn f_k_square_example() {
        let b = BiasVector::new(vec![-0.5, 0.3, 0.2], 0).unwrap();
        let f = f_k(&b, k(2.0));
        // 0.25 * 0.09 / 0.13 and 0.25 * 0.04 / 0.13
        assert_abs_diff_eq!(f[0], -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 0.25 * 0.09 / 0.13, epsilon = 1e-15);
        assert_abs_diff_eq!(f[2], 0.25 * 0.04 / 0.13, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 0.173_076_923, epsilon = 1e-9);
        assert_abs_diff_eq!(f[2], 0.076_923_077, epsilon = 1e-9);
    }

    #[test]
    fn f_k_degenerate_is_zero() {
        for kv in K_GRID {
            let b = BiasVector::new(vec![0.0; 4], 2).unwrap();
            assert_eq!(f_k(&b, k(kv)), vec![0.0; 4]);
        }
    }

    #[test]
    fn f_k_tiny_biases_do_not_underflow() {
        let b = BiasVector::new(vec![1e-80, -2e-80, 1e-80], 1).unwrap();
        // |ε_y| is below the degenerate threshold, so the guard applies.
        assert_eq!(f_k(&b, k(4.0)), vec![0.0; 3]);

        let b = BiasVector::new(vec![1e-11 - 1e-80, -1e-11, 1e-80], 1).unwrap();
        let f = f_k(&b, k(4.0));
        assert!(f.iter().all(|v| v.is_finite()));
        assert!(f[0] > 0.0 && f[2] >= 0.0);
        assert!((f[0] + f[1] + f[2]).abs() <= 1e-12 * f[1].abs());
    }

    #[test]
    fn f_k_zero_off_class_entries() {
        let b = BiasVector::new(vec![-0.4, 0.4, 0.0], 0).unwrap();
        let f = f_k(&b, k(0.5));
        assert_abs_diff_eq!(f[0], -(0.4f64.sqrt()), epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 0.4f64.sqrt(), epsilon = 1e-15);
        assert_eq!(f[2], 0.0);
    }

    fn toy_net(p0: f64) -> Network {
        // Bias b0 = logit(p0), everything else 0, so p = (p0, 1 - p0).
        let mut net = init_network(&[1, 2], Activation::Tanh, InitScheme::Zeros, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.params_mut().layers_mut()[0].bias[0] = (p0 / (1.0 - p0)).ln();
        net
    }

    #[test]
    fn pseudo_gradient_bias_components() {
        let net = toy_net(0.7);
        let g = pseudo_gradient(&net, &[0.4], 0, k(1.0)).unwrap();
        let gb = &g.layers()[0].bias;
        assert_abs_diff_eq!(gb[0], -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(gb[1], 0.3, epsilon = 1e-12);

        let g = pseudo_gradient(&net, &[0.4], 0, k(2.0)).unwrap();
        let gb = &g.layers()[0].bias;
        assert_abs_diff_eq!(gb[0], -0.09, epsilon = 1e-12);
        assert_abs_diff_eq!(gb[1], 0.09, epsilon = 1e-12);
    }

    #[test]
    fn minibatch_is_mean_of_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = init_network(&[3, 5, 4], Activation::Tanh, InitScheme::Uniform { low: -1.0, high: 1.0 }, &mut rng).unwrap();
        let xs = array![[0.1, -0.3, 0.8], [0.9, 0.2, -0.5]];
        let ys = [2, 1];
        let kk = k(0.5);

        let single = minibatch_pseudo_gradient(&net, xs.slice(ndarray::s![0..1, ..]), &ys[..1], kk).unwrap();
        let direct = pseudo_gradient(&net, &[0.1, -0.3, 0.8], 2, kk).unwrap();
        for (a, b) in single.values().zip(direct.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }

        let twins = array![[0.1, -0.3, 0.8], [0.1, -0.3, 0.8]];
        let g = minibatch_pseudo_gradient(&net, twins.view(), &[2, 2], kk).unwrap();
        for (a, b) in g.values().zip(direct.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }

        let g = minibatch_pseudo_gradient(&net, xs.view(), &ys, kk).unwrap();
        let g2 = pseudo_gradient(&net, &[0.9, 0.2, -0.5], 1, kk).unwrap();
        for ((a, b), c) in g.values().zip(direct.values()).zip(g2.values()) {
            assert_abs_diff_eq!(a, (b + c) / 2.0, epsilon = 1e-14);
        }

        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            minibatch_pseudo_gradient(&net, empty.view(), &[], kk),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn curve_examples() {
        let pts = f_curve(k(1.0), &[0.5]);
        assert_eq!(pts, vec![(-0.5, 0.5)]);
        assert_abs_diff_eq!(f_curve(k(2.0), &[0.5])[0].1, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(f_curve(k(0.5), &[0.5])[0].1, 0.707_106_781_186_547_5, epsilon = 1e-12);
    }

    #[test]
    fn curve_csv_layout() {
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &[k(2.0), k(1.0)], &[0.5, 1.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epsilon_y,abs_f_y,k");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "-0.5,0.25,2");
        assert_eq!(lines[2], "-1,1,2");
    }

    /// Random valid bias vector from a random probability vector.
    fn bias_strategy() -> impl Strategy<Value = BiasVector> {
        (2usize..10)
            .prop_flat_map(|n| (prop::collection::vec(1e-6f64..1.0, n), 0..n))
            .prop_map(|(w, y)| {
                let total: f64 = w.iter().sum();
                let p: Vec<f64> = w.iter().map(|v| v / total).collect();
                prediction_bias(&p, y).unwrap()
            })
    }

    proptest! {
        #[test]
        fn constraint_and_sign_pattern(b in bias_strategy(), kv in 0.0625f64..4.0) {
            let f = f_k(&b, k(kv));
            let y = b.label();
            let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(f.iter().sum::<f64>().abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE));
            prop_assert!(f[y] <= 0.0);
            for (j, v) in f.iter().enumerate() {
                if j != y { prop_assert!(*v >= 0.0); }
            }
            // |f_y| = |ε_y|^k
            prop_assert!((f[y].abs() - b.eps()[y].abs().powf(kv)).abs() <= 1e-12);
        }

        #[test]
        fn identity_at_k_one(b in bias_strategy()) {
            let f = f_k(&b, k(1.0));
            for (a, e) in f.iter().zip(b.eps()) {
                prop_assert!((a - e).abs() <= 1e-12);
            }
        }

        #[test]
        fn off_class_ratio_law(b in bias_strategy(), kv in 0.0625f64..4.0) {
            let f = f_k(&b, k(kv));
            let y = b.label();
            let eps = b.eps();
            for j in 0..eps.len() {
                for l in 0..eps.len() {
                    if j == y || l == y || eps[l] < 1e-3 || eps[j] < 1e-3 { continue; }
                    let expected = (eps[j] / eps[l]).powf(kv);
                    prop_assert!((f[j] / f[l] - expected).abs() <= 1e-10 * expected.max(1.0));
                }
            }
        }

        #[test]
        fn contrast_grows_with_k(a in 1e-3f64..1.0, frac in 0.01f64..0.99, k1 in 0.0625f64..4.0, dk in 0.01f64..1.0) {
            let small = a * frac;
            let c1 = (a / small).powf(k1);
            let c2 = (a / small).powf(k1 + dk);
            prop_assert!(c2 > c1);
        }
    }
}
