//! Finite-difference verification of every backward pass.
//!
//! Each check perturbs inputs and parameters one coordinate at a time and
//! compares `(L(θ+ε) − L(θ−ε)) / 2ε` with the analytic gradient, in 64-bit.
//! Layer checks use the scalar `L = ⟨r, layer(x)⟩` for a random `r`, which
//! turns the comparison into an adjoint test of the layer's backward.

use rand::Rng as _;

use super::layers::*;
use super::tensor::Tensor;
use super::unet::{init_params, UNetConfig};
use crate::error::Result;
use crate::rng::{rng_from, Rng};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor so that gradients that are zero on both sides compare
/// as equal instead of dividing by zero.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_error(a, n)).fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Central differences of a piecewise-smooth `f` that also reports whether the
/// probe stayed on the same smooth piece; coordinates whose `±eps` probes
/// leave it give `None`.
pub fn smooth_central_difference(mut f: impl FnMut(&[f64]) -> (f64, bool), x: &[f64], eps: f64) -> Vec<Option<f64>> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let (plus, same_plus) = f(&probe);
            probe[i] = orig - eps;
            let (minus, same_minus) = f(&probe);
            probe[i] = orig;
            (same_plus && same_minus).then(|| (plus - minus) / (2.0 * eps))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates left out because a probe crossed a ReLU or pooling kink,
    /// where the finite difference does not estimate the derivative.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(shape, uniform(rng, shape.iter().product())).expect("sized")
}

/// Values bounded away from zero, so no ReLU kink lies within ε.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.05 + rng.random::<f64>();
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

fn record(name: &str, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    GradCheck { name: name.to_string(), checked: analytic.len(), skipped: 0, max_rel_error: max_rel_error(analytic, numeric) }
}

fn check_conv(k: usize, shape: [usize; 4], cout: usize, rng: &mut Rng) -> Result<GradCheck> {
    let [n, cin, h, w] = shape;
    let x = tensor(rng, &shape);
    let wt = uniform(rng, k * k * cin * cout);
    let b = uniform(rng, cout);
    let r = tensor(rng, &[n, cout, h, w]);
    let kern = Kernel::new(&wt, k, cin, cout)?;
    let g = conv2d_backward(&x, &kern, &r)?;
    let fx = |xs: &[f64]| {
        let xt = Tensor::from_vec(&shape, xs.to_vec()).unwrap();
        conv2d_forward(&xt, &kern, &b).unwrap().dot(&r)
    };
    let fw = |ws: &[f64]| conv2d_forward(&x, &Kernel::new(ws, k, cin, cout).unwrap(), &b).unwrap().dot(&r);
    let fb = |bs: &[f64]| conv2d_forward(&x, &kern, bs).unwrap().dot(&r);
    let analytic: Vec<f64> = g.x.data().iter().chain(&g.w).chain(&g.b).copied().collect();
    let mut numeric = central_difference(fx, x.data(), EPSILON);
    numeric.extend(central_difference(fw, &wt, EPSILON));
    numeric.extend(central_difference(fb, &b, EPSILON));
    Ok(record(&format!("conv{k}x{k} {shape:?}->{cout}"), &analytic, &numeric))
}

fn check_tconv(shape: [usize; 4], cout: usize, rng: &mut Rng) -> Result<GradCheck> {
    let [n, cin, h, w] = shape;
    let x = tensor(rng, &shape);
    let wt = uniform(rng, 4 * cin * cout);
    let b = uniform(rng, cout);
    let r = tensor(rng, &[n, cout, 2 * h, 2 * w]);
    let kern = Kernel::new(&wt, 2, cin, cout)?;
    let g = tconv2_backward(&x, &kern, &r)?;
    let fx = |xs: &[f64]| {
        let xt = Tensor::from_vec(&shape, xs.to_vec()).unwrap();
        tconv2_forward(&xt, &kern, &b).unwrap().dot(&r)
    };
    let fw = |ws: &[f64]| tconv2_forward(&x, &Kernel::new(ws, 2, cin, cout).unwrap(), &b).unwrap().dot(&r);
    let fb = |bs: &[f64]| tconv2_forward(&x, &kern, bs).unwrap().dot(&r);
    let analytic: Vec<f64> = g.x.data().iter().chain(&g.w).chain(&g.b).copied().collect();
    let mut numeric = central_difference(fx, x.data(), EPSILON);
    numeric.extend(central_difference(fw, &wt, EPSILON));
    numeric.extend(central_difference(fb, &b, EPSILON));
    Ok(record(&format!("tconv2 {shape:?}->{cout}"), &analytic, &numeric))
}

fn check_relu(shape: [usize; 4], rng: &mut Rng) -> Result<GradCheck> {
    let x = off_zero(rng, &shape);
    let r = tensor(rng, &shape);
    let analytic = relu_backward(&x, &r)?;
    let f = |xs: &[f64]| relu(&Tensor::from_vec(&shape, xs.to_vec()).unwrap()).dot(&r);
    let numeric = central_difference(f, x.data(), EPSILON);
    Ok(record(&format!("relu {shape:?}"), analytic.data(), &numeric))
}

fn check_maxpool(shape: [usize; 4], rng: &mut Rng) -> Result<GradCheck> {
    // a random permutation of well-separated levels keeps every maximum unique
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&shape, levels)?;
    let (y, arg) = maxpool2(&x)?;
    let r = tensor(rng, y.shape());
    let analytic = maxpool2_backward(x.shape(), &arg, &r)?;
    let f = |xs: &[f64]| maxpool2(&Tensor::from_vec(&shape, xs.to_vec()).unwrap()).unwrap().0.dot(&r);
    let numeric = central_difference(f, x.data(), EPSILON);
    Ok(record(&format!("maxpool2 {shape:?}"), analytic.data(), &numeric))
}

fn check_concat(a_shape: [usize; 4], cb: usize, rng: &mut Rng) -> Result<GradCheck> {
    let [n, ca, h, w] = a_shape;
    let a = tensor(rng, &a_shape);
    let b = tensor(rng, &[n, cb, h, w]);
    let r = tensor(rng, &[n, ca + cb, h, w]);
    let (ga, gb) = split_channels(&r, ca)?;
    let fa = |xs: &[f64]| concat_channels(&Tensor::from_vec(&a_shape, xs.to_vec()).unwrap(), &b).unwrap().dot(&r);
    let fb = |xs: &[f64]| concat_channels(&a, &Tensor::from_vec(b.shape(), xs.to_vec()).unwrap()).unwrap().dot(&r);
    let analytic: Vec<f64> = ga.data().iter().chain(gb.data()).copied().collect();
    let mut numeric = central_difference(fa, a.data(), EPSILON);
    numeric.extend(central_difference(fb, b.data(), EPSILON));
    Ok(record(&format!("concat {a_shape:?}+{cb}"), &analytic, &numeric))
}

fn check_dropout_off(shape: [usize; 4], rng: &mut Rng) -> Result<GradCheck> {
    let x = tensor(rng, &shape);
    let r = tensor(rng, &shape);
    let (_, mask) = dropout(&x, 0.5, &mut rng_from(0), false)?;
    let analytic = dropout_backward(mask.as_deref(), &r);
    let f = |xs: &[f64]| {
        let xt = Tensor::from_vec(&shape, xs.to_vec()).unwrap();
        dropout(&xt, 0.5, &mut rng_from(0), false).unwrap().0.dot(&r)
    };
    let numeric = central_difference(f, x.data(), EPSILON);
    Ok(record(&format!("dropout(inference) {shape:?}"), analytic.data(), &numeric))
}

fn check_softmax_ce(shape: [usize; 4], rng: &mut Rng) -> Result<GradCheck> {
    let [n, c, h, w] = shape;
    let logits = tensor(rng, &shape).scale(3.0);
    let labels: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..c) as u8).collect();
    let (_, grad) = softmax_ce(&logits, &labels)?;
    let f = |xs: &[f64]| softmax_ce(&Tensor::from_vec(&shape, xs.to_vec()).unwrap(), &labels).unwrap().0;
    let numeric = central_difference(f, logits.data(), EPSILON);
    Ok(record(&format!("softmax_ce {shape:?}"), grad.data(), &numeric))
}

/// Whole-network check: softmax cross-entropy of the U-Net output against
/// random labels, differentiated with respect to every parameter and every
/// input value.
pub fn check_unet(config: &UNetConfig, input_shape: [usize; 4], seed: u64) -> Result<GradCheck> {
    let mut rng = rng_from(seed);
    let mut model = init_params::<f64>(config, seed)?;
    // non-zero biases exercise the bias paths
    for spec in model.layers.clone() {
        for b in &mut model.params[spec.bias_range()] {
            *b = 0.1 * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    let x = tensor(&mut rng, &input_shape);
    let [n, _, h, w] = input_shape;
    let labels: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..config.n_classes) as u8).collect();
    let (logits, trace) = model.forward(&x, false, &mut rng_from(0))?;
    let (_, grad_logits) = softmax_ce(&logits, &labels)?;
    let (grads, grad_x) = model.backward_with_input(&trace, &grad_logits)?;

    let base_pattern = trace.activation_pattern();
    let loss_at = |params: &[f64], input: &Tensor<f64>| {
        let mut m = model.clone();
        m.params.copy_from_slice(params);
        let (logits, t) = m.forward(input, false, &mut rng_from(0)).unwrap();
        (softmax_ce(&logits, &labels).unwrap().0, t.activation_pattern() == base_pattern)
    };
    let mut numeric = smooth_central_difference(|p| loss_at(p, &x), &model.params, EPSILON);
    numeric.extend(smooth_central_difference(
        |xs| loss_at(&model.params, &Tensor::from_vec(&input_shape, xs.to_vec()).unwrap()),
        x.data(),
        EPSILON,
    ));
    let all: Vec<f64> = grads.iter().chain(grad_x.data()).copied().collect();
    let (analytic, numeric): (Vec<f64>, Vec<f64>) =
        all.iter().zip(&numeric).filter_map(|(&a, n)| n.map(|n| (a, n))).unzip();
    let skipped = all.len() - analytic.len();
    Ok(GradCheck {
        skipped,
        ..record(&format!("unet depth={} base={} {input_shape:?}", config.depth, config.base_filters), &analytic, &numeric)
    })
}
/// The full suite: every layer kernel plus a depth-1, base-4 U-Net on a
/// 1×3×8×8 input.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = rng_from(seed);
    let rng = &mut rng;
    Ok(vec![
        check_conv(3, [1, 2, 4, 4], 3, rng)?,
        check_conv(3, [2, 3, 5, 3], 2, rng)?,
        check_conv(1, [1, 4, 3, 3], 7, rng)?,
        check_relu([1, 3, 4, 4], rng)?,
        check_maxpool([1, 1, 4, 4], rng)?,
        check_maxpool([2, 2, 4, 6], rng)?,
        check_tconv([1, 3, 3, 2], 2, rng)?,
        check_concat([1, 2, 3, 3], 3, rng)?,
        check_dropout_off([1, 2, 3, 3], rng)?,
        check_softmax_ce([1, 7, 2, 2], rng)?,
        check_unet(&UNetConfig { depth: 1, base_filters: 4, ..UNetConfig::default() }, [1, 3, 8, 8], seed)?,
    ])
}
