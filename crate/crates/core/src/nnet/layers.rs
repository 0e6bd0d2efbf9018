//! Layer kernels. Each forward has a matching backward that returns the
//! exact adjoint of the forward map.

use rand::Rng as _;

use super::tensor::{gemm, Real, Strides, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Kernel of a `k`×`k` convolution stored as `[k, k, cin, cout]`.
#[derive(Debug, Clone, Copy)]
pub struct Kernel<'a, T> {
    pub data: &'a [T],
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
}

impl<'a, T: Real> Kernel<'a, T> {
    pub fn new(data: &'a [T], size: usize, cin: usize, cout: usize) -> Result<Self> {
        if data.len() != size * size * cin * cout {
            return Err(Error::shape(format!(
                "{size}x{size}x{cin}x{cout} kernel needs {} weights, got {}",
                size * size * cin * cout,
                data.len()
            )));
        }
        Ok(Self { data, size, cin, cout })
    }

    pub fn from_tensor(t: &'a Tensor<T>) -> Result<Self> {
        match t.shape()[..] {
            [kh, kw, cin, cout] if kh == kw => Self::new(t.data(), kh, cin, cout),
            _ => Err(Error::shape(format!("kernel tensor must be [k, k, cin, cout], got {:?}", t.shape()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

/// Unfolds one image `[cin, h, w]` into `[k*k*cin, h*w]` columns with zero
/// same-padding.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for di in 0..k {
        for dj in 0..k {
            for ci in 0..cin {
                let row = &mut cols[((di * k + dj) * cin + ci) * hw..][..hw];
                let plane = &x[ci * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + di as isize - pad as isize;
                    let dst = &mut row[i * w..][..w];
                    if si < 0 || si >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let sj = j as isize + dj as isize - pad as isize;
                        *d = if sj < 0 || sj >= w as isize { T::zero() } else { src[sj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for di in 0..k {
        for dj in 0..k {
            for ci in 0..cin {
                let row = &cols[((di * k + dj) * cin + ci) * hw..][..hw];
                let plane = &mut x[ci * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + di as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &row[i * w..][..w];
                    let dst = &mut plane[si as usize * w..][..w];
                    for (j, &g) in src.iter().enumerate() {
                        let sj = j as isize + dj as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            dst[sj as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, w: &Kernel<'_, T>, b_len: usize) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4()?;
    if c != w.cin {
        return Err(Error::shape(format!("input has {c} channels, kernel expects {}", w.cin)));
    }
    if w.size % 2 == 0 {
        return Err(Error::shape("same-padded convolution needs an odd kernel size"));
    }
    if b_len != w.cout {
        return Err(Error::shape(format!("bias has {b_len} entries, kernel has {} outputs", w.cout)));
    }
    Ok((n, c, h, wd))
}

/// Stride-1 cross-correlation with zero same-padding:
/// `out[n,co,i,j] = b[co] + Σ x[n,ci,i+di-p,j+dj-p]·w[di,dj,ci,co]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Kernel<'_, T>, b: &[T]) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = check_conv(x, w, b.len())?;
    let (k, cout, hw) = (w.size, w.cout, h * wd);
    let rows = k * k * cin;
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    let mut cols = vec![T::zero(); rows * hw];
    for s in 0..n {
        let xs = &x.data()[s * cin * hw..][..cin * hw];
        let os = &mut out.data_mut()[s * cout * hw..][..cout * hw];
        let src: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, wd, k, &mut cols);
            &cols
        };
        for (co, plane) in os.chunks_exact_mut(hw).enumerate() {
            plane.fill(b[co]);
        }
        // out (cout×hw) += wᵀ (cout×rows) · cols (rows×hw)
        gemm(cout, rows, hw, w.data, Strides(1, cout), src, Strides(hw, 1), T::one(), os, Strides(hw, 1));
    }
    Ok(out)
}

pub fn conv2d_backward<T: Real>(x: &Tensor<T>, w: &Kernel<'_, T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (n, cin, h, wd) = check_conv(x, w, w.cout)?;
    let (k, cout, hw) = (w.size, w.cout, h * wd);
    if grad_out.shape() != [n, cout, h, wd] {
        return Err(Error::shape(format!("grad_out shape {:?} != [{n}, {cout}, {h}, {wd}]", grad_out.shape())));
    }
    let rows = k * k * cin;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = vec![T::zero(); rows * cout];
    let mut gb = vec![T::zero(); cout];
    let mut cols = vec![T::zero(); rows * hw];
    let mut gcols = vec![T::zero(); rows * hw];
    for s in 0..n {
        let xs = &x.data()[s * cin * hw..][..cin * hw];
        let gs = &grad_out.data()[s * cout * hw..][..cout * hw];
        for (co, plane) in gs.chunks_exact(hw).enumerate() {
            gb[co] += plane.iter().copied().sum::<T>();
        }
        let src: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, wd, k, &mut cols);
            &cols
        };
        // gw (rows×cout) += cols (rows×hw) · gᵀ (hw×cout)
        gemm(rows, hw, cout, src, Strides(hw, 1), gs, Strides(1, hw), T::one(), &mut gw, Strides(cout, 1));
        let gxs = &mut gx.data_mut()[s * cin * hw..][..cin * hw];
        if k == 1 {
            gemm(rows, cout, hw, w.data, Strides(cout, 1), gs, Strides(hw, 1), T::zero(), gxs, Strides(hw, 1));
        } else {
            // gcols (rows×hw) = w (rows×cout) · g (cout×hw)
            gemm(rows, cout, hw, w.data, Strides(cout, 1), gs, Strides(hw, 1), T::zero(), &mut gcols, Strides(hw, 1));
            col2im(&gcols, cin, h, wd, k, gxs);
        }
    }
    Ok(ConvGrads { x: gx, w: gw, b: gb })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where `x > 0`; the derivative at exactly zero is 0.
/// `x` may be either the pre-activation or the ReLU output, which are
/// positive at the same positions.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward shapes differ"));
    }
    let data = x.data().iter().zip(grad_out.data()).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data)
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index of its maximum (first in scan order
/// on ties).
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for idx in [best + 1, best + w, best + w + 1] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                od[o] = xd[best];
                arg.push(best);
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool2_backward: argmax and grad_out differ in length"));
    }
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    Ok(gx)
}

fn check_tconv<T: Real>(x: &Tensor<T>, w: &Kernel<'_, T>, b_len: usize) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    if w.size != 2 || dims.1 != w.cin || b_len != w.cout {
        return Err(Error::shape(format!(
            "tconv2 needs a 2x2x{}x{} kernel and {} biases, got {}x{}x{}x{} and {b_len}",
            dims.1, w.cout, w.cout, w.size, w.size, w.cin, w.cout
        )));
    }
    Ok(dims)
}

/// Stride-2 transposed convolution with a 2×2 kernel. Each input pixel
/// scatters into its own 2×2 output block:
/// `out[co, 2i+di, 2j+dj] = b[co] + Σ_ci x[ci,i,j]·w[di,dj,ci,co]`.
pub fn tconv2_forward<T: Real>(x: &Tensor<T>, w: &Kernel<'_, T>, b: &[T]) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = check_tconv(x, w, b.len())?;
    let cout = w.cout;
    let (hw, ow) = (h * wd, 2 * wd);
    let mut out = Tensor::zeros(&[n, cout, 2 * h, ow]);
    let mut tmp = vec![T::zero(); cout * hw];
    for s in 0..n {
        let xs = &x.data()[s * cin * hw..][..cin * hw];
        let os = &mut out.data_mut()[s * cout * 4 * hw..][..cout * 4 * hw];
        for di in 0..2 {
            for dj in 0..2 {
                let wd_ = &w.data[(di * 2 + dj) * cin * cout..][..cin * cout];
                gemm(cout, cin, hw, wd_, Strides(1, cout), xs, Strides(hw, 1), T::zero(), &mut tmp, Strides(hw, 1));
                for co in 0..cout {
                    for i in 0..h {
                        let src = &tmp[co * hw + i * wd..][..wd];
                        let row = &mut os[co * 4 * hw + (2 * i + di) * ow..][..ow];
                        for (j, &v) in src.iter().enumerate() {
                            row[2 * j + dj] = v + b[co];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn tconv2_backward<T: Real>(x: &Tensor<T>, w: &Kernel<'_, T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (n, cin, h, wd) = check_tconv(x, w, w.cout)?;
    let cout = w.cout;
    if grad_out.shape() != [n, cout, 2 * h, 2 * wd] {
        return Err(Error::shape(format!("grad_out shape {:?} != [{n}, {cout}, {}, {}]", grad_out.shape(), 2 * h, 2 * wd)));
    }
    let (hw, ow) = (h * wd, 2 * wd);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = vec![T::zero(); 4 * cin * cout];
    let mut gb = vec![T::zero(); cout];
    let mut gd = vec![T::zero(); cout * hw];
    for s in 0..n {
        let xs = &x.data()[s * cin * hw..][..cin * hw];
        let gs = &grad_out.data()[s * cout * 4 * hw..][..cout * 4 * hw];
        for (co, plane) in gs.chunks_exact(4 * hw).enumerate() {
            gb[co] += plane.iter().copied().sum::<T>();
        }
        let gxs = &mut gx.data_mut()[s * cin * hw..][..cin * hw];
        for di in 0..2 {
            for dj in 0..2 {
                for co in 0..cout {
                    for i in 0..h {
                        let row = &gs[co * 4 * hw + (2 * i + di) * ow..][..ow];
                        let dst = &mut gd[co * hw + i * wd..][..wd];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = row[2 * j + dj];
                        }
                    }
                }
                let off = (di * 2 + dj) * cin * cout;
                // gx (cin×hw) += w_d (cin×cout) · g_d (cout×hw)
                gemm(cin, cout, hw, &w.data[off..][..cin * cout], Strides(cout, 1), &gd, Strides(hw, 1), T::one(), gxs, Strides(hw, 1));
                // gw_d (cin×cout) += x (cin×hw) · g_dᵀ (hw×cout)
                gemm(cin, hw, cout, xs, Strides(hw, 1), &gd, Strides(1, hw), T::one(), &mut gw[off..][..cin * cout], Strides(cout, 1));
            }
        }
    }
    Ok(ConvGrads { x: gx, w: gw, b: gb })
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!("cannot concatenate {:?} and {:?}", a.shape(), b.shape())));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * hw..][..ca * hw]);
        data.extend_from_slice(&b.data()[s * cb * hw..][..cb * hw]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

/// Splits a channel-concatenated tensor after its first `ca` channels.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = t.dims4()?;
    if ca > c {
        return Err(Error::shape(format!("cannot split {c} channels after {ca}")));
    }
    let (cb, hw) = (c - ca, h * w);
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let chunk = &t.data()[s * c * hw..][..c * hw];
        a.extend_from_slice(&chunk[..ca * hw]);
        b.extend_from_slice(&chunk[ca * hw..]);
    }
    Ok((Tensor::from_vec(&[n, ca, h, w], a)?, Tensor::from_vec(&[n, cb, h, w], b)?))
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1/(1-p)`; the returned
/// per-element scale is what the backward pass multiplies by. Inference mode
/// (or `p = 0`) is the identity and returns no mask.
pub fn dropout<T: Real>(x: &Tensor<T>, p: f64, rng: &mut Rng, training: bool) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_vec(x.shape(), data)?, Some(mask)))
}

pub fn dropout_backward<T: Real>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => grad_out.clone(),
        Some(m) => {
            let data = grad_out.data().iter().zip(m).map(|(&g, &k)| g * k).collect();
            Tensor::from_vec(grad_out.shape(), data).expect("mask matches grad")
        }
    }
}

/// Channel-wise softmax of N×C×H×W logits, max-subtracted.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let ld = logits.data();
    let od = out.data_mut();
    let mut buf = vec![T::zero(); c];
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for (k, b) in buf.iter_mut().enumerate() {
                *b = ld[base + k * hw + p];
                max = max.max(*b);
            }
            let mut total = T::zero();
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                total += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                od[base + k * hw + p] = *b / total;
            }
        }
    }
    Ok(out)
}

/// Mean per-pixel softmax cross-entropy and its gradient
/// `(softmax − onehot) / (N·H·W)`. `labels` holds one class index per pixel
/// in N×H×W order.
pub fn softmax_ce<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape(format!("{} labels for {} pixels", labels.len(), n * hw)));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::arg(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = softmax(logits)?;
    let ld = logits.data();
    let scale = T::one() / T::of((n * hw) as f64);
    let mut loss = NeumaierSum::default();
    let gd = grad.data_mut();
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let label = labels[s * hw + p] as usize;
            // log-sum-exp for the loss keeps saturated pixels exact
            let max = (0..c).map(|k| ld[base + k * hw + p]).fold(T::neg_infinity(), T::max);
            let lse = max + (0..c).map(|k| (ld[base + k * hw + p] - max).exp()).sum::<T>().ln();
            loss.add((lse - ld[base + label * hw + p]).f64());
            gd[base + label * hw + p] = gd[base + label * hw + p] - T::one();
        }
    }
    for g in gd.iter_mut() {
        *g = *g * scale;
    }
    Ok((T::of(loss.total() / (n * hw) as f64), grad))
}

/// Compensated summation; keeps the mean loss accurate to a few ulps, which
/// finite-difference checks of the loss depend on.
#[derive(Debug, Default, Clone, Copy)]
struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.compensation
    }
}

/// Per-pixel argmax over channels (lowest index wins ties), N×H×W order.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[s * c * hw + k * hw + p] > d[s * c * hw + best * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
