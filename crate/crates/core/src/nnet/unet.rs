//! Encoder–decoder segmentation network with skip connections.
//!
//! Layout for `depth = d`, `base = b`:
//!
//! ```text
//! encoder k = 0..d   conv3(c_in → b·2^k) relu  conv3 relu  [skip]  maxpool2
//! bottleneck         conv3(b·2^(d-1) → b·2^d) relu dropout  conv3 relu dropout
//! decoder k = d-1..0 tconv2(b·2^(k+1) → b·2^k)  concat(skip, up)
//!                    conv3(2·b·2^k → b·2^k) relu  conv3 relu
//! head               conv1(b → n_classes)
//! ```
//!
//! All parameters live in one flat vector; each layer owns a weight slice
//! laid out `[k, k, cin, cout]` followed by its bias.

use rand::Rng as _;

use super::layers::*;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::labeler::N_CLASSES;
use crate::rng::{stream, Rng, TAG_INIT};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub dropout_p: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 3, n_classes: N_CLASSES, depth: 2, base_filters: 16, dropout_p: 0.0 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 3 || self.in_channels == 4) {
            return Err(Error::arg("unet.in_channels must be 3 or 4"));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::arg(format!("unet.n_classes must be {N_CLASSES}")));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::arg("unet.depth must be in 1..=8"));
        }
        if self.base_filters == 0 {
            return Err(Error::arg("unet.base_filters must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::arg("unet.dropout_p must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3,
    TConv2,
    Conv1,
}

impl LayerKind {
    pub fn kernel_size(self) -> usize {
        match self {
            LayerKind::Conv3 => 3,
            LayerKind::TConv2 => 2,
            LayerKind::Conv1 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        let k = self.kind.kernel_size();
        k * k * self.cin * self.cout
    }

    pub fn fan_in(&self) -> usize {
        let k = self.kind.kernel_size();
        k * k * self.cin
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weight_len()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.weight_len();
        start..start + self.cout
    }

    fn end(&self) -> usize {
        self.bias_range().end
    }
}

/// Builds the ordered layer list for a configuration.
pub fn layer_specs(cfg: &UNetConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |kind, cin, cout| {
        let spec = LayerSpec { kind, cin, cout, offset };
        offset = spec.end();
        specs.push(spec);
    };
    let mut c = cfg.in_channels;
    for k in 0..cfg.depth {
        push(LayerKind::Conv3, c, cfg.width(k));
        push(LayerKind::Conv3, cfg.width(k), cfg.width(k));
        c = cfg.width(k);
    }
    push(LayerKind::Conv3, c, cfg.width(cfg.depth));
    push(LayerKind::Conv3, cfg.width(cfg.depth), cfg.width(cfg.depth));
    for k in (0..cfg.depth).rev() {
        push(LayerKind::TConv2, cfg.width(k + 1), cfg.width(k));
        push(LayerKind::Conv3, 2 * cfg.width(k), cfg.width(k));
        push(LayerKind::Conv3, cfg.width(k), cfg.width(k));
    }
    push(LayerKind::Conv1, cfg.width(0), cfg.n_classes);
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<T>,
}

/// He-uniform weights `U(-√(6/fan_in), √(6/fan_in))` with
/// `fan_in = k·k·cin`, zero biases.
pub fn init_params<T: Real>(config: &UNetConfig, seed: u64) -> Result<UNet<T>> {
    config.validate()?;
    let layers = layer_specs(config);
    let total = layers.last().map_or(0, LayerSpec::end);
    let mut params = vec![T::zero(); total];
    for (i, spec) in layers.iter().enumerate() {
        let mut rng = stream(seed, &[TAG_INIT, i as u64]);
        let bound = (6.0 / spec.fan_in() as f64).sqrt();
        for p in &mut params[spec.weight_range()] {
            *p = T::of(rng.random_range(-bound..=bound));
        }
    }
    Ok(UNet { config: config.clone(), layers, params })
}

/// Activations kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Input of every parameterised layer, in layer order.
    inputs: Vec<Tensor<T>>,
    /// ReLU outputs of every 3×3 convolution, in layer order.
    relu_out: Vec<Option<Tensor<T>>>,
    pool_argmax: Vec<Vec<usize>>,
    pool_shapes: Vec<Vec<usize>>,
    dropout_masks: [Option<Vec<T>>; 2],
}

impl<T: Real> Trace<T> {
    /// Every piecewise decision the forward pass made: which ReLU units were
    /// active and which element won each pooling window. Two inputs with the
    /// same pattern lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<usize>) {
        let active = self.relu_out.iter().flatten().flat_map(|t| t.data().iter().map(|v| v.f64() > 0.0)).collect();
        (active, self.pool_argmax.concat())
    }
}

impl<T: Real> UNet<T> {
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.params[self.layers[layer].weight_range()]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        &self.params[self.layers[layer].bias_range()]
    }

    fn kernel(&self, layer: usize) -> Kernel<'_, T> {
        let spec = &self.layers[layer];
        Kernel { data: self.weights(layer), size: spec.kind.kernel_size(), cin: spec.cin, cout: spec.cout }
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet { config: self.config.clone(), layers: self.layers.clone(), params: self.params.iter().map(|v| U::of(v.f64())).collect() }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!("input has {c} channels, model expects {}", self.config.in_channels)));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [T], layer: usize, g: &ConvGrads<T>) {
        let spec = &self.layers[layer];
        for (d, s) in grads[spec.weight_range()].iter_mut().zip(&g.w) {
            *d += *s;
        }
        for (d, s) in grads[spec.bias_range()].iter_mut().zip(&g.b) {
            *d += *s;
        }
    }

    /// Inference-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        // the rng is never drawn from in inference mode
        Ok(self.forward(x, false, &mut crate::rng::rng_from(0))?.0)
    }

    /// Forward pass returning N×n_classes×H×W logits and the trace needed by
    /// [`UNet::backward`]. Dropout is active only when `training` is set.
    pub fn forward(&self, x: &Tensor<T>, training: bool, rng: &mut Rng) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            relu_out: Vec::with_capacity(self.layers.len()),
            pool_argmax: Vec::with_capacity(depth),
            pool_shapes: Vec::with_capacity(depth),
            dropout_masks: [None, None],
        };
        let mut layer = 0;
        let conv_relu = |t: &mut Trace<T>, layer: &mut usize, input: Tensor<T>| -> Result<Tensor<T>> {
            let y = relu(&conv2d_forward(&input, &self.kernel(*layer), self.bias(*layer))?);
            t.inputs.push(input);
            t.relu_out.push(Some(y.clone()));
            *layer += 1;
            Ok(y)
        };

        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for _ in 0..depth {
            h = conv_relu(&mut trace, &mut layer, h)?;
            h = conv_relu(&mut trace, &mut layer, h)?;
            let (pooled, arg) = maxpool2(&h)?;
            trace.pool_shapes.push(h.shape().to_vec());
            trace.pool_argmax.push(arg);
            skips.push(h);
            h = pooled;
        }
        for slot in 0..2 {
            h = conv_relu(&mut trace, &mut layer, h)?;
            let (dropped, mask) = dropout(&h, self.config.dropout_p, rng, training)?;
            trace.dropout_masks[slot] = mask;
            h = dropped;
        }
        for _ in 0..depth {
            let up = tconv2_forward(&h, &self.kernel(layer), self.bias(layer))?;
            trace.inputs.push(h);
            trace.relu_out.push(None);
            layer += 1;
            let skip = skips.pop().expect("one skip per level");
            h = concat_channels(&skip, &up)?;
            h = conv_relu(&mut trace, &mut layer, h)?;
            h = conv_relu(&mut trace, &mut layer, h)?;
        }
        let logits = conv2d_forward(&h, &self.kernel(layer), self.bias(layer))?;
        trace.inputs.push(h);
        trace.relu_out.push(None);
        Ok((logits, trace))
    }

    /// Gradient of the loss with respect to every parameter (flat, in
    /// parameter order), given the loss gradient at the logits.
    pub fn backward(&self, trace: &Trace<T>, grad_logits: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.backward_with_input(trace, grad_logits)?.0)
    }

    /// Like [`UNet::backward`] but also returns the gradient at the input.
    pub fn backward_with_input(&self, trace: &Trace<T>, grad_logits: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let depth = self.config.depth;
        let mut grads = vec![T::zero(); self.params.len()];
        let conv_relu_back = |grads: &mut [T], layer: usize, g: Tensor<T>| -> Result<Tensor<T>> {
            let y = trace.relu_out[layer].as_ref().expect("conv layer has a relu output");
            let g = relu_backward(y, &g)?;
            let cg = conv2d_backward(&trace.inputs[layer], &self.kernel(layer), &g)?;
            self.accumulate(grads, layer, &cg);
            Ok(cg.x)
        };

        let mut layer = self.layers.len() - 1;
        let head = conv2d_backward(&trace.inputs[layer], &self.kernel(layer), grad_logits)?;
        self.accumulate(&mut grads, layer, &head);
        let mut g = head.x;

        let mut skip_grads = Vec::with_capacity(depth);
        for _ in 0..depth {
            layer -= 1;
            g = conv_relu_back(&mut grads, layer, g)?;
            layer -= 1;
            g = conv_relu_back(&mut grads, layer, g)?;
            let skip_channels = self.layers[layer].cin / 2;
            let (g_skip, g_up) = split_channels(&g, skip_channels)?;
            skip_grads.push(g_skip);
            layer -= 1;
            let tg = tconv2_backward(&trace.inputs[layer], &self.kernel(layer), &g_up)?;
            self.accumulate(&mut grads, layer, &tg);
            g = tg.x;
        }
        for slot in (0..2).rev() {
            g = dropout_backward(trace.dropout_masks[slot].as_deref(), &g);
            layer -= 1;
            g = conv_relu_back(&mut grads, layer, g)?;
        }
        // skip gradients were collected shallowest level first
        for k in (0..depth).rev() {
            let g_skip = skip_grads.pop().expect("one skip gradient per level");
            let mut gp = maxpool2_backward(&trace.pool_shapes[k], &trace.pool_argmax[k], &g)?;
            for (a, b) in gp.data_mut().iter_mut().zip(g_skip.data()) {
                *a += *b;
            }
            layer -= 1;
            g = conv_relu_back(&mut grads, layer, gp)?;
            layer -= 1;
            g = conv_relu_back(&mut grads, layer, g)?;
        }
        debug_assert_eq!(layer, 0);
        Ok((grads, g))
    }
}
