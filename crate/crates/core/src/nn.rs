//! Minimal convolutional network engine with hand-written backward passes.
//!
//! Activation volumes are `H x W x C` arrays in standard layout. Parameters
//! are stored as flat vectors so the optimizer can treat every tensor alike.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// 2-D convolution, weights laid out `[ky][kx][cin][cout]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(kernel: usize, stride: usize, padding: usize, cin: usize, cout: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
            weight: vec![0.0; kernel * kernel * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    /// He-uniform initialization.
    pub fn random<R: Rng>(
        rng: &mut R,
        kernel: usize,
        stride: usize,
        padding: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let mut conv = Self::zeros(kernel, stride, padding, cin, cout);
        let limit = (6.0 / (kernel * kernel * cin) as f64).sqrt();
        conv.weight.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
        conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        conv
    }

    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kernel + kx) * self.in_channels + ci) * self.out_channels + co
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    /// Input coordinate feeding output `o` through tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < n)
    }

    pub fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = input.dim();
        debug_assert_eq!(cin, self.in_channels);
        let (oh, ow) = self.output_dims(h, w);
        let cout = self.out_channels;
        let src = input.as_slice().expect("standard layout");
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut out[(oy * ow + ox) * cout..][..cout];
                acc.copy_from_slice(&self.bias);
                for ky in 0..self.kernel {
                    let Some(iy) = self.source(oy, ky, h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(ix) = self.source(ox, kx, w) else { continue };
                        let pixel = &src[(iy * w + ix) * cin..][..cin];
                        let taps = &self.weight[self.weight_index(ky, kx, 0, 0)..][..cin * cout];
                        for (ci, &x) in pixel.iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            let row = &taps[ci * cout..][..cout];
                            acc.iter_mut().zip(row).for_each(|(a, &wt)| *a += x * wt);
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((oh, ow, cout), out).expect("shape")
    }

    /// Returns the input gradient; adds weight and bias gradients into `grads`
    /// when given (`[weight, bias]` order).
    pub fn backward(
        &self,
        input: &Array3<f64>,
        grad_out: &Array3<f64>,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Array3<f64> {
        let (h, w, cin) = input.dim();
        let (oh, ow, cout) = grad_out.dim();
        let src = input.as_slice().expect("standard layout");
        let g = grad_out.as_slice().expect("standard layout");
        let mut grad_in = vec![0.0; h * w * cin];
        let (mut gw, mut gb) = match grads {
            Some((gw, gb)) => (Some(gw), Some(gb)),
            None => (None, None),
        };
        for oy in 0..oh {
            for ox in 0..ow {
                let go = &g[(oy * ow + ox) * cout..][..cout];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb.iter_mut().zip(go).for_each(|(b, &v)| *b += v);
                }
                for ky in 0..self.kernel {
                    let Some(iy) = self.source(oy, ky, h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(ix) = self.source(ox, kx, w) else { continue };
                        let base = self.weight_index(ky, kx, 0, 0);
                        let pixel = (iy * w + ix) * cin;
                        for ci in 0..cin {
                            let row = &self.weight[base + ci * cout..][..cout];
                            grad_in[pixel + ci] +=
                                row.iter().zip(go).map(|(&wt, &v)| wt * v).sum::<f64>();
                            if let Some(gw) = gw.as_deref_mut() {
                                let x = src[pixel + ci];
                                if x != 0.0 {
                                    let grow = &mut gw[base + ci * cout..][..cout];
                                    grow.iter_mut().zip(go).for_each(|(a, &v)| *a += x * v);
                                }
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((h, w, cin), grad_in).expect("shape")
    }
}

/// Fully connected layer, weights laid out `[in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let mut d = Self::zeros(in_dim, out_dim);
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        d.weight.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
        d
    }

    #[inline]
    pub fn w(&self, i: usize, o: usize) -> f64 {
        self.weight[i * self.out_dim + o]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.out_dim..][..self.out_dim];
            out.iter_mut().zip(row).for_each(|(o, &w)| *o += xi * w);
        }
        out
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
        let grad_in = (0..self.in_dim)
            .map(|i| (0..self.out_dim).map(|o| self.w(i, o) * grad_out[o]).sum())
            .collect();
        if let Some((gw, gb)) = grads {
            gb.iter_mut().zip(grad_out).for_each(|(b, &g)| *b += g);
            for (i, &xi) in x.iter().enumerate() {
                let row = &mut gw[i * self.out_dim..][..self.out_dim];
                row.iter_mut().zip(grad_out).for_each(|(a, &g)| *a += xi * g);
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d(Conv2d),
    Relu,
    /// Non-overlapping average pooling with a square window.
    AvgPool { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn conv(name: impl Into<String>, conv: Conv2d) -> Self {
        Self { name: name.into(), kind: LayerKind::Conv2d(conv) }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: LayerKind::Relu }
    }

    pub fn avg_pool(name: impl Into<String>, size: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::AvgPool { size } }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        match &self.kind {
            LayerKind::Conv2d(c) => c.forward(x),
            LayerKind::Relu => x.mapv(|v| v.max(0.0)),
            LayerKind::AvgPool { size } => avg_pool(x, *size),
        }
    }

    fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d(_) => 2,
            _ => 0,
        }
    }
}

fn avg_pool(x: &Array3<f64>, size: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let (oh, ow) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    Array3::from_shape_fn((oh, ow, c), |(y, xx, k)| {
        let mut acc = 0.0;
        for dy in 0..size {
            for dx in 0..size {
                acc += x[[y * size + dy, xx * size + dx, k]];
            }
        }
        acc * scale
    })
}

fn avg_pool_backward(input_dim: (usize, usize, usize), g: &Array3<f64>, size: usize) -> Array3<f64> {
    let scale = 1.0 / (size * size) as f64;
    let mut out = Array3::zeros(input_dim);
    for ((y, x, k), &v) in g.indexed_iter() {
        for dy in 0..size {
            for dx in 0..size {
                out[[y * size + dy, x * size + dx, k]] = v * scale;
            }
        }
    }
    out
}

/// A sequential stack of named layers; the feature extractor of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub layers: Vec<Layer>,
}

impl ConvStack {
    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.layers.iter().fold(in_channels, |c, l| match &l.kind {
            LayerKind::Conv2d(conv) => conv.out_channels,
            _ => c,
        })
    }

    /// `trace[0]` is the input, `trace[i + 1]` the output of layer `i`.
    pub fn forward_trace(&self, input: Array3<f64>) -> Vec<Array3<f64>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(input);
        for layer in &self.layers {
            let next = layer.forward(trace.last().expect("non-empty"));
            trace.push(next);
        }
        trace
    }

    /// Runs layers `start..` on an activation taken at the output of layer
    /// `start - 1` (or the input when `start == 0`).
    pub fn forward_from(&self, start: usize, x: &Array3<f64>) -> Vec<Array3<f64>> {
        let mut trace = vec![x.clone()];
        for layer in &self.layers[start..] {
            let next = layer.forward(trace.last().expect("non-empty"));
            trace.push(next);
        }
        trace
    }

    /// Backpropagates `grad` from the stack output down to the output of
    /// layer `stop - 1` (the input when `stop == 0`). `trace` must come from
    /// [`forward_trace`](Self::forward_trace). Parameter gradients are added
    /// into `grads` when given, in [`params`](Self::params) order.
    pub fn backward_to(
        &self,
        trace: &[Array3<f64>],
        mut grad: Array3<f64>,
        stop: usize,
        mut grads: Option<&mut [Vec<f64>]>,
    ) -> Array3<f64> {
        let mut slot: usize = self.layers.iter().map(Layer::param_count).sum();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            slot -= layer.param_count();
            if i < stop {
                break;
            }
            let input = &trace[i];
            grad = match &layer.kind {
                LayerKind::Conv2d(conv) => {
                    let pg = grads.as_deref_mut().map(|g| pair(&mut g[slot..slot + 2]));
                    conv.backward(input, &grad, pg)
                }
                LayerKind::Relu => {
                    ndarray::Zip::from(&mut grad).and(input).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    grad
                }
                LayerKind::AvgPool { size } => avg_pool_backward(input.dim(), &grad, *size),
            };
        }
        grad
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let LayerKind::Conv2d(c) = &layer.kind {
                out.push(c.weight.as_slice());
                out.push(c.bias.as_slice());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let LayerKind::Conv2d(c) = &mut layer.kind {
                out.push(c.weight.as_mut_slice());
                out.push(c.bias.as_mut_slice());
            }
        }
        out
    }
}

/// Classification head applied to the final activation volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    /// Global average pooling followed by one dense layer.
    GapDense { dense: Dense },
    /// Global average pooling, a hidden ReLU layer, then the logits layer.
    GapMlp { hidden: Dense, out: Dense },
}

/// Intermediate values of a head forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub pooled: Vec<f64>,
    pub hidden: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Splits a `[weight, bias, ..]` gradient slice into its first two tensors.
fn pair(g: &mut [Vec<f64>]) -> (&mut [f64], &mut [f64]) {
    let (w, b) = g.split_at_mut(1);
    (w[0].as_mut_slice(), b[0].as_mut_slice())
}

pub fn global_average_pool(x: &Array3<f64>) -> Vec<f64> {
    let (h, w, c) = x.dim();
    let mut pooled = vec![0.0; c];
    for pixel in x.as_slice().expect("standard layout").chunks_exact(c) {
        pooled.iter_mut().zip(pixel).for_each(|(p, &v)| *p += v);
    }
    let z = (h * w) as f64;
    pooled.iter_mut().for_each(|p| *p /= z);
    pooled
}

impl Head {
    pub fn num_classes(&self) -> usize {
        match self {
            Head::GapDense { dense } => dense.out_dim,
            Head::GapMlp { out, .. } => out.out_dim,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Head::GapDense { dense } => dense.in_dim,
            Head::GapMlp { hidden, .. } => hidden.in_dim,
        }
    }

    pub fn forward(&self, features: &Array3<f64>) -> HeadTrace {
        let pooled = global_average_pool(features);
        match self {
            Head::GapDense { dense } => {
                let logits = dense.forward(&pooled);
                HeadTrace { pooled, hidden: None, logits }
            }
            Head::GapMlp { hidden, out } => {
                let h: Vec<f64> = hidden.forward(&pooled).into_iter().map(|v| v.max(0.0)).collect();
                let logits = out.forward(&h);
                HeadTrace { pooled, hidden: Some(h), logits }
            }
        }
    }

    /// Gradient with respect to the feature volume for a given logit
    /// gradient; parameter gradients are added into `grads` when given.
    pub fn backward(
        &self,
        features_dim: (usize, usize, usize),
        trace: &HeadTrace,
        grad_logits: &[f64],
        grads: Option<&mut [Vec<f64>]>,
    ) -> Array3<f64> {
        let grad_pooled = match self {
            Head::GapDense { dense } => dense.backward(&trace.pooled, grad_logits, grads.map(pair)),
            Head::GapMlp { hidden, out } => {
                let h = trace.hidden.as_ref().expect("mlp trace");
                let (hidden_grads, out_grads) = match grads {
                    Some(g) => {
                        let (a, b) = g.split_at_mut(2);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                let mut grad_h = out.backward(h, grad_logits, out_grads.map(pair));
                grad_h.iter_mut().zip(h).for_each(|(g, &v)| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                hidden.backward(&trace.pooled, &grad_h, hidden_grads.map(pair))
            }
        };
        let (h, w, c) = features_dim;
        let z = (h * w) as f64;
        Array3::from_shape_fn((h, w, c), |(_, _, k)| grad_pooled[k] / z)
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Head::GapDense { dense } => vec![&dense.weight, &dense.bias],
            Head::GapMlp { hidden, out } => vec![&hidden.weight, &hidden.bias, &out.weight, &out.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Head::GapDense { dense } => vec![&mut dense.weight, &mut dense.bias],
            Head::GapMlp { hidden, out } => {
                vec![&mut hidden.weight, &mut hidden.bias, &mut out.weight, &mut out.bias]
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of `logits` against `label` and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut probs = softmax(logits);
    let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
    probs[label] -= 1.0;
    (loss, probs)
}

/// Adam with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-7, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `params`, `grads` and `lrs` are aligned per tensor.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], lrs: &[f64]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), (m, v)), &lr) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(lrs)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
