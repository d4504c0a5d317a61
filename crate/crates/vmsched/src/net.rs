//! Minimal dense network used by the learned schedulers: fully connected
//! layers, ReLU hidden activations, linear output, trained with Adam on a
//! squared-error objective. Written by hand so gradients stay inspectable
//! and checkpoints stay a plain data dump.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// One dense layer; weights are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Hidden layers count for the standard value head: input -> 5 hidden
/// ReLU layers -> linear scalar, six weight matrices in total.
pub const VALUE_NET_DEPTH: usize = 6;

impl Mlp {
    /// Builds a network over the given dimension chain, e.g. `[4, 128, 1]`.
    /// Weights and biases start uniform in `+-1/sqrt(fan_in)`.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Mlp {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (in_dim, out_dim) = (pair[0], pair[1]);
                let bound = 1.0 / (in_dim as f64).sqrt();
                Layer {
                    in_dim,
                    out_dim,
                    w: (0..in_dim * out_dim)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    b: (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
                }
            })
            .collect();
        Mlp { layers }
    }

    /// Standard six-layer value head: `input -> hidden x5 -> output`.
    pub fn value_net(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Mlp {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(hidden).take(VALUE_NET_DEPTH - 1));
        dims.push(output);
        Mlp::new(&dims, rng)
    }

    /// Mutable layer access, for parameter perturbation experiments.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Checks internal consistency (dimension chain and buffer lengths);
    /// used when loading checkpoints.
    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::ShapeMismatch("no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.w.len() != layer.in_dim * layer.out_dim || layer.b.len() != layer.out_dim {
                return Err(NetError::ShapeMismatch(format!(
                    "layer {i}: buffer sizes do not match {}x{}",
                    layer.out_dim, layer.in_dim
                )));
            }
            if i > 0 && self.layers[i - 1].out_dim != layer.in_dim {
                return Err(NetError::ShapeMismatch(format!(
                    "layer {i}: input {} does not chain from previous output {}",
                    layer.in_dim,
                    self.layers[i - 1].out_dim
                )));
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    /// Full forward pass; allocates the output vector.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape);
        tape.acts.last().unwrap().clone()
    }

    /// Forward pass for scalar-output heads.
    pub fn forward_scalar(&self, input: &[f64]) -> f64 {
        debug_assert_eq!(self.output_dim(), 1);
        let mut out = 0.0;
        self.forward_into(input, std::slice::from_mut(&mut out));
        out
    }

    /// Forward pass without recording activations, writing the final layer
    /// into `out`. Cheaper than [`Mlp::forward_tape`] on the hot path.
    pub fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.input_dim());
        debug_assert_eq!(out.len(), self.output_dim());
        let mut cur = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim];
            affine(layer, &cur, &mut next);
            if i < last {
                relu(&mut next);
                cur = next;
            } else {
                out.copy_from_slice(&next);
            }
        }
    }

    /// Forward pass recording every activation into `tape` (reused across
    /// calls to avoid reallocation). `tape.acts[0]` is the input, the last
    /// entry the linear output.
    pub fn forward_tape(&self, input: &[f64], tape: &mut Tape) {
        debug_assert_eq!(input.len(), self.input_dim());
        tape.acts.resize(self.layers.len() + 1, Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (before, after) = tape.acts.split_at_mut(i + 1);
            let src = &before[i];
            let dst = &mut after[0];
            dst.clear();
            dst.resize(layer.out_dim, 0.0);
            affine(layer, src, dst);
            if i < last {
                relu(dst);
            }
        }
    }

    /// Polyak step `target = lambda * online + (1 - lambda) * target`.
    pub fn soft_update_from(&mut self, online: &Mlp, lambda: f64) -> Result<(), NetError> {
        if !self.same_shape(online) {
            return Err(NetError::ShapeMismatch(
                "soft update across different architectures".into(),
            ));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (tw, ow) in t.w.iter_mut().zip(&o.w) {
                *tw = lambda * ow + (1.0 - lambda) * *tw;
            }
            for (tb, ob) in t.b.iter_mut().zip(&o.b) {
                *tb = lambda * ob + (1.0 - lambda) * *tb;
            }
        }
        Ok(())
    }
}

fn affine(layer: &Layer, input: &[f64], out: &mut [f64]) {
    for (o, (row, bias)) in out
        .iter_mut()
        .zip(layer.w.chunks_exact(layer.in_dim).zip(&layer.b))
    {
        let mut acc = *bias;
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        *o = acc;
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Activation record of one forward pass, reusable across passes.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape written by forward_tape")
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Grads {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (dw, db) in &mut self.layers {
            for g in dw.iter_mut().chain(db.iter_mut()) {
                *g *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for (dw, db) in &self.layers {
            for g in dw.iter().chain(db.iter()) {
                sq += g * g;
            }
        }
        sq.sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

/// Backpropagates `out_grad` (gradient w.r.t. the linear output) through the
/// recorded pass, accumulating into `grads`.
pub fn backprop(net: &Mlp, tape: &Tape, out_grad: &[f64], grads: &mut Grads) {
    let layers = &net.layers;
    debug_assert_eq!(out_grad.len(), net.output_dim());
    let mut delta = out_grad.to_vec();
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let input = &tape.acts[i];
        let (dw, db) = &mut grads.layers[i];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
            db[o] += d;
        }
        if i == 0 {
            break;
        }
        // Propagate through the layer input and the preceding ReLU; a zero
        // activation means the unit was clamped, so its gradient dies.
        let mut prev = vec![0.0; layer.in_dim];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (p, w) in prev.iter_mut().zip(row) {
                *p += d * w;
            }
        }
        for (p, a) in prev.iter_mut().zip(input) {
            if *a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
}

/// Mean squared error where each sample's prediction is the sum of the
/// scalar outputs over its input set (the cluster value of a decomposed
/// state). Returns the loss and parameter gradients.
pub fn grad_sum_regression(net: &Mlp, batch: &[(Vec<Vec<f64>>, f64)]) -> (f64, Grads) {
    debug_assert_eq!(net.output_dim(), 1);
    assert!(!batch.is_empty(), "empty batch");
    let mut grads = Grads::zeros_like(net);
    let mut loss = 0.0;
    let b = batch.len() as f64;
    let mut tapes: Vec<Tape> = Vec::new();
    for (inputs, target) in batch {
        if tapes.len() < inputs.len() {
            tapes.resize(inputs.len(), Tape::default());
        }
        let mut pred = 0.0;
        for (input, tape) in inputs.iter().zip(tapes.iter_mut()) {
            net.forward_tape(input, tape);
            pred += tape.output()[0];
        }
        let err = pred - target;
        loss += err * err;
        let coef = 2.0 * err / b;
        for tape in tapes.iter().take(inputs.len()) {
            backprop(net, tape, &[coef], &mut grads);
        }
    }
    (loss / b, grads)
}

/// Loss of [`grad_sum_regression`] without gradients; the finite-difference
/// tests diff this function against the analytic path.
pub fn sum_regression_loss(net: &Mlp, batch: &[(Vec<Vec<f64>>, f64)]) -> f64 {
    let mut loss = 0.0;
    for (inputs, target) in batch {
        let pred: f64 = inputs.iter().map(|x| net.forward_scalar(x)).sum();
        loss += (pred - target) * (pred - target);
    }
    loss / batch.len() as f64
}

/// Mean squared error on one selected output per sample (the monolithic
/// Q-head): sample = (input, output index, target).
pub fn grad_indexed_regression(net: &Mlp, batch: &[(Vec<f64>, usize, f64)]) -> (f64, Grads) {
    assert!(!batch.is_empty(), "empty batch");
    let mut grads = Grads::zeros_like(net);
    let mut loss = 0.0;
    let b = batch.len() as f64;
    let mut tape = Tape::default();
    let mut out_grad = vec![0.0; net.output_dim()];
    for (input, idx, target) in batch {
        net.forward_tape(input, &mut tape);
        let err = tape.output()[*idx] - target;
        loss += err * err;
        out_grad.iter_mut().for_each(|g| *g = 0.0);
        out_grad[*idx] = 2.0 * err / b;
        backprop(net, &tape, &out_grad, &mut grads);
    }
    (loss / b, grads)
}

pub fn indexed_regression_loss(net: &Mlp, batch: &[(Vec<f64>, usize, f64)]) -> f64 {
    let mut loss = 0.0;
    for (input, idx, target) in batch {
        let err = net.forward(input)[*idx] - target;
        loss += err * err;
    }
    loss / batch.len() as f64
}

/// Adam state: first/second moment estimates per parameter plus the step
/// counter for bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(net: &Mlp, lr: f64) -> AdamState {
        let zero: Vec<(Vec<f64>, Vec<f64>)> = net
            .layers
            .iter()
            .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
            .collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zero.clone(),
            v: zero,
        }
    }

    pub fn matches(&self, net: &Mlp) -> bool {
        self.m.len() == net.layers.len()
            && self
                .m
                .iter()
                .zip(net.layers())
                .all(|((mw, mb), l)| mw.len() == l.w.len() && mb.len() == l.b.len())
    }
}

/// One Adam update of `net` from `grads`.
pub fn adam_step(net: &mut Mlp, grads: &Grads, opt: &mut AdamState) -> Result<(), NetError> {
    if !opt.matches(net) || grads.layers.len() != net.layers.len() {
        return Err(NetError::ShapeMismatch(
            "optimizer state does not match network".into(),
        ));
    }
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let (dw, db) = &grads.layers[i];
        let (mw, mb) = &mut opt.m[i];
        let (vw, vb) = &mut opt.v[i];
        update_slice(&mut layer.w, dw, mw, vw, opt.lr, opt.beta1, opt.beta2, opt.eps, bc1, bc2);
        update_slice(&mut layer.b, db, mb, vb, opt.lr, opt.beta1, opt.beta2, opt.eps, bc1, bc2);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_slice(
    params: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
