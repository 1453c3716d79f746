//! Layer definitions, the two desk-scale presets, and the softmax
//! cross-entropy loss with its closed-form derivatives.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, ConvGeom, PoolGeom};
use crate::autodiff::{Graph, NodeId, Objective};
use crate::error::{ensure_dim, Error, Result};
use crate::tensor::{Rng, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
/// Samples per recorded graph when a loss is summed over many inputs.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        channels: usize,
        stride: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    BatchNorm,
    FullyConnected {
        out: usize,
    },
    Relu,
    SoftmaxCe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// (channels, height, width)
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Conv(5,5,8)–Conv(5,5,16)–FC(64)–SM(10) on 28×28×1.
    pub fn m1_desk() -> Self {
        use LayerSpec::*;
        ModelConfig {
            name: "m1-desk".into(),
            input: [1, 28, 28],
            classes: 10,
            layers: vec![
                Conv { kernel: 5, channels: 8, stride: 2 },
                Relu,
                Conv { kernel: 5, channels: 16, stride: 2 },
                Relu,
                FullyConnected { out: 64 },
                Relu,
                FullyConnected { out: 10 },
                SoftmaxCe,
            ],
        }
    }

    /// Conv(5,5,16)–MP(3,3)–BN–Conv(5,5,16)–MP(3,3)–BN–FC(96)–FC(48)–SM(10)
    /// on 32×32×3.
    pub fn c1_desk() -> Self {
        use LayerSpec::*;
        ModelConfig {
            name: "c1-desk".into(),
            input: [3, 32, 32],
            classes: 10,
            layers: vec![
                Conv { kernel: 5, channels: 16, stride: 2 },
                Relu,
                MaxPool { size: 3, stride: 2 },
                BatchNorm,
                Conv { kernel: 5, channels: 16, stride: 2 },
                Relu,
                MaxPool { size: 3, stride: 2 },
                BatchNorm,
                FullyConnected { out: 96 },
                Relu,
                FullyConnected { out: 48 },
                Relu,
                FullyConnected { out: 10 },
                SoftmaxCe,
            ],
        }
    }

    /// Fully connected ReLU network `input -> hidden... -> classes`.
    pub fn mlp(name: &str, input: [usize; 3], hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::FullyConnected { out: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::FullyConnected { out: classes });
        layers.push(LayerSpec::SoftmaxCe);
        ModelConfig {
            name: name.into(),
            input,
            classes,
            layers,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "m1-desk" => Some(Self::m1_desk()),
            "c1-desk" => Some(Self::c1_desk()),
            _ => None,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Frozen running statistics, so every layer is affine in its input.
    Eval,
}

/// Where one parameter tensor lives inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    pub slots: Vec<ParamSlot>,
    pub total: usize,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        let idx = self.slots.len();
        let slot = ParamSlot {
            name,
            offset: self.total,
            shape,
        };
        self.total += slot.len();
        self.slots.push(slot);
        idx
    }

    /// Splits a flat vector into one tensor per slot.
    pub fn split(&self, theta: &ParamVector) -> Result<Vec<Tensor>> {
        ensure_dim!(
            theta.len() == self.total,
            "parameter vector of length {} for layout of {}",
            theta.len(),
            self.total
        );
        self.slots
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), theta.0[s.range()].to_vec()))
            .collect()
    }

    pub fn join(&self, parts: &[Tensor]) -> Result<ParamVector> {
        ensure_dim!(
            parts.len() == self.slots.len(),
            "{} tensors for {} slots",
            parts.len(),
            self.slots.len()
        );
        let mut out = Vec::with_capacity(self.total);
        for (slot, t) in self.slots.iter().zip(parts) {
            ensure_dim!(
                t.shape() == slot.shape.as_slice(),
                "{} has shape {:?}, expected {:?}",
                slot.name,
                t.shape(),
                slot.shape
            );
            out.extend_from_slice(t.data());
        }
        Ok(ParamVector(out))
    }
}

/// Flattened parameters in the model's canonical layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.0.clone())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv {
        geom: ConvGeom,
        weight: usize,
        bias: usize,
    },
    Pool(PoolGeom),
    BatchNorm {
        channels: usize,
        gamma: usize,
        beta: usize,
        /// Offset of this layer's running mean; the variance follows.
        stats: usize,
    },
    Dense {
        inputs: usize,
        weight: usize,
        bias: usize,
    },
    Relu,
}

/// A validated architecture with its parameter layout and the running
/// batch-norm statistics (the only mutable state besides θ).
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    layout: Layout,
    bn_stats: Vec<f64>,
}

/// Result of recording a forward pass.
pub struct Forward {
    pub logits: NodeId,
    /// Running statistics after this pass (train-mode batch norm only).
    pub bn_stats: Option<Vec<f64>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let [c0, h0, w0] = config.input;
        ensure_dim!(
            c0 > 0 && h0 > 0 && w0 > 0 && config.classes >= 2,
            "model {} needs a nonempty input and at least two classes",
            config.name
        );
        // Feature shape: (c, h, w) while spatial, (n, 1, 1) once flattened.
        let (mut c, mut h, mut w) = (c0, h0, w0);
        let mut spatial = true;
        let mut layout = Layout::default();
        let mut layers = Vec::new();
        let mut stats_len = 0;
        let mut terminated = false;
        for (i, spec) in config.layers.iter().enumerate() {
            if terminated {
                return Err(Error::Contract(format!(
                    "layer {i} follows the softmax output in {}",
                    config.name
                )));
            }
            match *spec {
                LayerSpec::Conv {
                    kernel,
                    channels,
                    stride,
                } => {
                    ensure_dim!(
                        spatial && kernel > 0 && channels > 0 && stride > 0,
                        "layer {i}: conv needs a spatial input and positive sizes"
                    );
                    let geom = ConvGeom::same(1, c, h, w, channels, kernel, stride);
                    let weight = layout.add(format!("conv{i}.weight"), geom.weight_shape().to_vec());
                    let bias = layout.add(format!("conv{i}.bias"), vec![channels]);
                    layers.push(Layer::Conv { geom, weight, bias });
                    (c, h, w) = (channels, geom.out_h, geom.out_w);
                }
                LayerSpec::MaxPool { size, stride } => {
                    ensure_dim!(
                        spatial && size > 0 && stride > 0,
                        "layer {i}: max pool needs a spatial input and positive sizes"
                    );
                    let geom = PoolGeom::same(1, c, h, w, size, stride);
                    layers.push(Layer::Pool(geom));
                    (h, w) = (geom.out_h, geom.out_w);
                }
                LayerSpec::BatchNorm => {
                    let gamma = layout.add(format!("bn{i}.gamma"), vec![c]);
                    let beta = layout.add(format!("bn{i}.beta"), vec![c]);
                    layers.push(Layer::BatchNorm {
                        channels: c,
                        gamma,
                        beta,
                        stats: stats_len,
                    });
                    stats_len += 2 * c;
                }
                LayerSpec::FullyConnected { out } => {
                    ensure_dim!(out > 0, "layer {i}: fully connected with zero outputs");
                    let inputs = c * h * w;
                    let weight = layout.add(format!("fc{i}.weight"), vec![inputs, out]);
                    let bias = layout.add(format!("fc{i}.bias"), vec![out]);
                    layers.push(Layer::Dense {
                        inputs,
                        weight,
                        bias,
                    });
                    (c, h, w) = (out, 1, 1);
                    spatial = false;
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::SoftmaxCe => {
                    ensure_dim!(
                        !spatial && c == config.classes,
                        "softmax layer sees {} features, expected {} flattened classes",
                        c * h * w,
                        config.classes
                    );
                    terminated = true;
                }
            }
        }
        if !terminated {
            return Err(Error::Contract(format!(
                "model {} does not end in a softmax cross-entropy layer",
                config.name
            )));
        }
        let mut bn_stats = vec![0.0; stats_len];
        for layer in &layers {
            if let Layer::BatchNorm {
                channels, stats, ..
            } = *layer
            {
                bn_stats[stats + channels..stats + 2 * channels].fill(1.0);
            }
        }
        Ok(Model {
            config,
            layers,
            layout,
            bn_stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.bn_stats.is_empty()
    }

    pub fn bn_stats(&self) -> &[f64] {
        &self.bn_stats
    }

    pub fn set_bn_stats(&mut self, stats: Vec<f64>) -> Result<()> {
        ensure_dim!(
            stats.len() == self.bn_stats.len(),
            "{} batch-norm statistics, expected {}",
            stats.len(),
            self.bn_stats.len()
        );
        self.bn_stats = stats;
        Ok(())
    }

    /// He-normal weights, zero biases, unit batch-norm scale.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut theta = vec![0.0; self.layout.total];
        for layer in &self.layers {
            match *layer {
                Layer::Conv { geom, weight, .. } => {
                    let fan_in = (geom.in_ch * geom.kernel * geom.kernel) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    for v in &mut theta[self.layout.slots[weight].range()] {
                        *v = std * rng.normal();
                    }
                }
                Layer::Dense { inputs, weight, .. } => {
                    let std = (2.0 / inputs as f64).sqrt();
                    for v in &mut theta[self.layout.slots[weight].range()] {
                        *v = std * rng.normal();
                    }
                }
                Layer::BatchNorm { gamma, .. } => {
                    theta[self.layout.slots[gamma].range()].fill(1.0);
                }
                Layer::Pool(_) | Layer::Relu => {}
            }
        }
        ParamVector(theta)
    }

    fn param(&self, g: &mut Graph, theta: NodeId, slot: usize) -> Result<NodeId> {
        let s = &self.layout.slots[slot];
        let flat = g.slice(theta, s.offset, s.len())?;
        g.reshape(flat, &s.shape)
    }

    /// Records the forward pass from `x` (`[N, C, H, W]`) to `[N, c]` logits.
    pub fn record_forward(
        &self,
        g: &mut Graph,
        theta: NodeId,
        x: NodeId,
        mode: BnMode,
    ) -> Result<Forward> {
        self.record_forward_observed(g, theta, x, mode, None)
    }

    /// Distance of a batch to the nearest non-smooth point of the network:
    /// the smallest |ReLU input| and the smallest top-two gap of any max-pool
    /// window (eval-mode batch norm).
    pub fn kink_margin(&self, theta: &ParamVector, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let t = g.constant(theta.to_tensor());
        let xc = g.constant(x.clone());
        let mut margin = f64::INFINITY;
        self.record_forward_observed(&mut g, t, xc, BnMode::Eval, Some(&mut margin))?;
        Ok(margin)
    }

    fn record_forward_observed(
        &self,
        g: &mut Graph,
        theta: NodeId,
        x: NodeId,
        mode: BnMode,
        mut margin: Option<&mut f64>,
    ) -> Result<Forward> {
        ensure_dim!(
            g.value(theta).len() == self.layout.total,
            "parameter vector of length {}, model {} has {}",
            g.value(theta).len(),
            self.config.name,
            self.layout.total
        );
        let xs = g.shape(x).to_vec();
        let [c, h, w] = self.config.input;
        ensure_dim!(
            xs.len() == 4 && xs[1..] == [c, h, w],
            "input shape {:?} does not match [N, {c}, {h}, {w}]",
            xs
        );
        let n = xs[0];
        let mut cur = x;
        let mut new_stats = match mode {
            BnMode::Train if self.has_batch_norm() => Some(self.bn_stats.clone()),
            _ => None,
        };
        let mut after_relu = false;
        for layer in &self.layers {
            let rectified = after_relu;
            after_relu = matches!(layer, Layer::Relu);
            cur = match *layer {
                Layer::Conv { geom, weight, bias } => {
                    let wn = self.param(g, theta, weight)?;
                    let bn = self.param(g, theta, bias)?;
                    let y = g.conv2d(cur, wn, &geom)?;
                    let shape = g.shape(y).to_vec();
                    let b = g.broadcast_channel(bn, &shape)?;
                    g.add(y, b)?
                }
                Layer::Pool(geom) => {
                    let geom = PoolGeom { batch: n, ..geom };
                    if let Some(m) = margin.as_deref_mut() {
                        *m = m.min(kernels::max_pool_gap(g.value(cur).data(), &geom, rectified));
                    }
                    let idx = kernels::max_pool_indices(g.value(cur).data(), &geom);
                    g.gather(cur, Arc::from(idx), &geom.output_shape())?
                }
                Layer::BatchNorm {
                    channels,
                    gamma,
                    beta,
                    stats,
                } => {
                    let gm = self.param(g, theta, gamma)?;
                    let bt = self.param(g, theta, beta)?;
                    let shape = g.shape(cur).to_vec();
                    match mode {
                        BnMode::Eval => {
                            let mean = &self.bn_stats[stats..stats + channels];
                            let var = &self.bn_stats[stats + channels..stats + 2 * channels];
                            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                            let inv = g.constant(Tensor::from_vec(inv));
                            let mean = g.constant(Tensor::from_vec(mean.to_vec()));
                            let scale = g.mul(gm, inv)?;
                            let sm = g.mul(scale, mean)?;
                            let shift = g.sub(bt, sm)?;
                            let sb = g.broadcast_channel(scale, &shape)?;
                            let hb = g.broadcast_channel(shift, &shape)?;
                            let y = g.mul(cur, sb)?;
                            g.add(y, hb)?
                        }
                        BnMode::Train => {
                            let count = (g.value(cur).len() / channels) as f64;
                            let s = g.sum_channel(cur)?;
                            let mu = g.scale(s, 1.0 / count);
                            let mub = g.broadcast_channel(mu, &shape)?;
                            let xc = g.sub(cur, mub)?;
                            let sq = g.mul(xc, xc)?;
                            let ss = g.sum_channel(sq)?;
                            let var = g.scale(ss, 1.0 / count);
                            let ve = g.add_scalar(var, BN_EPS);
                            let inv = g.pow(ve, -0.5);
                            let scale = g.mul(inv, gm)?;
                            let sb = g.broadcast_channel(scale, &shape)?;
                            let bb = g.broadcast_channel(bt, &shape)?;
                            let y = g.mul(xc, sb)?;
                            if let Some(st) = new_stats.as_mut() {
                                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                                let mu_v = g.value(mu).data();
                                let var_v = g.value(var).data();
                                for ch in 0..channels {
                                    let m = &mut st[stats + ch];
                                    *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * mu_v[ch];
                                    let v = &mut st[stats + channels + ch];
                                    *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * var_v[ch] * unbias;
                                }
                            }
                            g.add(y, bb)?
                        }
                    }
                }
                Layer::Dense {
                    inputs,
                    weight,
                    bias,
                } => {
                    let flat = g.reshape(cur, &[n, inputs])?;
                    let wn = self.param(g, theta, weight)?;
                    let bn = self.param(g, theta, bias)?;
                    let y = g.matmul(flat, wn)?;
                    let shape = g.shape(y).to_vec();
                    let b = g.broadcast_channel(bn, &shape)?;
                    g.add(y, b)?
                }
                Layer::Relu => {
                    if let Some(m) = margin.as_deref_mut() {
                        *m = g.value(cur).data().iter().fold(*m, |a, v| a.min(v.abs()));
                    }
                    g.relu(cur)?
                }
            };
        }
        let logits = g.reshape(cur, &[n, self.config.classes])?;
        Ok(Forward {
            logits,
            bn_stats: new_stats,
        })
    }

    /// Summed cross-entropy over the batch, plus the forward record.
    pub fn record_loss_sum(
        &self,
        g: &mut Graph,
        theta: NodeId,
        x: NodeId,
        labels: &[usize],
        mode: BnMode,
    ) -> Result<(NodeId, Forward)> {
        let fwd = self.record_forward(g, theta, x, mode)?;
        let loss = g.softmax_ce(fwd.logits, Arc::from(labels))?;
        Ok((loss, fwd))
    }

    /// Logits `[N, c]` for a batch `[N, C, H, W]` (eval-mode batch norm).
    pub fn forward(&self, theta: &ParamVector, x: &Tensor) -> Result<Tensor> {
        let mut out = Vec::new();
        let n = batch_len(x)?;
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut g = Graph::new();
            let t = g.constant(theta.to_tensor());
            let xc = g.constant(x.slice_leading(start, end));
            let fwd = self.record_forward(&mut g, t, xc, BnMode::Eval)?;
            g.check_finite()?;
            out.extend_from_slice(g.value(fwd.logits).data());
        }
        Tensor::new(vec![n, self.config.classes], out)
    }

    pub fn predict(&self, theta: &ParamVector, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(theta, x)?;
        Ok(logits
            .data()
            .chunks(self.config.classes)
            .map(argmax)
            .collect())
    }

    /// Mean loss and accuracy over a labelled set (eval mode).
    pub fn evaluate(&self, theta: &ParamVector, x: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
        let logits = self.forward(theta, x)?;
        ensure_dim!(labels.len() == logits.shape()[0], "label count mismatch");
        let c = self.config.classes;
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (row, &y) in logits.data().chunks(c).zip(labels) {
            loss += softmax_ce_loss(row, y)?;
            if argmax(row) == y {
                correct += 1;
            }
        }
        let n = labels.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// Mean loss and its θ-gradient. In train mode also returns the
    /// updated running statistics.
    pub fn loss_and_grad(
        &self,
        theta: &ParamVector,
        x: &Tensor,
        labels: &[usize],
        mode: BnMode,
    ) -> Result<(f64, ParamVector, Option<Vec<f64>>)> {
        let n = batch_len(x)?;
        ensure_dim!(labels.len() == n && n > 0, "{} labels for {n} samples", labels.len());
        if mode == BnMode::Train && self.has_batch_norm() {
            // Batch statistics couple the samples: one graph for the batch.
            let mut g = Graph::new();
            let t = g.leaf(theta.to_tensor());
            let xc = g.constant(x.clone());
            let (loss, fwd) = self.record_loss_sum(&mut g, t, xc, labels, mode)?;
            let mean = g.scale(loss, 1.0 / n as f64);
            g.check_finite()?;
            let grad = g.backward(mean, &[t])?[0];
            g.check_finite()?;
            return Ok((
                g.value(mean).item(),
                ParamVector(g.value(grad).data().to_vec()),
                fwd.bn_stats,
            ));
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; self.layout.total];
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let obj = ThetaObjective {
                model: self,
                x: &x.slice_leading(start, end),
                labels: &labels[start..end],
                scale: 1.0 / n as f64,
            };
            let (l, gr) = crate::autodiff::value_and_grad(&obj, &theta.to_tensor())?;
            total += l;
            for (a, b) in grad.iter_mut().zip(gr.data()) {
                *a += b;
            }
        }
        Ok((total, ParamVector(grad), None))
    }

    /// θ-Hessian of the mean batch loss applied to `v` (eval mode).
    pub fn hvp_theta(
        &self,
        theta: &ParamVector,
        x: &Tensor,
        labels: &[usize],
        v: &[f64],
    ) -> Result<Vec<f64>> {
        let n = batch_len(x)?;
        ensure_dim!(labels.len() == n && n > 0, "{} labels for {n} samples", labels.len());
        ensure_dim!(v.len() == self.layout.total, "direction length {}", v.len());
        let at = theta.to_tensor();
        let dir = Tensor::from_vec(v.to_vec());
        let mut out = vec![0.0; self.layout.total];
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let obj = ThetaObjective {
                model: self,
                x: &x.slice_leading(start, end),
                labels: &labels[start..end],
                scale: 1.0 / n as f64,
            };
            let hv = crate::autodiff::hvp(&obj, &at, &dir)?;
            for (a, b) in out.iter_mut().zip(hv.data()) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Per-sample losses and input gradients `∂J/∂x` for a batch.
    pub fn input_grad(
        &self,
        theta: &ParamVector,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<(Vec<f64>, Tensor)> {
        let n = batch_len(x)?;
        ensure_dim!(labels.len() == n, "{} labels for {n} samples", labels.len());
        let mut losses = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(x.len());
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut g = Graph::new();
            let t = g.constant(theta.to_tensor());
            let xl = g.leaf(x.slice_leading(start, end));
            let fwd = self.record_forward(&mut g, t, xl, BnMode::Eval)?;
            let lab: Arc<[usize]> = Arc::from(&labels[start..end]);
            let loss = g.softmax_ce(fwd.logits, lab)?;
            g.check_finite()?;
            let c = self.config.classes;
            for (row, &y) in g.value(fwd.logits).data().chunks(c).zip(&labels[start..end]) {
                losses.push(kernels::softmax_ce_row(row, y));
            }
            let gx = g.backward(loss, &[xl])?[0];
            g.check_finite()?;
            grad.extend_from_slice(g.value(gx).data());
        }
        Ok((losses, Tensor::new(x.shape().to_vec(), grad)?))
    }

    /// `H_x u` for one sample (`x` shaped `[C, H, W]` or `[1, C, H, W]`).
    pub fn hvp_input(&self, theta: &ParamVector, x: &Tensor, y: usize, u: &Tensor) -> Result<Tensor> {
        let x4 = self.as_single(x)?;
        ensure_dim!(u.len() == x4.len(), "direction has {} values for input of {}", u.len(), x4.len());
        let obj = InputObjective {
            model: self,
            theta,
            labels: &[y],
        };
        let dir = u.clone().reshape(x4.shape())?;
        let hv = crate::autodiff::hvp(&obj, &x4, &dir)?;
        hv.reshape(u.shape())
    }

    fn as_single(&self, x: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.config.input;
        ensure_dim!(
            x.len() == c * h * w && (x.shape() == [c, h, w] || x.shape() == [1, c, h, w]),
            "expected one sample of shape [{c}, {h}, {w}], got {:?}",
            x.shape()
        );
        x.clone().reshape(&[1, c, h, w])
    }

    /// Jacobian `∂s/∂x` of the logits for one sample, `c × d` row-major.
    pub fn logit_jacobian(&self, theta: &ParamVector, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let x4 = self.as_single(x)?;
        let c = self.config.classes;
        let d = x4.len();
        let mut g = Graph::new();
        let t = g.constant(theta.to_tensor());
        let xl = g.leaf(x4);
        let fwd = self.record_forward(&mut g, t, xl, BnMode::Eval)?;
        g.check_finite()?;
        let logits = g.value(fwd.logits).data().to_vec();
        let mut jac = Vec::with_capacity(c * d);
        for j in 0..c {
            let mut e = vec![0.0; c];
            e[j] = 1.0;
            let ej = g.constant(Tensor::new(vec![1, c], e)?);
            let sj = g.inner(fwd.logits, ej)?;
            let row = g.backward(sj, &[xl])?[0];
            jac.extend_from_slice(g.value(row).data());
        }
        Ok((logits, Tensor::new(vec![c, d], jac)?))
    }
}

fn batch_len(x: &Tensor) -> Result<usize> {
    ensure_dim!(x.shape().len() == 4, "batch must be [N, C, H, W], got {:?}", x.shape());
    Ok(x.shape()[0])
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean-scaled batch loss as a function of θ.
pub struct ThetaObjective<'a> {
    pub model: &'a Model,
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    /// Multiplies the summed loss (`1/N` for a mean over N samples).
    pub scale: f64,
}

impl Objective for ThetaObjective<'_> {
    fn record(&self, g: &mut Graph, leaf: NodeId) -> Result<NodeId> {
        let x = g.constant(self.x.clone());
        let (loss, _) = self
            .model
            .record_loss_sum(g, leaf, x, self.labels, BnMode::Eval)?;
        Ok(g.scale(loss, self.scale))
    }
}

/// Summed loss as a function of the inputs, θ held fixed.
pub struct InputObjective<'a> {
    pub model: &'a Model,
    pub theta: &'a ParamVector,
    pub labels: &'a [usize],
}

impl Objective for InputObjective<'_> {
    fn record(&self, g: &mut Graph, leaf: NodeId) -> Result<NodeId> {
        let t = g.constant(self.theta.to_tensor());
        let (loss, _) = self
            .model
            .record_loss_sum(g, t, leaf, self.labels, BnMode::Eval)?;
        Ok(loss)
    }
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; s.len()];
    kernels::softmax_row(s, &mut p);
    p
}

fn check_label(s: &[f64], y: usize) -> Result<()> {
    ensure_dim!(!s.is_empty() && y < s.len(), "label {y} for {} logits", s.len());
    Ok(())
}

/// `log Σ_j exp(s_j) − s_y`.
pub fn softmax_ce_loss(s: &[f64], y: usize) -> Result<f64> {
    check_label(s, y)?;
    Ok(kernels::softmax_ce_row(s, y))
}

/// `p − e_y`.
pub fn softmax_ce_grad(s: &[f64], y: usize) -> Result<Vec<f64>> {
    check_label(s, y)?;
    let mut p = softmax(s);
    p[y] -= 1.0;
    Ok(p)
}

/// `diag(p) − p pᵀ`, `c × c`.
pub fn softmax_ce_hessian(s: &[f64]) -> Tensor {
    let p = softmax(s);
    let c = p.len();
    let mut h = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            h[i * c + j] = if i == j { p[i] * (1.0 - p[i]) } else { -p[i] * p[j] };
        }
    }
    Tensor::new(vec![c, c], h).expect("square")
}

const MAX_GN_DIM: usize = 4096;

/// Explicit input Hessian `Jᵀ H_s J` for one sample, `d × d`.
pub fn gauss_newton_input_hessian(model: &Model, theta: &ParamVector, x: &Tensor, y: usize) -> Result<Tensor> {
    let d = model.config.input_len();
    if d > MAX_GN_DIM {
        return Err(Error::Capacity(format!(
            "explicit input Hessian limited to {MAX_GN_DIM} dims, model input has {d}"
        )));
    }
    ensure_dim!(y < model.classes(), "label {y} out of range");
    let (logits, jac) = model.logit_jacobian(theta, x)?;
    let hs = softmax_ce_hessian(&logits);
    let c = model.classes();
    // M = H_s J  (c × d), then Jᵀ M.
    let mut m = vec![0.0; c * d];
    crate::tensor::gemm(c, c, d, hs.data(), false, jac.data(), false, 0.0, &mut m);
    let mut h = vec![0.0; d * d];
    crate::tensor::gemm(d, c, d, jac.data(), true, &m, false, 0.0, &mut h);
    // Exact symmetry; the two triangles differ only by rounding.
    for i in 0..d {
        for j in i + 1..d {
            let a = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = a;
            h[j * d + i] = a;
        }
    }
    Tensor::new(vec![d, d], h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dense_sym_eig;

    #[test]
    fn presets_validate_and_stay_desk_sized() {
        let m1 = Model::new(ModelConfig::m1_desk()).unwrap();
        let c1 = Model::new(ModelConfig::c1_desk()).unwrap();
        assert!(m1.num_params() <= 60_000, "{}", m1.num_params());
        assert!(c1.num_params() <= 60_000, "{}", c1.num_params());
        assert!(c1.has_batch_norm() && !m1.has_batch_norm());
    }

    #[test]
    fn rejects_bad_architectures() {
        let mut cfg = ModelConfig::mlp("x", [1, 2, 2], &[3], 4);
        cfg.layers.pop();
        assert!(Model::new(cfg).is_err());
        let mut cfg = ModelConfig::mlp("x", [1, 2, 2], &[3], 4);
        cfg.layers.insert(2, LayerSpec::FullyConnected { out: 5 });
        cfg.layers.push(LayerSpec::Relu);
        assert!(Model::new(cfg).is_err());
        let cfg = ModelConfig {
            name: "bad".into(),
            input: [1, 4, 4],
            classes: 3,
            layers: vec![LayerSpec::FullyConnected { out: 2 }, LayerSpec::SoftmaxCe],
        };
        assert!(Model::new(cfg).is_err());
    }

    #[test]
    fn layout_split_join_roundtrip() {
        let m = Model::new(ModelConfig::c1_desk()).unwrap();
        let theta = m.init_params(&mut Rng::new(1));
        let parts = m.layout().split(&theta).unwrap();
        assert_eq!(m.layout().join(&parts).unwrap(), theta);
        let mut covered = vec![0u8; m.num_params()];
        for s in &m.layout().slots {
            for i in s.range() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let m = Model::new(ModelConfig::mlp("lin", [1, 1, 3], &[], 2)).unwrap();
        let mut theta = vec![0.0; m.num_params()];
        theta[6] = 0.25;
        theta[7] = -1.5;
        let x = Tensor::new(vec![1, 1, 1, 3], vec![0.3, 0.1, 0.9]).unwrap();
        let s = m.forward(&ParamVector(theta), &x).unwrap();
        assert_eq!(s.data(), &[0.25, -1.5]);
    }

    #[test]
    fn identity_chain() {
        // 1 -> 1 dense layers cannot terminate with c >= 2, so use two
        // outputs where the first copies the input.
        let m = Model::new(ModelConfig::mlp("id", [1, 1, 1], &[1], 2)).unwrap();
        let theta = ParamVector(vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let s = m.forward(&theta, &x).unwrap();
        assert_eq!(s.data(), &[2.0, 0.0]);
    }

    #[test]
    fn forward_is_replayable() {
        let m = Model::new(ModelConfig::c1_desk()).unwrap();
        let theta = m.init_params(&mut Rng::new(9));
        let mut rng = Rng::new(10);
        let x = Tensor::new(vec![2, 3, 32, 32], (0..2 * 3072).map(|_| rng.uniform()).collect()).unwrap();
        let a = m.forward(&theta, &x).unwrap();
        let b = m.forward(&theta, &x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn loss_examples() {
        assert!((softmax_ce_loss(&[0.0, 0.0], 0).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert!(softmax_ce_loss(&[20.0, -20.0], 0).unwrap() <= 1e-8);
        assert!(softmax_ce_loss(&[1.0], 3).is_err());
        assert_eq!(softmax_ce_grad(&[0.0, 0.0], 0).unwrap(), vec![-0.5, 0.5]);
        let g = softmax_ce_grad(&[30.0, 0.0, 0.0], 0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn loss_matches_extended_precision() {
        // Oracle: direct −log softmax_y with the sum carried in a
        // double-double accumulator.
        fn two_sum(a: f64, b: f64) -> (f64, f64) {
            let s = a + b;
            let bb = s - a;
            (s, (a - (s - bb)) + (b - bb))
        }
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let s: Vec<f64> = (0..10).map(|_| 5.0 * rng.normal()).collect();
            let y = rng.below(10);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut hi, mut lo) = (0.0, 0.0);
            for v in &s {
                let (h, l) = two_sum(hi, (v - m).exp());
                hi = h;
                lo += l;
            }
            let z = hi + lo;
            let want = m - s[y] + z.ln();
            assert!((softmax_ce_loss(&s, y).unwrap() - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn hessian_examples() {
        let h = softmax_ce_hessian(&[0.0, 0.0]);
        assert_eq!(h.data(), &[0.25, -0.25, -0.25, 0.25]);
        let h = softmax_ce_hessian(&[60.0, 0.0, 0.0]);
        assert!(h.data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn hessian_matches_fd_and_is_psd() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let s: Vec<f64> = (0..10).map(|_| 2.0 * rng.normal()).collect();
            let y = rng.below(10);
            let h = softmax_ce_hessian(&s);
            let step = 1e-5;
            for j in 0..10 {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[j] += step;
                sm[j] -= step;
                let gp = softmax_ce_grad(&sp, y).unwrap();
                let gm = softmax_ce_grad(&sm, y).unwrap();
                for i in 0..10 {
                    let fd = (gp[i] - gm[i]) / (2.0 * step);
                    assert!((fd - h.data()[i * 10 + j]).abs() < 1e-6);
                }
            }
            let e = dense_sym_eig(&h).unwrap();
            assert!(*e.values.last().unwrap() >= -1e-12);
        }
    }

    #[test]
    fn grad_matches_fd_of_loss() {
        let mut rng = Rng::new(6);
        let s: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let g = softmax_ce_grad(&s, 3).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        for j in 0..10 {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[j] += 1e-6;
            sm[j] -= 1e-6;
            let fd = (softmax_ce_loss(&sp, 3).unwrap() - softmax_ce_loss(&sm, 3).unwrap()) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn logistic_regression_input_hessian_closed_form() {
        let m = Model::new(ModelConfig::mlp("logreg", [1, 2, 3], &[], 4)).unwrap();
        let mut rng = Rng::new(8);
        let theta = m.init_params(&mut rng);
        let x = Tensor::new(vec![1, 2, 3], (0..6).map(|_| rng.uniform()).collect()).unwrap();
        let h = gauss_newton_input_hessian(&m, &theta, &x, 1).unwrap();
        // W is stored [d, c]: s = Wᵀx + b, so J = Wᵀ and H = W H_s Wᵀ.
        let w = &theta.0[..24];
        let logits: Vec<f64> = (0..4)
            .map(|j| (0..6).map(|i| w[i * 4 + j] * x.data()[i]).sum::<f64>() + theta.0[24 + j])
            .collect();
        let hs = softmax_ce_hessian(&logits);
        for a in 0..6 {
            for b in 0..6 {
                let mut want = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        want += w[a * 4 + i] * hs.data()[i * 4 + j] * w[b * 4 + j];
                    }
                }
                assert!((h.data()[a * 6 + b] - want).abs() < 1e-12);
            }
        }
        let u = Tensor::new(vec![1, 2, 3], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let hu = m.hvp_input(&theta, &x, 1, &u).unwrap();
        for a in 0..6 {
            let want: f64 = (0..6).map(|b| h.data()[a * 6 + b] * u.data()[b]).sum();
            assert!((hu.data()[a] - want).abs() < 1e-12);
        }
        let zero = m.hvp_input(&theta, &x, 1, &Tensor::zeros(&[1, 2, 3])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_input_hessian_vanishes() {
        let m = Model::new(ModelConfig::mlp("sat", [1, 1, 2], &[], 2)).unwrap();
        // s = (40 x0, -40 x0) with x0 = 1 → p ≈ e_0.
        let theta = ParamVector(vec![40.0, -40.0, 0.0, 0.0, 0.0, 0.0]);
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 0.5]).unwrap();
        let h = gauss_newton_input_hessian(&m, &theta, &x, 0).unwrap();
        assert!(h.data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn train_mode_bn_updates_running_stats() {
        let m = Model::new(ModelConfig::c1_desk()).unwrap();
        let theta = m.init_params(&mut Rng::new(2));
        let mut rng = Rng::new(3);
        let x = Tensor::new(vec![4, 3, 32, 32], (0..4 * 3072).map(|_| rng.uniform()).collect()).unwrap();
        let labels = [0, 1, 2, 3];
        let (_, _, stats) = m.loss_and_grad(&theta, &x, &labels, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.len(), m.bn_stats().len());
        assert_ne!(stats, m.bn_stats());
        let (_, _, none) = m.loss_and_grad(&theta, &x, &labels, BnMode::Eval).unwrap();
        assert!(none.is_none());
    }
}
