//! Layer-wise feedback propagation.
//!
//! An initial reward on the output neurons is decomposed backwards through
//! the network. At a linear layer with pre-activation `z_j = Σ_i w_ij·a_i + b_j`
//! every connection receives the share `w_ij·a_i / z_j` of neuron `j`'s
//! reward, and input neuron `i` collects the sum of its shares. The update for
//! `w_ij` is the same share with `w_ij` replaced by `|w_ij|`, so it is scaled
//! by the weight magnitude and points the connection towards more reward.
//!
//! Activation layers pass reward through unchanged, max pooling routes it to
//! the recorded winner, and dropout only through the kept units. Residual sums
//! and LIF membranes split reward proportionally to the summands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{bn_layout, Layer, LayerTape, Network};
use crate::par;
use crate::sign;
use crate::tensor::{self, ConvGeometry, Tensor};

/// Denominators below this magnitude are rejected under [`Rule::Zero`].
pub const ZERO_RULE_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "epsilon", rename_all = "snake_case")]
pub enum Rule {
    /// Unstabilized shares `z_ij / z_j`.
    Zero,
    /// Shares `z_ij / (z_j + sign(z_j)·ε)`.
    Epsilon(f64),
}

impl Rule {
    pub fn epsilon(self) -> f64 {
        match self {
            Rule::Zero => 0.0,
            Rule::Epsilon(e) => e,
        }
    }
}

impl Default for Rule {
    fn default() -> Self {
        Rule::Epsilon(DEFAULT_EPSILON)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LfpConfig {
    pub rule: Rule,
    pub lr: f64,
    /// Blend factor α of the previous update direction.
    pub momentum: f64,
    pub max_norm_clip: Option<f64>,
    /// Rescale every sample's reward to max-abs 1 after each layer.
    pub normalize_between_layers: bool,
}

impl Default for LfpConfig {
    fn default() -> Self {
        Self {
            rule: Rule::default(),
            lr: 0.1,
            momentum: 0.9,
            max_norm_clip: None,
            normalize_between_layers: false,
        }
    }
}

impl LfpConfig {
    pub fn validate(&self) -> Result<()> {
        if let Rule::Epsilon(e) = self.rule {
            if !(e > 0.0) {
                return Err(Error::Config(format!("epsilon must be > 0, got {e}")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1], got {}",
                self.momentum
            )));
        }
        if let Some(c) = self.max_norm_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Per-parameter update directions `d^lfp`, in [`Network::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDelta {
    pub tensors: Vec<Tensor>,
}

impl ParamDelta {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            tensors: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &ParamDelta) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::TapeMismatch("parameter delta length differs".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// Rewards recorded during the backward walk.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTape {
    /// `neuron[l]` is the reward at the input of top-level layer `l`;
    /// the final entry is the output reward.
    pub neuron: Vec<Tensor>,
    /// Per-sample reward handed to LIF membranes and therefore not propagated.
    pub discarded: Vec<f64>,
}

impl RewardTape {
    pub fn input_reward(&self) -> &Tensor {
        &self.neuron[0]
    }

    pub fn output_reward(&self) -> &Tensor {
        self.neuron.last().expect("tape has an output entry")
    }
}

/// `r / (z + sign(z)·ε)` with the zero-rule guard.
#[inline]
fn share(z: f64, r: f64, rule: Rule, layer: usize) -> Result<f64> {
    if r == 0.0 {
        return Ok(0.0);
    }
    match rule {
        Rule::Zero => {
            if z.abs() < ZERO_RULE_THRESHOLD {
                Err(Error::NumericalInstability { layer, value: z.abs() })
            } else {
                Ok(r / z)
            }
        }
        Rule::Epsilon(e) => Ok(r / (z + sign(z) * e)),
    }
}

pub(crate) fn shares(z: &Tensor, r: &Tensor, rule: Rule, layer: usize) -> Result<Tensor> {
    z.expect_same_shape("reward shares", r)?;
    let data = z
        .data()
        .iter()
        .zip(r.data())
        .map(|(&z, &r)| share(z, r, rule, layer))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(z.shape().to_vec(), data)
}

fn abs_mul(w: &Tensor, g: &Tensor, scale: f64) -> Result<Tensor> {
    w.zip_map(g, |w, g| w.abs() * g * scale)
}

/// Reward and updates for a dense layer (batched).
///
/// `w: out×in`, `a_in: B×in`, `z: B×out`, `r_out: B×out`. Returns the reward at
/// the layer input and the batch-mean weight and bias updates.
pub fn dense_rule(
    w: &Tensor,
    bias: Option<&Tensor>,
    a_in: &Tensor,
    z: &Tensor,
    r_out: &Tensor,
    rule: Rule,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    dense_rule_at(w, bias, a_in, z, r_out, rule, 0)
}

fn dense_rule_at(
    w: &Tensor,
    bias: Option<&Tensor>,
    a_in: &Tensor,
    z: &Tensor,
    r_out: &Tensor,
    rule: Rule,
    layer: usize,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let s = shares(z, r_out, rule, layer)?;
    let inv_b = 1.0 / a_in.rows() as f64;
    let r_in = a_in.mul(&tensor::matmul(&s, w)?)?;
    let g = tensor::matmul_tn(&s, a_in)?;
    let d_w = abs_mul(w, &g, inv_b)?;
    let d_b = match bias {
        Some(b) => {
            let mut col = vec![0.0; b.len()];
            for row in s.data().chunks(b.len()) {
                col.iter_mut().zip(row).for_each(|(c, v)| *c += v);
            }
            Some(abs_mul(b, &Tensor::vector(col), inv_b)?)
        }
        None => None,
    };
    Ok((r_in, d_w, d_b))
}

/// Convolutional counterpart of [`dense_rule`]: every sliding-window
/// position contributes a dense-rule term, shared-kernel updates are summed
/// over positions and averaged over the batch.
pub fn conv_rule(
    kernels: &Tensor,
    bias: Option<&Tensor>,
    a_in: &Tensor,
    z: &Tensor,
    r_out: &Tensor,
    stride: usize,
    pad: usize,
    rule: Rule,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    conv_rule_at(kernels, bias, a_in, z, r_out, stride, pad, rule, 0)
}

#[allow(clippy::too_many_arguments)]
fn conv_rule_at(
    kernels: &Tensor,
    bias: Option<&Tensor>,
    a_in: &Tensor,
    z: &Tensor,
    r_out: &Tensor,
    stride: usize,
    pad: usize,
    rule: Rule,
    layer: usize,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let g = ConvGeometry::new(&a_in.shape()[1..], kernels.shape(), stride, pad)?;
    let s = shares(z, r_out, rule, layer)?;
    let per: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(a_in.rows(), |b| {
        let a = a_in.row(b);
        let back = tensor::conv2d_backward_input(&g, s.row(b), kernels.data());
        let r_in: Vec<f64> = a.iter().zip(&back).map(|(a, v)| a * v).collect();
        let gk = tensor::conv2d_backward_kernel(&g, s.row(b), a);
        (r_in, gk)
    });
    let mut r_in = Vec::with_capacity(a_in.len());
    let mut gk = vec![0.0; kernels.len()];
    for (r, k) in per {
        r_in.extend(r);
        gk.iter_mut().zip(&k).for_each(|(acc, v)| *acc += v);
    }
    let inv_b = 1.0 / a_in.rows() as f64;
    let d_k = abs_mul(kernels, &Tensor::new(kernels.shape().to_vec(), gk)?, inv_b)?;
    let d_b = match bias {
        Some(bias) => {
            let np = g.out_h() * g.out_w();
            let mut col = vec![0.0; bias.len()];
            for b in 0..s.rows() {
                for (c, plane) in s.row(b).chunks(np).enumerate() {
                    col[c] += plane.iter().sum::<f64>();
                }
            }
            Some(abs_mul(bias, &Tensor::vector(col), inv_b)?)
        }
        None => None,
    };
    Ok((Tensor::new(a_in.shape().to_vec(), r_in)?, d_k, d_b))
}

/// Batch-norm rule. The backward share treats the input as zero-mean,
/// `r_in = γ·(a/√(var+eps)) / (a_out + sign(a_out)·ε) · r_out`, while γ and β
/// are updated as a linear layer acting on the normalized input.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_rule(
    gamma: &Tensor,
    beta: &Tensor,
    a_in: &Tensor,
    normalized: &Tensor,
    a_out: &Tensor,
    batch_var: &[f64],
    bn_eps: f64,
    r_out: &Tensor,
    rule: Rule,
) -> Result<(Tensor, Tensor, Tensor)> {
    batchnorm_rule_at(gamma, beta, a_in, normalized, a_out, batch_var, bn_eps, r_out, rule, 0)
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_rule_at(
    gamma: &Tensor,
    beta: &Tensor,
    a_in: &Tensor,
    normalized: &Tensor,
    a_out: &Tensor,
    batch_var: &[f64],
    bn_eps: f64,
    r_out: &Tensor,
    rule: Rule,
    layer: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    if let Some(&v) = batch_var.iter().find(|&&v| !(v + bn_eps > 0.0)) {
        return Err(Error::NonPositiveVariance(v + bn_eps));
    }
    let s = shares(a_out, r_out, rule, layer)?;
    let (c, sp) = bn_layout(a_in);
    let inv_std: Vec<f64> = batch_var.iter().map(|v| 1.0 / (v + bn_eps).sqrt()).collect();
    let mut r_in = a_in.clone();
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for b in 0..a_in.rows() {
        let (srow, nrow) = (s.row(b), normalized.row(b));
        for (ch, plane) in r_in.row_mut(b).chunks_mut(sp).enumerate() {
            let k = gamma.data()[ch] * inv_std[ch];
            let off = ch * sp;
            for (i, v) in plane.iter_mut().enumerate() {
                *v = k * *v * srow[off + i];
                g_gamma[ch] += nrow[off + i] * srow[off + i];
                g_beta[ch] += srow[off + i];
            }
        }
    }
    let inv_b = 1.0 / a_in.rows() as f64;
    let d_gamma = abs_mul(gamma, &Tensor::vector(g_gamma), inv_b)?;
    let d_beta = abs_mul(beta, &Tensor::vector(g_beta), inv_b)?;
    Ok((r_in, d_gamma, d_beta))
}

/// Split the reward of a sum `a_out = a_main + a_branch` proportionally.
pub fn skip_sum_rule(
    a_main: &Tensor,
    a_branch: &Tensor,
    a_out: &Tensor,
    r_out: &Tensor,
    rule: Rule,
) -> Result<(Tensor, Tensor)> {
    skip_sum_rule_at(a_main, a_branch, a_out, r_out, rule, 0)
}

fn skip_sum_rule_at(
    a_main: &Tensor,
    a_branch: &Tensor,
    a_out: &Tensor,
    r_out: &Tensor,
    rule: Rule,
    layer: usize,
) -> Result<(Tensor, Tensor)> {
    let s = shares(a_out, r_out, rule, layer)?;
    Ok((a_main.mul(&s)?, a_branch.mul(&s)?))
}

struct Walk {
    rule: Rule,
    normalize: bool,
    discarded: Vec<f64>,
}

fn normalize_rows(r: &mut Tensor) {
    for b in 0..r.rows() {
        let row = r.row_mut(b);
        let m = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m > 0.0 {
            row.iter_mut().for_each(|v| *v /= m);
        }
    }
}

/// Walk `layers` backwards. Returns the reward at the input, per-layer input
/// rewards (top level only) and the deltas of each layer in forward order.
fn walk(
    layers: &[Layer],
    tapes: &[LayerTape],
    r_out: Tensor,
    w: &mut Walk,
    depth: usize,
    index_base: usize,
) -> Result<(Tensor, Vec<Tensor>, Vec<Vec<Tensor>>)> {
    let mut deltas: Vec<Vec<Tensor>> = vec![Vec::new(); layers.len()];
    let mut neuron = vec![Tensor::zeros(&[0]); layers.len()];
    let mut r = r_out;
    for (i, (layer, tape)) in layers.iter().zip(tapes).enumerate().rev() {
        let at = index_base + i;
        let mut r_in = match (layer, tape) {
            (Layer::Dense { weight, bias }, LayerTape::Dense { input, z }) => {
                let (r_in, d_w, d_b) =
                    dense_rule_at(weight, bias.as_ref(), input, z, &r, w.rule, at)?;
                deltas[i].push(d_w);
                deltas[i].extend(d_b);
                r_in
            }
            (
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    pad,
                },
                LayerTape::Conv2d { input, z },
            ) => {
                let (r_in, d_k, d_b) = conv_rule_at(
                    weight,
                    bias.as_ref(),
                    input,
                    z,
                    &r,
                    *stride,
                    *pad,
                    w.rule,
                    at,
                )?;
                deltas[i].push(d_k);
                deltas[i].extend(d_b);
                r_in
            }
            (Layer::MaxPool2d { .. }, LayerTape::MaxPool2d { index }) => {
                Tensor::new(index.input_shape.clone(), index.scatter(r.data()))?
            }
            (
                Layer::BatchNorm {
                    gamma, beta, eps, ..
                },
                LayerTape::BatchNorm {
                    input,
                    normalized,
                    output,
                    var,
                    ..
                },
            ) => {
                let (r_in, d_g, d_b) = batchnorm_rule_at(
                    gamma, beta, input, normalized, output, var, *eps, &r, w.rule, at,
                )?;
                deltas[i].push(d_g);
                deltas[i].push(d_b);
                r_in
            }
            (Layer::Dropout { .. }, LayerTape::Dropout { mask }) => match mask {
                Some(m) => r.zip_map(m, |r, m| if m != 0.0 { r } else { 0.0 })?,
                None => r,
            },
            (Layer::Flatten, LayerTape::Flatten { input_shape }) => r.reshape(input_shape)?,
            (Layer::Activation(_), LayerTape::Activation { .. }) => r,
            (
                Layer::ResidualSum(branch),
                LayerTape::ResidualSum {
                    input,
                    branch: btape,
                    branch_out,
                    output,
                },
            ) => {
                let (r_main, r_branch) =
                    skip_sum_rule_at(input, branch_out, output, &r, w.rule, at)?;
                let (r_bin, _, bdeltas) = walk(branch, btape, r_branch, w, depth + 1, at)?;
                deltas[i] = bdeltas.into_iter().flatten().collect();
                r_main.add(&r_bin)?
            }
            (
                Layer::Lif(_),
                LayerTape::Lif {
                    drive,
                    membrane,
                    potential,
                    ..
                },
            ) => {
                let (r_drive, r_mem) =
                    skip_sum_rule_at(drive, membrane, potential, &r, w.rule, at)?;
                for b in 0..r_mem.rows() {
                    w.discarded[b] += r_mem.row(b).iter().sum::<f64>();
                }
                r_drive
            }
            _ => {
                return Err(Error::TapeMismatch(format!(
                    "layer {at} does not match its tape entry"
                )))
            }
        };
        r_in.check_finite("lfp_backward")?;
        if w.normalize && depth == 0 {
            normalize_rows(&mut r_in);
        }
        neuron[i] = r_in.clone();
        r = r_in;
    }
    Ok((r, neuron, deltas))
}

/// Decompose `r_out` (`B×C`) through the recorded forward pass. Parameter
/// updates are averaged over the batch.
pub fn lfp_backward(
    net: &Network,
    tape: &crate::network::ForwardTape,
    r_out: &Tensor,
    rule: Rule,
    normalize_between_layers: bool,
) -> Result<(ParamDelta, RewardTape)> {
    net.check_tape(tape)?;
    r_out.expect_same_shape("lfp_backward reward", &tape.output)?;
    r_out.check_finite("lfp_backward reward")?;
    if let Rule::Epsilon(e) = rule {
        if !(e > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {e}")));
        }
    }
    let mut w = Walk {
        rule,
        normalize: normalize_between_layers,
        discarded: vec![0.0; r_out.rows()],
    };
    let (_, mut neuron, deltas) = walk(&net.layers, &tape.layers, r_out.clone(), &mut w, 0, 0)?;
    neuron.push(r_out.clone());
    let tensors: Vec<Tensor> = deltas.into_iter().flatten().collect();
    debug_assert_eq!(tensors.len(), net.params().len());
    Ok((
        ParamDelta { tensors },
        RewardTape {
            neuron,
            discarded: w.discarded,
        },
    ))
}

/// [`lfp_backward`] over the top-level layers `from..` only. Returns their
/// updates in parameter order, the reward at the input of layer `from` and
/// the per-row reward discarded at LIF membranes.
pub(crate) fn lfp_backward_tail(
    net: &Network,
    tape: &crate::network::ForwardTape,
    r_out: &Tensor,
    rule: Rule,
    normalize_between_layers: bool,
    from: usize,
) -> Result<(Vec<Tensor>, Tensor, Vec<f64>)> {
    net.check_tape(tape)?;
    r_out.expect_same_shape("lfp_backward reward", &tape.output)?;
    r_out.check_finite("lfp_backward reward")?;
    let mut w = Walk {
        rule,
        normalize: normalize_between_layers,
        discarded: vec![0.0; r_out.rows()],
    };
    let (r_in, _, deltas) = walk(
        &net.layers[from..],
        &tape.layers[from..],
        r_out.clone(),
        &mut w,
        0,
        from,
    )?;
    Ok((deltas.into_iter().flatten().collect(), r_in, w.discarded))
}

/// Momentum state and update application.
#[derive(Clone, Debug, PartialEq)]
pub struct LfpOptimizer {
    pub cfg: LfpConfig,
    /// Previous blended update direction per parameter.
    pub momentum_buffers: Vec<Tensor>,
}

impl LfpOptimizer {
    pub fn new(net: &Network, cfg: LfpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            momentum_buffers: ParamDelta::zeros_like(net).tensors,
        })
    }

    /// `d = α·d_old + (1-α)·d_lfp`, optionally clipped to a global norm, then
    /// `w ← w + η·d`. The blended `d` becomes the next `d_old`.
    pub fn apply_update(&mut self, net: &mut Network, delta: &ParamDelta) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != delta.tensors.len() || params.len() != self.momentum_buffers.len() {
            return Err(Error::TapeMismatch("parameter count differs from delta".into()));
        }
        let alpha = self.cfg.momentum;
        for (buf, d) in self.momentum_buffers.iter_mut().zip(&delta.tensors) {
            buf.expect_same_shape("apply_update", d)?;
            for (b, v) in buf.data_mut().iter_mut().zip(d.data()) {
                *b = alpha * *b + (1.0 - alpha) * v;
            }
        }
        if let Some(max) = self.cfg.max_norm_clip {
            let norm = self
                .momentum_buffers
                .iter()
                .map(Tensor::norm_sq)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = max / norm;
                for buf in &mut self.momentum_buffers {
                    buf.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lr = self.cfg.lr;
        for (p, d) in params.iter_mut().zip(&self.momentum_buffers) {
            for (w, v) in p.data_mut().iter_mut().zip(d.data()) {
                *w += lr * v;
            }
            p.check_finite("apply_update")?;
        }
        Ok(())
    }
}
