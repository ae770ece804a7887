//! Backpropagation baseline.
//!
//! Exact gradients for every layer type, the standard losses and SGD with
//! momentum. Loss gradients are kept per sample (`dl_b/do_b`) until the
//! parameter gradients are formed, where they are averaged over the batch,
//! so the parameter gradients are those of the batch-mean loss.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfp::{self, Rule};
use crate::network::{bn_layout, ActivationKind, Layer, LayerTape, Network, ForwardTape};
use crate::par;
use crate::rewards::{self, check_one_hot, sigmoid, softmax_rows};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossKind {
    SoftmaxCe,
    SigmoidCe,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::SigmoidCe => "sigmoid_ce",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            "sigmoid_ce" => Ok(LossKind::SigmoidCe),
            "mse" => Ok(LossKind::Mse),
            _ => Err(Error::Config(format!("unknown loss '{s}'"))),
        }
    }
}

impl TryFrom<String> for LossKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossKind> for String {
    fn from(k: LossKind) -> String {
        k.to_string()
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Batch-mean loss and the per-sample gradient `dl_b/do_b`.
pub fn loss_and_grad(kind: LossKind, o: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    o.expect_same_shape("loss_and_grad", y)?;
    let b = o.rows().max(1) as f64;
    let (loss, grad) = match kind {
        LossKind::SoftmaxCe => {
            let sm = softmax_rows(o);
            let mut loss = 0.0;
            for r in 0..o.rows() {
                let row = o.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += row
                    .iter()
                    .zip(y.row(r))
                    .map(|(o, y)| y * (lse - o))
                    .sum::<f64>();
            }
            (loss, sm.zip_map(y, |s, y| s - y)?)
        }
        LossKind::SigmoidCe => {
            let loss = o
                .data()
                .iter()
                .zip(y.data())
                .map(|(&o, &y)| -(y * log_sigmoid(o) + (1.0 - y) * log_sigmoid(-o)))
                .sum::<f64>();
            (loss, o.zip_map(y, |o, y| sigmoid(o) - y)?)
        }
        LossKind::Mse => {
            let c = o.row_len().max(1) as f64;
            let loss = o
                .data()
                .iter()
                .zip(y.data())
                .map(|(o, y)| (o - y).powi(2))
                .sum::<f64>()
                / c;
            (loss, o.zip_map(y, |o, y| 2.0 * (o - y) / c)?)
        }
    };
    Ok((loss / b, grad))
}

/// Smooth stand-in for the Heaviside derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// Derivative of `x/(1+25|x|)`.
    FastSigmoid,
    /// `1/(1+(πx)²)`.
    ArctanShift,
}

pub fn surrogate_derivative(kind: SurrogateKind, x: f64) -> f64 {
    match kind {
        SurrogateKind::FastSigmoid => 1.0 / (1.0 + 25.0 * x.abs()).powi(2),
        SurrogateKind::ArctanShift => 1.0 / (1.0 + (PI * x).powi(2)),
    }
}

/// Gradients of the batch-mean loss, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradDelta {
    pub tensors: Vec<Tensor>,
}

impl GradDelta {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            tensors: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn add_assign(&mut self, other: &GradDelta) -> Result<()> {
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
}

/// Output of [`grad_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Backward {
    pub delta: GradDelta,
    /// Per-sample gradient at the input of each top-level layer; the last
    /// entry is the upstream gradient at the output.
    pub input_grads: Vec<Tensor>,
}

impl Backward {
    pub fn input_grad(&self) -> &Tensor {
        &self.input_grads[0]
    }
}

fn dense_grad(
    w: &Tensor,
    has_bias: bool,
    a: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let inv_b = 1.0 / a.rows() as f64;
    let g_in = tensor::matmul(g, w)?;
    let mut out = vec![tensor::matmul_tn(g, a)?.scale(inv_b)];
    if has_bias {
        let n = w.shape()[0];
        let mut col = vec![0.0; n];
        for r in g.data().chunks(n) {
            col.iter_mut().zip(r).for_each(|(c, v)| *c += v);
        }
        out.push(Tensor::vector(col).scale(inv_b));
    }
    Ok((g_in, out))
}

fn conv_grad(
    k: &Tensor,
    has_bias: bool,
    a: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let geo = ConvGeometry::new(&a.shape()[1..], k.shape(), stride, pad)?;
    let per: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(a.rows(), |b| {
        (
            tensor::conv2d_backward_input(&geo, g.row(b), k.data()),
            tensor::conv2d_backward_kernel(&geo, g.row(b), a.row(b)),
        )
    });
    let mut g_in = Vec::with_capacity(a.len());
    let mut gk = vec![0.0; k.len()];
    for (gi, kk) in per {
        g_in.extend(gi);
        gk.iter_mut().zip(&kk).for_each(|(acc, v)| *acc += v);
    }
    let inv_b = 1.0 / a.rows() as f64;
    let mut out = vec![Tensor::new(k.shape().to_vec(), gk)?.scale(inv_b)];
    if has_bias {
        let np = geo.out_h() * geo.out_w();
        let mut col = vec![0.0; k.shape()[0]];
        for b in 0..g.rows() {
            for (c, plane) in g.row(b).chunks(np).enumerate() {
                col[c] += plane.iter().sum::<f64>();
            }
        }
        out.push(Tensor::vector(col).scale(inv_b));
    }
    Ok((Tensor::new(a.shape().to_vec(), g_in)?, out))
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_grad(
    gamma: &Tensor,
    input: &Tensor,
    normalized: &Tensor,
    var: &[f64],
    eps: f64,
    batch_stats: bool,
    g: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (c, sp) = bn_layout(input);
    let m = (input.rows() * sp) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..g.rows() {
        let (gr, nr) = (g.row(b), normalized.row(b));
        for ch in 0..c {
            for i in ch * sp..(ch + 1) * sp {
                dgamma[ch] += gr[i] * nr[i];
                dbeta[ch] += gr[i];
            }
        }
    }
    let mut g_in = input.clone();
    for b in 0..g.rows() {
        let (gr, nr) = (g.row(b), normalized.row(b));
        for (ch, plane) in g_in.row_mut(b).chunks_mut(sp).enumerate() {
            let k = gamma.data()[ch] / (var[ch] + eps).sqrt();
            for (j, v) in plane.iter_mut().enumerate() {
                let i = ch * sp + j;
                *v = if batch_stats {
                    k * (gr[i] - dbeta[ch] / m - nr[i] * dgamma[ch] / m)
                } else {
                    k * gr[i]
                };
            }
        }
    }
    let inv_b = 1.0 / input.rows() as f64;
    Ok((
        g_in,
        vec![
            Tensor::vector(dgamma).scale(inv_b),
            Tensor::vector(dbeta).scale(inv_b),
        ],
    ))
}

fn activation_grad(kind: ActivationKind, z: &Tensor, g: &Tensor, sur: Option<SurrogateKind>) -> Result<Tensor> {
    match (kind, sur) {
        (ActivationKind::Heaviside, Some(s)) => g.zip_map(z, |g, z| g * surrogate_derivative(s, z)),
        _ => g.zip_map(z, |g, z| g * kind.derivative(z)),
    }
}

pub(crate) fn backward_layers(
    layers: &[Layer],
    tapes: &[LayerTape],
    mut g: Tensor,
    sur: Option<SurrogateKind>,
    record: Option<&mut Vec<Tensor>>,
) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    let mut deltas = vec![Vec::new(); layers.len()];
    let mut grads = vec![Tensor::zeros(&[0]); layers.len()];
    for (i, (layer, tape)) in layers.iter().zip(tapes).enumerate().rev() {
        let g_in = match (layer, tape) {
            (Layer::Dense { weight, bias }, LayerTape::Dense { input, .. }) => {
                let (g_in, d) = dense_grad(weight, bias.is_some(), input, &g)?;
                deltas[i] = d;
                g_in
            }
            (
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    pad,
                },
                LayerTape::Conv2d { input, .. },
            ) => {
                let (g_in, d) = conv_grad(weight, bias.is_some(), input, &g, *stride, *pad)?;
                deltas[i] = d;
                g_in
            }
            (Layer::MaxPool2d { .. }, LayerTape::MaxPool2d { index }) => {
                Tensor::new(index.input_shape.clone(), index.scatter(g.data()))?
            }
            (
                Layer::BatchNorm { gamma, eps, .. },
                LayerTape::BatchNorm {
                    input,
                    normalized,
                    var,
                    batch_stats,
                    ..
                },
            ) => {
                let (g_in, d) =
                    batchnorm_grad(gamma, input, normalized, var, *eps, *batch_stats, &g)?;
                deltas[i] = d;
                g_in
            }
            (Layer::Dropout { .. }, LayerTape::Dropout { mask }) => match mask {
                Some(m) => g.mul(m)?,
                None => g,
            },
            (Layer::Flatten, LayerTape::Flatten { input_shape }) => g.reshape(input_shape)?,
            (Layer::Activation(kind), LayerTape::Activation { z, .. }) => {
                activation_grad(*kind, z, &g, sur)?
            }
            (Layer::ResidualSum(branch), LayerTape::ResidualSum { branch: bt, .. }) => {
                let (g_branch, d) = backward_layers(branch, bt, g.clone(), sur, None)?;
                deltas[i] = d.into_iter().flatten().collect();
                g.add(&g_branch)?
            }
            (Layer::Lif(cfg), LayerTape::Lif { potential, .. }) => match sur {
                Some(s) => g.zip_map(potential, |g, u| {
                    g * surrogate_derivative(s, u - cfg.threshold)
                })?,
                None => Tensor::zeros(g.shape()),
            },
            _ => {
                return Err(Error::TapeMismatch(format!(
                    "layer {i} does not match its tape entry"
                )))
            }
        };
        grads[i] = g_in.clone();
        g = g_in;
    }
    if let Some(r) = record {
        *r = grads;
    }
    Ok((g, deltas))
}

/// Chain-rule gradients from the per-sample output gradient `dl_do`.
///
/// Heaviside activations and LIF spikes have zero derivative unless a
/// surrogate is given.
pub fn grad_backward(
    net: &Network,
    tape: &ForwardTape,
    dl_do: &Tensor,
    surrogate: Option<SurrogateKind>,
) -> Result<Backward> {
    net.check_tape(tape)?;
    dl_do.expect_same_shape("grad_backward", &tape.output)?;
    let mut input_grads = Vec::new();
    let (_, deltas) = backward_layers(
        &net.layers,
        &tape.layers,
        dl_do.clone(),
        surrogate,
        Some(&mut input_grads),
    )?;
    input_grads.push(dl_do.clone());
    Ok(Backward {
        delta: GradDelta {
            tensors: deltas.into_iter().flatten().collect(),
        },
        input_grads,
    })
}

/// SGD with the same momentum blend as the LFP optimizer, descending.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub max_norm_clip: Option<f64>,
    pub buffers: Vec<Tensor>,
}

impl SgdOptimizer {
    pub fn new(net: &Network, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1], got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            max_norm_clip: None,
            buffers: GradDelta::zeros_like(net).tensors,
        })
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.max_norm_clip = clip;
        self
    }

    /// `d = α·d_old + (1-α)·∇`, optional global-norm clip, `w ← w - η·d`.
    pub fn step(&mut self, net: &mut Network, grad: &GradDelta) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != grad.tensors.len() {
            return Err(Error::TapeMismatch("parameter count differs from gradient".into()));
        }
        let a = self.momentum;
        for (buf, g) in self.buffers.iter_mut().zip(&grad.tensors) {
            buf.expect_same_shape("sgd_update", g)?;
            for (b, v) in buf.data_mut().iter_mut().zip(g.data()) {
                *b = a * *b + (1.0 - a) * v;
            }
        }
        if let Some(max) = self.max_norm_clip {
            let norm = self.buffers.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                self.buffers
                    .iter_mut()
                    .for_each(|b| b.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        for (p, d) in params.iter_mut().zip(&self.buffers) {
            for (w, v) in p.data_mut().iter_mut().zip(d.data()) {
                *w -= self.lr * v;
            }
            p.check_finite("sgd_update")?;
        }
        Ok(())
    }
}

/// Maximum relative deviation for one parameter tensor or hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    /// `d_lfp` against `-|w|·dL/dw` per parameter.
    pub params: Vec<LayerError>,
    /// Hidden rewards against `a_j·Σ_c (do_c/da_j)·r_c/o_c` per top-level layer input.
    pub hidden: Vec<LayerError>,
    pub tolerance: f64,
}

impl Theorem1Report {
    pub fn max_error(&self) -> f64 {
        self.params
            .iter()
            .chain(&self.hidden)
            .fold(0.0, |m, e| m.max(e.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }
}

impl fmt::Display for Theorem1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.params {
            writeln!(f, "param {:<24} max rel err {:.3e}", e.name, e.max_rel_error)?;
        }
        for e in &self.hidden {
            writeln!(f, "reward {:<23} max rel err {:.3e}", e.name, e.max_rel_error)?;
        }
        write!(
            f,
            "max {:.3e} (tolerance {:.1e}): {}",
            self.max_error(),
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

/// `|a-b| / max(|a|,|b|)`, zero when both vanish.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (&x, &y)| m.max(rel_error(x, y)))
}

/// Compare LFP-0 driven by `o·(-dL/do)` with weight-scaled gradient descent.
///
/// Only dense and activation layers are accepted. The equality holds for
/// ReLU and linear activations; other activations run but typically fail.
pub fn theorem1_check(
    net: &Network,
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    tolerance: f64,
) -> Result<Theorem1Report> {
    if let Some(l) = net
        .layers
        .iter()
        .find(|l| !matches!(l, Layer::Dense { .. } | Layer::Activation(_)))
    {
        return Err(Error::InvalidArgument(format!(
            "theorem check needs a dense network, found {l:?}"
        )));
    }
    check_one_hot(y)?;
    let tape = net.forward_eval(x)?;
    let o = &tape.output;
    let (_, g) = loss_and_grad(loss, o, y)?;
    let r = rewards::reward_from_loss(&g, o)?;
    let (d_lfp, rtape) = lfp::lfp_backward(net, &tape, &r, Rule::Zero, false)?;
    let back = grad_backward(net, &tape, &g, None)?;

    let params = net
        .param_info()
        .iter()
        .zip(net.params())
        .zip(d_lfp.tensors.iter().zip(&back.delta.tensors))
        .map(|((info, w), (dl, dg))| {
            let expect = w.zip_map(dg, |w, g| -w.abs() * g)?;
            Ok(LayerError {
                name: info.name.clone(),
                max_rel_error: max_rel(dl, &expect),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // r_c / o_c, then a_j Σ_c (do_c/da_j)·(r_c/o_c) with do_c/da_j by backprop per output
    let ratio = r.zip_map(o, |r, o| if o == 0.0 { 0.0 } else { r / o })?;
    let classes = o.row_len();
    let mut weighted: Vec<Tensor> = Vec::new();
    for c in 0..classes {
        let e = Tensor::from_fn(o.shape(), |i| if i % classes == c { 1.0 } else { 0.0 });
        let jac = grad_backward(net, &tape, &e, None)?;
        for (l, jg) in jac.input_grads.iter().enumerate() {
            let contrib = Tensor::from_fn(jg.shape(), |i| {
                jg.data()[i] * ratio.data()[(i / jg.row_len()) * classes + c]
            });
            if c == 0 {
                weighted.push(contrib);
            } else {
                weighted[l].add_assign(&contrib)?;
            }
        }
    }
    let mut hidden = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        if l == 0 || !matches!(layer, Layer::Dense { .. }) {
            continue;
        }
        let a = match &tape.layers[l] {
            LayerTape::Dense { input, .. } => input,
            _ => unreachable!("dense layer has a dense tape"),
        };
        let expect = a.mul(&weighted[l])?;
        hidden.push(LayerError {
            name: format!("layer {l} input"),
            max_rel_error: max_rel(&rtape.neuron[l], &expect),
        });
    }
    Ok(Theorem1Report {
        params,
        hidden,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ForwardOptions, LayerSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn loss_examples() {
        let o = Tensor::from_rows(&[&[2.0, 0.0]]);
        let y = Tensor::from_rows(&[&[1.0, 0.0]]);
        let (_, g) = loss_and_grad(LossKind::SoftmaxCe, &o, &y).unwrap();
        assert_abs_diff_eq!(g.data()[0], -0.1192, epsilon = 1e-4);
        assert_abs_diff_eq!(g.data()[1], 0.1192, epsilon = 1e-4);

        let (l, g) = loss_and_grad(LossKind::Mse, &o, &o).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);

        let (_, g) = loss_and_grad(
            LossKind::SigmoidCe,
            &Tensor::from_rows(&[&[0.0]]),
            &Tensor::from_rows(&[&[1.0]]),
        )
        .unwrap();
        assert_eq!(g.data(), &[-0.5]);
    }

    #[test]
    fn loss_names_round_trip() {
        for k in [LossKind::SoftmaxCe, LossKind::SigmoidCe, LossKind::Mse] {
            assert_eq!(k.to_string().parse::<LossKind>().unwrap(), k);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_derivative(SurrogateKind::FastSigmoid, 0.0), 1.0);
        assert_abs_diff_eq!(
            surrogate_derivative(SurrogateKind::FastSigmoid, 1.0),
            1.0 / 676.0,
            epsilon = 1e-15
        );
        for k in [SurrogateKind::FastSigmoid, SurrogateKind::ArctanShift] {
            for x in [0.1, 0.7, 3.0] {
                assert_eq!(surrogate_derivative(k, x), surrogate_derivative(k, -x));
            }
        }
    }

    #[test]
    fn single_dense_gradient() {
        let mut net = Network::new(
            &[2],
            vec![LayerSpec::Dense {
                inputs: 2,
                outputs: 1,
                bias: false,
            }],
        )
        .unwrap();
        net.params_mut()[0].data_mut().copy_from_slice(&[2.0, -1.0]);
        let tape = net.forward_eval(&Tensor::from_rows(&[&[1.0, 1.0]])).unwrap();
        let b = grad_backward(&net, &tape, &Tensor::from_rows(&[&[1.0]]), None).unwrap();
        assert_eq!(b.delta.tensors[0].data(), &[1.0, 1.0]);
        assert_eq!(b.input_grad().data(), &[2.0, -1.0]);
    }

    #[test]
    fn heaviside_without_surrogate_blocks_gradient() {
        let net = Network::mlp(3, &[5], 2, ActivationKind::Heaviside, 4).unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64).sin());
        let tape = net.forward_eval(&x).unwrap();
        let g = Tensor::full(&[4, 2], 1.0);
        let b = grad_backward(&net, &tape, &g, None).unwrap();
        assert_eq!(b.delta.tensors[0].max_abs(), 0.0);
        assert_eq!(b.delta.tensors[1].max_abs(), 0.0);
        let s = grad_backward(&net, &tape, &g, Some(SurrogateKind::FastSigmoid)).unwrap();
        assert!(s.delta.tensors[0].max_abs() > 0.0);
    }

    #[test]
    fn sgd_examples() {
        let mut net = Network::new(
            &[1],
            vec![LayerSpec::Dense {
                inputs: 1,
                outputs: 1,
                bias: false,
            }],
        )
        .unwrap();
        net.params_mut()[0].data_mut()[0] = 1.0;
        let g = GradDelta {
            tensors: vec![Tensor::full(&[1, 1], 1.0)],
        };
        let mut opt = SgdOptimizer::new(&net, 0.1, 0.0).unwrap();
        opt.step(&mut net, &g).unwrap();
        assert_abs_diff_eq!(net.params()[0].data()[0], 0.9, epsilon = 1e-15);

        let mut frozen = net.clone();
        let mut opt0 = SgdOptimizer::new(&frozen, 0.0, 0.5).unwrap();
        opt0.step(&mut frozen, &g).unwrap();
        assert_eq!(frozen, net);

        let mut opt = SgdOptimizer::new(&net, 1.0, 0.5).unwrap();
        let w0 = net.params()[0].data()[0];
        opt.step(&mut net, &g).unwrap();
        let first = w0 - net.params()[0].data()[0];
        let w1 = net.params()[0].data()[0];
        opt.step(&mut net, &g).unwrap();
        let second = w1 - net.params()[0].data()[0];
        assert!(second > first);
    }

    #[test]
    fn theorem_holds_on_relu_and_fails_on_silu() {
        let x = Tensor::from_fn(&[6, 2], |i| (i as f64 * 1.3).sin() * 2.0);
        let y = Tensor::from_fn(&[6, 3], |i| if i % 3 == (i / 3) % 3 { 1.0 } else { 0.0 });
        let relu = Network::mlp(2, &[4], 3, ActivationKind::Relu, 11).unwrap();
        let rep = theorem1_check(&relu, &x, &y, LossKind::SoftmaxCe, 1e-9).unwrap();
        assert!(rep.passed(), "{rep}");
        assert!(!rep.hidden.is_empty());
        let silu = Network::mlp(2, &[4], 3, ActivationKind::Silu, 11).unwrap();
        let rep = theorem1_check(&silu, &x, &y, LossKind::SoftmaxCe, 1e-9).unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn train_mode_batchnorm_gradient_sums_to_zero() {
        let mut net = Network::build(
            &[3],
            vec![
                LayerSpec::dense(3, 4),
                LayerSpec::BatchNorm {
                    features: 4,
                    eps: 1e-5,
                    momentum: 0.1,
                },
            ],
            2,
        )
        .unwrap();
        let x = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.7).cos());
        let (_, tape) = net.forward(&x, &ForwardOptions::train(0)).unwrap();
        let g = Tensor::from_fn(&[5, 4], |i| (i as f64).sin());
        let b = grad_backward(&net, &tape, &g, None).unwrap();
        // shifting a feature's pre-activation uniformly changes nothing after normalization
        let bias_grad = &b.delta.tensors[1];
        assert!(bias_grad.max_abs() < 1e-12);
    }
}
