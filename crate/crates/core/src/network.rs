//! Layer graph, parameter initialization and the taped forward pass.
//!
//! All activations are batched: a network with per-sample input shape `S`
//! consumes tensors of shape `[B, S...]`. The [`ForwardTape`] records every
//! intermediate that the reward decomposition in [`crate::lfp`] and the
//! gradient baseline in [`crate::gradbase`] need to walk the layers backwards.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::snn::LifConfig;
use crate::tensor::{self, ConvGeometry, PoolIndex, Tensor};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ActivationKind {
    Linear,
    Relu,
    LeakyRelu(f64),
    Silu,
    Elu(f64),
    Tanh,
    Sigmoid,
    Heaviside,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ActivationKind {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            ActivationKind::Linear => x,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            ActivationKind::Silu => x * sigmoid(x),
            ActivationKind::Elu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Heaviside => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact derivative; the Heaviside step has derivative 0 everywhere.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Linear => 1.0,
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            ActivationKind::Elu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha * x.exp()
                }
            }
            ActivationKind::Tanh => 1.0 - x.tanh().powi(2),
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Heaviside => 0.0,
        }
    }

    /// Whether positive inputs map to non-negative outputs and negative
    /// inputs to non-positive outputs.
    pub fn is_sign_preserving(self) -> bool {
        !matches!(self, ActivationKind::Sigmoid)
    }
}

pub fn apply_activation(kind: ActivationKind, z: &Tensor) -> Tensor {
    z.map(|v| kind.apply_scalar(v))
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Linear => write!(f, "linear"),
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
            ActivationKind::Silu => write!(f, "silu"),
            ActivationKind::Elu(a) => write!(f, "elu:{a}"),
            ActivationKind::Tanh => write!(f, "tanh"),
            ActivationKind::Sigmoid => write!(f, "sigmoid"),
            ActivationKind::Heaviside => write!(f, "heaviside"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let param = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| Error::Config(format!("bad activation parameter in {s:?}")))
            })
        };
        Ok(match name {
            "linear" => ActivationKind::Linear,
            "relu" => ActivationKind::Relu,
            "leaky_relu" => ActivationKind::LeakyRelu(param(DEFAULT_LEAKY_SLOPE)?),
            "silu" => ActivationKind::Silu,
            "elu" => ActivationKind::Elu(param(1.0)?),
            "tanh" => ActivationKind::Tanh,
            "sigmoid" => ActivationKind::Sigmoid,
            "heaviside" => ActivationKind::Heaviside,
            _ => return Err(Error::Config(format!("unknown activation {s:?}"))),
        })
    }
}

impl TryFrom<String> for ActivationKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ActivationKind> for String {
    fn from(k: ActivationKind) -> String {
        k.to_string()
    }
}

fn default_true() -> bool {
    true
}
fn default_bn_eps() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.1
}
fn default_one() -> usize {
    1
}

/// Declarative description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        k: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d { k: usize, stride: usize },
    BatchNorm {
        features: usize,
        #[serde(default = "default_bn_eps")]
        eps: f64,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
    },
    Dropout { p: f64 },
    Flatten,
    Activation { kind: ActivationKind },
    ResidualSum { branch: Vec<LayerSpec> },
    /// Leaky integrate-and-fire spiking nonlinearity.
    Lif { beta: f64, threshold: f64 },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            bias: true,
        }
    }

    pub fn act(kind: ActivationKind) -> Self {
        LayerSpec::Activation { kind }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: Vec<usize>| Error::ShapeMismatch {
            op: "layer chain",
            expected,
            got: input.to_vec(),
        };
        match self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if input != [*inputs] {
                    return Err(bad(vec![*inputs]));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                c_in,
                c_out,
                k,
                stride,
                pad,
                ..
            } => {
                let g = ConvGeometry::new(input, &[*c_out, *c_in, *k, *k], *stride, *pad)?;
                Ok(g.out_shape().to_vec())
            }
            LayerSpec::MaxPool2d { k, stride } => {
                if input.len() != 3 {
                    return Err(bad(vec![0, 0, 0]));
                }
                let (h, w) = (input[1], input[2]);
                if *k == 0 || *stride == 0 || *k > h.min(w) {
                    return Err(Error::WindowTooLarge {
                        window: *k,
                        extent: h.min(w),
                    });
                }
                Ok(vec![input[0], (h - k) / stride + 1, (w - k) / stride + 1])
            }
            LayerSpec::BatchNorm { features, eps, .. } => {
                if input.first() != Some(features) || !(input.len() == 1 || input.len() == 3) {
                    return Err(bad(vec![*features]));
                }
                if *eps < 0.0 {
                    return Err(Error::InvalidArgument("batch-norm eps must be >= 0".into()));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::InvalidArgument(format!("dropout p={p} outside [0,1)")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::ResidualSum { branch } => {
                let mut s = input.to_vec();
                for spec in branch {
                    s = spec.output_shape(&s)?;
                }
                if s != input {
                    return Err(Error::ShapeMismatch {
                        op: "residual branch",
                        expected: input.to_vec(),
                        got: s,
                    });
                }
                Ok(s)
            }
            LayerSpec::Lif { beta, .. } => {
                if !(*beta > 0.0 && *beta <= 1.0) {
                    return Err(Error::InvalidArgument(format!("LIF beta={beta} outside (0,1]")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Materialized layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        /// `outputs × inputs`
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Conv2d {
        /// `c_out × c_in × k × k`
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        k: usize,
        stride: usize,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        eps: f64,
        momentum: f64,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    Activation(ActivationKind),
    ResidualSum(Vec<Layer>),
    Lif(LifConfig),
}

impl Layer {
    fn from_spec(spec: &LayerSpec) -> Self {
        match spec {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
            } => Layer::Dense {
                weight: Tensor::zeros(&[*outputs, *inputs]),
                bias: bias.then(|| Tensor::zeros(&[*outputs])),
            },
            LayerSpec::Conv2d {
                c_in,
                c_out,
                k,
                stride,
                pad,
                bias,
            } => Layer::Conv2d {
                weight: Tensor::zeros(&[*c_out, *c_in, *k, *k]),
                bias: bias.then(|| Tensor::zeros(&[*c_out])),
                stride: *stride,
                pad: *pad,
            },
            LayerSpec::MaxPool2d { k, stride } => Layer::MaxPool2d {
                k: *k,
                stride: *stride,
            },
            LayerSpec::BatchNorm {
                features,
                eps,
                momentum,
            } => Layer::BatchNorm {
                gamma: Tensor::full(&[*features], 1.0),
                beta: Tensor::zeros(&[*features]),
                running_mean: Tensor::zeros(&[*features]),
                running_var: Tensor::full(&[*features], 1.0),
                eps: *eps,
                momentum: *momentum,
            },
            LayerSpec::Dropout { p } => Layer::Dropout { p: *p },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Activation { kind } => Layer::Activation(*kind),
            LayerSpec::ResidualSum { branch } => {
                Layer::ResidualSum(branch.iter().map(Layer::from_spec).collect())
            }
            LayerSpec::Lif { beta, threshold } => Layer::Lif(LifConfig {
                beta: *beta,
                threshold: *threshold,
            }),
        }
    }

    /// Whether this layer carries prunable connection weights.
    pub fn has_connections(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Location and role of one parameter tensor in the flattened parameter list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    /// Connection weights of dense and convolutional layers.
    pub fn is_prunable(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// How biases are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasInit {
    Zero,
    /// Uniform in `±1/sqrt(fan_in)`.
    #[default]
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward pass settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Std of Gaussian noise added to hidden activation outputs in train mode.
    pub noise_std: f64,
    pub seed: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            noise_std: 0.0,
            seed,
        }
    }

    pub fn with_noise(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }
}

/// Membrane state of one LIF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LifLayerState {
    pub potential: Tensor,
    pub spikes: Tensor,
}

/// Per-layer record of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerTape {
    Dense {
        input: Tensor,
        z: Tensor,
    },
    Conv2d {
        input: Tensor,
        z: Tensor,
    },
    MaxPool2d {
        index: PoolIndex,
    },
    BatchNorm {
        input: Tensor,
        normalized: Tensor,
        output: Tensor,
        mean: Vec<f64>,
        var: Vec<f64>,
        /// Statistics were computed from this batch rather than running values.
        batch_stats: bool,
    },
    Dropout {
        /// Per-element multiplier, `0` or `1/(1-p)`; `None` when inactive.
        mask: Option<Tensor>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Activation {
        z: Tensor,
        output: Tensor,
        noise: Option<Tensor>,
    },
    ResidualSum {
        input: Tensor,
        branch: Vec<LayerTape>,
        branch_out: Tensor,
        output: Tensor,
    },
    Lif {
        /// Input drive `W·X[t]` (the preceding layer's output).
        drive: Tensor,
        /// Carried-over term `β·U[t-1] - θ·S[t-1]`.
        membrane: Tensor,
        potential: Tensor,
        spikes: Tensor,
    },
}

impl LayerTape {
    fn shape_name(&self) -> &'static str {
        match self {
            LayerTape::Dense { .. } => "dense",
            LayerTape::Conv2d { .. } => "conv2d",
            LayerTape::MaxPool2d { .. } => "maxpool2d",
            LayerTape::BatchNorm { .. } => "batch_norm",
            LayerTape::Dropout { .. } => "dropout",
            LayerTape::Flatten { .. } => "flatten",
            LayerTape::Activation { .. } => "activation",
            LayerTape::ResidualSum { .. } => "residual_sum",
            LayerTape::Lif { .. } => "lif",
        }
    }
}

/// Everything recorded by [`Network::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTape {
    pub layers: Vec<LayerTape>,
    pub output: Tensor,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }

    /// Fraction of exactly-zero pre-noise outputs of the last activation layer.
    pub fn dead_fraction(&self) -> Option<f64> {
        self.layers.iter().rev().find_map(|t| match t {
            LayerTape::Activation { z, output, noise } => {
                let zeros = match noise {
                    Some(n) => output
                        .data()
                        .iter()
                        .zip(n.data())
                        .filter(|(o, n)| *o - *n == 0.0)
                        .count(),
                    None => output.data().iter().filter(|&&o| o == 0.0).count(),
                };
                Some(zeros as f64 / z.len().max(1) as f64)
            }
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Validate the layer chain and allocate parameters (all zero, γ=1).
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for spec in &specs {
            shape = spec.output_shape(&shape)?;
        }
        let layers = specs.iter().map(Layer::from_spec).collect();
        Ok(Self {
            input_shape: input_shape.to_vec(),
            specs,
            layers,
        })
    }

    /// Validate and initialize with [`Network::init_params`].
    pub fn build(input_shape: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::new(input_shape, specs)?;
        net.init_params(seed);
        Ok(net)
    }

    /// Dense ReLU stack `inputs → hidden... → outputs` with a linear head.
    pub fn mlp(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        act: ActivationKind,
        seed: u64,
    ) -> Result<Self> {
        Self::build(&[inputs], mlp_specs(inputs, hidden, outputs, act, true), seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = self.input_shape.clone();
        for spec in &self.specs {
            s = spec.output_shape(&s).expect("validated at construction");
        }
        s
    }

    /// Weights uniform in `±sqrt(6/fan_in)`, biases per [`BiasInit::Uniform`],
    /// γ=1, β=0. Deterministic in `seed`.
    pub fn init_params(&mut self, seed: u64) {
        self.init_params_with(seed, BiasInit::default());
    }

    pub fn init_params_with(&mut self, seed: u64, bias_init: BiasInit) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_layers(&mut self.layers, &mut rng, bias_init);
    }

    /// All trainable tensors in a fixed depth-first order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        collect_params(&self.layers, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        collect_params_mut(&mut self.layers, &mut out);
        out
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        collect_info(&self.layers, "", &mut out);
        out
    }

    /// Batch-norm running statistics (mean, var per layer) in parameter order.
    pub fn buffers(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        collect_buffers(&self.layers, &mut out);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        collect_buffers_mut(&mut self.layers, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.rows()];
            expected.extend(&self.input_shape);
            return Err(Error::ShapeMismatch {
                op: "forward input",
                expected,
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Run the network on a batch and record the tape. In train mode this
    /// samples dropout masks and activation noise from `opts.seed` and updates
    /// batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor, opts: &ForwardOptions) -> Result<(Tensor, ForwardTape)> {
        let tape = self.run(x, opts, None)?;
        if opts.mode == Mode::Train {
            update_running_stats(&mut self.layers, &tape.layers);
        }
        Ok((tape.output.clone(), tape))
    }

    /// Eval-mode forward that leaves the network untouched.
    pub fn forward_eval(&self, x: &Tensor) -> Result<ForwardTape> {
        self.run(x, &ForwardOptions::eval(), None)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval(x)?.output)
    }

    /// Forward without touching running statistics; LIF layers read and
    /// advance `lif_state` when provided (one entry per LIF layer in order).
    pub fn run(
        &self,
        x: &Tensor,
        opts: &ForwardOptions,
        lif_state: Option<&mut Vec<LifLayerState>>,
    ) -> Result<ForwardTape> {
        self.check_input(x)?;
        if opts.noise_std < 0.0 {
            return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
        }
        let mut ctx = RunCtx {
            opts: *opts,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            lif: lif_state,
            lif_cursor: 0,
            n_layers: self.layers.len(),
        };
        let (output, layers) = run_layers(&self.layers, x.clone(), &mut ctx, true)?;
        output.check_finite("forward")?;
        Ok(ForwardTape { layers, output })
    }

    /// Eval-mode forward of top-level layer `i` alone; LIF layers start from rest.
    pub(crate) fn run_layer_eval(&self, i: usize, x: Tensor) -> Result<(Tensor, LayerTape)> {
        let mut ctx = RunCtx {
            opts: ForwardOptions::eval(),
            rng: ChaCha8Rng::seed_from_u64(0),
            lif: None,
            lif_cursor: 0,
            n_layers: self.layers.len(),
        };
        run_layer(&self.layers[i], x, &mut ctx, false)
    }

    /// Check that `tape` was produced by this network.
    pub fn check_tape(&self, tape: &ForwardTape) -> Result<()> {
        check_tape_layers(&self.layers, &tape.layers)
    }
}

/// Specs for a dense stack with activation `act` after every hidden layer.
pub fn mlp_specs(
    inputs: usize,
    hidden: &[usize],
    outputs: usize,
    act: ActivationKind,
    bias: bool,
) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = inputs;
    for &h in hidden {
        specs.push(LayerSpec::Dense {
            inputs: prev,
            outputs: h,
            bias,
        });
        specs.push(LayerSpec::act(act));
        prev = h;
    }
    specs.push(LayerSpec::Dense {
        inputs: prev,
        outputs,
        bias,
    });
    specs
}

fn check_tape_layers(layers: &[Layer], tape: &[LayerTape]) -> Result<()> {
    if layers.len() != tape.len() {
        return Err(Error::TapeMismatch(format!(
            "{} layers but {} tape entries",
            layers.len(),
            tape.len()
        )));
    }
    for (i, (layer, t)) in layers.iter().zip(tape).enumerate() {
        let ok = match (layer, t) {
            (Layer::Dense { weight, .. }, LayerTape::Dense { input, z }) => {
                input.row_len() == weight.shape()[1] && z.row_len() == weight.shape()[0]
            }
            (Layer::Conv2d { weight, .. }, LayerTape::Conv2d { input, z }) => {
                input.ndim() == 4 && input.shape()[1] == weight.shape()[1] && z.shape()[1] == weight.shape()[0]
            }
            (Layer::MaxPool2d { .. }, LayerTape::MaxPool2d { .. })
            | (Layer::BatchNorm { .. }, LayerTape::BatchNorm { .. })
            | (Layer::Dropout { .. }, LayerTape::Dropout { .. })
            | (Layer::Flatten, LayerTape::Flatten { .. })
            | (Layer::Activation(_), LayerTape::Activation { .. })
            | (Layer::Lif(_), LayerTape::Lif { .. }) => true,
            (Layer::ResidualSum(inner), LayerTape::ResidualSum { branch, .. }) => {
                check_tape_layers(inner, branch)?;
                true
            }
            _ => false,
        };
        if !ok {
            return Err(Error::TapeMismatch(format!(
                "layer {i} does not match tape entry {}",
                t.shape_name()
            )));
        }
    }
    Ok(())
}

struct RunCtx<'a> {
    opts: ForwardOptions,
    rng: ChaCha8Rng,
    lif: Option<&'a mut Vec<LifLayerState>>,
    lif_cursor: usize,
    n_layers: usize,
}

fn run_layers(
    layers: &[Layer],
    mut x: Tensor,
    ctx: &mut RunCtx<'_>,
    top_level: bool,
) -> Result<(Tensor, Vec<LayerTape>)> {
    let mut tapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let is_last = top_level && i + 1 == ctx.n_layers;
        let (y, t) = run_layer(layer, x, ctx, is_last)?;
        tapes.push(t);
        x = y;
    }
    Ok((x, tapes))
}

fn run_layer(
    layer: &Layer,
    x: Tensor,
    ctx: &mut RunCtx<'_>,
    is_last: bool,
) -> Result<(Tensor, LayerTape)> {
    let train = ctx.opts.mode == Mode::Train;
    Ok(match layer {
        Layer::Dense { weight, bias } => {
            let z = dense_forward(weight, bias.as_ref(), &x)?;
            (z.clone(), LayerTape::Dense { input: x, z })
        }
        Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
        } => {
            let z = conv_forward(weight, bias.as_ref(), &x, *stride, *pad)?;
            (z.clone(), LayerTape::Conv2d { input: x, z })
        }
        Layer::MaxPool2d { k, stride } => {
            let (y, index) = tensor::maxpool2d(&x, *k, *stride)?;
            (y, LayerTape::MaxPool2d { index })
        }
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            ..
        } => {
            let (mean, var) = if train {
                batch_stats(&x)
            } else {
                (running_mean.data().to_vec(), running_var.data().to_vec())
            };
            if let Some(&v) = var.iter().find(|&&v| v + eps <= 0.0) {
                return Err(Error::NonPositiveVariance(v + eps));
            }
            let (normalized, output) = batchnorm_apply(&x, gamma, beta, &mean, &var, *eps);
            (
                output.clone(),
                LayerTape::BatchNorm {
                    input: x,
                    normalized,
                    output,
                    mean,
                    var,
                    batch_stats: train,
                },
            )
        }
        Layer::Dropout { p } => {
            if train && *p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mask = Tensor::from_fn(x.shape(), |_| {
                    if ctx.rng.random::<f64>() < *p {
                        0.0
                    } else {
                        keep
                    }
                });
                let y = x.mul(&mask)?;
                (y, LayerTape::Dropout { mask: Some(mask) })
            } else {
                (x, LayerTape::Dropout { mask: None })
            }
        }
        Layer::Flatten => {
            let input_shape = x.shape().to_vec();
            let b = x.rows();
            let n = x.row_len();
            (x.reshape(&[b, n])?, LayerTape::Flatten { input_shape })
        }
        Layer::Activation(kind) => {
            let mut output = apply_activation(*kind, &x);
            let noise = if train && ctx.opts.noise_std > 0.0 && !is_last {
                let normal = Normal::new(0.0, ctx.opts.noise_std)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let n = Tensor::from_fn(x.shape(), |_| normal.sample(&mut ctx.rng));
                output.add_assign(&n)?;
                Some(n)
            } else {
                None
            };
            (
                output.clone(),
                LayerTape::Activation {
                    z: x,
                    output,
                    noise,
                },
            )
        }
        Layer::ResidualSum(branch) => {
            let (branch_out, branch_tape) = run_layers(branch, x.clone(), ctx, false)?;
            let output = x.add(&branch_out)?;
            (
                output.clone(),
                LayerTape::ResidualSum {
                    input: x,
                    branch: branch_tape,
                    branch_out,
                    output,
                },
            )
        }
        Layer::Lif(cfg) => {
            let slot = ctx.lif_cursor;
            ctx.lif_cursor += 1;
            let prev = ctx.lif.as_ref().and_then(|s| s.get(slot));
            let membrane = match prev {
                Some(st) => {
                    st.potential.expect_same_shape("lif state", &x)?;
                    st.potential
                        .zip_map(&st.spikes, |u, s| cfg.beta * u - cfg.threshold * s)?
                }
                None => Tensor::zeros(x.shape()),
            };
            let potential = membrane.add(&x)?;
            let spikes = potential.map(|u| if u > cfg.threshold { 1.0 } else { 0.0 });
            if let Some(states) = ctx.lif.as_mut() {
                let st = LifLayerState {
                    potential: potential.clone(),
                    spikes: spikes.clone(),
                };
                if slot < states.len() {
                    states[slot] = st;
                } else {
                    states.push(st);
                }
            }
            (
                spikes.clone(),
                LayerTape::Lif {
                    drive: x,
                    membrane,
                    potential,
                    spikes,
                },
            )
        }
    })
}

pub(crate) fn dense_forward(weight: &Tensor, bias: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let mut z = tensor::matmul_nt(x, weight)?;
    if let Some(b) = bias {
        let n = b.len();
        for row in z.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(z)
}

pub(crate) fn conv_forward(
    weight: &Tensor,
    bias: Option<&Tensor>,
    x: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d batch",
            expected: vec![0, 0, 0, 0],
            got: x.shape().to_vec(),
        });
    }
    let g = ConvGeometry::new(&x.shape()[1..], weight.shape(), stride, pad)?;
    let per: Vec<Vec<f64>> = par::map_range(x.rows(), |b| {
        let mut y = tensor::conv2d_raw(&g, x.row(b), weight.data());
        if let Some(bias) = bias {
            let np = g.out_h() * g.out_w();
            for (c, plane) in y.chunks_mut(np).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias.data()[c]);
            }
        }
        y
    });
    let mut shape = vec![x.rows()];
    shape.extend(g.out_shape());
    Tensor::new(shape, per.concat())
}

/// Number of channels and elements per channel per sample for batch norm.
pub(crate) fn bn_layout(x: &Tensor) -> (usize, usize) {
    let c = x.shape()[1];
    (c, x.row_len() / c)
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub(crate) fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, sp) = bn_layout(x);
    let count = (x.rows() * sp) as f64;
    let mut mean = vec![0.0; c];
    for b in 0..x.rows() {
        for (ch, plane) in x.row(b).chunks(sp).enumerate() {
            mean[ch] += plane.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for b in 0..x.rows() {
        for (ch, plane) in x.row(b).chunks(sp).enumerate() {
            var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

fn batchnorm_apply(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Tensor, Tensor) {
    let (_, sp) = bn_layout(x);
    let mut normalized = x.clone();
    let mut output = x.clone();
    for b in 0..x.rows() {
        let nrow = normalized.row_mut(b);
        for (ch, plane) in nrow.chunks_mut(sp).enumerate() {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv);
        }
        let orow = output.row_mut(b);
        let nrow = normalized.row(b);
        for (ch, (o, n)) in orow.chunks_mut(sp).zip(nrow.chunks(sp)).enumerate() {
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            o.iter_mut().zip(n).for_each(|(o, n)| *o = g * n + bt);
        }
    }
    (normalized, output)
}

fn update_running_stats(layers: &mut [Layer], tapes: &[LayerTape]) {
    for (layer, tape) in layers.iter_mut().zip(tapes) {
        match (layer, tape) {
            (
                Layer::BatchNorm {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                },
                LayerTape::BatchNorm {
                    input,
                    mean,
                    var,
                    batch_stats: true,
                    ..
                },
            ) => {
                let (_, sp) = bn_layout(input);
                let n = (input.rows() * sp) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for (i, (rm, rv)) in running_mean
                    .data_mut()
                    .iter_mut()
                    .zip(running_var.data_mut().iter_mut())
                    .enumerate()
                {
                    *rm = (1.0 - *momentum) * *rm + *momentum * mean[i];
                    *rv = (1.0 - *momentum) * *rv + *momentum * var[i] * unbias;
                }
            }
            (Layer::ResidualSum(inner), LayerTape::ResidualSum { branch, .. }) => {
                update_running_stats(inner, branch)
            }
            _ => {}
        }
    }
}

fn init_layers(layers: &mut [Layer], rng: &mut ChaCha8Rng, bias_init: BiasInit) {
    for layer in layers {
        match layer {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                let fan_in: usize = weight.shape()[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                weight
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-bound..=bound));
                if let Some(b) = bias {
                    let bb = 1.0 / (fan_in as f64).sqrt();
                    b.data_mut().iter_mut().for_each(|v| {
                        *v = match bias_init {
                            BiasInit::Zero => 0.0,
                            BiasInit::Uniform => rng.random_range(-bb..=bb),
                        }
                    });
                }
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => {
                gamma.data_mut().fill(1.0);
                beta.data_mut().fill(0.0);
                running_mean.data_mut().fill(0.0);
                running_var.data_mut().fill(1.0);
            }
            Layer::ResidualSum(inner) => init_layers(inner, rng, bias_init),
            _ => {}
        }
    }
}

fn collect_params<'a>(layers: &'a [Layer], out: &mut Vec<&'a Tensor>) {
    for layer in layers {
        match layer {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                out.push(weight);
                out.extend(bias.as_ref());
            }
            Layer::BatchNorm { gamma, beta, .. } => {
                out.push(gamma);
                out.push(beta);
            }
            Layer::ResidualSum(inner) => collect_params(inner, out),
            _ => {}
        }
    }
}

fn collect_params_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Tensor>) {
    for layer in layers {
        match layer {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                out.push(weight);
                out.extend(bias.as_mut());
            }
            Layer::BatchNorm { gamma, beta, .. } => {
                out.push(gamma);
                out.push(beta);
            }
            Layer::ResidualSum(inner) => collect_params_mut(inner, out),
            _ => {}
        }
    }
}

fn collect_info(layers: &[Layer], prefix: &str, out: &mut Vec<ParamInfo>) {
    for (i, layer) in layers.iter().enumerate() {
        let path = format!("{prefix}{i}");
        let mut push = |suffix: &str, kind, t: &Tensor| {
            out.push(ParamInfo {
                name: format!("{path}.{suffix}"),
                kind,
                shape: t.shape().to_vec(),
            })
        };
        match layer {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                push("weight", ParamKind::Weight, weight);
                if let Some(b) = bias {
                    push("bias", ParamKind::Bias, b);
                }
            }
            Layer::BatchNorm { gamma, beta, .. } => {
                push("gamma", ParamKind::Gamma, gamma);
                push("beta", ParamKind::Beta, beta);
            }
            Layer::ResidualSum(inner) => collect_info(inner, &format!("{path}.branch."), out),
            _ => {}
        }
    }
}

fn collect_buffers<'a>(layers: &'a [Layer], out: &mut Vec<&'a Tensor>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } => {
                out.push(running_mean);
                out.push(running_var);
            }
            Layer::ResidualSum(inner) => collect_buffers(inner, out),
            _ => {}
        }
    }
}

fn collect_buffers_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Tensor>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } => {
                out.push(running_mean);
                out.push(running_var);
            }
            Layer::ResidualSum(inner) => collect_buffers_mut(inner, out),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL_KINDS: [ActivationKind; 8] = [
        ActivationKind::Linear,
        ActivationKind::Relu,
        ActivationKind::LeakyRelu(DEFAULT_LEAKY_SLOPE),
        ActivationKind::Silu,
        ActivationKind::Elu(1.0),
        ActivationKind::Tanh,
        ActivationKind::Sigmoid,
        ActivationKind::Heaviside,
    ];

    fn single_dense(w: [f64; 2]) -> Network {
        let mut net = Network::new(
            &[2],
            vec![LayerSpec::Dense {
                inputs: 2,
                outputs: 1,
                bias: false,
            }],
        )
        .unwrap();
        if let Layer::Dense { weight, .. } = &mut net.layers[0] {
            weight.data_mut().copy_from_slice(&w);
        }
        net
    }

    #[test]
    fn activation_values() {
        assert_eq!(ActivationKind::Relu.apply_scalar(-3.0), 0.0);
        assert_eq!(ActivationKind::Relu.apply_scalar(3.0), 3.0);
        assert_eq!(ActivationKind::Silu.apply_scalar(0.0), 0.0);
        assert!((ActivationKind::Tanh.apply_scalar(1.0) - 0.76159).abs() < 1e-5);
        let h = apply_activation(ActivationKind::Heaviside, &Tensor::vector(vec![0.5, -0.5, 0.0]));
        assert_eq!(h.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(
            ActivationKind::LeakyRelu(DEFAULT_LEAKY_SLOPE).apply_scalar(-2.0),
            -0.02
        );
    }

    #[test]
    fn activation_names_round_trip() {
        for k in ALL_KINDS {
            assert_eq!(k.to_string().parse::<ActivationKind>().unwrap(), k);
        }
        assert!("swish".parse::<ActivationKind>().is_err());
    }

    proptest! {
        #[test]
        fn sign_preservation(x in -50.0f64..50.0) {
            for k in ALL_KINDS.iter().filter(|k| k.is_sign_preserving()) {
                let y = k.apply_scalar(x);
                if x > 0.0 { prop_assert!(y >= 0.0, "{k} at {x}"); }
                if x < 0.0 { prop_assert!(y <= 0.0, "{k} at {x}"); }
            }
        }
    }

    #[test]
    fn sigmoid_is_not_sign_preserving() {
        assert!(ActivationKind::Sigmoid.apply_scalar(-1.0) > 0.0);
        assert!(!ActivationKind::Sigmoid.is_sign_preserving());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let specs = vec![LayerSpec::Dense {
            inputs: 2,
            outputs: 2,
            bias: true,
        }];
        let a = Network::build(&[2], specs.clone(), 7).unwrap();
        let b = Network::build(&[2], specs, 7).unwrap();
        assert_eq!(a, b);
        let bound = 3f64.sqrt();
        assert_eq!(a.params()[0].len(), 4);
        assert!(a.params()[0].data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn batchnorm_gamma_starts_at_one() {
        let net = Network::build(
            &[3, 4, 4],
            vec![
                LayerSpec::Conv2d {
                    c_in: 3,
                    c_out: 2,
                    k: 3,
                    stride: 1,
                    pad: 1,
                    bias: false,
                },
                LayerSpec::BatchNorm {
                    features: 2,
                    eps: 1e-5,
                    momentum: 0.1,
                },
            ],
            1,
        )
        .unwrap();
        let info = net.param_info();
        let gamma = info.iter().position(|p| p.kind == ParamKind::Gamma).unwrap();
        assert!(net.params()[gamma].data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn dense_forward_hand_value() {
        let mut net = single_dense([2.0, -1.0]);
        let x = Tensor::from_rows(&[&[1.0, 1.0]]);
        let (y, tape) = net.forward(&x, &ForwardOptions::eval()).unwrap();
        assert_eq!(y.data(), &[1.0]);
        match &tape.layers[0] {
            LayerTape::Dense { z, .. } => assert_eq!(z.data(), &[1.0]),
            other => panic!("unexpected tape {other:?}"),
        }
    }

    #[test]
    fn train_without_noise_or_dropout_matches_eval() {
        let mut net = Network::build(
            &[3],
            vec![
                LayerSpec::dense(3, 5),
                LayerSpec::act(ActivationKind::Relu),
                LayerSpec::Dropout { p: 0.0 },
                LayerSpec::dense(5, 2),
            ],
            3,
        )
        .unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64).sin());
        let eval = net.predict(&x).unwrap();
        let (train, _) = net.forward(&x, &ForwardOptions::train(11)).unwrap();
        assert_eq!(eval, train);
        assert_eq!(net.predict(&x).unwrap(), eval);
    }

    #[test]
    fn dropout_masks_and_scales() {
        let mut net = Network::build(&[50], vec![LayerSpec::Dropout { p: 0.5 }], 0).unwrap();
        let x = Tensor::full(&[2, 50], 3.0);
        let (y, tape) = net.forward(&x, &ForwardOptions::train(5)).unwrap();
        let LayerTape::Dropout { mask: Some(mask) } = &tape.layers[0] else {
            panic!("no mask")
        };
        for (v, m) in y.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 6.0);
            }
        }
        assert!(mask.data().iter().any(|&m| m == 0.0));
    }

    #[test]
    fn dropout_expectation_matches_eval() {
        let mut net = Network::build(
            &[4],
            vec![
                LayerSpec::dense(4, 16),
                LayerSpec::act(ActivationKind::Relu),
                LayerSpec::Dropout { p: 0.3 },
                LayerSpec::dense(16, 3),
            ],
            9,
        )
        .unwrap();
        let x = Tensor::from_fn(&[1, 4], |i| 0.5 + i as f64 * 0.25);
        let eval = net.predict(&x).unwrap();
        let runs = 4000;
        let mut mean = Tensor::zeros(eval.shape());
        for s in 0..runs {
            let (y, _) = net.forward(&x, &ForwardOptions::train(s)).unwrap();
            mean.add_assign(&y).unwrap();
        }
        let mean = mean.scale(1.0 / runs as f64);
        let scale = eval.max_abs().max(1e-3);
        for (m, e) in mean.data().iter().zip(eval.data()) {
            assert!((m - e).abs() / scale < 0.02, "{m} vs {e}");
        }
    }

    #[test]
    fn residual_sum_adds_branch() {
        let mut net = Network::build(
            &[3],
            vec![LayerSpec::ResidualSum {
                branch: vec![LayerSpec::dense(3, 3), LayerSpec::act(ActivationKind::Tanh)],
            }],
            2,
        )
        .unwrap();
        let x = Tensor::from_rows(&[&[0.3, -1.0, 2.0]]);
        let (y, tape) = net.forward(&x, &ForwardOptions::eval()).unwrap();
        let LayerTape::ResidualSum { branch_out, .. } = &tape.layers[0] else {
            panic!()
        };
        assert_eq!(y, x.add(branch_out).unwrap());
    }

    #[test]
    fn noise_only_in_train_mode_and_hidden_layers() {
        let mut net = Network::build(
            &[2],
            vec![
                LayerSpec::dense(2, 4),
                LayerSpec::act(ActivationKind::Heaviside),
                LayerSpec::dense(4, 2),
                LayerSpec::act(ActivationKind::Linear),
            ],
            4,
        )
        .unwrap();
        let x = Tensor::from_rows(&[&[1.0, -1.0]]);
        let (_, tape) = net
            .forward(&x, &ForwardOptions::train(1).with_noise(0.1))
            .unwrap();
        assert!(matches!(&tape.layers[1], LayerTape::Activation { noise: Some(_), .. }));
        assert!(matches!(&tape.layers[3], LayerTape::Activation { noise: None, .. }));
        let (_, tape) = net
            .forward(&x, &ForwardOptions::eval().with_noise(0.1))
            .unwrap();
        assert!(matches!(&tape.layers[1], LayerTape::Activation { noise: None, .. }));
    }

    #[test]
    fn shape_chain_is_validated() {
        assert!(Network::new(&[3], vec![LayerSpec::dense(4, 2)]).is_err());
        let mut net = Network::build(&[3], vec![LayerSpec::dense(3, 2)], 0).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        assert!(net.forward(&x, &ForwardOptions::eval()).is_err());
    }

    #[test]
    fn batchnorm_running_stats_update() {
        let mut net = Network::build(
            &[2],
            vec![LayerSpec::BatchNorm {
                features: 2,
                eps: 0.0,
                momentum: 0.1,
            }],
            0,
        )
        .unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (y, _) = net.forward(&x, &ForwardOptions::train(0)).unwrap();
        assert_eq!(y.data()[0], -1.0);
        let b = net.buffers();
        assert!((b[0].data()[0] - 0.2).abs() < 1e-12);
        // unbiased variance of [1,3] is 2
        assert!((b[1].data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn dead_fraction_ignores_noise() {
        let mut net = Network::build(
            &[2],
            vec![
                LayerSpec::dense(2, 8),
                LayerSpec::act(ActivationKind::Relu),
                LayerSpec::dense(8, 2),
            ],
            1,
        )
        .unwrap();
        let x = Tensor::from_fn(&[16, 2], |i| (i as f64 * 0.7).sin());
        let (_, clean) = net.forward(&x, &ForwardOptions::train(3)).unwrap();
        let (_, noisy) = net
            .forward(&x, &ForwardOptions::train(3).with_noise(0.5))
            .unwrap();
        assert_eq!(clean.dead_fraction(), noisy.dead_fraction());
    }
}
