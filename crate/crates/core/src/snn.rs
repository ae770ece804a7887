//! Leaky integrate-and-fire networks.
//!
//! A spiking network is an ordinary [`Network`] containing [`LayerSpec::Lif`]
//! layers. It is simulated for `n` steps on a constant-encoded input, carrying
//! membrane state across steps. LFP decomposes each step's reward within that
//! step's graph; the gradient baseline unrolls through time with a surrogate
//! spike derivative.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradbase::{self, GradDelta, SgdOptimizer, SurrogateKind};
use crate::lfp::{self, LfpConfig, LfpOptimizer, ParamDelta};
use crate::network::{
    ForwardTape, Layer, LayerSpec, LayerTape, Network,
};
use crate::rewards;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifConfig {
    pub beta: f64,
    pub threshold: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            threshold: 1.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0,1], got {}", self.beta)));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Membrane potential and last spikes of a single LIF population.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub potential: Tensor,
    pub last_spike: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            potential: Tensor::zeros(shape),
            last_spike: Tensor::zeros(shape),
        }
    }
}

/// `U[t] = β·U[t-1] + drive - θ·S[t-1]`, spiking where `U[t] > θ`.
pub fn lif_step(cfg: &LifConfig, state: &LifState, drive: &Tensor) -> Result<(Tensor, LifState)> {
    state.potential.expect_same_shape("lif_step", drive)?;
    let mut potential = state
        .potential
        .zip_map(&state.last_spike, |u, s| cfg.beta * u - cfg.threshold * s)?;
    potential.add_assign(drive)?;
    let spikes = potential.map(|u| if u > cfg.threshold { 1.0 } else { 0.0 });
    Ok((
        spikes.clone(),
        LifState {
            potential,
            last_spike: spikes,
        },
    ))
}

/// `x` repeated `n` times along a new leading axis.
pub fn constant_encode(x: &Tensor, n: usize) -> Result<Tensor> {
    if n < 1 {
        return Err(Error::InvalidArgument("number of steps must be >= 1".into()));
    }
    let mut shape = vec![n];
    shape.extend(x.shape());
    let mut data = Vec::with_capacity(n * x.len());
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Tensor::new(shape, data)
}

/// Dense LIF stack: every dense layer, including the output layer, feeds a
/// LIF population.
pub fn snn_mlp_specs(inputs: usize, hidden: &[usize], outputs: usize, lif: LifConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = inputs;
    for &w in hidden.iter().chain(std::iter::once(&outputs)) {
        specs.push(LayerSpec::Dense {
            inputs: prev,
            outputs: w,
            bias: true,
        });
        specs.push(LayerSpec::Lif {
            beta: lif.beta,
            threshold: lif.threshold,
        });
        prev = w;
    }
    specs
}

/// Recorded simulation of a batch.
///
/// The steps are stacked along the batch axis of a single tape: row
/// `t·B + b` holds sample `b` at step `t`, and within one step every layer
/// sees only that step's rows. LIF entries record the drive, the carried
/// membrane term, the potential and the spikes of every step.
#[derive(Clone, Debug, PartialEq)]
pub struct SnnRun {
    pub steps: usize,
    pub batch: usize,
    pub tape: ForwardTape,
    /// Whether layer 0 is a dense layer evaluated once on the constant input
    /// and repeated over the steps.
    pub static_head: bool,
}

impl SnnRun {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Output spikes of all samples at step `t` (`B×C`).
    pub fn step_output(&self, t: usize) -> Tensor {
        let c = self.tape.output.row_len();
        let rows = &self.tape.output.data()[t * self.batch * c..(t + 1) * self.batch * c];
        Tensor::new(vec![self.batch, c], rows.to_vec()).expect("consistent shapes")
    }

    /// Output spike train of sample `b` as `n×C`.
    pub fn spike_train(&self, b: usize) -> Tensor {
        let c = self.tape.output.row_len();
        let mut data = Vec::with_capacity(self.steps * c);
        for t in 0..self.steps {
            data.extend_from_slice(self.tape.output.row(t * self.batch + b));
        }
        Tensor::new(vec![self.steps, c], data).expect("consistent shapes")
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| snn_predict(&self.spike_train(b)))
            .collect()
    }
}

fn contains_lif(layers: &[Layer]) -> bool {
    layers.iter().any(|l| match l {
        Layer::Lif(_) => true,
        Layer::ResidualSum(b) => contains_lif(b),
        _ => false,
    })
}

/// `x` with its rows repeated `n` times as whole blocks.
fn repeat_rows(x: &Tensor, n: usize) -> Tensor {
    let mut shape = x.shape().to_vec();
    shape[0] *= n;
    let mut data = Vec::with_capacity(n * x.len());
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Tensor::new(shape, data).expect("consistent shapes")
}

/// Sum of the `n` row blocks of `x`.
fn sum_blocks(x: &Tensor, n: usize) -> Tensor {
    let mut shape = x.shape().to_vec();
    shape[0] /= n;
    let block = x.len() / n;
    let mut out = x.data()[..block].to_vec();
    for chunk in x.data().chunks(block).skip(1) {
        out.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
    }
    Tensor::new(shape, out).expect("consistent shapes")
}

fn col_sums(x: &Tensor) -> Tensor {
    let c = x.row_len();
    let mut col = vec![0.0; c];
    for r in x.data().chunks(c) {
        col.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    Tensor::vector(col)
}

/// First `b` rows of the stacked `x`, i.e. step 0.
fn first_step(x: &Tensor, b: usize) -> Result<Tensor> {
    Tensor::new(vec![b, x.row_len()], x.data()[..b * x.row_len()].to_vec())
}

/// Run a LIF population over the stacked drive of `n` steps, starting at rest.
fn lif_layer(cfg: &LifConfig, drive: Tensor, n: usize) -> (Tensor, LayerTape) {
    let per = drive.len() / n;
    let mut membrane = Tensor::zeros(drive.shape());
    let mut potential = Tensor::zeros(drive.shape());
    let mut spikes = Tensor::zeros(drive.shape());
    let (m, u, s) = (membrane.data_mut(), potential.data_mut(), spikes.data_mut());
    for k in 0..drive.len() {
        if k >= per {
            m[k] = cfg.beta * u[k - per] - cfg.threshold * s[k - per];
        }
        u[k] = m[k] + drive.data()[k];
        s[k] = if u[k] > cfg.threshold { 1.0 } else { 0.0 };
    }
    (
        spikes.clone(),
        LayerTape::Lif {
            drive,
            membrane,
            potential,
            spikes,
        },
    )
}

/// Simulate `n` steps on the constant-encoded batch `x`, states starting at zero.
///
/// Layers are evaluated one at a time over all steps, which is exact because
/// state only flows through time inside LIF populations.
pub fn snn_forward(net: &Network, x: &Tensor, n: usize) -> Result<SnnRun> {
    if n < 1 {
        return Err(Error::InvalidArgument("number of steps must be >= 1".into()));
    }
    if !contains_lif(&net.layers) {
        return Err(Error::InvalidArgument("network has no LIF layers".into()));
    }
    if net
        .layers
        .iter()
        .any(|l| matches!(l, Layer::ResidualSum(b) if contains_lif(b)))
    {
        return Err(Error::InvalidArgument(
            "LIF layers inside residual branches are not supported".into(),
        ));
    }
    net.check_input(x)?;
    let batch = x.rows();
    let static_head = matches!(net.layers.first(), Some(Layer::Dense { .. }))
        && matches!(net.layers.get(1), Some(Layer::Lif(_)));
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut h = if static_head {
        let (z, tape) = net.run_layer_eval(0, x.clone())?;
        let LayerTape::Dense { input, z: zt } = tape else {
            unreachable!("dense layer has a dense tape")
        };
        layers.push(LayerTape::Dense {
            input: repeat_rows(&input, n),
            z: repeat_rows(&zt, n),
        });
        repeat_rows(&z, n)
    } else {
        repeat_rows(x, n)
    };
    for (i, layer) in net.layers.iter().enumerate().skip(layers.len()) {
        let (y, tape) = match layer {
            Layer::Lif(cfg) => lif_layer(cfg, h, n),
            _ => net.run_layer_eval(i, h)?,
        };
        layers.push(tape);
        h = y;
    }
    h.check_finite("snn_forward")?;
    Ok(SnnRun {
        steps: n,
        batch,
        tape: ForwardTape { layers, output: h },
        static_head,
    })
}

/// Class with the most output spikes; ties go to the lowest index.
pub fn snn_predict(spikes: &Tensor) -> usize {
    let c = spikes.row_len();
    let mut counts = vec![0.0; c];
    for t in 0..spikes.rows() {
        counts.iter_mut().zip(spikes.row(t)).for_each(|(a, s)| *a += s);
    }
    tensor::argmax(&counts)
}

/// Reward matrices (`n×C`) for every sample of a run.
pub fn run_rewards(run: &SnnRun, labels: &[usize]) -> Result<Vec<Tensor>> {
    if labels.len() != run.batch_size() {
        return Err(Error::ShapeMismatch {
            op: "run_rewards",
            expected: vec![run.batch_size()],
            got: vec![labels.len()],
        });
    }
    labels
        .iter()
        .enumerate()
        .map(|(b, &c)| rewards::snn_reward(&run.spike_train(b), c, run.steps()))
        .collect()
}

/// Result of [`snn_lfp_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct SnnLfpStep {
    pub delta: ParamDelta,
    /// Per step, output reward sum minus input reward sum, summed over the batch.
    pub discarded: Vec<f64>,
}

/// `|w| ⊙ g · scale`
fn abs_scaled(w: &Tensor, g: &Tensor, scale: f64) -> Result<Tensor> {
    w.zip_map(g, |w, g| w.abs() * g * scale)
}

/// LFP over all steps of `run`: step `t` decomposes `R[t]` within its own
/// graph; the membrane share at each LIF layer is dropped. Per-step deltas
/// are batch means, summed over the steps.
pub fn snn_lfp_step(net: &Network, run: &SnnRun, rewards: &[Tensor], cfg: &LfpConfig) -> Result<SnnLfpStep> {
    let (n, b) = (run.steps(), run.batch_size());
    let classes = run.tape.output.row_len();
    if rewards.len() != b {
        return Err(Error::ShapeMismatch {
            op: "snn_lfp_step",
            expected: vec![b, n, classes],
            got: vec![rewards.len()],
        });
    }
    for r in rewards {
        r.expect_shape("snn_lfp_step", &[n, classes])?;
    }
    // a reward asks for more output in the direction of the output potential's sign
    let out_sign = match run.tape.layers.last() {
        Some(LayerTape::Lif { potential, .. }) => potential,
        _ => &run.tape.output,
    };
    let r = Tensor::from_fn(&[n * b, classes], |i| {
        let row = i / classes;
        let sign = if out_sign.data()[i] < 0.0 { -1.0 } else { 1.0 };
        rewards[row % b].row(row / b)[i % classes] * sign
    });
    let from = usize::from(run.static_head);
    let (mut tail, r_head, discarded) =
        lfp::lfp_backward_tail(net, &run.tape, &r, cfg.rule, cfg.normalize_between_layers, from)?;
    // tail updates are means over n·B rows; the step sum of batch means is n times that
    tail.iter_mut().for_each(|t| *t = t.scale(n as f64));
    let mut tensors = Vec::new();
    if run.static_head {
        let (Layer::Dense { weight, bias }, LayerTape::Dense { input, z }) =
            (&net.layers[0], &run.tape.layers[0])
        else {
            unreachable!("static head is a dense layer")
        };
        // the input is the same at every step, so the step sum folds into the shares
        let s = sum_blocks(&lfp::shares(z, &r_head, cfg.rule, 0)?, n);
        let x0 = first_step(input, b)?;
        let inv_b = 1.0 / b as f64;
        tensors.push(abs_scaled(weight, &tensor::matmul_tn(&s, &x0)?, inv_b)?);
        if let Some(bias) = bias {
            tensors.push(abs_scaled(bias, &col_sums(&s), inv_b)?);
        }
    }
    tensors.extend(tail);
    let per_step = discarded.chunks(b).map(|c| c.iter().sum()).collect();
    Ok(SnnLfpStep {
        delta: ParamDelta { tensors },
        discarded: per_step,
    })
}

/// Cross-entropy of each step's output spikes, averaged over steps and batch,
/// with the per-row gradient for the stacked output.
pub fn spike_ce_loss(run: &SnnRun, y: &Tensor) -> Result<(f64, Tensor)> {
    y.expect_shape("spike_ce_loss", &[run.batch_size(), run.tape.output.row_len()])?;
    gradbase::loss_and_grad(gradbase::LossKind::SoftmaxCe, &run.tape.output, &repeat_rows(y, run.steps()))
}

/// Backpropagation through time with the reset path detached:
/// `dL/dU[t] = dL/dS[t]·s'(U[t]-θ) + β·dL/dU[t+1]`.
pub fn surrogate_bptt(
    net: &Network,
    run: &SnnRun,
    y: &Tensor,
    surrogate: SurrogateKind,
) -> Result<(f64, GradDelta)> {
    let (n, b) = (run.steps(), run.batch_size());
    let (loss, mut g) = spike_ce_loss(run, y)?;
    let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); net.layers.len()];
    for (i, layer) in net.layers.iter().enumerate().rev() {
        match (layer, &run.tape.layers[i]) {
            (Layer::Lif(cfg), LayerTape::Lif { potential, .. }) => {
                let mut gu = g.zip_map(potential, |g, u| {
                    g * gradbase::surrogate_derivative(surrogate, u - cfg.threshold)
                })?;
                let per = gu.len() / n;
                let d = gu.data_mut();
                for k in (0..(n - 1) * per).rev() {
                    d[k] += cfg.beta * d[k + per];
                }
                g = gu;
            }
            (Layer::Dense { bias, .. }, LayerTape::Dense { input, .. }) if i == 0 && run.static_head => {
                let gs = sum_blocks(&g, n);
                let x0 = first_step(input, b)?;
                let inv = 1.0 / (n * b) as f64;
                per_layer[0].push(tensor::matmul_tn(&gs, &x0)?.scale(inv));
                if bias.is_some() {
                    per_layer[0].push(col_sums(&gs).scale(inv));
                }
            }
            _ => {
                let (g_in, d) = gradbase::backward_layers(
                    &net.layers[i..=i],
                    &run.tape.layers[i..=i],
                    g,
                    None,
                    None,
                )?;
                g = g_in;
                per_layer[i] = d.into_iter().flatten().collect();
            }
        }
    }
    Ok((
        loss,
        GradDelta {
            tensors: per_layer.into_iter().flatten().collect(),
        },
    ))
}

/// How a spiking network is trained.
#[derive(Clone, Debug, PartialEq)]
pub enum SnnMethod {
    Lfp(LfpOptimizer),
    Surrogate(SgdOptimizer, SurrogateKind),
    /// Gradient descent with the exact (zero) spike derivative.
    ExactGradient(SgdOptimizer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnEpochStats {
    pub accuracy: f64,
    /// Mean reward (LFP) or loss (gradient) per batch.
    pub criterion: f64,
}

/// One epoch over `ds` with `steps` simulation steps per sample.
pub fn snn_train_epoch(
    net: &mut Network,
    method: &mut SnnMethod,
    ds: &Dataset,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<SnnEpochStats> {
    let (mut correct, mut seen, mut crit, mut batches) = (0usize, 0usize, 0.0, 0usize);
    for batch in ds.batches(batch_size, seed)? {
        let run = snn_forward(net, &batch.x, steps)?;
        let preds = run.predictions();
        correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        seen += preds.len();
        batches += 1;
        match method {
            SnnMethod::Lfp(opt) => {
                let r = run_rewards(&run, &batch.labels)?;
                crit += r.iter().map(Tensor::sum).sum::<f64>() / r.len() as f64;
                let step = snn_lfp_step(net, &run, &r, &opt.cfg)?;
                opt.apply_update(net, &step.delta)?;
            }
            SnnMethod::Surrogate(opt, s) => {
                let (loss, g) = surrogate_bptt(net, &run, &batch.y, *s)?;
                crit += loss;
                opt.step(net, &g)?;
            }
            SnnMethod::ExactGradient(opt) => {
                let (loss, g) = spike_ce_loss(&run, &batch.y)?;
                crit += loss;
                opt.step(net, &gradbase::grad_backward(net, &run.tape, &g, None)?.delta)?;
            }
        }
    }
    Ok(SnnEpochStats {
        accuracy: correct as f64 / seen.max(1) as f64,
        criterion: crit / batches.max(1) as f64,
    })
}

/// Spike-count predictions for every sample of `ds`.
pub fn snn_predict_dataset(net: &Network, ds: &Dataset, steps: usize, batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for batch in ds.ordered_batches(batch_size)? {
        out.extend(snn_forward(net, &batch.x, steps)?.predictions());
    }
    Ok(out)
}
