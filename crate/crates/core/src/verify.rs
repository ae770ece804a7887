//! Seeded property suites over random networks with machine-readable reports.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::one_hot;
use crate::error::{Error, Result};
use crate::gradbase::{self, LossKind};
use crate::lfp::{self, Rule};
use crate::network::{mlp_specs, ActivationKind, ForwardOptions, LayerSpec, Network, ParamKind};
use crate::tensor::Tensor;

pub const THEOREM1_TOLERANCE: f64 = 1e-9;
pub const CONSERVATION_ZERO_TOLERANCE: f64 = 1e-10;
pub const CONSERVATION_EPSILON_TOLERANCE: f64 = 1e-4;
pub const FINITE_DIFF_TOLERANCE: f64 = 1e-6;
/// Gradient magnitudes below this are compared absolutely.
pub const FINITE_DIFF_FLOOR: f64 = 1e-4;
pub const FINITE_DIFF_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Theorem1,
    Conservation,
    FiniteDiff,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Theorem1, Suite::Conservation, Suite::FiniteDiff];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Theorem1 => "theorem1",
            Suite::Conservation => "conservation",
            Suite::FiniteDiff => "finite_diff",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub instance: usize,
    pub detail: String,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    /// Distinguishes variants of one suite, e.g. the propagation rule.
    pub variant: String,
    pub instances: usize,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub failures: Vec<Failure>,
}

impl SuiteReport {
    fn new(suite: Suite, variant: impl Into<String>, tolerance: f64) -> Self {
        Self {
            suite,
            variant: variant.into(),
            instances: 0,
            tolerance,
            max_deviation: 0.0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, instance: usize, detail: impl FnOnce() -> String, deviation: f64) {
        self.instances = self.instances.max(instance + 1);
        if deviation.is_nan() || deviation > self.max_deviation {
            self.max_deviation = deviation;
        }
        if deviation.is_nan() || deviation > self.tolerance {
            self.failures.push(Failure {
                instance,
                detail: detail(),
                deviation,
            });
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {} instances, max deviation {:.3e} (tolerance {:.1e}): {}",
            self.suite,
            self.variant,
            self.instances,
            self.max_deviation,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )?;
        for e in &self.failures {
            write!(f, "\n  instance {}: {} ({:.3e})", e.instance, e.detail, e.deviation)?;
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn row_sums(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i).iter().sum()).collect()
}

fn random_mlp(rng: &mut ChaCha8Rng, bias: bool) -> Result<Network> {
    let inputs = rng.random_range(2..=8);
    let depth = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=32)).collect();
    let outputs = rng.random_range(2..=5);
    let specs = mlp_specs(inputs, &hidden, outputs, ActivationKind::Relu, bias);
    Network::build(&[inputs], specs, rng.random())
}

/// Run one suite over `instances` seeded random networks.
pub fn run_suite(suite: Suite, instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(match suite {
        Suite::Theorem1 => vec![theorem1_suite(instances, seed)?],
        Suite::Conservation => vec![
            conservation_suite(instances, seed, Rule::Zero)?,
            conservation_suite(instances, seed, Rule::default())?,
        ],
        Suite::FiniteDiff => vec![finite_diff_suite(instances, seed)?],
    })
}

/// LFP-0 against weight-scaled gradient descent on random ReLU MLPs,
/// alternating softmax and sigmoid cross-entropy.
pub fn theorem1_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Theorem1, "lfp-0 vs -|w|*grad", THEOREM1_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let net = random_mlp(&mut rng, true)?;
        let loss = if i % 2 == 0 {
            LossKind::SoftmaxCe
        } else {
            LossKind::SigmoidCe
        };
        let b = rng.random_range(1..=16);
        let x = normal(&mut rng, &[b, net.input_shape()[0]]);
        let classes = net.output_shape()[0];
        let y = one_hot(&random_labels(&mut rng, b, classes), classes);
        let r = gradbase::theorem1_check(&net, &x, &y, loss, THEOREM1_TOLERANCE)?;
        report.record(i, || format!("{} net: {}", loss, r.to_string().replace('\n', "; ")), r.max_error());
    }
    report.instances = instances;
    Ok(report)
}

/// Per-sample reward sums at every layer input against the output sum on
/// bias-free ReLU MLPs. Inputs are scaled so each sample's outputs have unit
/// L1 mass; output rewards are `|o|·u` with `u` uniform in `[0.1, 1)`.
pub fn conservation_suite(instances: usize, seed: u64, rule: Rule) -> Result<SuiteReport> {
    let (variant, tol) = match rule {
        Rule::Zero => ("zero".to_string(), CONSERVATION_ZERO_TOLERANCE),
        Rule::Epsilon(e) => (format!("epsilon({e:e})"), CONSERVATION_EPSILON_TOLERANCE),
    };
    let mut report = SuiteReport::new(Suite::Conservation, variant, tol);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        // a sample whose outputs all vanish has nothing to conserve
        let (net, x) = loop {
            let net = random_mlp(&mut rng, false)?;
            let b = rng.random_range(1..=16);
            let x = normal(&mut rng, &[b, net.input_shape()[0]]);
            let o = net.predict(&x)?;
            let mass: Vec<f64> = (0..b).map(|i| o.row(i).iter().map(|v| v.abs()).sum()).collect();
            if mass.iter().all(|&m| m > 1e-6) {
                // the net is positively homogeneous, so this fixes each sample's output mass at 1
                let d = x.row_len();
                let x = Tensor::from_fn(x.shape(), |k| x.data()[k] / mass[k / d]);
                break (net, x);
            }
        };
        let tape = net.forward_eval(&x)?;
        let r = tape.output.map(f64::abs).zip_map(&Tensor::from_fn(tape.output.shape(), |_| rng.random_range(0.1..1.0)), |o, u| o * u)?;
        let (_, rt) = lfp::lfp_backward(&net, &tape, &r, rule, false)?;
        let total = row_sums(&r);
        for (l, layer_r) in rt.neuron.iter().enumerate() {
            for (s, (got, want)) in row_sums(layer_r).iter().zip(&total).enumerate() {
                let dev = (got - want).abs() / want.abs();
                report.record(i, || format!("layer {l} sample {s}: {got} vs {want}"), dev);
            }
        }
    }
    report.instances = instances;
    Ok(report)
}

fn finite_diff_net(rng: &mut ChaCha8Rng, kind: usize) -> Result<Network> {
    let act = |k| LayerSpec::act(k);
    let (shape, specs) = match kind % 3 {
        0 => (
            vec![2, 6, 6],
            vec![
                LayerSpec::Conv2d { c_in: 2, c_out: 3, k: 3, stride: 1, pad: 1, bias: true },
                LayerSpec::BatchNorm { features: 3, eps: 1e-5, momentum: 0.1 },
                act(ActivationKind::Tanh),
                LayerSpec::MaxPool2d { k: 2, stride: 2 },
                LayerSpec::ResidualSum {
                    branch: vec![
                        LayerSpec::Conv2d { c_in: 3, c_out: 3, k: 3, stride: 1, pad: 1, bias: false },
                        act(ActivationKind::Silu),
                    ],
                },
                LayerSpec::Flatten,
                LayerSpec::dense(27, 4),
            ],
        ),
        1 => (
            vec![5],
            vec![
                LayerSpec::dense(5, 8),
                LayerSpec::BatchNorm { features: 8, eps: 1e-5, momentum: 0.1 },
                act(ActivationKind::Elu(1.0)),
                LayerSpec::ResidualSum {
                    branch: vec![LayerSpec::dense(8, 8), act(ActivationKind::Tanh)],
                },
                LayerSpec::dense(8, 3),
            ],
        ),
        _ => (
            vec![1, 7, 7],
            vec![
                LayerSpec::Conv2d { c_in: 1, c_out: 2, k: 3, stride: 2, pad: 1, bias: true },
                act(ActivationKind::Sigmoid),
                LayerSpec::MaxPool2d { k: 2, stride: 1 },
                LayerSpec::BatchNorm { features: 2, eps: 1e-5, momentum: 0.1 },
                LayerSpec::Flatten,
                LayerSpec::dense(18, 6),
                act(ActivationKind::Silu),
                LayerSpec::dense(6, 3),
            ],
        ),
    };
    let mut net = Network::build(&shape, specs, rng.random())?;
    // non-trivial affine batch-norm parameters
    for (info, p) in net.param_info().into_iter().zip(net.params_mut()) {
        if matches!(info.kind, ParamKind::Gamma | ParamKind::Beta) {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.3 * Distribution::<f64>::sample(&StandardNormal, rng));
        }
    }
    Ok(net)
}

/// Train-mode batch loss, with batch-norm using batch statistics.
fn batch_loss(net: &Network, x: &Tensor, y: &Tensor) -> Result<f64> {
    let tape = net.run(x, &ForwardOptions::train(0), None)?;
    Ok(gradbase::loss_and_grad(LossKind::SoftmaxCe, &tape.output, y)?.0)
}

/// `|a-b| / max(|a|, |b|, FINITE_DIFF_FLOOR)`.
pub fn floored_rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FINITE_DIFF_FLOOR)
}

/// Analytic parameter and input gradients against central differences on
/// random nets with convolution, max-pooling, batch-norm and residual sums.
pub fn finite_diff_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::FiniteDiff, "central h=1e-5", FINITE_DIFF_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = FINITE_DIFF_STEP;
    for i in 0..instances {
        let mut net = finite_diff_net(&mut rng, i)?;
        let b = 4;
        let mut xs = vec![b];
        xs.extend(net.input_shape());
        let x = normal(&mut rng, &xs);
        let classes = net.output_shape()[0];
        let y = one_hot(&random_labels(&mut rng, b, classes), classes);
        let tape = net.run(&x, &ForwardOptions::train(0), None)?;
        let (_, g) = gradbase::loss_and_grad(LossKind::SoftmaxCe, &tape.output, &y)?;
        let back = gradbase::grad_backward(&net, &tape, &g, None)?;

        let infos = net.param_info();
        for (p, info) in infos.iter().enumerate() {
            for j in 0..net.params()[p].len() {
                let orig = net.params()[p].data()[j];
                net.params_mut()[p].data_mut()[j] = orig + h;
                let up = batch_loss(&net, &x, &y)?;
                net.params_mut()[p].data_mut()[j] = orig - h;
                let down = batch_loss(&net, &x, &y)?;
                net.params_mut()[p].data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = back.delta.tensors[p].data()[j];
                report.record(i, || format!("{}[{j}]: analytic {an:e} vs numeric {fd:e}", info.name), floored_rel_error(an, fd));
            }
        }
        // input gradient is per sample; the batch loss carries a 1/B factor
        let gin = back.input_grad();
        let mut xp = x.clone();
        for j in 0..x.len() {
            let orig = x.data()[j];
            xp.data_mut()[j] = orig + h;
            let up = batch_loss(&net, &xp, &y)?;
            xp.data_mut()[j] = orig - h;
            let down = batch_loss(&net, &xp, &y)?;
            xp.data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h) * b as f64;
            let an = gin.data()[j];
            report.record(i, || format!("input[{j}]: analytic {an:e} vs numeric {fd:e}"), floored_rel_error(an, fd));
        }
    }
    report.instances = instances;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_few_instances() {
        for suite in Suite::ALL {
            for r in run_suite(suite, 3, 11).unwrap() {
                assert!(r.passed(), "{r}");
                assert_eq!(r.instances, 3);
            }
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("gradient".parse::<Suite>().is_err());
    }

    #[test]
    fn failures_are_recorded() {
        let mut r = SuiteReport::new(Suite::Theorem1, "x", 1e-3);
        r.record(0, || "ok".into(), 1e-4);
        r.record(1, || "bad".into(), 1e-2);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.max_deviation, 1e-2);
        assert!(!r.passed());
    }
}
