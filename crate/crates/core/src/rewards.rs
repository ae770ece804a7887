//! Initial per-output rewards.
//!
//! A reward tensor has one entry per output neuron and sample (`B×C`). Batch
//! aggregation happens later, when parameter updates are averaged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradbase::{self, LossKind};
use crate::sign;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RewardKind {
    /// `sign(o_c)·1(y_c=1)`
    HitSign,
    /// `-1(∃c'. y_c'=1 ∧ o_c>o_c')·sign(o_c)`; has no convergence mechanism.
    FalsePositivePenalty,
    /// `o_c·(y_c - softmax(o)_c)`
    SoftmaxCe,
    /// `o_c·(y_c - σ(o_c))`
    SigmoidCe,
    /// `o_c·(-dL/do_c)` for the given loss.
    FromLossGrad(LossKind),
    /// `(y - o)·sign(o)`
    RegressionLinear,
    /// `(y - o)³·sign(o)`
    RegressionCubic,
    /// Spike-count reward matrix; see [`snn_reward`].
    SnnRate,
}

impl RewardKind {
    pub fn is_classification(self) -> bool {
        !matches!(
            self,
            RewardKind::RegressionLinear | RewardKind::RegressionCubic | RewardKind::SnnRate
        )
    }

    /// Kinds without a convergence mechanism keep pushing after the sample is
    /// classified correctly.
    pub fn lacks_convergence_mechanism(self) -> bool {
        matches!(self, RewardKind::FalsePositivePenalty | RewardKind::HitSign)
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardKind::HitSign => write!(f, "hit_sign"),
            RewardKind::FalsePositivePenalty => write!(f, "false_positive"),
            RewardKind::SoftmaxCe => write!(f, "softmax_ce"),
            RewardKind::SigmoidCe => write!(f, "sigmoid_ce"),
            RewardKind::FromLossGrad(l) => write!(f, "from_loss:{l}"),
            RewardKind::RegressionLinear => write!(f, "reg_linear"),
            RewardKind::RegressionCubic => write!(f, "reg_cubic"),
            RewardKind::SnnRate => write!(f, "snn_rate"),
        }
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hit_sign" => RewardKind::HitSign,
            "false_positive" => RewardKind::FalsePositivePenalty,
            "softmax_ce" => RewardKind::SoftmaxCe,
            "sigmoid_ce" => RewardKind::SigmoidCe,
            "reg_linear" => RewardKind::RegressionLinear,
            "reg_cubic" => RewardKind::RegressionCubic,
            "snn_rate" => RewardKind::SnnRate,
            _ => match s.strip_prefix("from_loss:") {
                Some(l) => RewardKind::FromLossGrad(l.parse()?),
                None => return Err(Error::Config(format!("unknown reward kind {s:?}"))),
            },
        })
    }
}

impl TryFrom<String> for RewardKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RewardKind> for String {
    fn from(k: RewardKind) -> String {
        k.to_string()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(o: &Tensor) -> Tensor {
    let mut out = o.clone();
    for b in 0..o.rows() {
        let row = out.row_mut(b);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Returns the class index of each one-hot row.
pub fn check_one_hot(y: &Tensor) -> Result<Vec<usize>> {
    if y.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "targets",
            expected: vec![y.rows(), 0],
            got: y.shape().to_vec(),
        });
    }
    (0..y.rows())
        .map(|b| {
            let row = y.row(b);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones == 1 && ones + zeros == row.len() {
                Ok(row.iter().position(|&v| v == 1.0).unwrap())
            } else {
                Err(Error::NotOneHot { row: b })
            }
        })
        .collect()
}

/// Reward for each output neuron from outputs `o` and targets `y` (`B×C`).
pub fn initial_reward(kind: RewardKind, o: &Tensor, y: &Tensor) -> Result<Tensor> {
    o.expect_same_shape("initial_reward", y)?;
    if kind.is_classification() {
        check_one_hot(y)?;
    }
    let r = match kind {
        RewardKind::HitSign => o.zip_map(y, |o, y| if y == 1.0 { sign(o) } else { 0.0 })?,
        RewardKind::FalsePositivePenalty => {
            if o.row_len() < 2 {
                return Err(Error::InvalidArgument(
                    "false_positive reward needs at least two classes".into(),
                ));
            }
            let mut r = Tensor::zeros(o.shape());
            for b in 0..o.rows() {
                let (orow, yrow) = (o.row(b), y.row(b));
                let truth: Vec<f64> = orow
                    .iter()
                    .zip(yrow)
                    .filter(|(_, &t)| t == 1.0)
                    .map(|(&v, _)| v)
                    .collect();
                for (c, out) in r.row_mut(b).iter_mut().enumerate() {
                    if truth.iter().any(|&t| orow[c] > t) {
                        *out = -sign(orow[c]);
                    }
                }
            }
            r
        }
        RewardKind::SoftmaxCe => {
            let sm = softmax_rows(o);
            let resid = y.zip_map(&sm, |y, s| y - s)?;
            o.mul(&resid)?
        }
        RewardKind::SigmoidCe => {
            let resid = y.zip_map(o, |y, o| y - sigmoid(o))?;
            o.mul(&resid)?
        }
        RewardKind::FromLossGrad(loss) => {
            let (_, grad) = gradbase::loss_and_grad(loss, o, y)?;
            reward_from_loss(&grad, o)?
        }
        RewardKind::RegressionLinear => regression_reward(RegressionKind::Linear, o, y)?,
        RewardKind::RegressionCubic => regression_reward(RegressionKind::Cubic, o, y)?,
        RewardKind::SnnRate => {
            return Err(Error::InvalidArgument(
                "snn_rate rewards are computed from spike trains with snn_reward".into(),
            ))
        }
    };
    r.check_finite("initial_reward")?;
    Ok(r)
}

/// `r_c = o_c·(-dL/do_c)`.
pub fn reward_from_loss(loss_grad: &Tensor, o: &Tensor) -> Result<Tensor> {
    o.zip_map(loss_grad, |o, g| o * -g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegressionKind {
    Linear,
    Cubic,
}

pub fn regression_reward(kind: RegressionKind, o: &Tensor, y: &Tensor) -> Result<Tensor> {
    o.zip_map(y, |o, y| {
        let d = y - o;
        match kind {
            RegressionKind::Linear => d * sign(o),
            RegressionKind::Cubic => d * d * d * sign(o),
        }
    })
}

/// Reward matrix for one sample's output spike train `spikes: n×C`.
///
/// The true class gets `1 - σ(count - n/2)` at every step; every other class
/// gets `σ(silent_steps - n/2) - 1`.
pub fn snn_reward(spikes: &Tensor, true_class: usize, n: usize) -> Result<Tensor> {
    if spikes.ndim() != 2 || spikes.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "snn_reward",
            expected: vec![n, spikes.row_len()],
            got: spikes.shape().to_vec(),
        });
    }
    let classes = spikes.row_len();
    if true_class >= classes {
        return Err(Error::InvalidArgument(format!(
            "class {true_class} out of range for {classes} outputs"
        )));
    }
    if let Some(&v) = spikes.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinarySpikes(v));
    }
    let half = n as f64 / 2.0;
    let per_class: Vec<f64> = (0..classes)
        .map(|c| {
            let fired: f64 = (0..n).map(|t| spikes.row(t)[c]).sum();
            if c == true_class {
                1.0 - sigmoid(fired - half)
            } else {
                let silent: f64 = (0..n).map(|t| (spikes.row(t)[c] - 1.0).abs()).sum();
                sigmoid(silent - half) - 1.0
            }
        })
        .collect();
    Ok(Tensor::from_fn(&[n, classes], |i| per_class[i % classes]))
}
