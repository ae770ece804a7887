//! Batch-norm canonization, unstructured pruning and sparsity measures.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lfp::{self, Rule, DEFAULT_EPSILON};
use crate::network::{Layer, LayerSpec, Network};
use crate::par;
use crate::tensor::Tensor;
use crate::train;

/// Fold every batch-norm layer into the dense or convolutional layer before
/// it, using running statistics. The result computes the same eval-mode function.
pub fn canonize_batchnorm(net: &Network) -> Result<Network> {
    let (specs, layers) = canonize_layers(net.specs(), &net.layers)?;
    let mut out = Network::new(net.input_shape(), specs)?;
    out.layers = layers;
    Ok(out)
}

fn canonize_layers(specs: &[LayerSpec], layers: &[Layer]) -> Result<(Vec<LayerSpec>, Vec<Layer>)> {
    let mut out_specs: Vec<LayerSpec> = Vec::with_capacity(specs.len());
    let mut out_layers: Vec<Layer> = Vec::with_capacity(layers.len());
    for (spec, layer) in specs.iter().zip(layers) {
        match (spec, layer) {
            (
                LayerSpec::BatchNorm { .. },
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    ..
                },
            ) => {
                let (prev_spec, prev) = match (out_specs.last_mut(), out_layers.last_mut()) {
                    (Some(s), Some(l)) if l.has_connections() => (s, l),
                    _ => {
                        return Err(Error::Canonize(
                            "batch norm must directly follow a dense or convolutional layer".into(),
                        ))
                    }
                };
                let c = gamma.len();
                let scale: Vec<f64> = (0..c)
                    .map(|i| gamma.data()[i] / (running_var.data()[i] + eps).sqrt())
                    .collect();
                let (weight, bias) = match prev {
                    Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => (weight, bias),
                    _ => unreachable!("checked above"),
                };
                let per_out = weight.len() / c;
                for (i, chunk) in weight.data_mut().chunks_mut(per_out).enumerate() {
                    chunk.iter_mut().for_each(|w| *w *= scale[i]);
                }
                let old_b = bias.take().unwrap_or_else(|| Tensor::zeros(&[c]));
                *bias = Some(Tensor::from_fn(&[c], |i| {
                    scale[i] * (old_b.data()[i] - running_mean.data()[i]) + beta.data()[i]
                }));
                match prev_spec {
                    LayerSpec::Dense { bias, .. } | LayerSpec::Conv2d { bias, .. } => *bias = true,
                    _ => unreachable!("spec mirrors layer"),
                }
            }
            (LayerSpec::ResidualSum { branch }, Layer::ResidualSum(inner)) => {
                let (s, l) = canonize_layers(branch, inner)?;
                out_specs.push(LayerSpec::ResidualSum { branch: s });
                out_layers.push(Layer::ResidualSum(l));
            }
            _ => {
                out_specs.push(spec.clone());
                out_layers.push(layer.clone());
            }
        }
    }
    Ok((out_specs, out_layers))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PruneCriterion {
    MagnitudeLocal,
    MagnitudeGlobal,
    RelevanceGlobal,
}

impl fmt::Display for PruneCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneCriterion::MagnitudeLocal => "magnitude_local",
            PruneCriterion::MagnitudeGlobal => "magnitude_global",
            PruneCriterion::RelevanceGlobal => "relevance_global",
        })
    }
}

impl FromStr for PruneCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude_local" => Ok(PruneCriterion::MagnitudeLocal),
            "magnitude_global" => Ok(PruneCriterion::MagnitudeGlobal),
            "relevance_global" => Ok(PruneCriterion::RelevanceGlobal),
            _ => Err(Error::Config(format!("unknown pruning criterion '{s}'"))),
        }
    }
}

impl TryFrom<String> for PruneCriterion {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PruneCriterion> for String {
    fn from(c: PruneCriterion) -> String {
        c.to_string()
    }
}

fn prunable_indices(net: &Network) -> Vec<usize> {
    net.param_info()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_prunable())
        .map(|(i, _)| i)
        .collect()
}

/// Signed relevance of every connection, summed over `ds`. The initial
/// relevance is the true-class logit, decomposed with the ε-rule.
pub fn connection_relevance(net: &Network, ds: &Dataset) -> Result<Vec<Tensor>> {
    let idx = prunable_indices(net);
    let params = net.params();
    let mut sums: Vec<Tensor> = idx.iter().map(|&i| Tensor::zeros(params[i].shape())).collect();
    for batch in ds.ordered_batches(train::EVAL_BATCH)? {
        let tape = net.forward_eval(&batch.x)?;
        let r = tape.output.mul(&batch.y)?;
        let (d, _) = lfp::lfp_backward(net, &tape, &r, Rule::Epsilon(DEFAULT_EPSILON), false)?;
        let b = batch.labels.len() as f64;
        for (acc, &i) in sums.iter_mut().zip(&idx) {
            // d = |w|·Σ_b rel/|w| / B, so sign(w)·d·B is the summed relevance
            let rel = params[i].zip_map(&d.tensors[i], |w, d| crate::sign(w) * d * b)?;
            acc.add_assign(&rel)?;
        }
    }
    Ok(sums)
}

/// Per-connection scores under a criterion; lower scores are pruned first.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub criterion: PruneCriterion,
    /// Index of each prunable tensor in [`Network::params`].
    pub param_indices: Vec<usize>,
    pub scores: Vec<Tensor>,
}

pub fn rank_weights(net: &Network, criterion: PruneCriterion, ds: Option<&Dataset>) -> Result<Ranking> {
    let param_indices = prunable_indices(net);
    let params = net.params();
    let scores = match criterion {
        PruneCriterion::MagnitudeLocal | PruneCriterion::MagnitudeGlobal => param_indices
            .iter()
            .map(|&i| params[i].map(f64::abs))
            .collect(),
        PruneCriterion::RelevanceGlobal => {
            let ds = ds.ok_or(Error::MissingDataset)?;
            connection_relevance(net, ds)?
                .into_iter()
                .map(|t| t.map(f64::abs))
                .collect()
        }
    };
    Ok(Ranking {
        criterion,
        param_indices,
        scores,
    })
}

/// Keep-masks (`1` kept, `0` pruned) for the prunable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    pub param_indices: Vec<usize>,
    pub masks: Vec<Tensor>,
}

impl PruneMask {
    pub fn pruned(&self) -> usize {
        self.masks
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v == 0.0).count())
            .sum()
    }

    /// Copy of `net` with masked connections set to zero.
    pub fn apply(&self, net: &Network) -> Result<Network> {
        let mut out = net.clone();
        {
            let mut params = out.params_mut();
            for (&i, m) in self.param_indices.iter().zip(&self.masks) {
                let p = &mut params[i];
                p.expect_same_shape("prune mask", m)?;
                p.data_mut()
                    .iter_mut()
                    .zip(m.data())
                    .for_each(|(w, &k)| *w *= k);
            }
        }
        Ok(out)
    }
}

fn lowest(scores: &[(f64, usize, usize)], count: usize, masks: &mut [Tensor]) {
    let mut order: Vec<&(f64, usize, usize)> = scores.iter().collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &&(_, t, e) in order.iter().take(count) {
        masks[t].data_mut()[e] = 0.0;
    }
}

impl Ranking {
    /// Prune `floor(rate·N)` connections globally, or `floor(rate·N_l)` per
    /// tensor for the local criterion. Ties break by position.
    pub fn mask(&self, rate: f64) -> Result<PruneMask> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("pruning rate {rate} outside [0,1]")));
        }
        let mut masks: Vec<Tensor> = self.scores.iter().map(|s| Tensor::full(s.shape(), 1.0)).collect();
        let entries = |t: usize| -> Vec<(f64, usize, usize)> {
            self.scores[t]
                .data()
                .iter()
                .enumerate()
                .map(|(e, &s)| (s, t, e))
                .collect()
        };
        match self.criterion {
            PruneCriterion::MagnitudeLocal => {
                for t in 0..self.scores.len() {
                    let n = (rate * self.scores[t].len() as f64).floor() as usize;
                    lowest(&entries(t), n, &mut masks);
                }
            }
            _ => {
                let all: Vec<_> = (0..self.scores.len()).flat_map(entries).collect();
                let n = (rate * all.len() as f64).floor() as usize;
                lowest(&all, n, &mut masks);
            }
        }
        Ok(PruneMask {
            param_indices: self.param_indices.clone(),
            masks,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub accuracy: f64,
    pub criterion: PruneCriterion,
    pub seed: u64,
}

/// Accuracy after pruning each rate in `rates` (ascending, in `[0,1)`),
/// without retraining. `weighted` reports balanced accuracy.
pub fn prune_sweep(
    net: &Network,
    ranking: &Ranking,
    rates: &[f64],
    eval: &Dataset,
    weighted: bool,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if rates.iter().any(|r| !(0.0..1.0).contains(r)) || rates.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("rates must be ascending in [0,1)".into()));
    }
    let rows = par::map_slice(rates, |&rate| -> Result<SweepRow> {
        let pruned = ranking.mask(rate)?.apply(net)?;
        let stats = train::evaluate(&pruned, eval)?;
        Ok(SweepRow {
            rate,
            accuracy: if weighted {
                stats.weighted_accuracy
            } else {
                stats.accuracy
            },
            criterion: ranking.criterion,
            seed,
        })
    });
    rows.into_iter().collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rate", "accuracy", "criterion", "seed"])?;
    for r in rows {
        w.write_record([
            r.rate.to_string(),
            r.accuracy.to_string(),
            r.criterion.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `Σ_i Σ_j |x_i - x_j| / (2·n²·mean)`.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("gini needs finite non-negative values".into()));
    }
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("gini needs at least one positive value".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let weighted: f64 = v
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Ok(weighted / (n * total))
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const DISTRIBUTION_PERCENTILES: [f64; 5] = [0.0, 25.0, 50.0, 75.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    /// 0th, 25th, 50th, 75th and 100th percentile of `|w|/max|w|`.
    pub percentiles: [f64; 5],
    pub gini: f64,
}

fn normalized_abs(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty layer".into()));
    }
    let m = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return Err(Error::InvalidArgument("layer weights are all zero".into()));
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.abs() / m).collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Per-layer distribution of normalized unsigned connection weights.
pub fn weight_distribution(net: &Network) -> Result<Vec<LayerSparsity>> {
    let params = net.params();
    net.param_info()
        .iter()
        .zip(&params)
        .filter(|(info, _)| info.is_prunable())
        .map(|(info, w)| {
            let v = normalized_abs(w.data())?;
            Ok(LayerSparsity {
                name: info.name.clone(),
                percentiles: DISTRIBUTION_PERCENTILES.map(|q| percentile(&v, q)),
                gini: gini(&v)?,
            })
        })
        .collect()
}
