//! Epoch loops for both trainers and evaluation metrics.

use crate::data::Dataset;
use crate::error::Result;
use crate::gradbase::{self, LossKind, SgdOptimizer, SurrogateKind};
use crate::lfp::{self, LfpOptimizer};
use crate::network::{ForwardOptions, Network};
use crate::rewards::{self, RewardKind};
use crate::tensor::Tensor;

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Mean per-class recall over the classes present in `labels`.
pub fn weighted_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut total = vec![0usize; classes];
    let mut hit = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l] += 1;
        hit[l] += usize::from(p == l);
    }
    let present: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub weighted_accuracy: f64,
    /// Zero fraction after the last activation layer, if there is one.
    pub dead_fraction: Option<f64>,
}

pub const EVAL_BATCH: usize = 1024;

pub fn predict_dataset(net: &Network, ds: &Dataset) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    for b in ds.ordered_batches(EVAL_BATCH)? {
        preds.extend(net.predict(&b.x)?.argmax_rows());
    }
    Ok(preds)
}

/// Eval-mode accuracy over `ds`.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<EvalStats> {
    let mut preds = Vec::with_capacity(ds.len());
    let (mut dead, mut units) = (0.0, 0usize);
    let mut has_act = false;
    for b in ds.ordered_batches(EVAL_BATCH)? {
        let tape = net.forward_eval(&b.x)?;
        if let Some(f) = tape.dead_fraction() {
            has_act = true;
            dead += f * b.labels.len() as f64;
            units += b.labels.len();
        }
        preds.extend(tape.output.argmax_rows());
    }
    Ok(EvalStats {
        accuracy: accuracy(&preds, &ds.labels),
        weighted_accuracy: weighted_accuracy(&preds, &ds.labels, ds.classes),
        dead_fraction: has_act.then(|| dead / units.max(1) as f64),
    })
}

/// Parameter update rule used by [`train_epoch`].
#[derive(Clone, Debug, PartialEq)]
pub enum Trainer {
    Lfp {
        opt: LfpOptimizer,
        reward: RewardKind,
    },
    Grad {
        opt: SgdOptimizer,
        loss: LossKind,
        surrogate: Option<SurrogateKind>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochOptions {
    pub batch_size: usize,
    pub noise_std: f64,
    /// Drives the batch order, dropout masks and activation noise.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Accuracy of the training forward passes, before each update.
    pub accuracy: f64,
    /// Mean summed output reward per sample (LFP) or mean batch loss (gradient).
    pub criterion: f64,
    /// Mean pre-noise dead fraction of the training forward passes.
    pub dead_fraction: Option<f64>,
}

fn mix(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One pass over `ds`: forward in train mode, then an LFP or SGD update per batch.
pub fn train_epoch(
    net: &mut Network,
    trainer: &mut Trainer,
    ds: &Dataset,
    opts: &EpochOptions,
) -> Result<EpochStats> {
    let (mut hits, mut seen, mut crit, mut batches) = (0usize, 0usize, 0.0, 0usize);
    let (mut dead, mut dead_n) = (0.0, 0usize);
    for (i, batch) in ds.batches(opts.batch_size, opts.seed)?.enumerate() {
        let fo = ForwardOptions::train(mix(opts.seed, i as u64 + 1)).with_noise(opts.noise_std);
        let (o, tape) = net.forward(&batch.x, &fo)?;
        let preds = o.argmax_rows();
        hits += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        seen += preds.len();
        batches += 1;
        if let Some(f) = tape.dead_fraction() {
            dead += f;
            dead_n += 1;
        }
        match trainer {
            Trainer::Lfp { opt, reward } => {
                let r = rewards::initial_reward(*reward, &o, &batch.y)?;
                crit += r.sum() / o.rows() as f64;
                let (d, _) = lfp::lfp_backward(
                    net,
                    &tape,
                    &r,
                    opt.cfg.rule,
                    opt.cfg.normalize_between_layers,
                )?;
                opt.apply_update(net, &d)?;
            }
            Trainer::Grad {
                opt,
                loss,
                surrogate,
            } => {
                let (l, g) = gradbase::loss_and_grad(*loss, &o, &batch.y)?;
                crit += l;
                let back = gradbase::grad_backward(net, &tape, &g, *surrogate)?;
                opt.step(net, &back.delta)?;
            }
        }
    }
    Ok(EpochStats {
        accuracy: hits as f64 / seen.max(1) as f64,
        criterion: crit / batches.max(1) as f64,
        dead_fraction: (dead_n > 0).then(|| dead / dead_n as f64),
    })
}

/// Logits for every sample of `ds`, stacked.
pub fn outputs(net: &Network, ds: &Dataset) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut c = 0;
    for b in ds.ordered_batches(EVAL_BATCH)? {
        let o = net.predict(&b.x)?;
        c = o.row_len();
        data.extend(o.into_data());
    }
    Tensor::new(vec![ds.len(), c], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_metrics() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 0]), 2.0 / 3.0);
        // class 0: 1/3 recalled, class 1: 1/1
        let w = weighted_accuracy(&[0, 1, 1, 1], &[0, 0, 0, 1], 2);
        assert!((w - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }
}
