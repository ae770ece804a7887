//! TOML run configuration. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use lfp_core::data::{self, CirclesParams, Dataset, SwirlParams};
use lfp_core::gradbase::{LossKind, SurrogateKind};
use lfp_core::lfp::{Rule, DEFAULT_EPSILON};
use lfp_core::network::{mlp_specs, ActivationKind, LayerSpec, Network};
use lfp_core::pruning::PruneCriterion;
use lfp_core::rewards::RewardKind;
use lfp_core::snn::{snn_mlp_specs, LifConfig};
use lfp_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snn: Option<SnnConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Dense layers with `activation` after each hidden layer; with an `[snn]`
    /// section every dense layer is followed by a LIF layer instead.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Explicit layer list.
    Layers { layers: Vec<LayerSpec> },
}

fn default_activation() -> ActivationKind {
    ActivationKind::Relu
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        #[serde(default = "default_toy_train")]
        n_train: usize,
        #[serde(default = "default_toy_test")]
        n_test: usize,
    },
    Circles {
        #[serde(default = "default_toy_train")]
        n_train: usize,
        #[serde(default = "default_toy_test")]
        n_test: usize,
        #[serde(default)]
        params: CirclesParams,
    },
    Swirl {
        #[serde(default = "default_toy_train")]
        n_train: usize,
        #[serde(default = "default_toy_test")]
        n_test: usize,
        #[serde(default)]
        params: SwirlParams,
    },
    Mnist {
        /// Directory with the four IDX files; `data/mnist` when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        /// Use only the first `train_subset` training images.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
    },
}

fn default_toy_train() -> usize {
    1000
}

fn default_toy_test() -> usize {
    100
}

impl DatasetConfig {
    /// `(train, test)` splits; toy sets are generated from `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let toy = |full: Result<Dataset>, n_test: usize| -> Result<(Dataset, Dataset)> {
            let full = full?;
            full.split(n_test as f64 / full.len() as f64, seed)
        };
        match self {
            DatasetConfig::Blobs { n_train, n_test } => toy(data::make_blobs(n_train + n_test, seed), *n_test),
            DatasetConfig::Circles {
                n_train,
                n_test,
                params,
            } => toy(data::make_circles_with(n_train + n_test, *params, seed), *n_test),
            DatasetConfig::Swirl {
                n_train,
                n_test,
                params,
            } => toy(data::make_swirl_with(n_train + n_test, *params, seed), *n_test),
            DatasetConfig::Mnist { dir, train_subset } => {
                let dir = dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
                let mut train = data::load_mnist(&dir, true)?;
                if let Some(n) = train_subset {
                    train = train.take(*n);
                }
                Ok((train, data::load_mnist(&dir, false)?))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Lfp,
    Grad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    Zero,
    Epsilon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub trainer: TrainerKind,
    pub reward: RewardKind,
    pub loss: LossKind,
    pub rule: RuleName,
    pub epsilon: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub noise_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    pub normalize_between_layers: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerKind::Lfp,
            reward: RewardKind::SoftmaxCe,
            loss: LossKind::SoftmaxCe,
            rule: RuleName::Epsilon,
            epsilon: DEFAULT_EPSILON,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 128,
            epochs: 10,
            noise_std: 0.0,
            clip: None,
            normalize_between_layers: false,
            surrogate: None,
        }
    }
}

impl TrainConfig {
    pub fn rule(&self) -> Rule {
        match self.rule {
            RuleName::Zero => Rule::Zero,
            RuleName::Epsilon => Rule::Epsilon(self.epsilon),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnnConfig {
    /// Time steps per sample.
    pub steps: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_beta() -> f64 {
    0.9
}

fn default_threshold() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub criterion: PruneCriterion,
    /// Explicit rates; `0, 0.05, …, 0.95` when empty.
    pub rates: Vec<f64>,
    /// Report balanced accuracy.
    pub weighted: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            criterion: PruneCriterion::MagnitudeGlobal,
            rates: Vec::new(),
            weighted: false,
        }
    }
}

impl PruneConfig {
    pub fn rates(&self) -> Vec<f64> {
        if self.rates.is_empty() {
            (0..20).map(|i| i as f64 / 20.0).collect()
        } else {
            self.rates.clone()
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", t.lr)));
        }
        if !(0.0..=1.0).contains(&t.momentum) {
            return Err(invalid(format!("momentum must lie in [0,1], got {}", t.momentum)));
        }
        if t.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(t.epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be positive, got {}", t.epsilon)));
        }
        if !(t.noise_std >= 0.0) {
            return Err(invalid(format!("noise_std must be >= 0, got {}", t.noise_std)));
        }
        if t.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("clip must be positive"));
        }
        if let Some(s) = &self.snn {
            if s.steps == 0 {
                return Err(invalid("snn.steps must be at least 1"));
            }
            if !(s.beta > 0.0 && s.beta <= 1.0) {
                return Err(invalid(format!("snn.beta must lie in (0,1], got {}", s.beta)));
            }
            if !s.threshold.is_finite() {
                return Err(invalid("snn.threshold must be finite"));
            }
        }
        if let Some(p) = &self.prune {
            let rates = p.rates();
            if rates.iter().any(|r| !(0.0..1.0).contains(r)) || rates.windows(2).any(|w| w[0] > w[1]) {
                return Err(invalid("prune.rates must be ascending in [0,1)"));
            }
        }
        if let ModelConfig::Mlp { hidden, .. } = &self.model {
            if hidden.contains(&0) {
                return Err(invalid("hidden widths must be positive"));
            }
        }
        Ok(())
    }

    /// Print warnings for settings that are valid but rarely intended.
    pub fn warn(&self) {
        let t = &self.train;
        if t.trainer == TrainerKind::Lfp && t.reward.lacks_convergence_mechanism() {
            eprintln!(
                "warning: reward '{}' has no convergence mechanism; training may not settle",
                String::from(t.reward)
            );
        }
        let spiking = self.snn.is_some();
        let heaviside = match &self.model {
            ModelConfig::Mlp { activation, .. } => *activation == ActivationKind::Heaviside,
            ModelConfig::Layers { layers } => layers.iter().any(|l| {
                matches!(
                    l,
                    LayerSpec::Activation {
                        kind: ActivationKind::Heaviside
                    }
                )
            }),
        };
        if t.trainer == TrainerKind::Grad && t.surrogate.is_none() && (spiking || heaviside) {
            eprintln!("warning: gradients are zero through spikes and steps without a surrogate; set train.surrogate");
        }
    }

    pub fn build_network(&self, ds: &Dataset, snn: Option<&SnnConfig>) -> Result<Network> {
        let shape = ds.sample_shape().to_vec();
        let specs = match &self.model {
            ModelConfig::Mlp {
                hidden,
                activation,
                bias,
            } => {
                let inputs: usize = shape.iter().product();
                match snn {
                    Some(s) => snn_mlp_specs(
                        inputs,
                        hidden,
                        ds.classes,
                        LifConfig {
                            beta: s.beta,
                            threshold: s.threshold,
                        },
                    ),
                    None => mlp_specs(inputs, hidden, ds.classes, *activation, *bias),
                }
            }
            ModelConfig::Layers { layers } => layers.clone(),
        };
        let input_shape = match &self.model {
            ModelConfig::Mlp { .. } => vec![shape.iter().product()],
            ModelConfig::Layers { .. } => shape,
        };
        Network::build(&input_shape, specs, self.seed)
    }
}
