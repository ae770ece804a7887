//! `lfp`: train, evaluate, prune and verify networks from a TOML run config.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lfp_core::checkpoint;
use lfp_core::data::Dataset;
use lfp_core::gradbase::SgdOptimizer;
use lfp_core::lfp::{LfpConfig, LfpOptimizer};
use lfp_core::pruning;
use lfp_core::snn::{self, SnnMethod};
use lfp_core::train::{self, EpochOptions, Trainer};
use lfp_core::verify::{self, Suite};
use lfp_core::{Error, Network};

use config::{RunConfig, TrainerKind};

#[derive(Parser)]
#[command(name = "lfp", version, about = "Layer-wise feedback propagation training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint manifest to read.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics and a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the configured test split.
    Eval(Common),
    /// Accuracy of a checkpoint across pruning rates.
    Prune(Common),
    /// Per-layer weight distribution and Gini coefficient of a checkpoint.
    Sparsity(Common),
    /// Run a numerical property suite and write a JSON report.
    Verify {
        #[command(flatten)]
        common: Common,
        /// theorem1, conservation or finite_diff; all suites when omitted.
        #[arg(long)]
        suite: Option<Suite>,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Train a spiking network.
    SnnTrain(Common),
}

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
enum CliError {
    Config(String),
    Diverged(String),
    Other(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            Error::NonFinite { .. } | Error::NumericalInstability { .. } => CliError::Diverged(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:?}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Prune(c) => cmd_prune(&c),
        Command::Sparsity(c) => cmd_sparsity(&c),
        Command::Verify {
            common,
            suite,
            instances,
        } => cmd_verify(&common, suite, instances),
        Command::SnnTrain(c) => cmd_snn_train(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(m) => eprintln!("invalid config: {m}"),
                CliError::Diverged(m) => eprintln!("training diverged: {m}"),
                CliError::Other(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("LFP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("LFP_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(c: &Common, cfg: Option<&RunConfig>) -> CliResult<()> {
    fs::create_dir_all(&c.out).map_err(|e| io_err(&c.out, e))?;
    if let Some(cfg) = cfg {
        let path = c.out.join("effective_config.toml");
        fs::write(&path, cfg.to_toml()?).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn load_checkpoint(c: &Common) -> CliResult<Network> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("--checkpoint is required".into()))?;
    Ok(checkpoint::load(path)?.network)
}

struct MetricsRow {
    epoch: usize,
    split: &'static str,
    accuracy: f64,
    weighted_accuracy: Option<f64>,
    criterion_value: Option<f64>,
    wall_clock_s: f64,
    dead_neuron_fraction: Option<f64>,
}

struct Metrics {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Metrics {
    const HEADER: [&'static str; 7] = [
        "epoch",
        "split",
        "accuracy",
        "weighted_accuracy",
        "criterion_value",
        "wall_clock_s",
        "dead_neuron_fraction",
    ];

    fn create(path: PathBuf) -> CliResult<Self> {
        let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::Other(e.to_string()))?;
        writer
            .write_record(Self::HEADER)
            .map_err(|e| CliError::Other(e.to_string()))?;
        Ok(Self { path, writer })
    }

    fn write(&mut self, row: &MetricsRow) -> CliResult<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        self.writer
            .write_record([
                row.epoch.to_string(),
                row.split.to_string(),
                row.accuracy.to_string(),
                opt(row.weighted_accuracy),
                opt(row.criterion_value),
                format!("{:.3}", row.wall_clock_s),
                opt(row.dead_neuron_fraction),
            ])
            .map_err(|e| CliError::Other(e.to_string()))?;
        self.writer.flush().map_err(|e| io_err(&self.path, e))
    }
}

fn check_finite_params(net: &Network) -> CliResult<()> {
    if net.params().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(CliError::Diverged("parameters became non-finite".into()));
    }
    Ok(())
}

fn lfp_optimizer(net: &Network, cfg: &RunConfig) -> CliResult<LfpOptimizer> {
    let t = &cfg.train;
    Ok(LfpOptimizer::new(
        net,
        LfpConfig {
            rule: t.rule(),
            lr: t.lr,
            momentum: t.momentum,
            max_norm_clip: t.clip,
            normalize_between_layers: t.normalize_between_layers,
        },
    )?)
}

fn sgd_optimizer(net: &Network, cfg: &RunConfig) -> CliResult<SgdOptimizer> {
    Ok(SgdOptimizer::new(net, cfg.train.lr, cfg.train.momentum)?.with_clip(cfg.train.clip))
}

fn test_row(net: &Network, test: &Dataset, epoch: usize, t0: &Instant) -> CliResult<MetricsRow> {
    let s = train::evaluate(net, test)?;
    Ok(MetricsRow {
        epoch,
        split: "test",
        accuracy: s.accuracy,
        weighted_accuracy: Some(s.weighted_accuracy),
        criterion_value: None,
        wall_clock_s: t0.elapsed().as_secs_f64(),
        dead_neuron_fraction: s.dead_fraction,
    })
}

fn cmd_train(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    cfg.warn();
    prepare_out(c, Some(&cfg))?;
    let (train_set, test_set) = cfg.dataset.load(cfg.seed)?;
    let mut net = cfg.build_network(&train_set, None)?;
    let mut trainer = match cfg.train.trainer {
        TrainerKind::Lfp => Trainer::Lfp {
            opt: lfp_optimizer(&net, &cfg)?,
            reward: cfg.train.reward,
        },
        TrainerKind::Grad => Trainer::Grad {
            opt: sgd_optimizer(&net, &cfg)?,
            loss: cfg.train.loss,
            surrogate: cfg.train.surrogate,
        },
    };
    let mut metrics = Metrics::create(c.out.join("metrics.csv"))?;
    let t0 = Instant::now();
    for epoch in 0..cfg.train.epochs {
        let opts = EpochOptions {
            batch_size: cfg.train.batch_size,
            noise_std: cfg.train.noise_std,
            seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64),
        };
        let stats = train::train_epoch(&mut net, &mut trainer, &train_set, &opts)?;
        check_finite_params(&net)?;
        let eval = train::evaluate(&net, &train_set)?;
        metrics.write(&MetricsRow {
            epoch: epoch + 1,
            split: "train",
            accuracy: eval.accuracy,
            weighted_accuracy: Some(eval.weighted_accuracy),
            criterion_value: Some(stats.criterion),
            wall_clock_s: t0.elapsed().as_secs_f64(),
            dead_neuron_fraction: stats.dead_fraction,
        })?;
        eprintln!(
            "epoch {}: train accuracy {:.4}, criterion {:.6}",
            epoch + 1,
            eval.accuracy,
            stats.criterion
        );
    }
    let row = test_row(&net, &test_set, cfg.train.epochs, &t0)?;
    metrics.write(&row)?;
    println!("test accuracy {:.4}", row.accuracy);
    checkpoint::save(&net, &c.out.join("model.toml"), Some(cfg.seed))?;
    Ok(())
}

fn cmd_eval(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    prepare_out(c, None)?;
    let net = load_checkpoint(c)?;
    let (_, test_set) = cfg.dataset.load(cfg.seed)?;
    let t0 = Instant::now();
    let row = if let Some(s) = &cfg.snn {
        let steps = s.steps;
        let preds = snn::snn_predict_dataset(&net, &test_set, steps, cfg.train.batch_size)?;
        MetricsRow {
            epoch: 0,
            split: "test",
            accuracy: train::accuracy(&preds, &test_set.labels),
            weighted_accuracy: Some(train::weighted_accuracy(&preds, &test_set.labels, test_set.classes)),
            criterion_value: None,
            wall_clock_s: t0.elapsed().as_secs_f64(),
            dead_neuron_fraction: None,
        }
    } else {
        test_row(&net, &test_set, 0, &t0)?
    };
    Metrics::create(c.out.join("eval.csv"))?.write(&row)?;
    println!("test accuracy {:.4}", row.accuracy);
    Ok(())
}

fn cmd_prune(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    prepare_out(c, Some(&cfg))?;
    let net = load_checkpoint(c)?;
    let (train_set, test_set) = cfg.dataset.load(cfg.seed)?;
    let canon = pruning::canonize_batchnorm(&net)?;
    let p = cfg.prune.clone().unwrap_or_default();
    let ranking = pruning::rank_weights(&canon, p.criterion, Some(&train_set))?;
    let rates = p.rates();
    let rows = pruning::prune_sweep(&canon, &ranking, &rates, &test_set, p.weighted, cfg.seed)?;
    pruning::write_sweep_csv(&c.out.join("prune.csv"), &rows)?;
    for r in &rows {
        println!("rate {:.2}: accuracy {:.4}", r.rate, r.accuracy);
    }
    Ok(())
}

fn cmd_sparsity(c: &Common) -> CliResult<()> {
    prepare_out(c, None)?;
    let net = load_checkpoint(c)?;
    let layers = pruning::weight_distribution(&net)?;
    let path = c.out.join("sparsity.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Other(e.to_string()))?;
    let head = ["layer", "p0", "p25", "p50", "p75", "p100", "gini"];
    w.write_record(head).map_err(|e| CliError::Other(e.to_string()))?;
    for l in &layers {
        let mut rec = vec![l.name.clone()];
        rec.extend(l.percentiles.iter().map(f64::to_string));
        rec.push(l.gini.to_string());
        w.write_record(&rec).map_err(|e| CliError::Other(e.to_string()))?;
        println!("{}: gini {:.4}", l.name, l.gini);
    }
    w.flush().map_err(|e| io_err(&path, e))
}

fn cmd_verify(c: &Common, suite: Option<Suite>, instances: usize) -> CliResult<()> {
    prepare_out(c, None)?;
    let seed = c.seed.unwrap_or(0);
    let suites = suite.map_or(Suite::ALL.to_vec(), |s| vec![s]);
    let mut reports = Vec::new();
    for s in suites {
        reports.extend(verify::run_suite(s, instances, seed)?);
    }
    for r in &reports {
        println!("{r}");
    }
    let path = c.out.join("verify.json");
    let json = serde_json::to_string_pretty(&reports).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(CliError::Other("verification failed".into()))
    }
}

fn cmd_snn_train(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    let snn_cfg = cfg
        .snn
        .clone()
        .ok_or_else(|| CliError::Config("snn-train needs an [snn] section".into()))?;
    cfg.warn();
    prepare_out(c, Some(&cfg))?;
    let (train_set, test_set) = cfg.dataset.load(cfg.seed)?;
    let mut net = cfg.build_network(&train_set, Some(&snn_cfg))?;
    let mut method = match (cfg.train.trainer, cfg.train.surrogate) {
        (TrainerKind::Lfp, _) => SnnMethod::Lfp(lfp_optimizer(&net, &cfg)?),
        (TrainerKind::Grad, Some(s)) => SnnMethod::Surrogate(sgd_optimizer(&net, &cfg)?, s),
        (TrainerKind::Grad, None) => SnnMethod::ExactGradient(sgd_optimizer(&net, &cfg)?),
    };
    let mut metrics = Metrics::create(c.out.join("metrics.csv"))?;
    let t0 = Instant::now();
    let bs = cfg.train.batch_size;
    for epoch in 0..cfg.train.epochs {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let stats = snn::snn_train_epoch(&mut net, &mut method, &train_set, snn_cfg.steps, bs, seed)?;
        check_finite_params(&net)?;
        metrics.write(&MetricsRow {
            epoch: epoch + 1,
            split: "train",
            accuracy: stats.accuracy,
            weighted_accuracy: None,
            criterion_value: Some(stats.criterion),
            wall_clock_s: t0.elapsed().as_secs_f64(),
            dead_neuron_fraction: None,
        })?;
        eprintln!("epoch {}: train accuracy {:.4}", epoch + 1, stats.accuracy);
    }
    let preds = snn::snn_predict_dataset(&net, &test_set, snn_cfg.steps, bs)?;
    let acc = train::accuracy(&preds, &test_set.labels);
    metrics.write(&MetricsRow {
        epoch: cfg.train.epochs,
        split: "test",
        accuracy: acc,
        weighted_accuracy: Some(train::weighted_accuracy(&preds, &test_set.labels, test_set.classes)),
        criterion_value: None,
        wall_clock_s: t0.elapsed().as_secs_f64(),
        dead_neuron_fraction: None,
    })?;
    println!("test accuracy {acc:.4}");
    checkpoint::save(&net, &c.out.join("model.toml"), Some(cfg.seed))?;
    Ok(())
}
