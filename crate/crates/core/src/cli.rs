//! `ganet` command line: one subcommand per pipeline stage.
//!
//! Every subcommand prints one `key=value` summary line on success. Exit
//! codes: 0 success, 1 usage error, 2 runtime error. Output files are
//! written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapter::{self, AdapterConfig, DEFAULT_GAMMA};
use crate::continual::{self, EwcConfig, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::fixtures::{self, FixtureSet, SynthConfig};
use crate::graph::GraphMode;
use crate::trainer::{self, format_g, TaskData, TrainConfig, TrainInputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping internal worker threads.
pub const THREADS_ENV: &str = "GANET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ganet", version, about = "Graph adapter training on multi-modal token features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic GAFX fixture file.
    GenFixtures(GenArgs),
    /// Summarize the similarity graphs of a fixture file.
    GraphStats(GraphStatsArgs),
    /// Train an adapter and write a GAMD model.
    Train(TrainArgs),
    /// Accuracy of a model on a fixture file.
    Eval(EvalArgs),
    /// Estimate the Fisher diagonal of a model and write a GAFI file.
    Fisher(FisherArgs),
    /// Two-task forgetting protocol.
    Continual(ContinualArgs),
    /// Train/evaluate across similarity thresholds and write a CSV.
    SweepGamma(SweepArgs),
    /// Finite-difference check of the full training-objective gradient.
    GradCheck(GradCheckArgs),
    /// Trainable-parameter count of an adapter configuration.
    CountParams(CountArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    correlation: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GraphStatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value = "token", value_parser = parse_mode)]
    mode: GraphMode,
    /// Samples per graph in sample mode.
    #[arg(long, default_value_t = trainer::DEFAULT_BATCH_SIZE)]
    batch: usize,
}

#[derive(Debug, Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Bottleneck width; defaults to min(16, input width).
    #[arg(long)]
    mid_dim: Option<usize>,
    /// Up-projection width; defaults to the input width.
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value = "token", value_parser = parse_mode)]
    mode: GraphMode,
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    residual: bool,
    /// Drop all graph edges (GCN layers see the identity operator).
    #[arg(long)]
    no_graph: bool,
    /// Zero every text token before training and evaluation.
    #[arg(long)]
    image_only: bool,
    /// Parameter-initialization seed; defaults to --seed.
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = trainer::DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = trainer::DEFAULT_BATCH_SIZE)]
    batch: usize,
    #[arg(long, default_value_t = trainer::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    lr_min: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Count the cross-entropy twice in the objective.
    #[arg(long)]
    strict_eq11: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Held-out fixture file scored after every epoch.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Per-epoch CSV log.
    #[arg(long)]
    history: Option<PathBuf>,
    /// GAFI file enabling the elastic penalty; training starts from its anchor.
    #[arg(long)]
    fisher: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    image_only: bool,
}

#[derive(Debug, Args)]
struct FisherArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    task_id: u32,
    #[arg(long)]
    image_only: bool,
}

#[derive(Debug, Args)]
struct ContinualArgs {
    #[arg(long)]
    task_a: PathBuf,
    #[arg(long)]
    task_b: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Optional one-row CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    )]
    gammas: Vec<f64>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 3)]
    tokens: usize,
    #[arg(long, default_value_t = 6)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    mid_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct CountArgs {
    #[arg(long)]
    in_dim: usize,
    #[arg(long)]
    mid_dim: usize,
    /// Defaults to --in-dim.
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    no_bias: bool,
}

fn parse_mode(s: &str) -> std::result::Result<GraphMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Run the CLI on `args` (excluding the program name), returning the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("ganet")).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            let _ = writeln!(out, "{summary}");
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

struct Summary(Vec<(&'static str, String)>);

impl Summary {
    fn new(command: &str) -> Self {
        Self(vec![("command", command.to_string())])
    }

    fn add(mut self, key: &'static str, value: impl ToString) -> Self {
        self.0.push((key, value.to_string()));
        self
    }

    fn num(self, key: &'static str, value: f64) -> Self {
        self.add(key, format_g(value, 10))
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

fn load_set(path: &Path, image_only: bool) -> Result<FixtureSet> {
    let set = fixtures::read_fixture(path)?;
    Ok(if image_only { set.without_text() } else { set })
}

fn adapter_config(args: &ModelArgs, set: &FixtureSet, seed: u64) -> AdapterConfig {
    let in_dim = AdapterConfig::node_width(args.mode, set.embed_dim());
    AdapterConfig {
        in_dim,
        mid_dim: args.mid_dim.unwrap_or(in_dim.min(16)),
        out_dim: args.out_dim.unwrap_or(in_dim),
        gcn_layers: args.layers,
        num_classes: set.num_classes(),
        gamma: args.gamma,
        graph_mode: args.mode,
        use_bias: !args.no_bias,
        residual: args.residual,
        use_graph: !args.no_graph,
        seed: args.init_seed.unwrap_or(seed),
    }
}

fn train_config(model: &ModelArgs, optim: &OptimArgs, set: &FixtureSet, lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs: optim.epochs,
        batch_size: optim.batch,
        lr0: optim.lr,
        lr_min: optim.lr_min,
        seed: optim.seed,
        ewc: Some(EwcConfig {
            lambda,
            fisher_samples: None,
            strict_eq11: optim.strict_eq11,
        }),
        threads: threads_from_env(),
        ..TrainConfig::new(adapter_config(model, set, optim.seed))
    }
}

fn dispatch(command: Command) -> Result<Summary> {
    match command {
        Command::GenFixtures(a) => {
            let cfg = SynthConfig {
                num_samples: a.samples,
                num_classes: a.classes,
                tokens: a.tokens,
                dim: a.dim,
                class_separation: a.separation,
                noise_sigma: a.sigma,
                modality_correlation: a.correlation,
                seed: a.seed,
            };
            let set = fixtures::generate_synthetic(&cfg)?;
            fixtures::write_fixture(&set, &a.out)?;
            Ok(Summary::new("gen-fixtures")
                .add("samples", set.len())
                .add("tokens", set.tokens_per_modality())
                .add("dim", set.embed_dim())
                .add("classes", set.num_classes())
                .add("out", a.out.display()))
        }
        Command::GraphStats(a) => {
            let set = fixtures::read_fixture(&a.input)?;
            let s = trainer::dataset_graph_stats(&set, a.mode, a.gamma, a.batch)?;
            Ok(Summary::new("graph-stats")
                .num("gamma", a.gamma)
                .add("mode", a.mode.as_str())
                .add("graphs", s.graphs)
                .add("nodes", s.nodes)
                .add("edges", s.edges)
                .num("mean_degree", s.mean_degree)
                .add("isolated", s.isolated))
        }
        Command::Train(a) => {
            let set = load_set(&a.input, a.model.image_only)?;
            let test = match &a.test {
                Some(p) => Some(load_set(p, a.model.image_only)?),
                None => None,
            };
            let fisher = match &a.fisher {
                Some(p) => Some(continual::load_fisher(p)?),
                None => None,
            };
            let cfg = train_config(&a.model, &a.optim, &set, a.lambda);
            let init = match &fisher {
                Some(f) => Some(adapter::AdapterParams::from_flat(&cfg.adapter, &f.anchor)?),
                None => None,
            };
            let (model, history) = trainer::train_with(
                &set,
                &cfg,
                TrainInputs {
                    init,
                    fisher: fisher.as_ref(),
                    eval: test.as_ref(),
                },
            )?;
            adapter::save_model(&model, &a.out)?;
            if let Some(p) = &a.history {
                crate::write_atomic(p, history.to_csv().as_bytes())?;
            }
            let train_acc = trainer::evaluate(&model, &set)?;
            let last = history.rows.last().expect("epochs >= 1");
            let mut s = Summary::new("train")
                .add("epochs", history.rows.len())
                .add("params", model.params.len())
                .num("final_loss", last.train_loss)
                .num("final_lr", last.lr)
                .num("final_train_acc", train_acc);
            if let Some(acc) = last.eval_accuracy {
                s = s.num("final_test_acc", acc);
            }
            Ok(s.add("out", a.out.display()))
        }
        Command::Eval(a) => {
            let model = adapter::load_model(&a.model)?;
            let set = load_set(&a.input, a.image_only)?;
            let acc = trainer::evaluate(&model, &set)?;
            Ok(Summary::new("eval").add("samples", set.len()).num("accuracy", acc))
        }
        Command::Fisher(a) => {
            let model = adapter::load_model(&a.model)?;
            let set = load_set(&a.input, a.image_only)?;
            let ewc = EwcConfig {
                fisher_samples: a.max_samples,
                ..EwcConfig::default()
            };
            let state = continual::estimate_fisher(&model.params, &model.config, &set, &ewc, a.task_id)?;
            continual::save_fisher(&state, &a.out)?;
            let mean = state.fisher_diag.iter().sum::<f64>() / state.len().max(1) as f64;
            let max = state.fisher_diag.iter().copied().fold(0.0, f64::max);
            Ok(Summary::new("fisher")
                .add("params", state.len())
                .add("samples", state.sample_count)
                .num("mean_fisher", mean)
                .num("max_fisher", max)
                .add("out", a.out.display()))
        }
        Command::Continual(a) => {
            let set_a = load_set(&a.task_a, a.model.image_only)?;
            let set_b = load_set(&a.task_b, a.model.image_only)?;
            let task_a = TaskData::split(&set_a, a.train_fraction, a.split_seed)?;
            let task_b = TaskData::split(&set_b, a.train_fraction, a.split_seed)?;
            let cfg = train_config(&a.model, &a.optim, &set_a, a.lambda);
            let outcome = trainer::continual_protocol(&task_a, &task_b, a.lambda, &cfg)?;
            let r = outcome.report;
            if let Some(p) = &a.report {
                let csv = format!(
                    "lambda,acc_a_before,acc_a_after,acc_b,forgetting\n{},{},{},{},{}\n",
                    format_g(r.lambda, 10),
                    format_g(r.acc_a_before, 10),
                    format_g(r.acc_a_after, 10),
                    format_g(r.acc_b, 10),
                    format_g(r.forgetting, 10)
                );
                crate::write_atomic(p, csv.as_bytes())?;
            }
            Ok(Summary::new("continual")
                .num("lambda", r.lambda)
                .num("acc_a_before", r.acc_a_before)
                .num("acc_a_after", r.acc_a_after)
                .num("acc_b", r.acc_b)
                .num("forgetting", r.forgetting))
        }
        Command::SweepGamma(a) => {
            let set = load_set(&a.input, a.model.image_only)?;
            let data = TaskData::split(&set, a.train_fraction, a.split_seed)?;
            let cfg = train_config(&a.model, &a.optim, &set, DEFAULT_LAMBDA);
            let rows = trainer::sweep_gamma(&data, &a.gammas, &cfg)?;
            crate::write_atomic(&a.out, trainer::sweep_csv(&rows).as_bytes())?;
            let best = rows
                .iter()
                .fold(None::<&trainer::SweepRow>, |best, r| match best {
                    Some(b) if b.test_accuracy >= r.test_accuracy => Some(b),
                    _ => Some(r),
                })
                .expect("at least one gamma");
            Ok(Summary::new("sweep-gamma")
                .add("rows", rows.len())
                .num("best_gamma", best.gamma)
                .num("best_accuracy", best.test_accuracy)
                .add("out", a.out.display()))
        }
        Command::GradCheck(a) => {
            let cfg = AdapterConfig {
                gcn_layers: a.layers,
                gamma: a.gamma,
                seed: a.seed,
                ..AdapterConfig::new(a.dim, a.mid_dim, a.classes)
            };
            let report = trainer::gradient_check(&cfg, a.tokens, a.lambda, a.h)?;
            let passed = report.max_relative_error < a.tol;
            let summary = Summary::new("grad-check")
                .add("params", report.params)
                .num("max_rel_err", report.max_relative_error)
                .num("tol", a.tol)
                .add("passed", passed);
            if passed {
                Ok(summary)
            } else {
                Err(Error::Config(format!("gradient check failed: {summary}")))
            }
        }
        Command::CountParams(a) => {
            let cfg = AdapterConfig {
                in_dim: a.in_dim,
                mid_dim: a.mid_dim,
                out_dim: a.out_dim.unwrap_or(a.in_dim),
                gcn_layers: a.layers,
                num_classes: a.classes,
                use_bias: !a.no_bias,
                ..AdapterConfig::new(a.in_dim, a.mid_dim, a.classes)
            };
            cfg.validate()?;
            Ok(Summary::new("count-params").add("trainable_params", adapter::count_trainable(&cfg)))
        }
    }
}
