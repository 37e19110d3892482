//! The `tgmm` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checks;
use crate::datapipe::{generate_mso, load_dataset, save_dataset, GraphKind, GraphSpec, MissingPattern, MsoConfig, Split};
use crate::error::{Error, Result};
use crate::graphpart::{expand_one_hop, partition, partition_stats, save_partition, load_partition};
use crate::trainer::{self, EvalPolicy, ModelKind, RunConfig, PARTITION_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "tgmm", version, about = "Spatio-temporal forecasting lab: T-GMM and FC-LSTM on graph time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-sine oscillator dataset on a sensor graph.
    GenerateMso(GenerateArgs),
    /// Hide entries of a dataset with a missing-data pattern.
    Inject(InjectArgs),
    /// Split the sensor graph into halo-expanded patches.
    Partition(PartitionArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a trained run on one split.
    Eval(EvalArgs),
    /// Export per-entry predictions of a trained run as CSV.
    Predict(PredictArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub nodes: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Number of sine components.
    #[arg(long, default_value_t = 5)]
    pub oscillators: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = GraphKind::RandomGeometric)]
    pub graph: GraphKind,
    /// Target mean degree of the random geometric graph.
    #[arg(long, default_value_t = 4.0)]
    pub mean_degree: f64,
    /// Neighbor-averaging rounds applied to amplitudes and phases.
    #[arg(long, default_value_t = 3)]
    pub smoothing_rounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PatternKind {
    Point,
    BlockT,
    BlockSt,
}

#[derive(Args, Debug)]
pub struct InjectArgs {
    /// Input dataset directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub pattern: PatternKind,
    /// Point: probability of hiding each entry.
    #[arg(long, default_value_t = 0.05)]
    pub p: f64,
    /// BlockT: failures per node per 1000 steps.
    #[arg(long, default_value_t = 2.0)]
    pub rate: f64,
    /// BlockST: number of outage events (default 3 * max(1, N / 10)).
    #[arg(long)]
    pub events: Option<usize>,
    /// BlockST: hop radius of each outage.
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    /// Shortest block duration in steps.
    #[arg(long, default_value_t = 10)]
    pub min_len: usize,
    /// Longest block duration in steps.
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    /// Dataset directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub patches: usize,
    /// Core size slack: cores hold at most ceil((1 + imbalance) * N / P) nodes.
    #[arg(long, default_value_t = 0.1)]
    pub imbalance: f64,
    /// Output file (default: <in>/partition.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Partition file to reuse instead of partitioning again.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Input window length W.
    #[arg(long)]
    pub window: Option<usize>,
    /// Forecast horizon H.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Step between window starts.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Gradient accumulation steps per optimizer update.
    #[arg(long)]
    pub accum_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Number of patches P (T-GMM); 0 follows --partition, else about 16 nodes per core.
    #[arg(long)]
    pub patches: Option<usize>,
    /// Node latent width d (T-GMM).
    #[arg(long)]
    pub d_node: Option<usize>,
    /// Patch latent width d_p (T-GMM).
    #[arg(long)]
    pub d_patch: Option<usize>,
    /// Hidden size (FC-LSTM).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Stacked layers (FC-LSTM).
    #[arg(long)]
    pub lstm_layers: Option<usize>,
    /// Policy for the headline test metric.
    #[arg(long, value_enum)]
    pub eval_policy: Option<EvalPolicy>,
    /// Seed for initialization, partitioning, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = EvalPolicy::EvalMask)]
    pub policy: EvalPolicy,
    /// Also write the metrics JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// `all` or one of: ops, node-mixer, patch-mixer, gine, tgmm, fclstm.
    #[arg(long, default_value = "all")]
    pub module: String,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable value")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenerateMso(a) => {
            let cfg = MsoConfig {
                graph: GraphSpec {
                    kind: a.graph,
                    nodes: a.nodes,
                    seed: a.seed,
                    mean_degree: a.mean_degree,
                },
                oscillators: a.oscillators,
                steps: a.steps,
                noise_sigma: a.noise,
                smoothing_rounds: a.smoothing_rounds,
                seed: a.seed,
                ..Default::default()
            };
            let ds = generate_mso(&cfg)?;
            save_dataset(&a.out, &ds)?;
        }
        Command::Inject(a) => {
            let ds = load_dataset(&a.input)?;
            let pattern = match a.pattern {
                PatternKind::Point => MissingPattern::Point { p: a.p },
                PatternKind::BlockT => MissingPattern::BlockT {
                    rate: a.rate,
                    min_len: a.min_len,
                    max_len: a.max_len,
                },
                PatternKind::BlockSt => MissingPattern::BlockSt {
                    events: a.events.unwrap_or(3 * (ds.num_nodes / 10).max(1)),
                    radius: a.radius,
                    min_len: a.min_len,
                    max_len: a.max_len,
                },
            };
            let out = pattern.apply(&ds, a.seed)?;
            save_dataset(&a.out, &out)?;
        }
        Command::Partition(a) => {
            let ds = load_dataset(&a.input)?;
            let part = expand_one_hop(&partition(&ds.graph, a.patches, a.imbalance, a.seed)?, &ds.graph);
            part.validate(&ds.graph)?;
            let out = a.out.unwrap_or_else(|| a.input.join(PARTITION_FILE));
            save_partition(&out, &part)?;
            println!("{}", to_json(&partition_stats(&part, &ds.graph)));
        }
        Command::Train(a) => {
            let ds = load_dataset(&a.data)?;
            let cfg = train_config(&a)?;
            let part = match &a.partition {
                Some(p) => Some(load_partition(p, &ds.graph)?),
                None => None,
            };
            let outcome = trainer::train(&ds, part.as_ref(), cfg, &a.out)?;
            println!("{}", to_json(&outcome.metrics));
        }
        Command::Eval(a) => {
            let ds = load_dataset(&a.data)?;
            let m = trainer::evaluate_run(&a.run, &ds, a.split, a.policy, a.threads)?;
            let text = to_json(&m);
            if let Some(out) = &a.out {
                write_text(out, &(text.clone() + "\n"))?;
            }
            println!("{text}");
        }
        Command::Predict(a) => {
            let ds = load_dataset(&a.data)?;
            let rows = trainer::predict_run(&a.run, &ds, a.split, &a.out, a.threads)?;
            eprintln!("wrote {rows} rows to {}", a.out.display());
        }
        Command::Gradcheck(a) => {
            let rows = checks::run(&a.module)?;
            print!("{}", checks::format_table(&rows));
            if rows.iter().any(|r| !r.passed()) {
                eprintln!("error: gradient check above tolerance {:e}", checks::TOLERANCE);
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Built-in defaults, then the config file, then flags.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => trainer::read_config(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                cfg.$($field)+ = v;
            }
        };
    }
    set!(a.model => model);
    set!(a.window => window);
    set!(a.horizon => horizon);
    set!(a.stride => stride);
    set!(a.epochs => train.max_epochs);
    set!(a.batch_size => train.batch_size);
    set!(a.accum_steps => train.accum_steps);
    set!(a.lr => train.optimizer.lr);
    set!(a.weight_decay => train.optimizer.weight_decay);
    set!(a.patience => train.patience);
    set!(a.patches => tgmm.patches);
    set!(a.d_node => tgmm.d_node);
    set!(a.d_patch => tgmm.d_patch);
    set!(a.hidden => fclstm.hidden);
    set!(a.lstm_layers => fclstm.layers);
    set!(a.eval_policy => train.eval_policy);
    set!(a.seed => train.seed);
    set!(a.seed => partition.seed);
    set!(a.threads => train.threads);
    Ok(cfg)
}
