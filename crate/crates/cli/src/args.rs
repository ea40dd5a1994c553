use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxkmp::experiment::{CONTEXT_CLUSTER_STD, CONTEXT_DEMOS_PER_LETTER, CONTEXT_SEED};
use ctxkmp::{StartMode, Strategy};

pub const OUT_DIR_ENV: &str = "CTXKMP_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ctxkmp", version, about = "Train, evaluate and serve context-dependent movement primitives")]
pub struct Cli {
    /// Default directory for generated files.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the synthetic context-letter corpus from three letter corpora.
    GenerateContext(GenerateArgs),
    /// Fit a model to a corpus and write the model plus a manifest.
    Train(TrainArgs),
    /// Evaluate strategies from demonstration or random starts and write a CSV report.
    Eval(EvalArgs),
    /// Export the vector field and epistemic variance on a planar grid.
    Field(FieldArgs),
    /// Run a single rollout and write its trace.
    Rollout(RolloutArgs),
    /// Start the HTTP/WebSocket service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Preset {
    /// Handwriting row: C=20, N=500, gain_dt=1.
    #[default]
    Lasa,
    /// Context-letter row: C=35, N=1000, gain_dt=5.
    Context,
}

/// Training and rollout configuration. Flags override `--config`, which overrides `--preset`.
#[derive(Debug, Clone, Default, Args)]
#[command(next_help_heading = "Run configuration")]
pub struct ConfigArgs {
    /// Base values [default: lasa]
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Flat JSON config, or a train manifest whose config is reused.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Mixture components C [default: 20; context preset 35]
    #[arg(long = "C", value_name = "COUNT")]
    pub components: Option<usize>,
    /// Reference points N [default: 500; context preset 1000]
    #[arg(long = "N", value_name = "COUNT")]
    pub n_refs: Option<usize>,
    /// KMP regularization lambda [default: 0.5]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Context kernel length l_c [default: 0.06]
    #[arg(long = "l-c")]
    pub l_c: Option<f64>,
    /// Position kernel length l_p [default: 0.04]
    #[arg(long = "l-p")]
    pub l_p: Option<f64>,
    /// Stabilizing gain K_s [default: 4]
    #[arg(long = "K-s")]
    pub k_sp: Option<f64>,
    /// Goal gain K_g [default: 20]
    #[arg(long = "K-g")]
    pub k_g: Option<f64>,
    /// Stabilizing weight pi_sp [default: 0.6]
    #[arg(long = "pi-sp")]
    pub pi_sp: Option<f64>,
    /// Epistemic threshold gamma_sigma [default: 0.5]
    #[arg(long = "gamma-sigma")]
    pub gamma_sigma: Option<f64>,
    /// Gradient threshold gamma_grad [default: 1]
    #[arg(long = "gamma-grad")]
    pub gamma_grad: Option<f64>,
    /// Euler step in seconds [default: 0.05]
    #[arg(long)]
    pub dt: Option<f64>,
    /// Time constant dividing the stabilizing and goal gains [default: 1; context preset 5]
    #[arg(long = "gain-dt")]
    pub gain_dt: Option<f64>,
    /// Gradient norm below which the stabilizer is off [default: 1e-200]
    #[arg(long = "grad-eps")]
    pub grad_eps: Option<f64>,
    /// Stabilizing expert variance [default: 0.0001]
    #[arg(long = "sigma-sp")]
    pub sigma_sp: Option<f64>,
    /// Goal expert variance [default: 0.0001]
    #[arg(long = "sigma-g")]
    pub sigma_g: Option<f64>,
    /// Initial kernel jitter [default: 1e-8]
    #[arg(long)]
    pub jitter: Option<f64>,
    /// EM diagonal regularizer [default: 1e-6 x per-dimension variance]
    #[arg(long)]
    pub reg: Option<f64>,
    /// Rollout iteration cap [default: 500]
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Success radius around the goal [default: 0.01]
    #[arg(long = "success-radius")]
    pub success_radius: Option<f64>,
    /// EM initialization seed [default: 1]
    #[arg(long = "em-seed")]
    pub em_seed: Option<u64>,
    /// Reference sampling seed [default: 2]
    #[arg(long = "sample-seed")]
    pub sample_seed: Option<u64>,
    /// Random start seed [default: 3]
    #[arg(long = "start-seed")]
    pub start_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Three letter corpora; defaults to the Z, S and J shapes in `--lasa-dir`.
    #[arg(long, num_args = 3, value_name = "FILE")]
    pub letters: Option<Vec<PathBuf>>,
    #[arg(long, default_value = "data/lasa")]
    pub lasa_dir: PathBuf,
    /// Cluster centers, `;`-separated vectors of `,`-separated numbers.
    #[arg(long, default_value = "0,0;1,1;2,2")]
    pub centers: String,
    #[arg(long, default_value_t = CONTEXT_CLUSTER_STD)]
    pub cluster_std: f64,
    #[arg(long, default_value_t = CONTEXT_DEMOS_PER_LETTER)]
    pub demos_per_letter: usize,
    #[arg(long, default_value_t = CONTEXT_SEED)]
    pub seed: u64,
    /// Output corpus [default: OUT_DIR/context_letters.json]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus JSON.
    #[arg(long, short)]
    pub dataset: PathBuf,
    /// Base name of the written files [default: dataset file stem]
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model; repeat to pool several models.
    #[arg(long, short)]
    pub model: Vec<PathBuf>,
    /// Corpus trained in-line; repeat to pool several datasets.
    #[arg(long, short)]
    pub dataset: Vec<PathBuf>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', default_value = "kmp,kmp+stab,kmp+goal,full")]
    pub strategies: Vec<Strategy>,
    /// `on-demos` or `random:N`.
    #[arg(long, default_value = "on-demos")]
    pub starts: StartMode,
    /// Contexts every start is run under, `;`-separated.
    #[arg(long)]
    pub contexts: Option<String>,
    /// Report CSV [default: OUT_DIR/report.csv]; a JSON with trial counts is written next to it.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub nx: usize,
    #[arg(long, default_value_t = 50)]
    pub ny: usize,
    /// `x_min,x_max,y_min,y_max` [default: demo bounding box + 20%]
    #[arg(long, allow_hyphen_values = true)]
    pub bounds: Option<String>,
    /// Context vector, required for models with context inputs.
    #[arg(long, allow_hyphen_values = true)]
    pub context: Option<String>,
    #[arg(long, default_value = "full")]
    pub strategy: Strategy,
    /// Output prefix; writes PREFIX.csv and PREFIX.json [default: OUT_DIR/field]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    /// Start position.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: String,
    /// Constant context.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "schedule")]
    pub context: Option<String>,
    /// Piecewise context, `ITER:c1,c2;ITER:c1,c2` starting at iteration 0.
    #[arg(long, allow_hyphen_values = true)]
    pub schedule: Option<String>,
    #[arg(long, default_value = "full")]
    pub strategy: Strategy,
    /// Trace JSON [default: OUT_DIR/rollout.json]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Models kept in memory.
    #[arg(long, default_value_t = 16)]
    pub capacity: usize,
    /// Directory models are persisted to.
    #[arg(long)]
    pub store_dir: Option<PathBuf>,
    /// Live rollout pace.
    #[arg(long, default_value_t = 20.0)]
    pub rate_hz: f64,
    #[command(flatten)]
    pub config: ConfigArgs,
}
