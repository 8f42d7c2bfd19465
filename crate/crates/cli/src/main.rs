//! `ploff`: data generation, metric training, neighbour indexing, agent
//! training, evaluation, sweeps, figure data and property checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "ploff", version, about = "Pseudometric learning for offline reinforcement learning")]
struct Cli {
    /// Seed of every random stream used by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect a reward-scaled transition dataset (PLDS1).
    GenData(GenData),
    /// Train the state-action and state embedders (PLCK1 + loss CSV).
    TrainMetric(TrainMetric),
    /// Build the nearest-neighbour candidate index (PLNN1).
    BuildKnn(BuildKnn),
    /// Train an actor-critic agent from a dataset (PLCK1 + log CSV).
    TrainAgent(TrainAgent),
    /// Evaluate an agent or a scripted behaviour policy (JSON report).
    Eval(Eval),
    /// Train and evaluate one agent per bonus setting (CSV table).
    Sweep(Sweep),
    /// Write the data behind the heatmap, loss-curve and noise figures.
    ExportFigures(ExportFigures),
    /// Run the property suites; fails with exit code 2 if any check fails.
    Verify(Verify),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EnvKind {
    Gridworld,
    Pointmass,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, value_enum)]
    env: EnvKind,
    /// Gridworld map file; `two_room.txt` falls back to the bundled map.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Episodes to collect [default: 500 gridworld, 100 pointmass].
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Discount of the Q-learning collector.
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    /// Episode length cap [default: 50 gridworld, 100 pointmass].
    #[arg(long)]
    time_limit: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    goal_reward: f64,
    /// Reward for acting inside the absorbed goal [default: goal reward].
    #[arg(long)]
    absorbing_reward: Option<f64>,
    /// Point-mass behaviour policy: random, medium, expert or mixture.
    #[arg(long, default_value = "medium")]
    policy: String,
    /// Extra Gaussian action noise of the point-mass behaviour policy.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value = "data.plds")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainMetric {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2_000_000)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1024)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    /// Actions averaged in the state-embedder target.
    #[arg(long, default_value_t = 256)]
    action_samples: usize,
    #[arg(long, default_value_t = 0.005)]
    tau: f64,
    /// Discount of the metric (not of the agent).
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Draw separate actions for the two states of a pair.
    #[arg(long)]
    independent_actions: bool,
    #[arg(long, default_value_t = 1000)]
    log_every: usize,
    #[arg(long, default_value = "metric.plck")]
    output: PathBuf,
    #[arg(long, default_value = "metric_loss.csv")]
    loss_csv: PathBuf,
}

#[derive(Args, Debug)]
struct BuildKnn {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metric: PathBuf,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value = "index.plnn")]
    output: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct AgentFlags {
    /// ploff, td3-off or ploff-l2.
    #[arg(long, default_value = "ploff")]
    variant: String,
    /// q-scaled-exp, exp or one-minus-exp.
    #[arg(long, default_value = "q-scaled-exp")]
    bonus_form: String,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Hidden widths of actor and critics, comma separated.
    #[arg(long, default_value = "256,256")]
    hidden: String,
    #[arg(long, default_value_t = 2)]
    policy_delay: usize,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 0.005)]
    tau: f64,
    #[arg(long, default_value_t = 3e-4)]
    learning_rate: f64,
    /// Use one critic instead of the twin pair.
    #[arg(long)]
    single_critic: bool,
    /// Std of clipped noise on the target action (off when absent).
    #[arg(long)]
    target_noise: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    noise_clip: f64,
}

#[derive(Args, Debug)]
struct TrainAgent {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metric: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[command(flatten)]
    agent: AgentFlags,
    #[arg(long, default_value_t = 5.0)]
    alpha_a: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha_c: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 500_000)]
    steps: usize,
    #[arg(long, default_value = "agent.plck")]
    output: PathBuf,
    #[arg(long, default_value = "agent_log.csv")]
    log_csv: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    /// Agent checkpoint to evaluate.
    #[arg(long, conflicts_with = "behavior")]
    agent: Option<PathBuf>,
    /// Scripted policy to evaluate instead (needs --data for the env).
    #[arg(long, requires = "data")]
    behavior: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Episodes of the random policy behind the zero of the score.
    #[arg(long, default_value_t = 100)]
    reference_episodes: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Sweep {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metric: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[command(flatten)]
    agent: AgentFlags,
    #[arg(long, default_value = "1,5,10")]
    alpha_a_grid: String,
    #[arg(long, default_value = "1,5,10")]
    alpha_c_grid: String,
    #[arg(long, default_value = "0.1,0.25,0.5")]
    beta_grid: String,
    /// Tie the critic weight to the actor weight.
    #[arg(long)]
    tied: bool,
    /// Seeds per grid point, comma separated [default: the global seed].
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value_t = 50_000)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    reference_episodes: usize,
    #[arg(long, default_value = "sweep.csv")]
    output: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FigureKind {
    Heatmap,
    Curves,
    Noise,
}

#[derive(Args, Debug)]
struct ExportFigures {
    #[arg(long, value_enum)]
    kind: FigureKind,
    #[arg(long)]
    metric: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Heatmap anchor: `goal` or `row,col`.
    #[arg(long, default_value = "goal")]
    anchor: String,
    /// Path-length radius for the reported heatmap rank correlation.
    #[arg(long, default_value_t = 10)]
    radius: usize,
    /// Loss or training log CSV to pass through (curves).
    #[arg(long)]
    log_csv: Option<PathBuf>,
    #[arg(long, default_value = "0,0.05,0.1,0.2,0.4")]
    lambdas: String,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Verify {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 10)]
    sampled_seeds: usize,
    #[arg(long, default_value_t = 200)]
    knn_instances: usize,
    /// Add a fixture that violates the triangle inequality.
    #[arg(long)]
    inject_triangle: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(commands::Outcome { summary, failed }) => {
            println!("{summary}");
            ExitCode::from(if failed { 2 } else { 0 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
