mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hyperweno", version, about = "WENO5 finite-volume solvers with hypernetwork-generated weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate classical WENO5 reference trajectories for training.
    GenData(GenDataArgs),
    /// Train Hyper-CFCNN or Hyper-CFCNN-F on a generated data set.
    Train(TrainArgs),
    /// Roll a scheme out on one instance and write the snapshots.
    Rollout(RolloutArgs),
    /// Conservation remainder series of a saved rollout record.
    Diagnose(DiagnoseArgs),
    /// MSE against the fine reference and refinement orders over meshes.
    Converge(ConvergeArgs),
    /// Classical WENO5 run on one instance.
    Reference(ReferenceArgs),
    /// Target-network size and wall-clock rollout time per mesh.
    BenchCost(BenchCostArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ReferenceKind {
    /// Classical WENO5 on each level's own mesh.
    Native,
    /// Classical WENO5 on the reference mesh, averaged onto each level.
    Coarsened,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Built-in benchmark id or benchmark TOML file.
    #[arg(long)]
    benchmark: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long, env = "HYPERWENO_SEED", default_value_t = 0)]
    seed: u64,
    /// Comma-separated mesh sizes.
    #[arg(long, value_delimiter = ',')]
    mesh_levels: Option<Vec<usize>>,
    /// Step ratio dt/dx.
    #[arg(long)]
    cfl: Option<f64>,
    /// Use the full-scale trajectory count and mesh family.
    #[arg(long)]
    full: bool,
    #[arg(long, value_enum, default_value_t = ReferenceKind::Coarsened)]
    reference: ReferenceKind,
    /// Fine mesh for coarsened references (default: the benchmark's).
    #[arg(long)]
    reference_mesh: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LearnedScheme {
    Hcfcnn,
    #[value(name = "hcfcnn-f")]
    HcfcnnF,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    benchmark: String,
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    scheme: LearnedScheme,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Unroll depth.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Window length.
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, env = "HYPERWENO_SEED", default_value_t = 0)]
    seed: u64,
    /// Loss history CSV (default: checkpoint path with `.loss.csv`).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Also write the checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

/// What to run: a checkpoint file, or `weno5` / `linear`.
#[derive(Args, Debug)]
struct RunArgs {
    /// Built-in benchmark id, benchmark TOML, or instance TOML
    /// (`benchmark = ...` plus an optional `[ic]` table).
    #[arg(long)]
    instance: String,
    #[arg(long)]
    mesh: usize,
    #[arg(long = "T")]
    t: f64,
    /// Step ratio dt/dx (default: the benchmark's).
    #[arg(long)]
    dt_ratio: Option<f64>,
    /// Keep every k-th step.
    #[arg(long, default_value_t = 1)]
    save_every: usize,
    /// Snapshot CSV `x,component_0..,t`.
    #[arg(long)]
    out: PathBuf,
    /// Also save the rollout record (snapshots plus boundary fluxes).
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    /// Checkpoint file, or `weno5` / `linear`.
    #[arg(long)]
    ckpt: String,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LogKind {
    Effective,
    TimeLevel,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// Record written by `rollout --record`.
    #[arg(long)]
    rollout: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = LogKind::Effective)]
    log: LogKind,
    /// Divide by max_t |sum_j q_j dx|.
    #[arg(long)]
    relative: bool,
}

#[derive(Args, Debug)]
struct ConvergeArgs {
    #[arg(long)]
    benchmark: String,
    /// Checkpoint file, or `weno5` / `linear`.
    #[arg(long)]
    ckpt: String,
    #[arg(long)]
    out: PathBuf,
    /// Instance TOML replacing the fixed test instance.
    #[arg(long)]
    instance: Option<String>,
    #[arg(long, value_delimiter = ',')]
    meshes: Option<Vec<usize>>,
    #[arg(long = "T")]
    t: Option<f64>,
    #[arg(long)]
    dt_ratio: Option<f64>,
    #[arg(long)]
    reference_mesh: Option<usize>,
}

#[derive(Args, Debug)]
struct ReferenceArgs {
    #[arg(long)]
    benchmark: String,
    #[arg(long)]
    mesh: usize,
    #[arg(long = "T")]
    t: f64,
    #[arg(long)]
    out: PathBuf,
    /// Instance TOML replacing the fixed test instance.
    #[arg(long)]
    instance: Option<String>,
    #[arg(long)]
    dt_ratio: Option<f64>,
    #[arg(long, default_value_t = 1)]
    save_every: usize,
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchCostArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    meshes: Vec<usize>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Default: burgers1, shallow or euler by component count.
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long = "T")]
    t: Option<f64>,
    /// Report the fastest of this many runs.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Converge(a) => commands::converge(a),
        Command::Reference(a) => commands::reference(a),
        Command::BenchCost(a) => commands::bench_cost(a),
    };
    match res {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            let (code, category) = exit::classify(&e);
            eprintln!("error [{category}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
