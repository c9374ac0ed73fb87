//! `deepmlf`: generate data, pretrain the AV encoder, train, evaluate and
//! analyze fusion models from the command line.
//!
//! Failures print one `error: <category>: <message>` line on stderr and exit
//! with a category-specific code. Human-readable logs go to stdout.

mod commands;
mod io;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepmlf::{AvInit, DmlfError};

#[derive(Parser, Debug)]
#[command(name = "deepmlf", version, about = "Deep multimodal fusion through a frozen causal LM")]
struct Cli {
    /// Overrides the seed from the config and from DMLF_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset described by a generator spec.
    GenData { spec: PathBuf, out_dir: PathBuf },
    /// Pretrain the standalone AV model and save its snapshot.
    PretrainAv {
        config: PathBuf,
        data: PathBuf,
        #[arg(long, default_value = "runs/pretrain-av")]
        out: PathBuf,
    },
    /// Train the full model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and print the metrics as JSON.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Information-flow probes, gate readings and attention budget.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every trainable tensor.
    GradCheck(GradCheckArgs),
    /// Expand ablation axes into run configs, and train them with --data.
    Grid(GridArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AvInitArg {
    #[value(name = "pre_tune", alias = "pre-tune")]
    PreTune,
    #[value(name = "pre_freeze", alias = "pre-freeze")]
    PreFreeze,
    #[value(name = "random_tune", alias = "random-tune")]
    RandomTune,
}

impl From<AvInitArg> for AvInit {
    fn from(a: AvInitArg) -> Self {
        match a {
            AvInitArg::PreTune => AvInit::PreTune,
            AvInitArg::PreFreeze => AvInit::PreFreeze,
            AvInitArg::RandomTune => AvInit::RandomTune,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    config: PathBuf,
    data: PathBuf,
    #[arg(long, value_enum)]
    av_init: Option<AvInitArg>,
    /// Checkpoint written by `pretrain-av`.
    #[arg(long)]
    av_snapshot: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// A model checkpoint, or a run config for a freshly initialized model.
    target: PathBuf,
    #[arg(long)]
    probe: bool,
    #[arg(long)]
    gates: bool,
    #[arg(long)]
    budget: bool,
    /// Dataset to draw the analyzed sample from; synthesized otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Print one JSON document instead of tables.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    config: PathBuf,
    /// Coordinates differenced per tensor.
    #[arg(long, default_value_t = 16)]
    per_tensor: usize,
    /// Difference every coordinate instead of a sample.
    #[arg(long)]
    full: bool,
    /// Odd by default so L1 sign terms cannot cancel to an exact zero.
    #[arg(long, default_value_t = 3)]
    samples: usize,
    #[arg(long, default_value_t = 5e-3)]
    eps: f32,
    #[arg(long, default_value_t = 2e-2)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    config: PathBuf,
    /// Axes such as `n_f`, `gating`, `mm_depth` or `n_f=4,8`.
    #[arg(long, required = true, num_args = 1..)]
    axes: Vec<String>,
    /// Train every grid point on this dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    av_snapshot: Option<PathBuf>,
    #[arg(long, default_value = "runs/grid")]
    out: PathBuf,
}

fn exit_code(e: &DmlfError) -> u8 {
    match e.category() {
        "config" | "json" => 3,
        "data" => 4,
        "numeric" => 5,
        "checkpoint" => 6,
        _ => 7,
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format(|buf, record| match record.level() {
            log::Level::Info => writeln!(buf, "{}", record.args()),
            level => writeln!(buf, "[{}] {}", level.as_str().to_lowercase(), record.args()),
        })
        .init();
}

fn run(cli: Cli) -> deepmlf::Result<()> {
    let seed = io::SeedOverride::resolve(cli.seed)?;
    match cli.command {
        Command::GenData { spec, out_dir } => commands::gen_data(&spec, &out_dir, seed),
        Command::PretrainAv { config, data, out } => commands::pretrain_av(&config, &data, &out, seed),
        Command::Train(a) => commands::train(&a.config, &a.data, a.av_init.map(Into::into), a.av_snapshot.as_deref(), &a.out, seed),
        Command::Eval { checkpoint, data, split, out } => commands::eval(&checkpoint, &data, &split, out.as_deref(), seed),
        Command::Analyze(a) => {
            let all = !(a.probe || a.gates || a.budget);
            let which = commands::Sections {
                probe: a.probe || all,
                gates: a.gates || all,
                budget: a.budget || all,
            };
            commands::analyze(&a.target, which, a.data.as_deref(), a.json, a.out.as_deref(), seed)
        }
        Command::GradCheck(a) => {
            let per_tensor = (!a.full).then_some(a.per_tensor);
            commands::grad_check(&a.config, per_tensor, a.samples, a.eps, a.tol, a.out.as_deref(), seed)
        }
        Command::Grid(a) => commands::grid(&a.config, &a.axes, a.data.as_deref(), a.av_snapshot.as_deref(), &a.out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            // Drop a leading "<kind> error: " that would repeat the category.
            let msg = match msg.split_once(" error: ") {
                Some((kind, rest)) if !kind.contains(' ') => rest.to_string(),
                _ => msg,
            };
            eprintln!("error: {}: {msg}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
