use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use sedtk::config::RunConfig;
use sedtk::schedule::{format_curve, schedule_curve, ScheduleParams};
use sedtk::synthdata::{load_corpus, make_corpus, write_corpus, CorpusKind, Split};
use sedtk::trainer::{ab_experiment, evaluate, train, AbParams, Checkpoint, TrainOptions, CONFIG_FILE};
use sedtk::Error;

/// Sound event detection with temporally conditioned recurrent models.
#[derive(Parser)]
#[command(name = "sedtk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Generate(GenerateArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Compare baseline and conditioned models on both corpus kinds.
    Ab(AbArgs),
    /// Write the ground-truth probability curve.
    Schedule(ScheduleArgs),
    /// Print the default configuration file.
    Config,
}

#[derive(Args)]
struct GenerateArgs {
    /// structured or unstructured
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Configuration file; only its [corpus] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Learning rate, overriding the config.
    #[arg(long)]
    lr: Option<f64>,
    /// Per-layer gradient norm bound, overriding the config.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Continue from the last checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Defaults to config.toml next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AbArgs {
    /// Number of seeds, counted from 0.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 1.0 / 12.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    pmin: f64,
    #[arg(long, default_value_t = 0.9)]
    pmax: f64,
    /// Batches per epoch.
    #[arg(long, default_value_t = 44)]
    nb: usize,
    #[arg(long, default_value_t = 4400)]
    updates: u64,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn generate(args: GenerateArgs) -> Result<(), Error> {
    let kind: CorpusKind = args.kind.parse()?;
    let config = load_config(args.config.as_deref())?;
    config.corpus.validate()?;
    let corpus = make_corpus(kind, &config.corpus, args.seed)?;
    write_corpus(&args.out, &corpus)?;
    println!(
        "wrote {kind} corpus to {}: train={} val={} test={}",
        args.out.display(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(lr) = args.lr {
        config.train.learning_rate = lr;
    }
    if let Some(clip) = args.clip {
        config.train.grad_clip = Some(clip);
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(m) = args.max_epochs {
        config.train.max_epochs = m;
    }
    let train_config = config.train_config();
    train_config.validate()?;
    let corpus = load_corpus(&args.data)?;
    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    config.save(&args.out.join(CONFIG_FILE))?;
    let mut report = |r: &sedtk::trainer::EpochRecord| eprintln!("epoch {}", r.line());
    let outcome = train(
        &train_config,
        &corpus,
        TrainOptions {
            out_dir: Some(&args.out),
            resume: args.resume,
            on_epoch: Some(&mut report),
        },
    )?;
    println!(
        "best epoch {} of {} ({} updates{}); checkpoints in {}",
        outcome.best_epoch,
        outcome.epochs_completed,
        outcome.updates,
        if outcome.stopped_early { ", stopped early" } else { "" },
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let split: Split = args.split.parse()?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let config_path = match args.config {
        Some(p) => p,
        None => args
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(CONFIG_FILE),
    };
    let config = RunConfig::load(&config_path)?;
    let corpus = load_corpus(&args.data)?;
    let report = evaluate(&checkpoint, &config.train_config(), &corpus, split)?;
    print!("{}", report.to_table());
    print!("{}", report.to_kv());
    Ok(())
}

fn run_ab(args: AbArgs) -> Result<(), Error> {
    let config = load_config(args.config.as_deref())?;
    config.validate()?;
    let ab = AbParams {
        seeds: (0..args.seeds).collect(),
        ..config.ab.clone()
    };
    let report = ab_experiment(&config.train_config(), &config.corpus, &ab)?;
    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    config.save(&args.out.join(CONFIG_FILE))?;
    write_text(&args.out.join("ab_table.txt"), &report.table())?;
    write_text(&args.out.join("ab_report.txt"), &report.to_kv())?;
    print!("{}", report.table());
    Ok(())
}

fn run_schedule(args: ScheduleArgs) -> Result<(), Error> {
    let params = ScheduleParams {
        gamma: args.gamma,
        p_min: args.pmin,
        p_max: args.pmax,
        batches_per_epoch: args.nb,
    };
    params.validate()?;
    let text = format_curve(&schedule_curve(&params, args.updates));
    match args.out {
        Some(path) => write_text(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Validation(_) | Error::Parse { .. } | Error::Io { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let defaults = format!(
        "Default configuration (pass a file with --config; unknown keys are rejected):\n\n{}",
        RunConfig::default().to_toml()
    );
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ab(a) => run_ab(a),
        Command::Schedule(a) => run_schedule(a),
        Command::Config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
