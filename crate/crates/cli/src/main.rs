//! `stylebend` command-line driver: dataset generation, two-phase
//! training, episodic evaluation, verification suites, and channel
//! statistics export.
//!
//! Exit codes: 0 success, 1 execution/suite failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stylebend_core::data::{build_benchmark, DatasetManifest};
use stylebend_core::error::Error;
use stylebend_core::eval::{run_eval, stats_dump, EvalConfig};
use stylebend_core::train::{run_train, TrainConfig, TrainPhase};
use stylebend_core::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "stylebend", version, about = "Few-shot segmentation under synthetic domain shift with style perturbation and a rectifying adapter")]
struct Cli {
    /// Override every configured seed (also via STYLEBEND_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark described by a manifest.
    Generate(GenerateArgs),
    /// Train one phase (baseline encoder or the rectifying adapter).
    Train(TrainArgs),
    /// Evaluate a checkpoint over the episodic test sets.
    Eval(EvalArgs),
    /// Run a verification suite at 64-bit and report max errors.
    Verify(VerifyArgs),
    /// Dump per-sample and dataset-average channel statistics as CSV.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Manifest JSON path; omit to use the built-in default benchmark.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for the dataset.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Write the effective manifest to this path and exit.
    #[arg(long)]
    emit_manifest: Option<PathBuf>,
    /// Report counts without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; omit for defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which phase to run.
    #[arg(long, value_parser = parse_phase)]
    phase: String,
    /// Checkpoint to start from (required for the adapter phase; for the
    /// same phase this resumes).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Dataset directory (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the effective config to this path and exit.
    #[arg(long)]
    emit_config: Option<PathBuf>,
}

fn parse_phase(s: &str) -> Result<String, String> {
    match s {
        "baseline" | "adapter" => Ok(s.to_string()),
        other => Err(format!("unknown phase `{other}` (baseline|adapter)")),
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Rectify incoming features with the adapter (the adapter column);
    /// off gives the baseline column.
    #[arg(long)]
    rectify: bool,
    /// Worker threads for episode evaluation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Restrict to these style ids (repeatable).
    #[arg(long = "style")]
    styles: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// gradcheck | algebra | stats-oracle | cyclic
    #[arg(long)]
    suite: String,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    stage: usize,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli
        .seed
        .or_else(|| std::env::var("STYLEBEND_SEED").ok().and_then(|v| v.parse().ok()));
    match dispatch(cli.command, seed) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Usage-class failures (missing inputs, bad arguments) exit 2; execution
/// failures exit 1.
fn classify(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<Error>() {
        match core {
            Error::InvalidArg(_) => 2,
            Error::IoAt { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    } else {
        1
    }
}

fn dispatch(cmd: Command, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Generate(args) => generate(args, seed),
        Command::Train(args) => train(args, seed),
        Command::Eval(args) => eval(args),
        Command::Verify(args) => verify(args, seed),
        Command::Stats(args) => stats(args),
    }
}

fn generate(args: GenerateArgs, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let mut manifest = match &args.manifest {
        Some(path) => DatasetManifest::load(path)?,
        None => DatasetManifest::default_benchmark(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        manifest.seed = s;
    }
    if let Some(path) = &args.emit_manifest {
        manifest.save(path)?;
        println!("manifest written to {}", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    let report = build_benchmark(&manifest, &args.out, args.dry_run)?;
    println!(
        "styles: {}  train samples: {}  test episodes: {}  files: {}",
        report.styles.join(","),
        report.train_samples,
        report.test_episodes,
        report.files
    );
    if args.dry_run {
        println!("dry run: nothing written");
    } else {
        println!("content hash: {}", report.content_hash);
    }
    Ok(ExitCode::SUCCESS)
}

fn train(args: TrainArgs, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = args.data {
        cfg.data_dir = d;
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    if let Some(path) = &args.emit_config {
        cfg.save(path)?;
        println!("config written to {}", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    let phase = match args.phase.as_str() {
        "baseline" => TrainPhase::Baseline,
        _ => TrainPhase::Adapter,
    };
    let out = run_train(&cfg, phase, args.init.as_deref())?;
    match out.final_loss {
        Some(l) => println!(
            "{} done: {} steps, final losses bce {:.4} cyc {:.4} align {:.4} total {:.4}",
            args.phase, out.steps, l.l_bce, l.l_cyc, l.l_align, l.total
        ),
        None => println!("{}: no steps run (zero epochs)", args.phase),
    }
    println!("checkpoint: {}", out.checkpoint.display());
    println!("loss log:   {}", out.loss_csv.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let report = run_eval(&EvalConfig {
        checkpoint: args.ckpt,
        data_dir: args.data,
        out_dir: Some(args.out.clone()),
        shots: args.shots,
        rectify: args.rectify,
        jobs: args.jobs.max(1),
        styles: if args.styles.is_empty() { None } else { Some(args.styles) },
    })?;
    print!("{}", report.render_table());
    println!("csv written under {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn verify(args: VerifyArgs, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let suite = Suite::parse(&args.suite)?;
    let report = run_suite(suite, seed.unwrap_or(0))?;
    print!("{}", report.render());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn stats(args: StatsArgs) -> anyhow::Result<ExitCode> {
    let csv = stats_dump(&args.ckpt, &args.data, args.stage)?;
    match &args.out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, &csv)?;
            println!("stats written to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}
