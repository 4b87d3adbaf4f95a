//! Command-line front end: dataset generation, training, evaluation,
//! inference, attention export, and the gradient self-check.
//!
//! Exit codes: 0 success, 1 usage, 2 data or file problems, 3 numeric
//! failures (divergence, non-finite values, failed gradient check).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use taillight_core::checkpoint::Checkpoint;
use taillight_core::config::{
    load_run_config, model_from_kv, stage_from_kv, train_from_kv, RunConfig,
};
use taillight_core::error::DataError;
use taillight_core::eval::{
    evaluate, export_attention, format_predictions, format_summary, write_report_csv,
};
use taillight_core::model::{ModelConfig, StageMode};
use taillight_core::synth::{generate_dataset, imbalanced_train_counts, read_dataset, Split};
use taillight_core::tensor::TensorError;
use taillight_core::train::{
    params_from_checkpoint, prepare_split, train_stages, TrainConfig, TrainError,
};
use taillight_core::verify::fd_gradient_suite;

#[derive(Parser)]
#[command(name = "taillight", about = "Taillight state recognition on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with its manifest.
    GenData(GenDataArgs),
    /// Train the model; stages chain through checkpoints in --out.
    Train(TrainArgs),
    /// Confusion matrices and accuracy at chunk and video level.
    Eval(EvalArgs),
    /// Per-sequence predictions on stdout.
    Infer(InferArgs),
    /// Export spatial and temporal attention for inspection.
    ExportAttn(ExportArgs),
    /// Finite-difference check of every layer's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for scene randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the real-world class imbalance for the training split.
    #[arg(long)]
    imbalanced: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (from gen-data).
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single curriculum stage (1..=3) instead of all three.
    #[arg(long)]
    stage: Option<usize>,
    /// Overrides train.seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides model.split_l from the config file.
    #[arg(long)]
    split_l: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the report files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Number of chunks to export, from the start of the split.
    #[arg(long, default_value_t = 4)]
    count: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum AppError {
    Data(DataError),
    Numeric(String),
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Data(e) => write!(f, "{e}"),
            AppError::Numeric(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> AppError {
        AppError::Data(e)
    }
}

impl From<TensorError> for AppError {
    fn from(e: TensorError) -> AppError {
        AppError::Numeric(e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> AppError {
        match e {
            TrainError::Data(d) => AppError::Data(d),
            TrainError::Tensor(t) => AppError::Numeric(t.to_string()),
            TrainError::Diverged { detail } => {
                AppError::Numeric(format!("training diverged: {detail}"))
            }
        }
    }
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, DataError> {
    match path {
        Some(p) => load_run_config(p),
        None => Ok(RunConfig::default()),
    }
}

/// Rebuilds everything inference needs from a checkpoint's config echo.
fn checkpoint_context(
    path: &Path,
) -> Result<(Checkpoint<f32>, ModelConfig, TrainConfig, StageMode), AppError> {
    let ck = Checkpoint::<f32>::load(path)?;
    let mcfg = model_from_kv(&ck.config)?;
    let tcfg = train_from_kv(&ck.config)?;
    let stage = stage_from_kv(&ck.config)?;
    let mode = StageMode::from_stage(stage).ok_or_else(|| DataError::Checkpoint {
        detail: format!("checkpoint carries invalid stage {stage}"),
    })?;
    Ok((ck, mcfg, tcfg, mode))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), AppError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.imbalanced {
        cfg.gen.train_per_class = imbalanced_train_counts();
    }
    let ds = generate_dataset(&args.out, &cfg.gen, args.seed)?;
    let train = ds.split(Split::Train).count();
    let test = ds.split(Split::Test).count();
    println!(
        "wrote {train} train and {test} test sequences under {}",
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let cfg = load_config(args.config.as_deref())?;
    let mut mcfg = cfg.model;
    let mut tcfg = cfg.train;
    if let Some(seed) = args.seed {
        tcfg.seed = seed;
    }
    if let Some(split_l) = args.split_l {
        mcfg.backbone.split_l = split_l;
    }
    let stages: Vec<usize> = match args.stage {
        Some(s) if (1..=3).contains(&s) => vec![s],
        Some(s) => {
            return Err(DataError::invalid(format!("stage must be 1..=3, got {s}")).into())
        }
        None => vec![1, 2, 3],
    };
    let dataset = read_dataset(&args.dataset)?;
    let rows = train_stages::<f32>(&mcfg, &tcfg, &dataset, &args.out, &stages)?;
    if let Some(last) = rows.iter().rev().find(|r| r.split == Split::Test) {
        println!(
            "stage {} done: test loss {:.4}, test accuracy {:.4}",
            last.stage, last.loss, last.accuracy
        );
    } else {
        println!("trained with zero epochs: checkpoints written, no metrics");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    let (ck, mcfg, tcfg, mode) = checkpoint_context(&args.checkpoint)?;
    let params = params_from_checkpoint(&mcfg, &ck)?;
    let dataset = read_dataset(&args.dataset)?;
    let chunks = prepare_split(
        &dataset,
        args.split.into(),
        mcfg.backbone.input_side,
        mcfg.window,
        tcfg.stride,
    )?;
    let e = evaluate(&mcfg, &params, mode, &chunks, tcfg.align, tcfg.max_shift)?;
    std::fs::create_dir_all(&args.out).map_err(|err| DataError::io(&args.out, err))?;
    write_report_csv(&args.out.join("chunk_report.csv"), &e.chunk)?;
    write_report_csv(&args.out.join("video_report.csv"), &e.video)?;
    println!("{}", format_summary(&e));
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), AppError> {
    let (ck, mcfg, tcfg, mode) = checkpoint_context(&args.checkpoint)?;
    let params = params_from_checkpoint(&mcfg, &ck)?;
    let dataset = read_dataset(&args.dataset)?;
    let chunks = prepare_split(
        &dataset,
        args.split.into(),
        mcfg.backbone.input_side,
        mcfg.window,
        tcfg.stride,
    )?;
    let e = evaluate(&mcfg, &params, mode, &chunks, tcfg.align, tcfg.max_shift)?;
    print!("{}", format_predictions(&e));
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), AppError> {
    let (ck, mcfg, tcfg, mode) = checkpoint_context(&args.checkpoint)?;
    let params = params_from_checkpoint(&mcfg, &ck)?;
    let dataset = read_dataset(&args.dataset)?;
    let mut chunks = prepare_split(
        &dataset,
        args.split.into(),
        mcfg.backbone.input_side,
        mcfg.window,
        tcfg.stride,
    )?;
    chunks.truncate(args.count);
    export_attention(
        &mcfg,
        &params,
        mode,
        &chunks,
        tcfg.align,
        tcfg.max_shift,
        &args.out,
    )?;
    println!("exported {} chunks to {}", chunks.len(), args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), AppError> {
    let reports = fd_gradient_suite(args.seed);
    let mut failed = 0usize;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:<18} probes {:>2}  max rel err {:.3e}  (tol {:.0e})",
            r.name, r.probes, r.max_rel_err, r.tolerance
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(AppError::Numeric(format!(
            "{failed} of {} gradient cases failed",
            reports.len()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::ExportAttn(a) => cmd_export(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    // Usage problems exit 1; clap's default of 2 is reserved for data
    // errors here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
