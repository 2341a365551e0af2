//! `mmpd`: code inspection, BP evaluation, MMPD training and evaluation.
//!
//! Exit codes: 0 ok, 2 input error, 3 training divergence,
//! 4 checkpoint/code mismatch, 1 anything else.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{Needs, RunConfig};
use mmpd_core::code::CodeSpec;
use mmpd_core::harness::{run_sweep, write_report, BpDecoder, Decoder, EvalPoint, HarnessError, MmpdDecoder, Workers};
use mmpd_core::train::{load_checkpoint, save_checkpoint, train, write_loss_log, CheckpointError, CheckpointPlan, TrainError};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Input(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Config(_) => CliError::Input(e.to_string()),
            TrainError::Checkpoint(c) => c.into(),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::CodeMismatch { .. } => CliError::Mismatch(e.to_string()),
            CheckpointError::Io { .. } => CliError::Other(e.to_string()),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => CliError::Input(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "mmpd", version, about = "Mamba message-passing decoder for binary linear codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print size, degrees and H hash of a code.
    Info(Common),
    /// Evaluate belief propagation over the SNR sweep.
    BpEval(Common),
    /// Train a model and write a checkpoint plus loss log.
    Train(Common),
    /// Evaluate a trained checkpoint over the SNR sweep.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set code=<path>`.
    #[arg(long)]
    code: Option<PathBuf>,
    /// Shorthand for `--set checkpoint=<base>`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory for artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Cap on evaluation threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = config::load(self.config.as_deref(), &self.overrides)?;
        if let Some(c) = &self.code {
            cfg.code = Some(c.clone());
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Other(format!("{}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

fn load_code(cfg: &RunConfig) -> Result<CodeSpec, CliError> {
    CodeSpec::load(cfg.code_path()?).map_err(|e| CliError::Input(e.to_string()))
}

fn cmd_info(args: &Common) -> Result<(), CliError> {
    let cfg = args.run_config()?;
    cfg.validate(&[Needs::Code])?;
    let spec = load_code(&cfg)?;
    let degrees = |lists: &[Vec<usize>]| {
        let d = lists.iter().map(Vec::len);
        (d.clone().min().unwrap_or(0), d.max().unwrap_or(0))
    };
    let (vmin, vmax) = degrees(&spec.graph.vn_neighbors);
    let (cmin, cmax) = degrees(&spec.graph.cn_neighbors);
    println!("code={}", spec.name);
    println!(
        "n={} k={} rate={:.4} edges={}",
        spec.n,
        spec.k,
        spec.rate(),
        spec.graph.edge_count()
    );
    println!("vn_degree min={vmin} max={vmax}");
    println!("cn_degree min={cmin} max={cmax}");
    println!("h_sha256={}", spec.h_hash());
    Ok(())
}

fn write_csv(path: &Path, header: Option<String>, spec: &CodeSpec, decoder: &str, seed: u64, points: &[EvalPoint]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Other(format!("{}: {e}", path.display()));
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    if let Some(h) = header {
        writeln!(file, "{h}").map_err(io)?;
    }
    write_report(&mut file, spec, decoder, seed, points)?;
    file.flush().map_err(io)?;
    Ok(())
}

fn print_points(points: &[EvalPoint]) {
    for p in points {
        eprintln!(
            "ebn0={} frames={} ber={:.4e} fer={:.4e} stopped_by={}",
            p.ebn0_db,
            p.frames,
            p.ber(),
            p.fer(),
            p.stopped_by.as_str()
        );
    }
}

fn sweep(cfg: &RunConfig, spec: &CodeSpec, decoder: &dyn Decoder, workers: Option<usize>) -> Result<Vec<EvalPoint>, CliError> {
    let points = run_sweep(decoder, spec, &cfg.ebn0_db, &cfg.stop, cfg.seed, cfg.codeword_mode, Workers(workers))?;
    print_points(&points);
    Ok(points)
}

fn cmd_bp_eval(args: &Common) -> Result<(), CliError> {
    let cfg = args.run_config()?;
    cfg.validate(&[Needs::Code, Needs::Sweep])?;
    let spec = load_code(&cfg)?;
    let decoder = BpDecoder(cfg.bp);
    let points = sweep(&cfg, &spec, &decoder, args.workers)?;
    let path = args.out_dir()?.join(format!("{}_bp.csv", cfg.name));
    write_csv(&path, None, &spec, &decoder.name(), cfg.seed, &points)?;
    println!("report={}", path.display());
    Ok(())
}

fn cmd_train(args: &Common) -> Result<(), CliError> {
    let cfg = args.run_config()?;
    cfg.validate(&[Needs::Code, Needs::Train])?;
    let spec = load_code(&cfg)?;
    for w in cfg.model.warnings() {
        eprintln!("warning: {w}");
    }
    let out = args.out_dir()?;
    let plan = CheckpointPlan { dir: out, name: &cfg.name };
    let log_every = cfg.log_every;
    let outcome = train(&spec, &cfg.model, &cfg.train, Some(plan), |r| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!("step={} lr={:.3e} loss={:.6}", r.step, r.lr, r.train_loss);
        }
    })?;
    let base = out.join(&cfg.name);
    let steps = cfg.train.steps;
    save_checkpoint(&base, &outcome.params, &spec, steps, &mmpd_core::train::rng_digest(&cfg.train, steps))?;
    let log_path = out.join(format!("{}_loss.csv", cfg.name));
    write_loss_log(&log_path, &outcome.log)?;
    println!("parameters={}", outcome.params.parameter_count());
    println!("initial_validation_bce={:.6}", outcome.initial_validation);
    println!("final_validation_bce={:.6}", outcome.final_validation);
    println!("checkpoint={}", base.display());
    println!("loss_log={}", log_path.display());
    Ok(())
}

fn cmd_eval(args: &Common) -> Result<(), CliError> {
    let cfg = args.run_config()?;
    cfg.validate(&[Needs::Code, Needs::Sweep, Needs::Checkpoint])?;
    let spec = load_code(&cfg)?;
    let base = cfg.checkpoint.as_deref().expect("validated");
    let loaded = load_checkpoint(base, Some(&spec))?;
    let count = loaded.params.parameter_count();
    let decoder = MmpdDecoder {
        params: loaded.params,
        sub_batch: cfg.eval_batch,
    };
    let points = sweep(&cfg, &spec, &decoder, args.workers)?;
    let path = args.out_dir()?.join(format!("{}_eval.csv", cfg.name));
    write_csv(&path, Some(format!("# parameters={count}")), &spec, &decoder.name(), cfg.seed, &points)?;
    println!("report={}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Info(a) => cmd_info(a),
        Command::BpEval(a) => cmd_bp_eval(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
