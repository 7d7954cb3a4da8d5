mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use audiomamba::train::EvalMode;

/// Selective state-space audio tagging.
#[derive(Parser)]
#[command(name = "audiomamba", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// `key=value` run configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest, writing a log and checkpoints to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest used for periodic evaluation; defaults to the training set.
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "multilabel")]
        mode: EvalMode,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Feature cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Stop after this many total steps without changing the schedule.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Evaluate a checkpoint and print the report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "multilabel")]
        mode: EvalMode,
        /// Also write `eval_report.txt` here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score WAV files with a checkpoint.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "multilabel")]
        mode: EvalMode,
        /// Classes listed per file.
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Print the parameter count and per-group breakdown.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time the chunked scan against naive attention as the length doubles.
    Bench {
        /// Ascending sequence lengths.
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Write the CSV here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        /// dwconv, layer_norm, scan, ss2d, block, model or all.
        #[arg(long, default_value = "all")]
        scope: String,
        /// Coordinates probed per tensor (0 = every coordinate).
        #[arg(long, default_value_t = 4)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the scan adjoint to confirm the checker fails.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write synthetic tone clips and a manifest for smoke runs.
    ToyCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
    },
}

fn init_threads() -> Result<(), commands::Failure> {
    let Ok(raw) = std::env::var("AUDIOMAMBA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| commands::Failure::usage(format!("AUDIOMAMBA_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::Failure::usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Train { cfg, manifest, eval_manifest, checkpoint, mode, out, cache, stop_at } => commands::train(
            &cfg,
            &commands::TrainPaths { manifest, eval_manifest, checkpoint, out, cache },
            mode,
            stop_at,
        ),
        Command::Eval { cfg, checkpoint, manifest, mode, out, cache } => {
            commands::eval(&cfg, &checkpoint, &manifest, mode, out.as_deref(), cache.as_deref())
        }
        Command::Infer { cfg, checkpoint, mode, top, files } => commands::infer(&cfg, &checkpoint, mode, top, &files),
        Command::Params { cfg } => commands::params(&cfg),
        Command::Bench { lengths, dim, state, reps, out } => commands::bench(&lengths, dim, state, reps, out.as_deref()),
        Command::Gradcheck { scope, probes, seed, inject_fault } => commands::gradcheck(&scope, probes, seed, inject_fault),
        Command::ToyCorpus { cfg, out, clips } => commands::toy_corpus(&cfg, &out, clips),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
