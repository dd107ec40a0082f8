//! `nvi`: synthesize data, train, infer, evaluate, inspect and verify.
//!
//! Exit codes: 0 success, 1 a check or evaluation failed, 2 usage or I/O
//! error. `NVI_THREADS` caps the worker pool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "nvi", version, about = "Nonverbal interaction detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth {
        /// Generator spec (JSON); the standard 16-image spec if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat JSON config; keys are model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print a progress line every this many steps (0: never).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every annotated image with a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Triplets kept per image.
        #[arg(long, default_value_t = nvidehr::infer::DEFAULT_KEEP)]
        keep: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean recall of predictions against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Write `report.json` and `run.meta` here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run the oracle suites.
    Verify {
        /// gradcheck, hypergraph, matching, metric or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Fault injection: drop the vertex-degree normalization.
        #[arg(long, hide = true)]
        tamper_normalization: bool,
    },
    /// Check annotation (and optionally prediction) files.
    Validate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Dataset summary as JSON.
    Stats {
        #[arg(long)]
        gt: PathBuf,
    },
    /// Per-scale affinities and incidences of one image.
    Dump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image: u64,
    },
}

/// A usage or configuration mistake: exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check that ran and failed: exit code 1.
#[derive(Debug)]
pub struct Failed(pub String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<nvidehr::Error>() {
            return if matches!(e.root(), nvidehr::Error::Io(_)) { 2 } else { 1 };
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("NVI_THREADS") {
        let n: usize = v.parse().map_err(|_| Usage(format!("NVI_THREADS={v:?} is not a number")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth { spec, seed, out } => commands::synth(spec.as_deref(), seed, &out),
        Command::Train {
            data,
            config,
            steps,
            seed,
            overrides,
            log_every,
            out,
        } => {
            let mut o = overrides.iter().map(|s| config::parse_override(s)).collect::<anyhow::Result<Vec<_>>>()?;
            if let Some(s) = steps {
                o.push(("steps".into(), s.into()));
            }
            if let Some(s) = seed {
                o.push(("seed".into(), s.into()));
            }
            let cfg = config::load(config.as_deref(), &o)?;
            commands::train(&data, cfg, log_every, &out)
        }
        Command::Infer { ckpt, data, keep, out } => commands::infer(&ckpt, &data, keep, &out),
        Command::Eval { gt, pred, out, json } => commands::eval(&gt, &pred, out.as_deref(), json),
        Command::Verify {
            suite,
            tamper_normalization,
        } => commands::verify(&suite, tamper_normalization),
        Command::Validate { gt, pred } => commands::validate(&gt, pred.as_deref()),
        Command::Stats { gt } => commands::stats(&gt),
        Command::Dump { ckpt, data, image } => commands::dump(&ckpt, &data, image),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
