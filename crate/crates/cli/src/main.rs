use clap::{Parser, Subcommand};
use snn_cli::commands::{self, Precision};
use snn_cli::{CliError, CliResult, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "snn", version, about = "Event-stream compression and spiking network training")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `optim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Floating-point width for training.
    #[arg(long, global = true, default_value_t = 32)]
    precision: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress one recording or a folder of recordings into frame files.
    Compress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Frame count of a baseline representation, for the compression ratio.
        #[arg(long)]
        baseline_frames: Option<f64>,
    },
    /// Train and write a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy and confusion matrix on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Verify the learning rule on the configured architecture (always 64-bit).
    Gradcheck {
        /// Corrupt this gradient block before checking.
        #[arg(long)]
        fault_block: Option<usize>,
    },
    /// Histogram of the learned leak factors.
    TauStats {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.optim.seed = s;
    }
    let precision = Precision::from_bits(cli.precision)?;
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Compress {
            input,
            output,
            baseline_frames,
        } => {
            print!("{}", commands::compress_files(&cfg, &input, &output, baseline_frames)?);
            Ok(())
        }
        Command::Train { out, log, resume } => {
            let mut stdout = std::io::stdout();
            match precision {
                Precision::F32 => {
                    commands::train::<f32>(&cfg, &out, log.as_deref(), resume.as_deref(), &mut stdout)?
                }
                Precision::F64 => {
                    commands::train::<f64>(&cfg, &out, log.as_deref(), resume.as_deref(), &mut stdout)?
                }
            };
            Ok(())
        }
        Command::Eval { checkpoint } => {
            print!("{}", commands::eval(&cfg, &checkpoint)?);
            Ok(())
        }
        Command::Gradcheck { fault_block } => {
            let (report, passed) = commands::gradcheck(&cfg, fault_block)?;
            print!("{report}");
            if passed {
                Ok(())
            } else {
                Err(CliError::Numerical("gradient check exceeded tolerance".into()))
            }
        }
        Command::TauStats { checkpoint } => {
            print!("{}", commands::tau_stats(&checkpoint)?);
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
