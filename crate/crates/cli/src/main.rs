use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prpo_cli::commands::{analyze_metrics, analyze_records, cmd_fuse, cmd_segment, cmd_train};
use prpo_cli::{CliError, Result, RunConfig};
use prpo_core::Method;

#[derive(Parser)]
#[command(name = "prpo", version, about = "Entropy segmentation, advantage fusion and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; results go to stdout when omitted (except `train`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Split trajectories at entropy spikes and add a `segments` field.
    Segment {
        /// JSONL trajectories, `-` for stdin.
        #[arg(default_value = "-")]
        input: String,
        #[command(flatten)]
        common: Common,
    },
    /// Per-token z, beta and fused advantage for scored groups.
    Fuse {
        #[arg(default_value = "-")]
        input: String,
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the toy task and write per-epoch metrics and checkpoints.
    Train {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Collapse diagnostics for JSONL trajectories or a metrics CSV.
    Analyze {
        input: String,
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_method(s: Option<&str>, default: Method) -> Result<Method> {
    s.map_or(Ok(default), |s| s.parse::<Method>().map_err(CliError::from))
}

fn open_input(input: &str) -> Result<Box<dyn BufRead>> {
    if input == "-" {
        Ok(Box::new(io::stdin().lock()))
    } else {
        let f = File::open(input).map_err(|e| CliError::io(input, e))?;
        Ok(Box::new(BufReader::new(f)))
    }
}

fn open_output(out: Option<&Path>, file: &str) -> Result<Box<dyn Write>> {
    match out {
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
            let path = dir.join(file);
            let f = File::create(&path).map_err(|e| CliError::io(path.display().to_string(), e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment { input, common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            cfg.fusion.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let out = open_output(common.out.as_deref(), "segments.jsonl")?;
            cmd_segment(open_input(&input)?, &input, out, &cfg.fusion)
        }
        Command::Fuse { input, method, common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            cfg.fusion.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let method = parse_method(method.as_deref(), Method::Prpo)?;
            let out = open_output(common.out.as_deref(), "advantages.csv")?;
            cmd_fuse(open_input(&input)?, &input, out, method, &cfg.fusion)
        }
        Command::Train { seed, method, common } => {
            let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            cfg.train.method = parse_method(method.as_deref(), cfg.train.method)?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("prpo-out"));
            for arm in cmd_train(&cfg, &out)? {
                println!(
                    "{}: epochs={} final_greedy_accuracy={} metrics={}",
                    arm.name,
                    arm.history.len(),
                    arm.final_greedy_accuracy,
                    arm.metrics_path.display()
                );
            }
            Ok(())
        }
        Command::Analyze { input, method, common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let out = open_output(common.out.as_deref(), "collapse.csv")?;
            if input.ends_with(".csv") {
                analyze_metrics(open_input(&input)?, out).map(|_| ())
            } else {
                cfg.fusion.validate().map_err(|e| CliError::Config(e.to_string()))?;
                let method = parse_method(method.as_deref(), Method::Prpo)?;
                analyze_records(open_input(&input)?, &input, out, method, &cfg.fusion).map(|_| ())
            }
        }
    }
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
