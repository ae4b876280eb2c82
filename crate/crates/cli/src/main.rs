use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lift_core::harness::config::{load_config, ExperimentConfig, ExperimentKind, StrategyKind, RankSelectionKind, OUTPUT_ROOT_ENV};
use lift_core::harness::run::{checkpoint_tensor, mask_inspect, run, run_in};
use lift_core::LiftError;

#[derive(Parser)]
#[command(name = "lift", version, about = "Principal-weight sparse fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Write here instead of the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print overlap ratios between the masks several strategies pick on one tensor.
    MaskInspect {
        checkpoint: PathBuf,
        /// Strategy name; repeat or comma-separate for several.
        #[arg(long = "strategy", value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        /// Number of selected entries.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "W")]
        tensor: String,
        /// Approximation rank for the lift strategies.
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value = "largest")]
        rank_selection: String,
        /// Seed for random selection.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the random-matrix spectral study of a config, whatever its `experiment`.
    SpectralStudy {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Parse and validate a config, then print it with defaults filled in.
    Validate { config: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<LiftError> for Failure {
    fn from(e: LiftError) -> Self {
        match e {
            LiftError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn execute(cfg: &ExperimentConfig, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let report = match output_dir {
        Some(dir) => run_in(cfg, &dir)?,
        None => run(cfg)?,
    };
    for f in &report.files {
        println!("{}", report.output_dir.join(f).display());
    }
    Ok(())
}

fn parse_rank_selection(name: &str) -> Result<RankSelectionKind, Failure> {
    match name {
        "largest" => Ok(RankSelectionKind::Largest),
        "smallest" => Ok(RankSelectionKind::Smallest),
        "random" => Ok(RankSelectionKind::Random),
        "hybrid" => Ok(RankSelectionKind::Hybrid),
        other => Err(Failure::Usage(format!(
            "unknown rank selection `{other}` (expected largest, smallest, random or hybrid)"
        ))),
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, output_dir } => execute(&load_config(&config)?, output_dir),
        Command::SpectralStudy { config, output_dir } => {
            let mut cfg = load_config(&config)?;
            cfg.experiment = ExperimentKind::SpectralStudy;
            execute(&cfg, output_dir)
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            print!("{}", cfg.to_toml()?);
            eprintln!(
                "ok: output directory {} (root override via {OUTPUT_ROOT_ENV})",
                cfg.resolved_output_dir().display()
            );
            Ok(())
        }
        Command::MaskInspect {
            checkpoint,
            strategies,
            k,
            tensor,
            rank,
            rank_selection,
            seed,
        } => {
            let w = checkpoint_tensor(&checkpoint, &tensor)?;
            let sel = parse_rank_selection(&rank_selection)?.build(rank, seed);
            let mut list = Vec::new();
            for name in &strategies {
                let kind = StrategyKind::parse(name)?;
                if kind == StrategyKind::Full {
                    return Err(Failure::Usage("`full` is not a selection strategy".into()));
                }
                if matches!(kind, StrategyKind::GradientMagnitude | StrategyKind::Movement) {
                    return Err(Failure::Usage(format!(
                        "`{name}` needs a gradient, which a checkpoint does not store"
                    )));
                }
                list.push((name.clone(), kind.build(sel, seed)));
            }
            let report = mask_inspect(&w, None, &tensor, &list, k)?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
