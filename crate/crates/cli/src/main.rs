use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spoiler_core::config::{ConfigError, Presets};
use spoiler_core::experiments::{load_config, AllocationSpec, ExperimentConfig, ExperimentError, ExperimentRegistry, OutputFormat};

#[derive(Parser)]
#[command(name = "spoiler", version, about = "Store-buffer aliasing leak simulator and attack experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write summary.json plus tables into --out.
    Run(RunArgs),
    /// List registered experiments.
    List,
}

#[derive(clap::Args)]
struct RunArgs {
    /// scan, evset, colocate, contiguous, rowhammer, depth, correlate or fragsweep
    experiment: String,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    dram: Option<String>,
    #[arg(long)]
    pages: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    noise_sigma: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// csv or json
    #[arg(long)]
    format: Option<OutputFormat>,
    /// TOML file with preset tables and an optional [run] table
    #[arg(long)]
    config: Option<PathBuf>,
    /// contiguous, fragmented, buddy or mixed:<fraction>
    #[arg(long)]
    alloc: Option<AllocationSpec>,
    /// Eviction-set strategy: classic, improved or aa
    #[arg(long)]
    strategy: Option<String>,
}

fn settings(args: &RunArgs) -> Result<(Presets, ExperimentConfig), ExperimentError> {
    let (presets, mut cfg) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
            load_config(&text)?
        }
        None => (Presets::builtin(), ExperimentConfig::default()),
    };
    if let Some(a) = &args.arch {
        cfg.arch = a.clone();
    }
    if let Some(d) = &args.dram {
        cfg.dram = d.clone();
    }
    if let Some(s) = &args.strategy {
        cfg.evset.strategy = s.clone();
    }
    cfg.pages = args.pages.or(cfg.pages);
    cfg.trials = args.trials.or(cfg.trials);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.noise_sigma = args.noise_sigma.unwrap_or(cfg.noise_sigma);
    cfg.format = args.format.unwrap_or(cfg.format);
    cfg.allocation = args.alloc.or(cfg.allocation);
    Ok((presets, cfg))
}

fn run(args: &RunArgs) -> Result<(), ExperimentError> {
    let (presets, cfg) = settings(args)?;
    let output = ExperimentRegistry::default().run(&args.experiment, &presets, &cfg)?;
    output.write_to(&args.out)?;
    print!("{}", output.summary_json());
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors share exit status 1 with configuration errors; 2 means
    // the attack itself was infeasible.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::List => {
            for (name, about) in ExperimentRegistry::default().descriptions() {
                println!("{name:<12} {about}");
            }
            ExitCode::SUCCESS
        }
        Command::Run(args) => match run(&args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
