use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use boltzgen::cli::{emit_report, resume_experiment, run_experiment, Experiment, ExperimentConfig};

/// Energy-based generative models with exact oracles, a path-integral
/// Monte Carlo sampler, and associative adversarial training.
#[derive(Parser)]
#[command(name = "boltzgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file and/or command-line overrides.
    Run(RunArgs),
    /// Continue an interrupted run from its latest checkpoint.
    Resume {
        /// Run directory containing checkpoints.
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Summarize a finished run: final-value table and SVG charts.
    Report {
        /// Run directory containing metrics.csv.
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Run the exact-oracle validation suite.
    Oracle {
        /// Output directory for oracle.txt (default: <output root>/oracle).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Seed for the randomized checks.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment name (synthetic-bm, gan-toy, aan-toy, qaan-toy,
    /// oracle-suite); may also come from the config file.
    #[arg(long)]
    experiment: Option<String>,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set pimc.slices=16 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: <output root>/<experiment>-seed<seed>).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn output_root() -> PathBuf {
    std::env::var_os("BOLTZGEN_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn build_config(args: &RunArgs) -> boltzgen::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::parse(&std::fs::read_to_string(path)?)?,
        None => {
            let name = args.experiment.as_deref().unwrap_or("synthetic-bm");
            ExperimentConfig::default_for(Experiment::parse(name)?)
        }
    };
    if let Some(name) = &args.experiment {
        // An explicit experiment flag re-bases the defaults only when no
        // config file fixed them already.
        if args.config.is_none() {
            config = ExperimentConfig::default_for(Experiment::parse(name)?);
        } else {
            config.apply_kv("experiment", name)?;
        }
    }
    for kv in &args.sets {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            boltzgen::Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`"))
        })?;
        config.apply_kv(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.output_dir = match &args.output {
        Some(dir) => dir.clone(),
        None => output_root().join(format!(
            "{}-seed{}",
            config.experiment.as_str(),
            config.seed
        )),
    };
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => build_config(&args).and_then(|config| {
            eprintln!(
                "running {} (seed {}) into {}",
                config.experiment.as_str(),
                config.seed,
                config.output_dir.display()
            );
            run_experiment(&config)
        }),
        Command::Resume { run_dir } => resume_experiment(&run_dir),
        Command::Report { run_dir } => emit_report(&run_dir).map(|_| ()),
        Command::Oracle { output, seed } => {
            let mut config = ExperimentConfig::default_for(Experiment::OracleSuite);
            config.seed = seed;
            config.output_dir = output.unwrap_or_else(|| output_root().join("oracle"));
            run_experiment(&config)
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
