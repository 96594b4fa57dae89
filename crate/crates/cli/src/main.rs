use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use revhmc_core::harness::{run_experiment, ExperimentConfig, ExperimentKind};
use revhmc_core::Error;

const OUT_DIR_ENV: &str = "REVHMC_OUT_DIR";

#[derive(Parser)]
#[command(name = "revhmc", version, about = "Reversibility-checked (G)HMC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory. Falls back to $REVHMC_OUT_DIR, then the
        /// config's `output_dir`, then `out/<experiment>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key=value` with a dotted key, e.g. `kernel.dt=0.69`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the default config of an experiment.
    Preset {
        #[arg(value_parser = experiment_names())]
        experiment: String,
    },
}

fn experiment_names() -> Vec<&'static str> {
    ExperimentKind::ALL.iter().map(|k| k.name()).collect()
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(cfg.experiment.name()))
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, mut overrides: Vec<String>) -> Result<(), Error> {
    if let Some(seed) = seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::from_file(config, &overrides)?;
    let dir = out_dir(out, &cfg);
    let summary = run_experiment(&cfg, &dir)?;
    println!("{}: wrote {} files to {}", cfg.experiment.name(), summary.files.len(), dir.display());
    print!("{}", toml::to_string(&summary.headline).unwrap_or_default());
    Ok(())
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Parse(_) => (2, "parse error"),
        Error::Config(_) | Error::Model(_) => (3, "configuration error"),
        Error::Io { .. } | Error::Csv(_) => (4, "I/O error"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, overrides } => run(&config, seed, out, overrides),
        Command::Preset { experiment } => {
            let kind = ExperimentKind::ALL.into_iter().find(|k| k.name() == experiment).expect("validated by clap");
            print!("{}", ExperimentConfig::preset(kind).to_toml_string());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = exit_code(&e);
            eprintln!("revhmc: {category}: {e}");
            ExitCode::from(code)
        }
    }
}
