use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};
use mkvlab::{apply_seed_override, emit_report, load_config, run_experiment, CliError};

#[derive(Parser)]
#[command(name = "mkvlab", version, about = "Run McKean-Vlasov particle experiments from JSON configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (default: runs/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge the manifests under a directory into report.json.
    Report { dir: PathBuf },
}

fn default_out(config: &Path) -> PathBuf {
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    PathBuf::from("runs").join(stem)
}

fn run(config: &Path, workers: Option<usize>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    let env_seed = std::env::var("MKVLAB_SEED").ok();
    if let Some(old) = apply_seed_override(&mut cfg, env_seed.as_deref())? {
        warn!("MKVLAB_SEED overrides config seed {old} with {}", cfg.seed);
    }
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = out.unwrap_or_else(|| default_out(config));
    info!("running {} ({}) into {}", config.display(), cfg.experiment.name(), out.display());
    let manifest = run_experiment(&cfg, &out)?;
    info!("done in {:.2}s, {} checks passed", manifest.wall_time_seconds, manifest.checks.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, workers, out } => run(&config, workers, out),
        Command::Report { dir } => emit_report(&dir).and_then(|s| {
            println!("{}", serde_json::to_string_pretty(&s).map_err(|e| CliError::Config(e.to_string()))?);
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
