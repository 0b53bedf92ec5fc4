use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use predpower_cli::{list_presets, resolve_out_dir, resolve_seed, run, CliError, ExperimentConfig, Format, SEED_ENV};

#[derive(Parser)]
#[command(name = "predpower", version, about = "Prediction power experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed and PP_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// List the named systems.
    ListPresets,
}

fn execute(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::ListPresets => {
            for (name, description) in list_presets() {
                println!("{name:<20} {description}");
            }
            Ok(true)
        }
        Command::Run { config, seed, out_dir, threads, format } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config.display())))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let env = std::env::var(SEED_ENV).ok();
            let seed = resolve_seed(seed, &cfg, env.as_deref())?;
            if let Some(n) = threads {
                if n == 0 {
                    return Err(CliError::Config("--threads must be positive".into()));
                }
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
            }
            let dir = resolve_out_dir(out_dir.as_deref(), &cfg);
            let report = run(&cfg, seed, &dir, format)?;
            for check in &report.checks {
                let tag = if check.pass { "PASS" } else { "FAIL" };
                println!("{tag} {}: {}", check.name, check.detail);
            }
            println!(
                "{} finished in {:.2} s, outputs in {}",
                report.experiment,
                report.wall_time_s,
                dir.display()
            );
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
