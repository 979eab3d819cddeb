use clap::{Parser, Subcommand};
use fedroute_cli::commands::eval::{cmd_eval, write_report, EvalArgs};
use fedroute_cli::commands::export::cmd_export_plots;
use fedroute_cli::commands::gendata::cmd_gen_data;
use fedroute_cli::commands::run::cmd_run;
use fedroute_cli::commands::sweep::{cmd_sweep, SweepAxis};
use fedroute_cli::config::load_config;
use fedroute_cli::CliError;
use std::path::PathBuf;

/// Deterministic federated-learning simulator with per-instance dynamic
/// routing between global and locally finetuned parameters.
#[derive(Parser)]
#[command(name = "fedroute", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train for every configured seed and persist the run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. --set train.gamma=0.0 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint: pre-inference + hard inference on sampled
    /// clients; prints a metrics JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed selecting the federation and evaluation streams; defaults to
        /// the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also report soft-inference accuracy.
        #[arg(long)]
        soft: bool,
        /// Write the report here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training per axis value per seed and merge the metric series.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Ablation axis; its values come from the config's [sweep] section.
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// Convert run or sweep directories into tidy plot-ready CSVs.
    ExportPlots {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Generate a synthetic federation file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let outcome = cmd_run(&cfg)?;
            println!("run complete: {}", outcome.run_dir.display());
            Ok(())
        }
        Command::Eval {
            config,
            overrides,
            checkpoint,
            seed,
            soft,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let report = cmd_eval(
                &cfg,
                &EvalArgs {
                    checkpoint,
                    seed,
                    soft,
                    out: out.clone(),
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = out {
                write_report(&report, &path)?;
            }
            Ok(())
        }
        Command::Sweep {
            config,
            overrides,
            axis,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let outcome = cmd_sweep(&cfg, axis)?;
            println!(
                "sweep complete: {} ({} values), merged {}",
                outcome.sweep_dir.display(),
                outcome.value_dirs.len(),
                outcome.merged_csv.display()
            );
            Ok(())
        }
        Command::ExportPlots { dir } => {
            let outcome = cmd_export_plots(&dir)?;
            println!(
                "exported {} and {}",
                outcome.accuracy_csv.display(),
                outcome.routing_csv.display()
            );
            if !outcome.skipped.is_empty() {
                eprintln!("skipped {} missing source file(s)", outcome.skipped.len());
            }
            Ok(())
        }
        Command::GenData {
            config,
            overrides,
            seed,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let clients = cmd_gen_data(&cfg, seed, &out)?;
            println!("wrote {} clients to {}", clients, out.display());
            Ok(())
        }
    }
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage problems are user errors: exit 1, not clap's default 2
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
