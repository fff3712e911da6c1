use std::path::PathBuf;

use clap::{Parser, Subcommand};

use workbench::cli::{
    cmd_evaluate, cmd_gen_data, cmd_report, cmd_train, load_config, CliError, FailureKind,
};

/// Workbench for evaluating adaptive test-time defenses: one JSON config
/// file describes one reproducible experiment.
#[derive(Parser)]
#[command(name = "workbench", version)]
struct Cli {
    /// Path to the run-config JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads (the current pipeline is sequential, so
    /// this only validates the request).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Accept checkpoints whose config digest does not match.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset.
    GenData,
    /// Train the classifier and the defense's resources.
    Train,
    /// Run the evaluation plan and write report.json / report.md.
    Evaluate,
    /// Re-render report.md from an existing report.json.
    Report,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config_error = |msg: &str| CliError {
        kind: FailureKind::Config,
        error: workbench::Error::invalid(msg),
    };
    if cli.threads == Some(0) {
        return Err(config_error("--threads must be at least 1"));
    }
    let path = cli.config.as_ref().ok_or_else(|| config_error("--config is required"))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::GenData => {
            let path = cmd_gen_data(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Train => {
            cmd_train(&cfg, cli.force)?;
            println!("wrote checkpoints to {}", workbench::cli::output_dir(&cfg).display());
        }
        Command::Evaluate => {
            let report = cmd_evaluate(&cfg, cli.force)?;
            match report.worst_case_robust_accuracy {
                Some(acc) => println!("worst-case robust accuracy: {:.1}%", 100.0 * acc),
                None => println!("evaluation finished (no defended attacks ran)"),
            }
            if !report.red_flags.is_empty() {
                for flag in &report.red_flags {
                    println!("red flag: {flag}");
                }
            }
        }
        Command::Report => {
            cmd_report(&cfg)?;
            println!("re-rendered report.md");
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.kind.exit_code());
    }
}
