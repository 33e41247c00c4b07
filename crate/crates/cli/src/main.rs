use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqhtc::Result;
use seqhtc_cli::commands::{self, mode_name};
use seqhtc_cli::{exit_code, Overrides, RunConfig};

/// Hierarchical text classification with a sequence-to-sequence model.
#[derive(Parser)]
#[command(name = "seqhtc", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "seqhtc.toml")]
    config: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides any scalar config field, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the taxonomy, datasets, definitions and vocabulary coverage.
    DataValidate {
        /// Exit with the data error status if any row is rejected.
        #[arg(long)]
        strict: bool,
    },
    /// Build class definition vectors.
    CdvBuild,
    /// Train a model and write the best checkpoint.
    Train,
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Label unlabelled documents.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `id<TAB>text` lines, or bare text lines.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to predictions.jsonl in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<u8> {
    let overrides = Overrides {
        set: cli.set,
        seed: cli.seed,
        out: cli.out,
    };
    let config = RunConfig::load(&cli.config, &overrides)?;
    match cli.command {
        Command::DataValidate { strict } => {
            let report = commands::data_validate(&config)?;
            print!("{}", report.to_text());
            if strict && report.rejection_count() > 0 {
                return Ok(3);
            }
        }
        Command::CdvBuild => {
            let r = commands::cdv_build(&config)?;
            println!("wrote {} class vectors to {}", r.classes, r.path.display());
            if !r.missing.is_empty() {
                println!(
                    "{} classes without a definition: {}",
                    r.missing.len(),
                    r.missing.join(", ")
                );
            }
        }
        Command::Train => {
            let r = commands::train(&config)?;
            match (r.best_epoch, r.best_accuracy) {
                (Some(e), Some(a)) => {
                    println!("{} epochs; best validation path accuracy {a:.4} at epoch {e}", r.epochs)
                }
                _ => println!("no epochs ran"),
            }
            println!("checkpoint: {}", r.checkpoint.display());
            println!("log: {}", r.log.display());
        }
        Command::Eval { checkpoint } => {
            let r = commands::eval(&config, checkpoint.as_deref())?;
            print!("{}", r.text);
            log::info!("{} report in {}", mode_name(r.mode), r.report_path.display());
        }
        Command::Predict {
            checkpoint,
            input,
            output,
        } => {
            let r = commands::predict(&config, checkpoint.as_deref(), &input, output.as_deref())?;
            for (line, reason) in &r.rejections {
                eprintln!("rejected {}:{line}: {reason}", input.display());
            }
            println!("{} predictions written to {}", r.records.len(), r.path.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
