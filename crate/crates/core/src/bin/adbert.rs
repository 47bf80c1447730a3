//! Command-line front end. Every subcommand takes the same flags; see
//! `adbert --help`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adbert::pipeline::{exit_code, run_pipeline, run_stage, Layout, RunConfig, Stage};
use adbert::Result;

#[derive(Parser)]
#[command(
    name = "adbert",
    version,
    about = "MCI-to-AD progression prediction from clinical notes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's seed and every module seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic roster.
    Synth(Common),
    /// Apply exclusions and label each setting's cohort.
    Cohort(Common),
    /// Deidentify and section the eligible patients' notes.
    Preprocess(Common),
    /// Build the WordPiece vocabulary.
    Vocab(Common),
    /// Masked-LM / next-sentence pretraining.
    Pretrain(Common),
    /// Fine-tune one classifier per setting.
    Finetune(Common),
    /// Score the test splits against the bag-of-words baseline.
    Evaluate(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

fn run(cli: Cli) -> Result<()> {
    let (stage, common) = match cli.command {
        Command::Synth(c) => (Some(Stage::Synth), c),
        Command::Cohort(c) => (Some(Stage::Cohort), c),
        Command::Preprocess(c) => (Some(Stage::Preprocess), c),
        Command::Vocab(c) => (Some(Stage::Vocab), c),
        Command::Pretrain(c) => (Some(Stage::Pretrain), c),
        Command::Finetune(c) => (Some(Stage::Finetune), c),
        Command::Evaluate(c) => (Some(Stage::Evaluate), c),
        Command::Pipeline(c) => (None, c),
    };
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path, common.seed)?,
        None => RunConfig::from_toml_str("", common.seed)?,
    };
    let layout = Layout::new(&common.out);
    match stage {
        Some(s) => run_stage(s, &cfg, &layout),
        None => {
            let rows = run_pipeline(&cfg, &layout)?;
            for r in rows {
                println!(
                    "{:<8} {:<12} AUC {:.4}  F1 {:.4}",
                    r.model, r.setting, r.metrics.auc, r.metrics.f1
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
