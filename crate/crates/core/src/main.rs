use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use saml::harness::{self, PipelineConfig, RunOptions};
use saml::Error;

#[derive(Parser, Debug)]
#[command(name = "saml", version, about = "Box-prompted pseudo-labels and confidence-weighted cell segmentation")]
struct Cli {
    /// Pipeline configuration (TOML). Without it, defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed and every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-patch work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Reuse finished artifacts in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive tight or random boxes from the instance masks.
    Boxes,
    /// Turn boxes into label maps through the configured segmenter.
    Pseudolabel,
    /// Train the segmenter.
    Train,
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy of manual, tight-box and random-box annotations.
    Report,
    /// Write a synthetic corpus.
    Synth,
    /// Train and score every (method, group) combination.
    Matrix,
}

fn run(cli: &Cli) -> saml::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let opts = RunOptions {
        jobs: cli.jobs,
        resume: cli.resume,
    };
    match &cli.command {
        Command::Boxes => {
            harness::cmd_boxes(&cfg, opts)?;
        }
        Command::Pseudolabel => {
            harness::cmd_pseudolabel(&cfg, opts)?;
        }
        Command::Train => {
            let out = harness::cmd_train(&cfg, opts)?;
            println!(
                "best epoch {} val macro dice {:.4}",
                out.best.epoch, out.best.val_dice_macro
            );
        }
        Command::Evaluate { checkpoint } => {
            print!("{}", harness::cmd_evaluate(&cfg, opts, checkpoint.as_deref())?.to_table());
        }
        Command::Report => print!("{}", harness::cmd_report(&cfg, opts)?.to_table()),
        Command::Synth => {
            harness::cmd_synth(&cfg)?;
        }
        Command::Matrix => print!("{}", harness::run_experiment_matrix(&cfg, opts)?.to_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code())
        }
    }
}
