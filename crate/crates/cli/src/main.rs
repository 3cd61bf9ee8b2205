use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use glandseg_cli::{cmd_evaluate, cmd_predict, cmd_synth, cmd_train, CliError, RunConfig};

/// Contour-aware gland segmentation.
#[derive(Parser)]
#[command(name = "glandseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat `key = value` file).
    #[arg(long)]
    config: PathBuf,
    /// Override `output_dir` (for `synth`: the dataset destination).
    #[arg(long)]
    out: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth(Common),
    /// Train on the dataset's training split.
    Train(Common),
    /// Segment images (default: the dataset's test split).
    Predict {
        #[command(flatten)]
        common: Common,
        images: Vec<PathBuf>,
    },
    /// Score predictions against the test split.
    Evaluate(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, images) = match &cli.command {
        Command::Synth(c) | Command::Train(c) | Command::Evaluate(c) => (c, &[][..]),
        Command::Predict { common, images } => (common, &images[..]),
    };
    let level = match common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let mut cfg = RunConfig::from_file(&common.config)?;
    match &cli.command {
        Command::Synth(_) => {
            let dest = cmd_synth(&cfg, common.out.as_deref())?;
            println!("dataset written to {}", dest.display());
        }
        _ => {
            if let Some(out) = &common.out {
                cfg.redirect_output(out.clone());
                if matches!(cli.command, Command::Predict { .. }) {
                    cfg.predictions_dir = Some(out.clone());
                }
            }
            match &cli.command {
                Command::Train(_) => {
                    let o = cmd_train(&cfg)?;
                    if let Some(last) = o.epochs.last() {
                        println!(
                            "trained {} epochs, final loss {:.5}, pixel dice {:.4}",
                            last.epoch, last.mean_loss, last.pixel_dice
                        );
                    }
                }
                Command::Predict { .. } => {
                    for f in cmd_predict(&cfg, images)? {
                        println!("{}: {} glands -> {}", f.id, f.object_count, f.labels.display());
                    }
                }
                Command::Evaluate(_) => print!("{}", cmd_evaluate(&cfg)?.to_table()),
                Command::Synth(_) => unreachable!(),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("glandseg failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            eprintln!("error: {:#}", e);
            ExitCode::from(code as u8)
        }
    }
}
