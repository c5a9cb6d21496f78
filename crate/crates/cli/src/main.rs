use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kbsg::commands::{self, EvalArgs, Overrides, ScoreArgs, Scope, SynthArgs, TrainArgs};
use kbsg::error::CliResult;
use kbsg_core::eval::Averaging;

#[derive(Parser)]
#[command(name = "kbsg", version, about = "Knowledge-refined scene graph generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Module,
    End2end,
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    Macro,
    Micro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Macro => Averaging::Macro,
            AveragingArg::Micro => Averaging::Micro,
        }
    }
}

#[derive(clap::Args)]
struct ModelFlags {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the knowledge branch.
    #[arg(long)]
    no_kb: bool,
    /// Disable the image-generation branch.
    #[arg(long)]
    no_gan: bool,
}

impl ModelFlags {
    fn overrides(&self, steps: Option<usize>) -> Overrides {
        Overrides {
            seed: self.seed,
            steps,
            no_gan: self.no_gan,
            no_kb: self.no_kb,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: scenes, labels, knowledge base and images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        predicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and write a checkpoint, loss log and run manifest.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Scene-graph recall of a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "k")]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value = "macro")]
        averaging: AveragingArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall of saved predictions against ground-truth scenes.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long = "k")]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value = "macro")]
        averaging: AveragingArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "op")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            out,
            images,
            classes,
            predicates,
            seed,
        } => {
            let files = commands::synth(&SynthArgs {
                out,
                images,
                classes,
                predicates,
                seed,
            })?;
            println!("wrote {} files", files.len());
        }
        Command::Train { model, out, steps, resume } => {
            let r = commands::train(&TrainArgs {
                config: model.config.clone(),
                out: out.clone(),
                overrides: model.overrides(steps),
                resume,
            })?;
            println!("steps: {}", r.steps);
            if let Some(l) = r.last {
                println!("loss: {}", l.total);
            }
            println!("out: {}", out.display());
        }
        Command::Eval {
            model,
            checkpoint,
            ks,
            averaging,
            out,
        } => {
            let r = commands::eval(&EvalArgs {
                config: model.config.clone(),
                checkpoint,
                ks,
                averaging: averaging.into(),
                out,
                overrides: model.overrides(None),
            })?;
            print!("{}", r.render());
        }
        Command::Score {
            predictions,
            ground_truth,
            ks,
            averaging,
            out,
        } => {
            let r = commands::score(&ScoreArgs {
                predictions,
                ground_truth,
                ks,
                averaging: averaging.into(),
                out,
            })?;
            print!("{}", r.render());
        }
        Command::Gradcheck { scope, seed } => {
            let scope = match scope {
                ScopeArg::Op => Scope::Op,
                ScopeArg::Module => Scope::Module,
                ScopeArg::End2end => Scope::End2End,
            };
            let rows = commands::gradcheck(scope, seed)?;
            print!("{}", commands::gradcheck_table(&rows));
            commands::gradcheck_verdict(&rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
