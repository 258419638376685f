//! Thin binary shell: argument parsing and dispatch only. All command
//! behavior lives in `domgen::cli` and is exercised by library tests.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use domgen::cli;
use domgen::config::{load_config, parse_set};

#[derive(Parser)]
#[command(
    name = "domgen",
    about = "Single-sample domain generalization: training, evaluation, and baselines",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Path to a JSON configuration document; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory, shorthand for `--set output.dir=...`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the corpus and write a manifest of per-domain counts.
    GenData,
    /// Train the configured method once; write checkpoint, history, config.
    Train,
    /// Run the configured evaluation protocol over all seeds.
    Eval,
    /// Run the objective ablations and the meta-training comparison.
    Ablate,
    /// Run the domain-split study (annotation vs cluster vs random).
    SplitStudy,
    /// Compare per-sample adaptation against entropy-minimization tuning.
    TentCompare,
    /// Project target features and classifiers to 2-D scatter SVGs.
    Visualize,
}

fn main() -> ExitCode {
    let args = Args::parse();

    let run = || -> domgen::Result<()> {
        let mut sets = Vec::with_capacity(args.sets.len() + 1);
        for raw in &args.sets {
            sets.push(parse_set(raw)?);
        }
        if let Some(out) = &args.out {
            sets.push(("output.dir".to_string(), out.display().to_string()));
        }

        let cfg = load_config(args.config.as_deref(), &sets)?;
        let written = match args.command {
            Command::GenData => cli::cmd_gen_data(&cfg)?,
            Command::Train => {
                let artifacts = cli::cmd_train(&cfg)?;
                println!("best validation accuracy: {:.4}", artifacts.best_val_accuracy);
                vec![artifacts.checkpoint, artifacts.history, artifacts.config]
            }
            Command::Eval => cli::cmd_eval(&cfg)?,
            Command::Ablate => cli::cmd_ablate(&cfg)?,
            Command::SplitStudy => cli::cmd_split_study(&cfg)?,
            Command::TentCompare => cli::cmd_tent_compare(&cfg)?,
            Command::Visualize => cli::cmd_visualize(&cfg)?,
        };
        for path in written {
            println!("wrote {}", path.display());
        }
        Ok(())
    };

    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
