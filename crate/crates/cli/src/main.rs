use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchlab_cli::{
    cmd_attack, cmd_eval, cmd_gen_data, cmd_report, cmd_run, cmd_train, cmd_transfer, exit, ArchChoice, CliResult,
    Experiment, MaskChoice, ModeChoice, Translation,
};

#[derive(Parser)]
#[command(name = "patchlab", version, about = "Adversarial sign patches against a grid detector")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, short, global = true, default_value = "configs/default.json")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out datasets.
    GenData,
    /// Train a detector on the generated dataset.
    Train {
        #[arg(long, value_enum, default_value = "a")]
        arch: ArchChoice,
    },
    /// Optimize a patch against detector A.
    Attack {
        #[arg(long, value_enum, default_value = "disappearance")]
        mode: ModeChoice,
        #[arg(long, value_enum, default_value = "poster")]
        mask: MaskChoice,
        #[arg(long, value_enum, default_value = "sampled")]
        translation: Translation,
    },
    /// Evaluate the clean sign or a whitebox patch on the pose grid and drive-by.
    Eval {
        #[arg(long, value_enum, default_value = "a")]
        detector: ArchChoice,
        /// Patch directory written by `attack`.
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// Evaluate a patch on a detector it was not optimized on.
    Transfer {
        #[arg(long, value_enum, default_value = "b")]
        detector: ArchChoice,
        #[arg(long)]
        patch: PathBuf,
    },
    /// Summarize evaluation reports into one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Run the whole pipeline.
    Run,
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("summaries serialize"));
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let exp = Experiment::load(&cli.config)?;
    match cli.command {
        Command::GenData => {
            let s = cmd_gen_data(&exp)?;
            println!("generated {} training and {} held-out samples", s.n_train, s.n_holdout);
            println!("train seed {} holdout seed {}", s.train_seed, s.holdout_seed);
            println!("{}", s.train_dir.parent().unwrap_or(&s.train_dir).display());
        }
        Command::Train { arch } => {
            let s = cmd_train(&exp, arch)?;
            println!("weights {} sha256 {}", exp.weights_path(arch).display(), s.weights_sha256);
            println!("held-out detection rate {:.4}", s.holdout_detection_rate);
        }
        Command::Attack { mode, mask, translation } => {
            let s = cmd_attack(&exp, mode, mask, translation)?;
            println!("patch {} sha256 {}", s.dir.display(), s.patch_sha256);
            println!("mean loss {:.5} -> {:.5} over {} steps", s.initial_loss, s.final_loss, s.steps);
        }
        Command::Eval { detector, patch } => print_json(&cmd_eval(&exp, detector, patch.as_deref())?),
        Command::Transfer { detector, patch } => print_json(&cmd_transfer(&exp, detector, &patch)?),
        Command::Report { reports } => {
            let s = cmd_report(&exp, &reports)?;
            print!("{}", s.summary.render());
        }
        Command::Run => {
            let s = cmd_run(&exp)?;
            print!("{}", s.report.summary.render());
            println!("run directory {}", exp.run_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
