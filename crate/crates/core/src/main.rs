use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use maskmtl::commands::{self, format_sweep, CommandError};
use maskmtl::synthetic;

#[derive(Parser)]
#[command(name = "maskmtl", version, about = "Multi-task toxicity models with sparse per-task token masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, train and save a model as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the test rows of a split manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "smiles")]
        smiles_column: String,
    },
    /// Per-token mask attributions for a file of SMILES, one per line.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated task names; all tasks when omitted.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        /// Output directory; defaults to `reports/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.15)]
        top_fraction: f64,
    },
    /// Retrain once per λ and tabulate held-out ROC-AUC.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1e-4,1e-3,1e-2")]
        lambdas: Vec<f64>,
    },
    /// Write a rule-labelled toy dataset as CSV.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Bromine,
    TwoMotif,
    Family,
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Train { config } => {
            let s = commands::cmd_train(&config)?;
            println!(
                "trained on {} rows ({} test), skipped {} invalid and {} too long",
                s.train_rows, s.test_rows, s.skipped, s.too_long
            );
            println!("test macro ROC-AUC {:.4}", s.test.macro_auc);
            println!("run directory {}", s.run_dir.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            smiles_column,
        } => {
            let r = commands::cmd_evaluate(&checkpoint, &data, &split, &smiles_column)?;
            for (t, auc) in r.tasks.iter().zip(&r.metrics.auc) {
                match auc {
                    Some(a) => println!("{t}\t{a:.4}"),
                    None => println!("{t}\tundefined"),
                }
            }
            println!("macro\t{:.4}", r.metrics.macro_auc);
            if r.metrics.skipped > 0 {
                eprintln!("warning: {} task(s) had a single class and were skipped", r.metrics.skipped);
            }
        }
        Command::Explain {
            checkpoint,
            input,
            tasks,
            out,
            top_fraction,
        } => {
            let out = out.unwrap_or_else(|| checkpoint.with_file_name("reports"));
            let s = commands::cmd_explain(&checkpoint, &input, &tasks, &out, top_fraction)?;
            for (smiles, why) in &s.failed {
                eprintln!("failed: {smiles}: {why}");
            }
            println!("{} records written to {}", s.records.len(), s.record_file.display());
            println!("report {}", s.report.display());
        }
        Command::Ablate { config, lambdas } => {
            let rows = commands::cmd_ablate(&config, &lambdas)?;
            print!("{}", format_sweep(&rows));
        }
        Command::Synth { kind, n, seed, out } => {
            let set = match kind {
                SynthKind::Bromine => synthetic::bromine_set(n, seed),
                SynthKind::TwoMotif => synthetic::two_motif_set(n, seed),
                SynthKind::Family => synthetic::shared_motif_family(n, seed),
            };
            fs::write(&out, set.to_csv())
                .map_err(|e| CommandError::Runtime(format!("{}: {e}", out.display())))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
