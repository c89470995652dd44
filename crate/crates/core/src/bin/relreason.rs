use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relreason::config::TrainConfig;
use relreason::dataio::{encode_idx, synth_shapes};
use relreason::tensor::gradcheck::{grad_check_report, GradOp};
use relreason::train::{evaluate, train, EvalRequest};
use relreason::Error;

#[derive(Parser)]
#[command(version, about = "Self-supervised relational reasoning on small images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv plus checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes eval.csv and confusion.csv.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Neighbours per query for retrieval.
        #[arg(long)]
        knn: Option<usize>,
        /// Run the linear probe.
        #[arg(long)]
        linear: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
    },
    /// Write a synthetic shapes dataset as IDX files.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> relreason::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            epochs,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.out_dir = out.unwrap_or(cfg.out_dir);
            let outcome = train(&cfg)?;
            if let Some(last) = outcome.rows.last() {
                println!("epoch {} step {} loss {}", last.epoch, last.step, last.loss);
            }
            println!("metrics: {}", outcome.metrics.display());
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            knn,
            linear,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.out_dir = out.unwrap_or(cfg.out_dir);
            let request = if linear || knn.is_some() {
                EvalRequest { linear, knn }
            } else {
                EvalRequest {
                    linear: true,
                    knn: Some(cfg.knn),
                }
            };
            let report = evaluate(&cfg, &checkpoint, request)?;
            print!("{}", report.eval_csv());
        }
        Command::Gradcheck { op } => {
            let ops = match op {
                Some(name) => vec![name.parse::<GradOp>()?],
                None => GradOp::ALL.to_vec(),
            };
            let mut worst: f64 = 0.0;
            for op in ops {
                let report = grad_check_report(op, 0..5)?;
                println!("{:<16} {:.3e}", op.name(), report.max_rel_error);
                worst = worst.max(report.max_rel_error);
            }
            if worst >= 1e-3 {
                return Err(Error::InvalidArgument(format!("max relative error {worst:.3e} >= 1e-3")));
            }
        }
        Command::Synth {
            n,
            classes,
            size,
            seed,
            out,
        } => {
            let ds = synth_shapes(n, classes, size, seed)?;
            let (images, labels) = encode_idx(&ds)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("images.idx"), images)?;
            std::fs::write(out.join("labels.idx"), labels.expect("synthetic data is labelled"))?;
            println!("wrote {n} images to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
