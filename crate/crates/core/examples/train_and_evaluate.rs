//! Trains from a configuration text, then reloads the final checkpoint and
//! evaluates it, writing metrics.csv, eval.csv and confusion.csv.
//!
//! ```text
//! cargo run --release --example train_and_evaluate -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use relreason::config::TrainConfig;
use relreason::train::{evaluate, train, EvalRequest};

const CONFIG: &str = "
method = relational
synth_n = 500
batch_size = 32
k = 4
epochs = 3
seed = 1
knn = 10
";

fn main() -> relreason::Result<()> {
    let mut cfg = TrainConfig::parse(CONFIG)?;
    cfg.out_dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("relreason-run"), PathBuf::from);
    let outcome = train(&cfg)?;
    for row in outcome.rows.iter().filter(|r| r.step % 12 == 0) {
        println!("epoch {} step {:>3} loss {:.4} pair_acc {:.3}", row.epoch, row.step, row.loss, row.pair_acc.unwrap_or(0.0));
    }
    let report = evaluate(&cfg, &outcome.checkpoint, EvalRequest { linear: true, knn: Some(cfg.knn) })?;
    print!("{}", report.eval_csv());
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}
