//! Trains one method on synthetic shapes and reports linear-probe and
//! retrieval accuracy on the held-out split.
//!
//! ```text
//! cargo run --release --example desk_benchmark -- relational 8 30 0
//!                                                 method     K epochs seed
//! ```

use std::time::Instant;

use relreason::config::{Method, TrainConfig};
use relreason::train::{evaluate_model, fit, load_split, EvalRequest, FitEvent};

fn main() -> relreason::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let cfg = TrainConfig {
        method: arg(0, "relational").parse::<Method>()?,
        k: arg(1, "8").parse().expect("K"),
        epochs: arg(2, "30").parse().expect("epochs"),
        seed: arg(3, "0").parse().expect("seed"),
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (train, _) = load_split(&cfg)?;
    let start = Instant::now();
    let mut epoch_loss = (0.0f64, 0.0f64, 0usize);
    let model = fit(&cfg, &train, |event| {
        match event {
            FitEvent::Step(row) => {
                epoch_loss.0 += f64::from(row.loss);
                epoch_loss.1 += row.pair_acc.unwrap_or(0.0);
                epoch_loss.2 += 1;
            }
            FitEvent::EpochEnd(epoch, _) => {
                let n = epoch_loss.2.max(1) as f64;
                println!(
                    "epoch {epoch:3}  loss {:.4}  pair_acc {:.3}  {:.0}s",
                    epoch_loss.0 / n,
                    epoch_loss.1 / n,
                    start.elapsed().as_secs_f64()
                );
                epoch_loss = (0.0, 0.0, 0);
            }
        }
        Ok(())
    })?;
    let report = evaluate_model(&cfg, &model, EvalRequest { linear: true, knn: Some(10) })?;
    print!("{}", report.eval_csv());
    Ok(())
}
