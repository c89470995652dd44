//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The learning benchmarks train every method on synthetic shapes (2000 train
//! / 500 test, 4 classes, 32 px, Conv-4, M = 32, 30 epochs) for three seeds.
//! Runs are cached so criteria that share a configuration reuse it. The whole
//! target takes on the order of two hours on one core.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relreason::checkpoint::Checkpoint;
use relreason::config::{Method, TrainConfig};
use relreason::eval::knn_retrieval;
use relreason::relational::{build_pairs, focal_bce, AggregationMode, PairOptions};
use relreason::tensor::gradcheck::{grad_check_report, GradOp};
use relreason::tensor::Tensor;
use relreason::train::{evaluate_model, fit, load_split, train, EvalRequest, FitEvent};

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 30;
const BATCH: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

#[derive(Clone, Copy)]
struct Run {
    linear: f64,
    final_pair_acc: Option<f64>,
    rotation: Option<f64>,
    elapsed: Duration,
}

#[derive(Default)]
struct Bench {
    runs: HashMap<(Method, usize, u64), Run>,
}

impl Bench {
    fn run(&mut self, method: Method, k: usize, seed: u64) -> Run {
        *self.runs.entry((method, k, seed)).or_insert_with(|| {
            let cfg = TrainConfig {
                method,
                k,
                seed,
                epochs: EPOCHS,
                batch_size: BATCH,
                ..TrainConfig::default()
            };
            let (train_set, _) = load_split(&cfg).unwrap();
            let start = Instant::now();
            let (mut acc_sum, mut steps, mut last_epoch) = (0.0, 0usize, None);
            let model = fit(&cfg, &train_set, |event| {
                match event {
                    FitEvent::Step(row) => {
                        if let Some(a) = row.pair_acc {
                            acc_sum += a;
                            steps += 1;
                        }
                    }
                    FitEvent::EpochEnd(_, _) => {
                        last_epoch = (steps > 0).then(|| acc_sum / steps as f64);
                        acc_sum = 0.0;
                        steps = 0;
                    }
                }
                Ok(())
            })
            .unwrap();
            let report = evaluate_model(&cfg, &model, EvalRequest { linear: true, knn: None }).unwrap();
            let run = Run {
                linear: report.get("linear_top1").unwrap(),
                final_pair_acc: last_epoch,
                rotation: report.get("rotation_accuracy"),
                elapsed: start.elapsed(),
            };
            println!(
                "    run {:<12} K={k} seed={seed}: linear {:.4}{}{} ({:.0}s)",
                method.name(),
                run.linear,
                run.final_pair_acc.map_or(String::new(), |a| format!(", final pair_acc {a:.3}")),
                run.rotation.map_or(String::new(), |a| format!(", rotation acc {a:.3}")),
                run.elapsed.as_secs_f64()
            );
            run
        })
    }

    fn mean_linear(&mut self, method: Method, k: usize) -> f64 {
        SEEDS.iter().map(|&s| self.run(method, k, s).linear).sum::<f64>() / SEEDS.len() as f64
    }
}

fn c1_pair_counts() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bad = Vec::new();
    for m in 2..=8 {
        for k in 2..=8 {
            let views: Vec<Tensor<f32>> = (0..k).map(|_| Tensor::from_fn(&[m, 4], |_| rng.gen())).collect();
            let pairs = build_pairs(&views, AggregationMode::Cat, &PairOptions::default(), &mut rng).unwrap();
            let pos = pairs.targets.iter().filter(|&&t| t == 1.0).count();
            if pairs.len() != m * (k * k - k) || 2 * pos != pairs.len() {
                bad.push((m, k));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && secs < 1.0,
        format!("49 (M,K) cells, mismatches {bad:?}, {secs:.3}s"),
    )
}

fn c2_derangement() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for m in [2usize, 3, 5, 16] {
        let (fixed, chi2) = common::derangement_stats(m, 1_000_000, 100 + m as u64);
        let ok = fixed == 0 && (m == 2 || chi2 < common::chi2_critical(m - 2));
        pass &= ok;
        parts.push(format!("M={m}: fixed {fixed}, max chi2 {chi2:.2}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 30.0, format!("{}; {secs:.1}s", parts.join("; ")))
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "none".to_string());
    for op in GradOp::ALL {
        let r = grad_check_report(op, 0..5).unwrap();
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, op.name().to_string());
        }
    }
    let e2e = (0..5).map(common::end_to_end_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-3 && e2e < 1e-3 && secs < 120.0,
        format!(
            "{} ops worst {:.2e} ({}), end-to-end worst {e2e:.2e}, {secs:.1}s",
            GradOp::ALL.len(),
            worst.0,
            worst.1
        ),
    )
}

fn c4_focal() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let trivial = [
        (focal_bce(&[0.5], &[1.0], 0.0).unwrap() - 0.5 * ln2).abs(),
        (focal_bce(&[0.5], &[1.0], 2.0).unwrap() - 0.125 * ln2).abs(),
        focal_bce(&[1.0, 0.0], &[1.0, 0.0], 2.0).unwrap().abs(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
    let t: Vec<f64> = (0..1000).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    let bce = y
        .iter()
        .zip(&t)
        .map(|(&y, &t)| {
            let y = y.clamp(1e-7, 1.0 - 1e-7);
            -(t * y.ln() + (1.0 - t) * (1.0 - y).ln())
        })
        .sum::<f64>()
        / 1000.0;
    let gap = (focal_bce(&y, &t, 0.0).unwrap() - 0.5 * bce).abs();
    let worst = trivial.iter().copied().fold(gap, f64::max);
    outcome(worst < 1e-9, format!("max deviation {worst:.2e}"))
}

fn c5_learning_gain(bench: &mut Bench) -> Outcome {
    let rel = bench.mean_linear(Method::Relational, 8);
    let random = bench.mean_linear(Method::Random, 8);
    let slowest = SEEDS
        .iter()
        .map(|&s| bench.run(Method::Relational, 8, s).elapsed)
        .max()
        .unwrap();
    let gain = 100.0 * (rel - random);
    outcome(
        gain >= 15.0 && slowest < Duration::from_secs(30 * 60),
        format!(
            "relational {rel:.4} vs random weights {random:.4}: +{gain:.1} pts (need >= 15); slowest seed {:.0}s",
            slowest.as_secs_f64()
        ),
    )
}

fn c6_k_trend(bench: &mut Bench) -> Outcome {
    let [k2, k4, k8] = [2, 4, 8].map(|k| bench.mean_linear(Method::Relational, k));
    outcome(
        k8 > k2 && k8 >= k4 - 0.01,
        format!("K=2 {k2:.4}, K=4 {k4:.4}, K=8 {k8:.4}"),
    )
}

fn c7_head_ablation(bench: &mut Bench) -> Outcome {
    let full = bench.mean_linear(Method::Relational, 8);
    let a = bench.mean_linear(Method::AblationA, 8);
    let b = bench.mean_linear(Method::AblationB, 8);
    outcome(
        full >= a && full >= b,
        format!("relation module {full:.4}, (a) dot product {a:.4}, (b) encoder + dot product {b:.4}"),
    )
}

fn c8_baselines(bench: &mut Bench) -> Outcome {
    let rotation_acc = SEEDS
        .iter()
        .map(|&s| bench.run(Method::Rotation, 8, s).rotation.unwrap())
        .sum::<f64>()
        / SEEDS.len() as f64;
    let rotation = bench.mean_linear(Method::Rotation, 8);
    let random = bench.mean_linear(Method::Random, 8);
    let supervised = bench.mean_linear(Method::Supervised, 8);
    let best_self = [Method::Relational, Method::AblationA, Method::AblationB, Method::Rotation]
        .into_iter()
        .map(|m| bench.mean_linear(m, 8))
        .fold(0.0, f64::max);
    outcome(
        rotation_acc > 0.9 && rotation > random && supervised >= best_self,
        format!(
            "rotation task acc {rotation_acc:.4}, rotation linear {rotation:.4} vs random {random:.4}, \
             supervised {supervised:.4} vs best self-supervised {best_self:.4}"
        ),
    )
}

fn c9_retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 200;
    let points = Tensor::from_fn(&[n, 64], |_| rng.gen_range(-1.0f32..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let r = knn_retrieval(&points, &labels, &points, &labels, n, None).unwrap();
    let mismatches = (0..n)
        .filter(|&q| {
            let mut all: Vec<(f64, usize)> = (0..n).map(|g| (common::dist2(points.row(q), points.row(g)), g)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            r.neighbors[q] != all.iter().map(|&(_, g)| g).collect::<Vec<_>>()
        })
        .count();
    let row_error = r
        .confusion
        .iter()
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        mismatches == 0 && row_error < 1e-9,
        format!("{mismatches} of {n} rankings differ from brute force; confusion row error {row_error:.1e}"),
    )
}

fn c10_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let metrics: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let cfg = TrainConfig {
                dataset: relreason::config::DatasetSpec::Synth {
                    n: 200,
                    classes: 4,
                    size: 32,
                    seed: 0,
                },
                batch_size: 16,
                epochs: 2,
                out_dir: d.path().to_path_buf(),
                ..TrainConfig::default()
            };
            std::fs::read(train(&cfg).unwrap().metrics).unwrap()
        })
        .collect();
    let ckpt_path = dirs[0].path().join("checkpoint.ssrr");
    let original = std::fs::read(&ckpt_path).unwrap();
    let copy = dirs[0].path().join("resaved.ssrr");
    Checkpoint::load(&ckpt_path).unwrap().save(&copy).unwrap();
    let resaved = std::fs::read(&copy).unwrap();
    outcome(
        metrics[0] == metrics[1] && original == resaved,
        format!(
            "metrics.csv identical: {}; checkpoint save->load->save identical: {} ({} bytes)",
            metrics[0] == metrics[1],
            original == resaved,
            original.len()
        ),
    )
}

fn main() {
    let mut bench = Bench::default();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!("criterion {id:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "pair-count exactness", c1_pair_counts());
    report(2, "derangement property", c2_derangement());
    report(3, "gradient correctness", c3_gradients());
    report(4, "focal loss analytics", c4_focal());
    report(9, "retrieval oracle equivalence", c9_retrieval());
    report(10, "determinism and persistence", c10_determinism());
    report(5, "desk-scale learning gain", c5_learning_gain(&mut bench));
    report(6, "K-trend", c6_k_trend(&mut bench));
    report(7, "head-ablation ordering", c7_head_ablation(&mut bench));
    report(8, "baseline sanity", c8_baselines(&mut bench));

    let final_acc = SEEDS
        .iter()
        .map(|&s| bench.run(Method::Relational, 8, s).final_pair_acc.unwrap())
        .fold(f64::INFINITY, f64::min);
    println!(
        "check       [{}] relational K=8 final-epoch pair accuracy > 0.75: lowest seed {final_acc:.3}",
        if final_acc > 0.75 { "PASS" } else { "FAIL" }
    );

    results.sort_by_key(|r| r.0);
    println!("\nsummary:");
    for (id, name, o) in &results {
        println!("criterion {id:>2} [{}] {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2.pass).count() + usize::from(final_acc <= 0.75);
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
