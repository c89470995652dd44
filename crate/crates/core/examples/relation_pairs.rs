//! Builds positive and negative pairs from K views of a mini-batch, scores
//! them with a fresh relation head and evaluates the focal loss.
//!
//! ```text
//! cargo run --release --example relation_pairs -- [M] [K]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relreason::augment::{augment_batch, AugmentPolicy};
use relreason::backbone::{Conv4Backbone, REPR_DIM};
use relreason::dataio::{synth_shapes, to_nchw};
use relreason::nn::Mode;
use relreason::relational::{build_pairs, focal_bce, relation_score, AggregationMode, PairOptions, RelationHead};

fn main() -> relreason::Result<()> {
    let mut args = std::env::args().skip(1);
    let m: usize = args.next().map_or(8, |s| s.parse().expect("M"));
    let k: usize = args.next().map_or(4, |s| s.parse().expect("K"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let ds = synth_shapes(m, 4, 32, 1)?;
    let batch: Vec<_> = (0..m).map(|i| ds.float_image(i)).collect();
    let views = augment_batch(&batch, &AugmentPolicy::default(), k, &mut rng)?;
    let backbone = Conv4Backbone::new(0);
    let reps = views
        .iter()
        .map(|v| backbone.embed(&to_nchw(v)?, 64))
        .collect::<relreason::Result<Vec<_>>>()?;

    let pairs = build_pairs(&reps, AggregationMode::Cat, &PairOptions::default(), &mut rng)?;
    let positives = pairs.targets.iter().filter(|&&t| t == 1.0).count();
    println!("M={m} K={k}: {} pairs ({positives} positive), features {:?}", pairs.len(), pairs.features.shape());
    for row in [0, 1, m, m + 1] {
        let p = (&pairs.provenance[row], pairs.targets[row]);
        println!("  views ({}, {}) instances ({}, {}) target {}", p.0.view_i, p.0.view_j, p.0.n, p.0.n_prime, p.1);
    }

    let mut head = RelationHead::new(REPR_DIM, AggregationMode::Cat, &mut rng);
    let y = relation_score(&pairs, &mut head, Mode::Train)?;
    let y64: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let t64: Vec<f64> = pairs.targets.iter().map(|&v| f64::from(v)).collect();
    for gamma in [0.0, 1.0, 2.0] {
        println!("focal loss gamma={gamma}: {:.5}", focal_bce(&y64, &t64, gamma)?);
    }
    Ok(())
}
