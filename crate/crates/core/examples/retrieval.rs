//! Nearest-neighbour retrieval and linear probing on frozen features of an
//! untrained backbone, with the per-class confusion matrix.
//!
//! ```text
//! cargo run --release --example retrieval -- [K]
//! ```

use relreason::backbone::Conv4Backbone;
use relreason::dataio::synth_shapes;
use relreason::eval::{knn_retrieval, linear_eval, ProbeOptions};

fn main() -> relreason::Result<()> {
    let k: usize = std::env::args().nth(1).map_or(10, |s| s.parse().expect("K"));
    let (train, test) = synth_shapes(1000, 4, 32, 0)?.split_train_test(0);
    let backbone = Conv4Backbone::new(0);

    let reps = backbone.embed(&test.to_tensor()?, 250)?;
    let labels = test.labels().expect("labelled");
    let own: Vec<usize> = (0..test.len()).collect();
    let r = knn_retrieval(&reps, labels, &reps, labels, k, Some(&own))?;
    println!("top-{k} retrieval precision {:.3}", r.accuracy);
    println!("query 0 (class {}): neighbours {:?}", labels[0], &r.neighbors[0]);
    let names = test.class_names().expect("named classes");
    println!("{:<10} {}", "", names.iter().map(|n| format!("{n:>9}")).collect::<String>());
    for (name, row) in names.iter().zip(&r.confusion) {
        println!("{name:<10} {}", row.iter().map(|v| format!("{v:>9.3}")).collect::<String>());
    }

    let acc = linear_eval(&backbone, &train, &test, &ProbeOptions::default())?;
    println!("linear probe accuracy {acc:.3}");
    Ok(())
}
