//! Generates the synthetic shapes dataset, writes it as IDX files, reads it
//! back and reports the class balance and the 80/20 split.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use relreason::dataio::{encode_idx, load_idx, synth_shapes};

fn main() -> relreason::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("relreason-synth"), PathBuf::from);
    let ds = synth_shapes(400, 4, 32, 7)?;
    let (images, labels) = encode_idx(&ds)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("images.idx"), images)?;
    std::fs::write(out.join("labels.idx"), labels.expect("labelled"))?;

    let back = load_idx(out.join("images.idx"), out.join("labels.idx"))?;
    assert_eq!(back.pixels(), ds.pixels());
    let names = ds.class_names().expect("named classes");
    for (c, name) in names.iter().enumerate() {
        let count = ds.labels().expect("labelled").iter().filter(|&&l| l == c).count();
        println!("{name:<10} {count}");
    }
    let (train, test) = ds.split_train_test(0);
    println!("train {} / test {} images of {}x{}x{}", train.len(), test.len(), ds.height(), ds.width(), ds.channels());
    println!("wrote {}", out.display());
    Ok(())
}
