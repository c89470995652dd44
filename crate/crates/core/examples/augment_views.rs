//! Draws K augmented views of one synthetic image, prints the realised random
//! choices and writes every view as a binary PPM.
//!
//! ```text
//! cargo run --release --example augment_views -- [K] [OUT_DIR]
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relreason::augment::{sample_view_traced, AugmentPolicy};
use relreason::dataio::{synth_shapes, FloatImage};

fn write_ppm(path: &Path, img: &FloatImage) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
    f.write_all(&bytes)
}

fn main() -> relreason::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().map_or(4, |s| s.parse().expect("K"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("relreason-views"), PathBuf::from);
    std::fs::create_dir_all(&out)?;

    let image = synth_shapes(1, 4, 32, 3)?.float_image(0);
    write_ppm(&out.join("original.ppm"), &image)?;
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for v in 0..k {
        let (view, t) = sample_view_traced(&image, &policy, &mut rng);
        println!(
            "view {v}: flip {:<5} area {:.2} aspect {:.2} gray {:<5} jitter {}",
            t.flipped,
            t.area_fraction,
            t.relative_aspect,
            t.grayscale,
            t.jitter.map_or("none".to_string(), |j| format!(
                "b {:.2} c {:.2} s {:.2} h {:+.3}",
                j.brightness, j.contrast, j.saturation, j.hue_shift
            ))
        );
        write_ppm(&out.join(format!("view{v}.ppm")), &view)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
