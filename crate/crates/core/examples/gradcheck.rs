//! Compares analytic gradients of every tape op against central finite
//! differences in f64 and prints the worst relative error per op.
//!
//! ```text
//! cargo run --release --example gradcheck [-- OP]
//! ```

use relreason::tensor::gradcheck::{grad_check_report, GradOp};

fn main() -> relreason::Result<()> {
    let ops = match std::env::args().nth(1) {
        Some(name) => vec![name.parse::<GradOp>()?],
        None => GradOp::ALL.to_vec(),
    };
    println!("{:<24} {:>10} {:>12}", "op", "entries", "max rel err");
    for op in ops {
        let r = grad_check_report(op, 0..5)?;
        println!("{:<24} {:>10} {:>12.3e}", op.name(), r.entries, r.max_rel_error);
    }
    Ok(())
}
