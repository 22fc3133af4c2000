//! Finite-difference verification of the whole operator set: random
//! shapes, random data, central differences against tape gradients.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use advpretrain::gradcheck::run_gradcheck;
use advpretrain::Result;

fn main() -> Result<()> {
    let report = run_gradcheck(42, 25)?;
    print!("{}", report.render());
    let worst = report
        .ops
        .iter()
        .map(|o| o.max_rel_err)
        .fold(0.0f64, f64::max);
    println!("worst relative error across ops: {worst:.3e}");
    assert!(report.passed, "gradient check failed");
    Ok(())
}
