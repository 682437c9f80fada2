//! Finite-difference check of every trainable architecture, 64-bit.
//!
//! `cargo run --release --example grad_suite`

use gistlab::gradsuite::{run_grad_suite, GradSuiteOptions};

fn main() -> gistlab::Result<()> {
    let t = std::time::Instant::now();
    for c in run_grad_suite(&GradSuiteOptions::default())? {
        println!("{:<32} max rel err {:.2e} over {:4} entries  {}", c.name, c.max_rel_err, c.checked, if c.passed { "ok" } else { "FAIL" });
    }
    println!("{:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
