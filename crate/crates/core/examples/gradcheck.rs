//! Finite-difference check of every hand-written backward rule and of the
//! whole model for each fusion kind.
//!
//! cargo run --example gradcheck

use tefal::gradcheck::{run_suite, DEFAULT_STEP};

fn main() -> tefal::Result<()> {
    let reports = run_suite(0, DEFAULT_STEP)?;
    for r in &reports {
        println!(
            "{:<28} {:.2e}  tol {:.0e}  {}",
            r.name,
            r.max_relative_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(())
}
