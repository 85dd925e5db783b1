//! Finite-difference check of every differentiable op in f64.

use coverid::verify::gradient_suite;

fn main() -> coverid::Result<()> {
    let reports = gradient_suite(0, false)?;
    for r in &reports {
        println!(
            "{:<24} {:>10.2e} checked {:>4} near-kink {:>3} {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped_near_kink,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{failed} failing");
    Ok(())
}
