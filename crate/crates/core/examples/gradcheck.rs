//! Runs the finite-difference gradient suite and prints one row per check.

use banet::gradcheck::{run_suite, FD_TOLERANCE};

fn main() -> banet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let start = std::time::Instant::now();
    let rows = run_suite(seed)?;
    for r in &rows {
        println!(
            "{:<20} {:.3e} over {:>5} entries ({:>5} refined) {}",
            r.name,
            r.report.max_rel_error,
            r.report.checked,
            r.report.refined,
            if r.report.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.report.passed()).count();
    println!("{failed} failures at tolerance {FD_TOLERANCE:e}, {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
