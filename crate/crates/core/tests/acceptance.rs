//! Runs the acceptance matrix with seed 0 and prints one line per criterion.

use std::process::ExitCode;

use twophase_core::suite::run_suite;

fn main() -> ExitCode {
    let (report, timings) = match run_suite(0) {
        Ok(r) => r,
        Err(e) => {
            println!("acceptance: suite aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    for row in &report.rows {
        println!(
            "criterion {} {:<18} {}  measured {:.6e}  threshold {:.6e}",
            row.criterion_id,
            row.name,
            if row.pass { "PASS" } else { "FAIL" },
            row.measured,
            row.threshold
        );
    }
    let total: f64 = timings.iter().map(|(_, s)| s).sum();
    let passed = report.rows.iter().filter(|r| r.pass).count();
    println!("acceptance: {passed}/{} criteria pass ({total:.1} s of solves)", report.rows.len());
    if passed == report.rows.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
