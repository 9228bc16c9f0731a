//! Central-difference gradient checks for every operation and a full model.

use klnorm::verify::{check_model, op_suite, ModelCheck, GRAD_TOL};

fn main() -> klnorm::error::Result<()> {
    let mut reports = op_suite(0)?;
    reports.extend(check_model(&ModelCheck::default())?);
    for r in &reports {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!("{mark:>4} {:<28} {:.2e} ({} entries)", r.name, r.max_rel_err, r.checked);
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} above {GRAD_TOL:e}", reports.len());
    Ok(())
}
