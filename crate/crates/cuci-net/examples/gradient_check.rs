//! Compare every block's analytic gradients against central differences.
//!
//! The unit suite isolates each block with a probe-weighted loss; the full
//! check differentiates the complete three-stage loss with respect to every
//! parameter tensor. Relative errors sit near 1e-7 when the backward pass
//! is right and near 1e0 when it is not.
//!
//!     cargo run --example gradient_check

use cuci_net::gradcheck::{run_full_check, run_unit_checks, FULL_TOL, UNIT_TOL};
use cuci_net::Result;

fn main() -> Result<()> {
    println!("unit checks (tolerance {UNIT_TOL:.0e}):");
    let mut all_ok = true;
    for report in run_unit_checks()? {
        let ok = report.passes(UNIT_TOL);
        all_ok &= ok;
        println!(
            "  {:<24} max rel err {:.3e} over {} scalars ({} live) {}",
            report.name,
            report.max_rel_err,
            report.checked_scalars,
            report.live_scalars,
            if ok { "ok" } else { "FAIL" }
        );
    }

    println!("\nfull network (tolerance {FULL_TOL:.0e}):");
    let report = run_full_check()?;
    let ok = report.passes(FULL_TOL);
    all_ok &= ok;
    println!(
        "  {:<24} max rel err {:.3e} over {} scalars ({} live) {}",
        report.name,
        report.max_rel_err,
        report.checked_scalars,
        report.live_scalars,
        if ok { "ok" } else { "FAIL" }
    );

    println!("\n{}", if all_ok { "all gradients verified" } else { "GRADIENT MISMATCH" });
    Ok(())
}
