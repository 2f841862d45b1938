//! Run every oracle verification suite and print one line per check.
//! Equivalent to `r3dm verify --suite all`.

use r3dm::cli::{suite_gradients, suite_identities, suite_igm};

fn main() {
    let mut failed = 0;
    for (suite, checks) in [
        ("identities", suite_identities()),
        ("gradients", suite_gradients()),
        ("igm", suite_igm()),
    ] {
        println!("== {suite} ==");
        for c in checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            println!("{status} {} residual={:.3e} tol={:.1e}", c.name, c.residual, c.tolerance);
            if !c.passed {
                failed += 1;
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} checks failed");
        std::process::exit(1);
    }
    println!("all checks passed");
}
