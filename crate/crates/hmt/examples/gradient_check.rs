//! Full-model gradient verification: autodiff gradients of every parameter
//! tensor (backbone weights, summarization prompt, search projections,
//! memory seed) are compared against central finite differences on a
//! recall-enabled three-segment unroll.
//!
//! Run with: cargo run --release --example gradient_check

use hmt::config::RunConfig;
use hmt::evalsuite::gradcheck_suite;

fn main() -> hmt::Result<()> {
    let reference = RunConfig::tiny_reference();
    let rows = gradcheck_suite(
        &reference.backbone,
        &reference.hmt,
        reference.train.unroll,
        42,
        24,
    )?;
    let mut failures = 0;
    for r in &rows {
        println!(
            "{} {:24} coords={:3} worst_rel={:.3e} worst_abs={:.3e}",
            if r.ok { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.worst_rel,
            r.worst_abs
        );
        if !r.ok {
            failures += 1;
        }
    }
    println!("{} tensors checked, {failures} failures", rows.len());
    if failures > 0 {
        std::process::exit(1);
    }
    Ok(())
}
