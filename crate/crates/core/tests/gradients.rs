#[path = "support/grad_suite.rs"]
mod grad_suite;

use grad_suite::{full_suite, TOLERANCE};

#[test]
fn every_op_and_the_encoder_match_central_differences() {
    for seed in 0..5 {
        for (name, report) in full_suite(seed) {
            assert!(report.checked > 0, "{name}: nothing checked");
            assert!(
                report.passes(TOLERANCE),
                "seed {seed} {name}: max rel error {:.3e} at {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }
}
