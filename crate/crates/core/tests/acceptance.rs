//! Acceptance gate: runs every verification criterion and prints one
//! pass/fail line per criterion.

use kalman_learn::verify::{self, Suite};

#[test]
fn acceptance_criteria() {
    let results = verify::run_suite(Suite::All);
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    assert!(
        failed.is_empty(),
        "acceptance criteria failed: {failed:?} (see lines above)"
    );
}
