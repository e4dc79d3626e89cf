//! Acceptance suite: one pass/fail line per criterion on stderr.

use std::io::Write;

mod brute_force;
mod conditionals;
mod desk;
mod determinism;
mod equivalence;
mod full_scale;

pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {id} ({name}): {} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}
