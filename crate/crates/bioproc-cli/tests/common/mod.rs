//! Shared acceptance-suite reporting: one pass/fail line per criterion.

pub fn criterion(number: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number:>2} [{verdict}] {title}: {detail}");
    assert!(pass, "criterion {number} failed: {detail}");
}
