//! The ten acceptance criteria at full size, one pass/fail line each.
//! Runs without the libtest harness so the lines are never captured.

use std::process::ExitCode;
use std::time::Instant;

use relaynet::suites::{self, SuiteConfig, SuiteReport};

fn main() -> ExitCode {
    let cfg = SuiteConfig::default();
    let mut reports: Vec<SuiteReport> = Vec::new();
    let mut lines = Vec::new();
    let timed = |f: &dyn Fn() -> SuiteReport| {
        let t = Instant::now();
        let r = f();
        (r, t.elapsed())
    };
    let criteria: [(&str, fn(&SuiteConfig) -> SuiteReport); 8] = [
        ("delivery", suites::delivery),
        ("closure", suites::closure),
        ("convergence", suites::convergence),
        ("shutdown", suites::shutdown),
        ("connectivity", suites::connectivity),
        ("universality", suites::universality),
        ("emulation", suites::emulation),
        ("fdp", suites::fdp),
    ];
    for (i, (_, f)) in criteria.iter().enumerate() {
        let (r, dt) = timed(&|| f(&cfg));
        lines.push(format!("criterion={} {} elapsed_ms={}", i + 1, r, dt.as_millis()));
        reports.push(r);
    }
    let (cycles, _) = timed(&|| suites::cycle_free(&reports));
    lines.push(format!("criterion=9 {cycles}"));
    let (det, dt) = timed(&|| suites::determinism(&cfg));
    lines.push(format!("criterion=10 {det} elapsed_ms={}", dt.as_millis()));
    reports.push(cycles);
    reports.push(det);

    for l in &lines {
        println!("{l}");
    }
    for r in reports.iter().filter(|r| !r.passed()) {
        for n in &r.notes {
            println!("  {}: {n}", r.name);
        }
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
