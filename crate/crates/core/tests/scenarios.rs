use std::fs;
use std::path::PathBuf;

use relaynet::dot::parse_dot;
use relaynet::fdp::run_departure;
use relaynet::scenario::{run_scenario, RunOverrides, Scenario, EXIT_BUDGET, EXIT_OK, EXIT_PARSE};
use relaynet::suites::departure_world;

fn repo(p: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(p)
}

fn load(p: &str) -> Scenario {
    Scenario::load(&repo(p)).unwrap()
}

#[test]
fn bundled_scenarios_finish() {
    for (p, key) in [
        ("scenarios/three_process.toml", "legal"),
        ("scenarios/adversarial.toml", "legal"),
        ("scenarios/departure.toml", "fdp_legitimate"),
    ] {
        let r = run_scenario(&load(p), p, &RunOverrides::default()).unwrap();
        assert_eq!(r.exit, EXIT_OK, "{p}\n{}", r.render());
        assert_eq!(r.get("reached"), Some("true"), "{p}");
        assert_eq!(r.get(key), Some("true"), "{p}");
    }
}

#[test]
fn step_budget_is_reported() {
    let ov = RunOverrides {
        max_steps: Some(3),
        ..Default::default()
    };
    let r = run_scenario(&load("scenarios/adversarial.toml"), "adv", &ov).unwrap();
    assert_eq!(r.exit, EXIT_BUDGET);
    assert_eq!(r.get("reached"), Some("false"));
}

#[test]
fn malformed_scenarios_are_parse_errors() {
    for text in ["seed = ", "seed = 1\nbogus = 2\n[topology]\nkind = \"explicit\"\nprocesses = [0]\nrelays = []\n"] {
        assert_eq!(Scenario::from_toml(text).unwrap_err().exit_code(), EXIT_PARSE);
    }
}

#[test]
fn traces_and_frames_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let ov = RunOverrides {
            trace: Some(dir.path().join(name)),
            dot_every: Some((10, dir.path().join("frames"))),
            ..Default::default()
        };
        run_scenario(&load("scenarios/adversarial.toml"), "adv", &ov).unwrap()
    };
    let a = run("a.log");
    let b = run("b.log");
    assert_eq!(a.render(), b.render());
    let ta = fs::read(dir.path().join("a.log")).unwrap();
    assert!(!ta.is_empty());
    assert_eq!(ta, fs::read(dir.path().join("b.log")).unwrap());
    let frames = fs::read_dir(dir.path().join("frames")).unwrap().count();
    assert!(frames > 0);
    let first = fs::read_to_string(dir.path().join("frames/frame_00000000.dot")).unwrap();
    parse_dot(&first).unwrap();
}

#[test]
fn seed_override_changes_the_run() {
    let sc = load("scenarios/adversarial.toml");
    let a = run_scenario(&sc, "adv", &RunOverrides::default()).unwrap();
    let b = run_scenario(
        &sc,
        "adv",
        &RunOverrides {
            seed: Some(12345),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(b.get("seed"), Some("12345"));
    assert_ne!(a.get("digest"), b.get("digest"));
}

#[test]
fn departures_reach_legitimacy() {
    for seed in 0..20 {
        let r = run_departure(departure_world(seed), seed, 100_000);
        assert!(r.reached, "seed {seed}: {r:?}");
        assert_eq!(r.clause_iii_violations, 0, "seed {seed}");
    }
}
