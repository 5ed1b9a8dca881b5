use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn repo(p: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(p)
}

fn relaynet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relaynet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(out: &'a str, key: &str) -> Option<&'a str> {
    out.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

#[test]
fn run_reports_key_values() {
    let p = repo("scenarios/adversarial.toml");
    let o = relaynet(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().all(|l| l.contains('=')));
    assert_eq!(field(&out, "legal"), Some("true"));
    assert_eq!(field(&out, "exit"), Some("0"));
}

#[test]
fn run_exit_codes() {
    let p = repo("scenarios/adversarial.toml");
    let o = relaynet(&["run", p.to_str().unwrap(), "--max-steps", "3"]);
    assert_eq!(o.status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = [\n").unwrap();
    assert_eq!(relaynet(&["run", bad.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(relaynet(&["run", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn trace_and_frames_are_reproducible() {
    let p = repo("scenarios/departure.toml");
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let trace = dir.path().join(format!("{name}.log"));
        let frames = dir.path().join(format!("{name}_frames"));
        let o = relaynet(&[
            "run",
            p.to_str().unwrap(),
            "--seed",
            "3",
            "--trace",
            trace.to_str().unwrap(),
            "--dot-every",
            "50",
            frames.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        assert!(fs::read_dir(&frames).unwrap().count() > 0);
        traces.push(fs::read(&trace).unwrap());
    }
    assert!(!traces[0].is_empty());
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn transform_reaches_the_target() {
    let (s, t) = (repo("scenarios/path.dot"), repo("scenarios/star.dot"));
    for (a, b) in [(&s, &t), (&t, &s)] {
        let o = relaynet(&["transform", a.to_str().unwrap(), b.to_str().unwrap()]);
        let out = stdout(&o);
        assert_eq!(o.status.code(), Some(0), "{out}");
        assert_eq!(field(&out, "trees_equal"), Some("true"));
    }
}

#[test]
fn transform_rejects_bad_dot() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dot");
    fs::write(&bad, "digraph { a -> }").unwrap();
    let t = repo("scenarios/star.dot");
    let o = relaynet(&["transform", bad.to_str().unwrap(), t.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn suite_runs_with_reduced_size() {
    let o = relaynet(&["suite", "emulation", "--runs", "2"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(out.starts_with("suite=emulation result=pass"));
    assert_ne!(relaynet(&["suite", "nonsense"]).status.code(), Some(0));
}
