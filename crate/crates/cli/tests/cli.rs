use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn twlr(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twlr"))
        .args(args)
        .arg("--output")
        .arg(root)
        .output()
        .expect("spawn twlr")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

const SMALL: &str = "run.seed = 5\nsynth.train_per_grade = 2\nsynth.test_per_grade = 1\ntrain.epochs = 1\nloop.max_iterations = 2\n";

#[test]
fn generate_twice_gives_identical_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = twlr(dir.path(), &["generate", "--config", cfg]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["test"], 5);
    let first = tree(&dir.path().join("data"));
    assert!(twlr(dir.path(), &["generate", "--config", cfg])
        .status
        .success());
    assert_eq!(first, tree(&dir.path().join("data")));
}

#[test]
fn evaluate_without_run_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = twlr(dir.path(), &["evaluate", "--seed", "3"]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["command"], "evaluate");
    assert_eq!(err["error"], "missing_artifact");
    let path = err["path"].as_str().unwrap();
    assert!(path.ends_with("out/results.json"), "{path}");
}

#[test]
fn config_errors_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(
        &cfg,
        "train.lr = fast\nloop.bogus = 1\nencoder.patch_size = 7\n",
    )
    .unwrap();
    let out = twlr(dir.path(), &["generate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    let details: Vec<String> = err["details"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let has = |s: &str| details.iter().any(|d| d.contains(s));
    assert!(has("train.lr"), "{details:?}");
    assert!(has("loop.bogus"), "{details:?}");
    assert!(has("run.seed"), "{details:?}");
    assert!(details.len() >= 3, "{details:?}");
}

#[test]
fn missing_seed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = twlr(dir.path(), &["generate"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "config");
}

#[test]
fn full_pipeline_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    for cmd in ["generate", "train", "run", "evaluate", "report"] {
        let out = twlr(dir.path(), &[cmd, "--config", cfg, "--workers", "2"]);
        assert!(
            out.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap();
    }
    for f in [
        "out/results.json",
        "out/report.json",
        "out/metrics.csv",
        "out/plots/reduction_curve.png",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}
