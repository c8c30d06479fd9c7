use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use twlr::config::RunConfig;
use twlr::pipeline::{
    cmd_evaluate, cmd_generate, cmd_report, cmd_run, cmd_train, load_config, PipelineError,
    Workspace, CONFIG_FILE,
};

fn tiny(seed: u64) -> RunConfig {
    let mut c = RunConfig::with_seed(seed);
    c.train_per_grade = 2;
    c.test_per_grade = 1;
    c.train.epochs = 2;
    c.max_iterations = 2;
    c
}

fn all(ws: &Workspace) {
    cmd_generate(ws).unwrap();
    cmd_train(ws).unwrap();
    cmd_run(ws).unwrap();
    cmd_evaluate(ws).unwrap();
    cmd_report(ws).unwrap();
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn evaluate_before_run_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tiny(1), dir.path());
    let err = cmd_evaluate(&ws).unwrap_err();
    assert_eq!(err.kind(), "missing_artifact");
    assert_eq!(err.path().unwrap(), dir.path().join("out/results.json"));
    let err = cmd_run(&ws).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { .. }));
    assert!(err.path().unwrap().ends_with("model/model.ckpt"));
}

#[test]
fn effective_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    all(&Workspace::new(tiny(3), a.path()));
    let first = files(a.path());
    for dir in ["data", "model", "out", "out/plots"] {
        assert!(first.contains_key(&format!("{dir}/{CONFIG_FILE}")), "{dir}");
    }
    let written = load_config(&a.path().join("out").join(CONFIG_FILE)).unwrap();
    assert_eq!(written, tiny(3));
    all(&Workspace::new(written, b.path()));
    assert_eq!(first, files(b.path()));
}

#[test]
fn generate_replaces_stale_splits() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(4);
    c.test_per_grade = 2;
    cmd_generate(&Workspace::new(c, dir.path())).unwrap();
    let (_, test) = cmd_generate(&Workspace::new(tiny(4), dir.path())).unwrap();
    assert_eq!(test, 5);
    let pngs = fs::read_dir(dir.path().join("data/test"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("img_")
        })
        .count();
    assert_eq!(pngs, 5);
}
