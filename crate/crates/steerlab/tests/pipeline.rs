use std::fs;
use std::path::Path;

use steerlab::config::ExperimentConfig;
use steerlab::presets;
use steerlab::{Pipeline, PipelineError};

fn smoke_in(dir: &Path) -> ExperimentConfig {
    let mut c = presets::smoke();
    c.outputs.dir = Some(dir.join("out"));
    c.outputs.cache = Some(dir.join("cache"));
    c
}

fn pipeline(c: ExperimentConfig) -> Pipeline {
    let mut p = Pipeline::new(c).unwrap();
    p.quiet = true;
    p
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn steer_before_delta_names_the_missing_direction() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = pipeline(smoke_in(dir.path()));
    let e = p.steer().unwrap_err();
    match &e {
        PipelineError::MissingArtifact { stage, what } => {
            assert_eq!(*stage, "delta");
            assert_eq!(what, "concept direction");
        }
        other => panic!("{other}"),
    }
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn second_run_is_all_hits_and_report_reruns_alone() {
    let dir = tempfile::tempdir().unwrap();
    let c = smoke_in(dir.path());
    let mut p = pipeline(c.clone());
    p.all().unwrap();
    assert!(p.runs.iter().all(|r| !r.hit));
    let before = read_tree(&dir.path().join("out"));

    let mut again = pipeline(c.clone());
    again.all().unwrap();
    assert!(again.all_hits(), "{:?}", again.runs);
    assert_eq!(read_tree(&dir.path().join("out")), before);

    fs::remove_dir_all(dir.path().join("out/report")).unwrap();
    let upstream: Vec<_> = before.iter().filter(|(p, _)| !p.starts_with("report")).cloned().collect();
    let mut r = pipeline(c);
    r.report().unwrap();
    assert_eq!(r.runs.len(), 1);
    assert!(!r.runs[0].hit);
    let after = read_tree(&dir.path().join("out"));
    let after_up: Vec<_> = after.iter().filter(|(p, _)| !p.starts_with("report")).cloned().collect();
    assert_eq!(after_up, upstream);
    assert_eq!(after, before);
}

#[test]
fn tampered_artifact_is_reported_stale() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = pipeline(smoke_in(dir.path()));
    p.generate().unwrap();
    p.train().unwrap();
    p.extract().unwrap();
    p.delta().unwrap();
    let f = dir.path().join("out/delta/vortex.scdir");
    let mut bytes = fs::read(&f).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    fs::write(&f, bytes).unwrap();
    let e = p.steer().unwrap_err();
    assert!(matches!(e, PipelineError::StaleArtifact { .. }), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn separate_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(smoke_in(a.path())).all().unwrap();
    pipeline(smoke_in(b.path())).all().unwrap();
    let (ta, tb) = (read_tree(&a.path().join("out")), read_tree(&b.path().join("out")));
    assert!(ta.iter().any(|(p, _)| p == "all/manifest.json"));
    assert_eq!(ta, tb);
}

#[test]
fn changing_alphas_reruns_only_steer_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke_in(dir.path());
    pipeline(c.clone()).all().unwrap();
    c.steering.alphas = vec![-0.1, 0.0, 0.1];
    let mut p = pipeline(c);
    p.all().unwrap();
    let missed: Vec<&str> = p.runs.iter().filter(|r| !r.hit).map(|r| r.stage.as_str()).collect();
    assert_eq!(missed, ["steer", "report", "all"]);
}

#[test]
fn invalid_config_is_refused_before_running() {
    let mut c = presets::smoke();
    c.steering.alphas = vec![0.5];
    match Pipeline::new(c) {
        Err(e @ PipelineError::Config(_)) => assert_eq!(e.exit_code(), 1),
        other => panic!("{:?}", other.err()),
    }
}
