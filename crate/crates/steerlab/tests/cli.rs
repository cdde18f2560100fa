use std::process::Command;

fn steerlab(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_steerlab")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn validate_exit_codes() {
    for p in steerlab::presets::PRESETS {
        let (code, out, _) = steerlab(&["validate", "--config", p]);
        assert_eq!(code, 0, "{p}");
        assert_eq!(out.trim(), "ok");
    }
    let (code, _, err) = steerlab(&["validate", "--config", "smoke", "--alpha", "-0.5,0.5"]);
    assert_eq!(code, 1);
    assert!(err.contains("steering.alphas") && err.contains("must contain 0"), "{err}");
}

#[test]
fn config_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let mut c = steerlab::presets::smoke();
    c.concept.name = "vortx".into();
    std::fs::write(&path, c.to_toml()).unwrap();
    let (code, _, err) = steerlab(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("did you mean `vortex`"), "{err}");
}

#[test]
fn missing_upstream_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, _, err) = steerlab(&["steer", "--config", "smoke", "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(code, 2);
    assert!(err.contains("concept direction"), "{err}");
}

#[test]
fn smoke_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cache = dir.path().join("c");
    let args = [
        "all", "--config", "smoke", "--out", out.to_str().unwrap(), "--cache",
        cache.to_str().unwrap(), "--render", "-q",
    ];
    let (code, stdout, err) = steerlab(&args);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("verdict"), "{stdout}");
    assert!(out.join("report/render/laminar/alpha_0.5/tracer_0000.png").exists());
    assert!(out.join("report/report.json").exists());
}
