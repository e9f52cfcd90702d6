use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use splatrig::io::load_file;
use splatrig_cli::client::Client;
use splatrig_cli::commands::{read_document, render_png, Orbit};

fn splatrig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatrig")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = splatrig(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn skeletonize_gives_requested_joint_count() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("s.splat");
    ok(&["synth", p(&doc), "--splats-per-bone", "200"]);
    let stdout = ok(&["skeletonize", p(&doc), "--candidates", "70", "--seed", "3"]);
    assert!(stdout.contains("70-joint skeleton"), "{stdout}");
    let d = load_file(&doc).unwrap();
    assert_eq!(d.skeleton.unwrap().len(), 70);
}

#[test]
fn export_frame_time_follows_fps() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("s.splat");
    let bvh = dir.path().join("s.bvh");
    ok(&["synth", p(&doc), "--frames", "32", "--with-poses", "--splats-per-bone", "20"]);
    ok(&["export", p(&doc), "--bvh", p(&bvh), "--fps", "16"]);
    let text = std::fs::read_to_string(&bvh).unwrap();
    assert!(text.contains("\nFrames: 32\n"));
    assert!(text.contains("\nFrame Time: 0.0625\n"));
}

#[test]
fn missing_sections_fail_with_hints() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("s.splat");
    ok(&["synth", p(&doc), "--splats-per-bone", "10"]);
    for (args, hint) in [
        (vec!["fit", p(&doc), "--stage", "N"], "--stage R"),
        (vec!["export", p(&doc), "--bvh", "/dev/null"], "--stage R"),
    ] {
        let out = splatrig(&args);
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.contains("no poses section"), "{err}");
        assert!(err.contains("hint:") && err.contains(hint), "{err}");
    }
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.splat");
    assert!(!splatrig(&["render", p(&missing), "--frame", "0", "--out", "/dev/null"]).status.success());
    let junk = dir.path().join("junk.splat");
    std::fs::write(&junk, b"not a scene").unwrap();
    let out = splatrig(&["export", p(&junk), "--bvh", "/dev/null"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    assert!(!splatrig(&["fit", p(&junk), "--stage", "X"]).status.success());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "stepz = 3\n").unwrap();
    let doc = dir.path().join("s.splat");
    ok(&["synth", p(&doc), "--splats-per-bone", "10", "--frames", "2"]);
    let out = splatrig(&["fit", p(&doc), "--stage", "R", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    let out = splatrig(&["render", p(&doc), "--frame", "5", "--out", "/dev/null"]);
    assert!(!out.status.success());
}

#[test]
fn render_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("s.splat");
    let png = dir.path().join("f.png");
    ok(&["synth", p(&doc), "--with-poses", "--splats-per-bone", "30"]);
    ok(&[
        "render", p(&doc), "--frame", "4", "--azimuth", "30", "--elevation", "-15", "--width", "40", "--height", "30",
        "--out", p(&png),
    ]);
    let orbit = Orbit {
        azimuth: 30.0,
        elevation: -15.0,
        width: 40,
        height: 30,
        ..Orbit::default()
    };
    let want = render_png(read_document(&doc).unwrap(), 4, &orbit).unwrap();
    assert_eq!(std::fs::read(&png).unwrap(), want);
    assert_eq!(&want[1..4], b"PNG");
}

#[test]
fn fit_stage_r_default_config_recovers_pendulum() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("p.splat");
    ok(&["synth", p(&doc)]);
    let stdout = ok(&["fit", p(&doc), "--stage", "R"]);
    assert!(stdout.contains("stage R: 2500 steps"), "{stdout}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("p.splat.fit.json")).unwrap()).unwrap();
    let chamfer = summary["final_terms"]["chamfer"].as_f64().unwrap();
    assert!(chamfer < 1e-3, "final chamfer {chamfer}");
    let records = std::fs::read_to_string(dir.path().join("p.splat.fit.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2500);
    let first: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    let d = load_file(&doc).unwrap();
    assert_eq!(d.poses.unwrap().frame_count(), 16);
    assert_eq!(d.settings.unwrap().smoothing_window, 1);
}

#[test]
fn fit_stage_n_after_r() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("p.splat");
    let cfg = dir.path().join("n.toml");
    std::fs::write(
        &cfg,
        "steps = 5\n[weights]\nrec = 0.0\nmask = 0.0\nchamfer = 2e4\n[field]\nspatial_resolution = 4\nfeature_width = 4\nhidden_width = 8\n",
    )
    .unwrap();
    ok(&["synth", p(&doc), "--frames", "4", "--splats-per-bone", "10"]);
    ok(&["fit", p(&doc), "--stage", "R", "--config", p(&cfg)]);
    let out = dir.path().join("refined.splat");
    let rep = dir.path().join("rep");
    ok(&["fit", p(&doc), "--stage", "N", "--config", p(&cfg), "--out", p(&out), "--report", p(&rep)]);
    let d = load_file(&out).unwrap();
    assert!(d.field.is_some() && d.poses.is_some());
    assert!(dir.path().join("rep.fit.jsonl").exists());
    assert!(load_file(&doc).unwrap().field.is_none());
}

#[test]
fn serve_answers_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("p.splat");
    ok(&["synth", p(&doc), "--with-poses", "--splats-per-bone", "10"]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_splatrig"))
        .args(["serve", p(&doc), "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    let summary = Client::connect(addr.as_str()).and_then(|mut c| c.summary());
    child.kill().unwrap();
    let _ = child.wait();
    let s = summary.unwrap();
    assert_eq!((s.joint_count, s.frame_count), (3, 16));
}
