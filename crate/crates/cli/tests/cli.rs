use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mpfer");
const SUBCOMMANDS: [&str; 7] = ["make-scene", "add-noise", "train", "denoise", "synthesize", "eval", "dump-mpf"];

fn mpfer(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mpfer(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `{"error": ..., "exit_code": ...}` on a single stderr line.
fn error_line(out: &Output) -> serde_json::Value {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    serde_json::from_str(err.trim()).unwrap()
}

fn help_text() -> String {
    let mut text = ok(&["--help"]);
    for sub in SUBCOMMANDS {
        text.push_str(&format!("\n==> {sub} --help\n"));
        text.push_str(&ok(&[sub, "--help"]));
    }
    text
}

#[test]
fn help_matches_golden() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    let text = help_text();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&golden).unwrap());
    for flag in ["--threads", "--seed", "--config", "--preset", "--out", "--gain", "--planes", "--poses", "--data", "--model"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn unknown_flag_exits_two() {
    let out = mpfer(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["exit_code"], 2);
}

#[test]
fn bad_override_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpfer(&["make-scene", "--out", s(dir.path()), "rig.colz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["error"].as_str().unwrap().contains("colz"));
}

fn small_scene(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["make-scene", "--out", s(&out), "rig.width=24", "rig.height=24", "rig.cols=2", "rig.rows=2", "scene.texture_size=64"];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn eval_rejects_mixed_resolution_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path(), "scene", &[]);
    let odd = small_scene(dir.path(), "odd", &["rig.width=20"]);
    std::fs::copy(odd.join("view_001.png"), scene.join("view_001.png")).unwrap();
    let out = mpfer(&["eval", "--data", s(&scene), "--out", s(&dir.path().join("report"))]);
    assert_eq!(out.status.code(), Some(2));
    let msg = error_line(&out)["error"].as_str().unwrap().to_string();
    assert!(msg.contains("view_001.png"), "{msg}");
}

#[test]
fn denoise_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = small_scene(d, "scene", &[]);
    let noisy = d.join("noisy");
    ok(&["add-noise", "--input", s(&scene), "--out", s(&noisy), "--gain", "8"]);
    let model = d.join("model");
    let tiny = ["train.steps=3", "train.batch_size=1", "train.patch_size=12", "train.margin=2"];
    let mut args = vec!["train", "--data", s(&scene), "--out", s(&model)];
    args.extend(tiny);
    let line = ok(&args);
    assert!(line.contains("\"final_loss\""));
    for f in ["model.toml", "params.bin", "params.manifest", "loss.jsonl", "manifest.json"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let den = d.join("den");
    ok(&["denoise", "--model", s(&model), "--input", s(&noisy), "--out", s(&den)]);
    assert!(den.join("view_003.png").exists() && den.join("manifest.json").exists());
    let report = d.join("report");
    let summary = ok(&["eval", "--model", s(&model), "--data", s(&scene), "--out", s(&report), "eval.gains=[4, 20]"]);
    assert_eq!(summary.lines().count(), 2);
    let dump = d.join("dump");
    ok(&["dump-mpf", "--model", s(&model), "--input", s(&noisy), "--out", s(&dump), "--planes", "1,3,5"]);
    let pngs = std::fs::read_dir(&dump).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 3);
    let out = mpfer(&["dump-mpf", "--model", s(&model), "--input", s(&noisy), "--out", s(&dump), "--planes", "9"]);
    assert_eq!(out.status.code(), Some(2));
    // clean scene without noise metadata needs an explicit gain
    let out = mpfer(&["denoise", "--model", s(&model), "--input", s(&scene), "--out", s(&den)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sixteen_view_denoise_with_full_preset() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path(), "scene", &["rig.cols=4", "rig.rows=4"]);
    let out = dir.path().join("den");
    ok(&["denoise", "--gain", "20", "--preset", "mpfer-16", "--input", s(&scene), "--out", s(&out)]);
    let n = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("view_")).count();
    assert_eq!(n, 16);
}

#[test]
fn synthesis_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = small_scene(d, "scene", &["rig.cols=3", "rig.targets=[4]", "rig.width=48", "rig.height=48"]);
    let synth = ["pipeline.mode=synthesis", "pipeline.skip_connection=false"];
    let model = d.join("model");
    let mut args = vec!["train", "--data", s(&scene), "--out", s(&model), "train.steps=2", "train.batch_size=1", "train.patch_size=12", "train.margin=2"];
    args.extend(synth);
    ok(&args);
    let out = d.join("novel");
    ok(&["synthesize", "--model", s(&model), "--input", s(&scene), "--out", s(&out)]);
    assert!(out.join("view_000.png").exists() && !out.join("view_001.png").exists());
    let report = d.join("report");
    let line = ok(&["eval", "--model", s(&model), "--data", s(&scene), "--out", s(&report)]);
    assert!(line.contains("\"crop\":16"), "{line}");
    // a synthesis model cannot denoise
    let out = mpfer(&["denoise", "--model", s(&model), "--input", s(&scene), "--out", s(&d.join("x")), "--gain", "4"]);
    assert_eq!(out.status.code(), Some(2));
}
