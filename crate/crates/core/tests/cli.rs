use std::path::Path;
use std::process::{Command, Output};

use attnguide::pipeline::tensor_file::read_tensor;

const TINY: &str = "count = 4\nwidth = 8\nattn_dim = 8\ntime_dim = 8\npre_dilations = 1, 2\n\
post_dilations = 1\ntrain_steps = 20\nn_steps = 8\nrev_steps = 2, 4\n";

fn attnguide(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnguide"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Tiny config, dataset and checkpoint in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let gen = attnguide(dir.path(), &["--config", "tiny.cfg", "gen-data", "--out", "data"]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let train = attnguide(dir.path(), &["--config", "tiny.cfg", "train", "--data", "data", "--out", "."]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    dir
}

#[test]
fn full_pipeline_writes_expected_files() {
    let ws = workspace();
    let dir = ws.path();
    assert!(dir.join("data/captions.tsv").is_file());
    assert!(dir.join("data/00003.png").is_file());
    assert!(dir.join("model.rdmw").is_file());
    let losses = std::fs::read_to_string(dir.join("loss.tsv")).unwrap();
    assert_eq!(losses.lines().filter(|l| !l.starts_with("step")).count(), 20);

    let cfg = ["--config", "tiny.cfg"];
    let inv = attnguide(dir, &[&cfg[..], &["invert", "--data", "data", "--out", "inv"]].concat());
    assert_eq!(code(&inv), 0, "{}", String::from_utf8_lossy(&inv.stderr));
    let x_inv = read_tensor(&dir.join("inv/00000.x_inv.rdt")).unwrap();
    assert_eq!(x_inv.dims(), &[32, 32, 1]);

    let rec = attnguide(
        dir,
        &[&cfg[..], &["reconstruct", "--latent", "inv/00000.x_inv.rdt", "--caption", "a solid disc", "--out", "rec"]].concat(),
    );
    assert_eq!(code(&rec), 0, "{}", String::from_utf8_lossy(&rec.stderr));
    assert!(dir.join("rec/00000.rec.png").is_file());

    let edit = attnguide(
        dir,
        &[
            &cfg[..],
            &["--ablate", "edit", "--data", "data", "--source", "disc", "--target", "square", "--save-traces", "--out", "edit"],
        ]
        .concat(),
    );
    assert_eq!(code(&edit), 0, "{}", String::from_utf8_lossy(&edit.stderr));
    let summary = json(&edit);
    assert_eq!(summary["records"].as_array().unwrap().len(), 2, "{summary}");
    let trace = read_tensor(&dir.join("edit/00000.trace.rdt")).unwrap();
    assert_eq!(trace.dims(), &[8, 3, 1024, 4]);
    let reference = read_tensor(&dir.join("edit/00000.reference.rdt")).unwrap();
    assert_eq!(reference.dims(), &[8, 1024, 4]);
    assert!(dir.join("edit/00000.unguided.png").is_file());
    assert!(dir.join("edit/metrics.json").is_file());
}

#[test]
fn direction_and_metrics_need_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = attnguide(dir.path(), &["direction", "--source", "solid", "--target", "striped", "--out", "dir"]);
    assert_eq!(code(&d), 0, "{}", String::from_utf8_lossy(&d.stderr));
    let delta = read_tensor(&dir.path().join("dir/solid_to_striped.rdt")).unwrap();
    assert_eq!(delta.numel(), 16);

    let gen = attnguide(dir.path(), &["--set", "count=2", "gen-data", "--out", "data"]);
    assert_eq!(code(&gen), 0);
    let m = attnguide(
        dir.path(),
        &["metrics", "--image", "data/00000.png", "--reference", "data/00000.png"],
    );
    assert_eq!(code(&m), 0, "{}", String::from_utf8_lossy(&m.stderr));
    let v = json(&m);
    assert!((v["mask_iou"].as_f64().unwrap() - 1.0).abs() < 1e-12, "{v}");
}

#[test]
fn config_prints_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = attnguide(dir.path(), &["--set", "cfg_scale=2.5", "--seed", "9", "config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.trim() == "cfg_scale = 2.5"), "{text}");
    assert!(text.lines().any(|l| l.trim() == "seed = 9"), "{text}");
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&attnguide(p, &["--help"])), 0);
    assert_eq!(code(&attnguide(p, &["--no-such-flag", "config"])), 1);
    assert_eq!(code(&attnguide(p, &["--set", "no_such_key=1", "config"])), 1);
    assert_eq!(code(&attnguide(p, &["--set", "rev_steps=70", "config"])), 1);
    assert_eq!(code(&attnguide(p, &["direction", "--source", "disc", "--target", "banana"])), 1);
    assert_eq!(code(&attnguide(p, &["--config", "missing.cfg", "config"])), 2);

    std::fs::write(p.join("broken.rdmw"), b"not a checkpoint").unwrap();
    let inv = ["invert", "--image", "x.png", "--caption", "a disc", "--checkpoint"];
    assert_eq!(code(&attnguide(p, &[&inv[..], &["missing.rdmw"]].concat())), 2);
    assert_eq!(code(&attnguide(p, &[&inv[..], &["broken.rdmw"]].concat())), 2);
    assert_eq!(code(&attnguide(p, &["metrics", "--image", "missing.png"])), 2);
}
