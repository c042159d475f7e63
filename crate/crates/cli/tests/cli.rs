use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lodseg_core::manifest::Manifest;
use lodseg_core::volume_io::{load_labels, load_volume};
use lodseg_core::ClassScheme;

fn lodseg(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lodseg"))
        .args(args)
        .env("LODSEG_CACHE", cache.join("cache"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr:\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three 16-voxel phantoms under `dir/data`.
fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&lodseg(&["synth", "--out", s(&data), "--count", "3", "--size", "16", "--seed", "7"], dir));
    data
}

const TINY_NET: &str = r#"
[train.stages.network]
input_shape = [16, 16, 16]
level0_entry_filters = 8
level0_block_filters = 8
level1_block_filters = 8
level0_inner_reduction = 2
blocks_per_stage = 1
groupnorm_groups = 4
"#;

fn train_config(dir: &Path, data: &Path) -> PathBuf {
    let text = format!(
        r#"
seed = 11
[train]
[[train.stages]]
stage = "adult_prior"
epochs = 2
lr_init = 1e-3
checkpoint_out = "{ckpt}"
augmentation = {{ apply_probability = 0.5, seed = 3 }}
train = {{ kind = "dir", path = "{data}" }}
val = {{ kind = "phantom", count = 1, seed = 99, spec = {{ size = 16 }} }}
{TINY_NET}"#,
        ckpt = s(&dir.join("model.ckpt")),
        data = s(data),
    );
    let p = dir.join("train.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn conform_writes_requested_grid_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let src = data.join("images/phantom_000007.nii.gz");
    let before = std::fs::read(&src).unwrap();
    let out = dir.path().join("conf.nii.gz");
    ok(&lodseg(&["conform", "--in", s(&src), "--out", s(&out), "--shape", "40", "--mm", "1.0"], dir.path()));
    let v = load_volume(&out).unwrap();
    assert_eq!(v.shape(), [40; 3]);
    for i in 0..3 {
        assert!((v.affine[(i, i)] - 1.0).abs() < 1e-6, "RAS+ 1 mm diagonal");
    }
    assert_eq!(std::fs::read(&src).unwrap(), before, "input untouched");
    let m = Manifest::load(&Manifest::path_for(&out)).unwrap();
    assert_eq!(m.command, "conform");
    assert_eq!(m.outputs, vec![out.clone()]);

    let lab = dir.path().join("conf_labels.nii.gz");
    ok(&lodseg(&["conform", "--in", s(&data.join("labels/phantom_000007.nii.gz")), "--out", s(&lab), "--shape", "40", "--labels"], dir.path()));
    let l = load_labels(&lab, &ClassScheme::raw7()).unwrap();
    assert!(l.value_set().iter().all(|&x| x < 7));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[train]\nstages = []\nlearning_speed = 3\n").unwrap();
    let out = lodseg(&["train", "--config", s(&bad)], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_speed"));

    assert_eq!(lodseg(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(lodseg(&["conform", "--in", "a", "--out", "b", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(lodseg(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(lodseg(&["motion-sim", "--in", "x.nii", "--out", "y.nii", "--alpha", "-1"], dir.path()).status.code(), Some(1));
    let missing = dir.path().join("missing.nii.gz");
    let out = lodseg(&["motion-sim", "--in", s(&missing), "--out", s(&dir.path().join("y.nii.gz"))], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn motion_sim_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("moved.nii.gz");
    let src = data.join("images/phantom_000008.nii.gz");
    ok(&lodseg(&["motion-sim", "--in", s(&src), "--alpha", "2", "--seed", "5", "--out", s(&out)], dir.path()));
    let first = std::fs::read(&out).unwrap();
    assert_ne!(load_volume(&out).unwrap().data, load_volume(&src).unwrap().data);
    let manifest = Manifest::path_for(&out);
    assert_eq!(Manifest::load(&manifest).unwrap().seeds["motion"], 5);
    std::fs::remove_file(&out).unwrap();
    ok(&lodseg(&["replay", "--manifest", s(&manifest)], dir.path()));
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn train_infer_evaluate_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d);
    let cfg = train_config(d, &data);
    ok(&lodseg(&["train", "--config", s(&cfg), "--workers", "2"], d));
    let ckpt = d.join("model.ckpt");
    let first = std::fs::read(&ckpt).unwrap();
    let manifest = Manifest::path_for(&ckpt);
    let m = Manifest::load(&manifest).unwrap();
    assert_eq!((m.command.as_str(), m.workers, m.seeds["adult_prior.seed"]), ("train", Some(2), 11));
    ok(&lodseg(&["replay", "--manifest", s(&manifest), "--workers", "1"], d));
    assert_eq!(std::fs::read(&ckpt).unwrap(), first, "replay with another worker count");

    let pred = d.join("pred");
    ok(&lodseg(&["infer", "--checkpoint", s(&ckpt), "--in", s(&data.join("images")), "--out", s(&pred)], d));
    assert_eq!(std::fs::read_dir(&pred).unwrap().filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(".nii.gz")).count(), 3);

    let meta = d.join("meta.csv");
    std::fs::write(&meta, "volume_id,site,age_months\nphantom_000007,a,2\nphantom_000008,b,7\nphantom_000009,a,13\n").unwrap();
    let eval = d.join("eval");
    let gt = data.join("labels");
    ok(&lodseg(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&eval), "--metadata", s(&meta), "--method", "tiny"], d));
    for f in ["records.jsonl", "aggregate.csv", "report.json", "dice_all.svg", "dice_site_a.svg", "dice_age_12-24.svg", "lodseg.manifest.json"] {
        assert!(eval.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(eval.join("records.jsonl")).unwrap().lines().count(), 3);

    let sweep = d.join("sweep");
    ok(&lodseg(&["robustness", "--checkpoint", s(&ckpt), "--data", s(&data), "--alphas", "0,2", "--seeds", "1", "--out", s(&sweep)], d));
    assert_eq!(std::fs::read_to_string(sweep.join("robustness.csv")).unwrap().lines().count(), 3);

    let conf_pred = d.join("conf_pred.nii.gz");
    let src = data.join("images/phantom_000007.nii.gz");
    for _ in 0..2 {
        ok(&lodseg(&["infer", "--checkpoint", s(&ckpt), "--in", s(&src), "--out", s(&conf_pred), "--conform"], d));
    }
    assert_eq!(std::fs::read_dir(d.join("cache")).unwrap().count(), 1, "one cache entry");
}

#[test]
fn augment_preview_and_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d);
    let prev = d.join("prev");
    let img = data.join("images/phantom_000009.nii.gz");
    let lab = data.join("labels/phantom_000009.nii.gz");
    ok(&lodseg(&["augment-preview", "--in", s(&img), "--labels", s(&lab), "--seed", "4", "--count", "2", "--out", s(&prev)], d));
    let plans: serde_json::Value = serde_json::from_slice(&std::fs::read(prev.join("plans.json")).unwrap()).unwrap();
    assert_eq!(plans["plans"].as_array().unwrap().len(), 2);
    assert_eq!(plans["augmentation"]["seed"], 4);
    assert!(prev.join("sample_001_labels.nii.gz").exists());

    let ply = d.join("wm.ply");
    let out = lodseg(&["mesh", "--in", s(&lab), "--class", "white_matter", "--out", s(&ply)], d);
    ok(&out);
    assert!(std::fs::read_to_string(&ply).unwrap().starts_with("ply\nformat ascii 1.0"));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["watertight"], true);
    assert_eq!(lodseg(&["mesh", "--in", s(&lab), "--class", "cortex", "--out", s(&ply)], d).status.code(), Some(1));
}
