use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": { "source": { "kind": "two_glyph", "range_deg": 45.0, "n_per_class": 12, "size": 16, "seed": 1 }, "val_count": 8 },
  "flow": { "layers": 2, "hidden": 8, "embed_widths": [4, 8], "embed_dim": 8 },
  "classifier": { "widths": [4, 4] },
  "train": { "epochs": 2, "warmup_epochs": 1, "batch_size": 8, "val_samples": 2, "seed": 3 },
  "analysis": {
    "mean_shift": { "iterations": 3, "n_samples": 10 },
    "align_images": 3,
    "audit": { "pairs": 2, "grid": 24 },
    "ekld_angles_deg": [0.0, 30.0],
    "eval_samples": 3,
    "tta_budget": 3,
    "grid_points": 12,
    "export_samples": 50
  }
}"#;

fn flowinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowinv")).args(args).env("FLOWINV_LOG", "error").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn train(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = flowinv(&["train", "--config", s(cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_writes_the_output_contract() {
    let (dir, cfg) = setup();
    let out = train(dir.path(), &cfg, "run");
    for f in ["resolved-config.json", "metrics.csv", "checkpoint.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,aug_loss,entropy,alpha,val_acc");
    assert_eq!(lines.len(), 3);
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["epochs"], 2);
    assert!(resolved["flow"]["temperature"].is_number(), "defaults are filled in");
    let ck: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["schema_version"], 1);
}

#[test]
fn training_is_reproducible_and_seed_overrides() {
    let (dir, cfg) = setup();
    let a = train(dir.path(), &cfg, "a");
    let b = train(dir.path(), &cfg, "b");
    assert_eq!(std::fs::read(a.join("checkpoint.json")).unwrap(), std::fs::read(b.join("checkpoint.json")).unwrap());
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
    let c = dir.path().join("c");
    assert!(flowinv(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "9", "--threads", "2"]).status.success());
    let resolved = std::fs::read_to_string(c.join("resolved-config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 9"));
    assert_ne!(std::fs::read(a.join("checkpoint.json")).unwrap(), std::fs::read(c.join("checkpoint.json")).unwrap());
}

#[test]
fn unknown_keys_exit_two_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"flwo": {"layers": 2}}"#).unwrap();
    let o = flowinv(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("flwo"));
    assert!(!dir.path().join("o").join("metrics.csv").exists());

    std::fs::write(&cfg, r#"{"train": {"batch_size": -1}}"#).unwrap();
    let o = flowinv(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.batch_size"));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowinv(&["eval", "--checkpoint", s(&dir.path().join("missing.json")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    assert_eq!(flowinv(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn analyses_are_byte_reproducible() {
    let (dir, cfg) = setup();
    let run = train(dir.path(), &cfg, "run");
    let ck = run.join("checkpoint.json");
    let ck_before = std::fs::read(&ck).unwrap();
    for (cmd, files) in [
        ("eval", &["metrics.csv", "ekld.csv"][..]),
        ("align", &["alignment.csv", "trajectories.csv"][..]),
        ("audit", &["audit.json"][..]),
        ("export-dist", &["samples.csv"][..]),
    ] {
        let outs: Vec<PathBuf> = (0..2)
            .map(|i| {
                let out = dir.path().join(format!("{cmd}-{i}"));
                let o = flowinv(&[cmd, "--checkpoint", s(&ck), "--out", s(&out)]);
                assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
                out
            })
            .collect();
        for f in files {
            let a = std::fs::read(outs[0].join(f)).unwrap_or_else(|_| panic!("{cmd} wrote no {f}"));
            assert_eq!(a, std::fs::read(outs[1].join(f)).unwrap(), "{cmd}/{f} differs between runs");
        }
    }
    assert_eq!(std::fs::read(&ck).unwrap(), ck_before, "inputs are never modified");
    let samples = std::fs::read_to_string(dir.path().join("export-dist-0/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 51);
    assert!(samples.starts_with("t1,logp\n"));
    let metrics = std::fs::read_to_string(dir.path().join("eval-0/metrics.csv")).unwrap();
    assert!(metrics.starts_with("method,accuracy\nplain,"));
}

#[test]
fn make_data_writes_loadable_idx() {
    let (dir, cfg) = setup();
    let out = dir.path().join("data");
    assert!(flowinv(&["make-data", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let ds = flowinv::data::load_idx(&out.join("train-images.idx"), &out.join("train-labels.idx"), None).unwrap();
    assert_eq!(ds.len(), 16);
    assert_eq!(ds.image_shape(), [16, 16, 1]);
    let val = flowinv::data::load_idx(&out.join("val-images.idx"), &out.join("val-labels.idx"), None).unwrap();
    assert_eq!(val.len(), 8);
}
