use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[model]
preset = tiny
image_size = 16x16

[train]
max_epochs = 2
batch_size = 4

[synth]
samples_per_region = 4
extent = 16x16
";

fn geopeft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geopeft")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = geopeft(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes the small config and a synthetic dataset; returns (config, manifest).
fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data)]);
    (p(&cfg).to_string(), p(&data.join("manifest.json")).to_string())
}

#[test]
fn training_twice_gives_identical_history_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["train", "--config", &cfg, "--manifest", &manifest, "--seed", "3", "--out", p(out)]);
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "history.csv"), read(&b, "history.csv"));
    assert_eq!(read(&a, "checkpoint/weights.bin"), read(&b, "checkpoint/weights.bin"));
    let history = String::from_utf8(read(&a, "history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_miou,lr\n"));
    assert_eq!(history.lines().count(), 3);
    let resolved = String::from_utf8(read(&a, "resolved.cfg")).unwrap();
    assert!(resolved.contains("seed = 3"));

    // the saved checkpoint evaluates to the reported test mIoU
    let metrics: serde_json::Value = serde_json::from_slice(&read(&a, "metrics.json")).unwrap();
    let eval_dir = dir.path().join("eval");
    let ckpt = a.join("checkpoint");
    ok(&["eval", "--config", &cfg, "--manifest", &manifest, "--checkpoint", p(&ckpt), "--split", "test", "--out", p(&eval_dir)]);
    let evaluated: serde_json::Value = serde_json::from_slice(&fs::read(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(evaluated["test"]["miou"], metrics["metrics"]["test"]["miou"]);
}

#[test]
fn buffered_split_passes_its_audit() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(dir.path());
    let split_dir = dir.path().join("split");
    ok(&["split", "--config", &cfg, "--manifest", &manifest, "--buffer-km", "5", "--out", p(&split_dir)]);
    let audit_dir = dir.path().join("audit");
    let splits = split_dir.join("splits.json");
    let stdout = ok(&["audit-splits", "--config", &cfg, "--manifest", &manifest, "--splits", p(&splits), "--out", p(&audit_dir)]);
    let km: f64 = stdout.trim().rsplit(": ").next().unwrap().trim_end_matches(" km").parse().unwrap();
    assert!(km >= 5.0, "{stdout}");
    assert!(audit_dir.join("audit.csv").is_file());
}

#[test]
fn report_for_vit_l_with_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("l.cfg");
    fs::write(&cfg, "[model]\npreset = vit-l16\n\n[peft]\npolicy = vpt\n").unwrap();
    let stdout = ok(&["report", "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(stdout.contains("peft params: 2457600 (2.5M, 0.81% of encoder)"), "{stdout}");
    assert!(stdout.contains("encoder params: 304083968"), "{stdout}");
}

#[test]
fn bad_config_fails_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nlr = 1e-3\nlearning_rate = 2\n").unwrap();
    let out = geopeft(&["report", "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn embed_writes_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(dir.path());
    let out = dir.path().join("emb");
    ok(&["embed", "--config", &cfg, "--manifest", &manifest, "--split", "ghos", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("embeddings_ghos.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("sample_id,region,e0,"));
    // tiny model: 64-wide embeddings, four hold-out samples
    assert_eq!(header.split(',').count(), 2 + 64);
    assert_eq!(lines.count(), 4);
}
