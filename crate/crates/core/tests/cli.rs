use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdn")).args(args).output().expect("run tdn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(out: &Path, seed: &str) -> Output {
    tdn(&["gen", "--videos", "6", "--m", "8", "--prototypes", "4", "--length", "3-6", "--pairs", "0:1", "--seed", seed, "--out", s(out)])
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tdn1"), dir.path().join("b.tdn1"));
    assert!(gen_small(&a, "3").status.success());
    assert!(gen_small(&b, "3").status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let sidecar = |p: &Path| fs::read(format!("{}.annotation.json", p.display())).unwrap();
    assert_eq!(sidecar(&a), sidecar(&b));
    assert_eq!(&fs::read(&a).unwrap()[..4], b"TDN1");
}

#[test]
fn gen_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.tdn1");
    let run = tdn(&["gen", "--events", "4-2", "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!out.exists());
    let run = tdn(&["gen", "--pairs", "0:9", "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tdn1");
    assert!(gen_small(&data, "5").status.success());
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"model": {"K": 2, "L": 1}, "train": {"epochs": 3, "lr": 0.01}}"#).unwrap();
    let ckpt = dir.path().join("m.tdnm");
    let log = dir.path().join("train.log");

    let run = tdn(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&ckpt), "--log", s(&log)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert_eq!(stdout, fs::read_to_string(&log).unwrap());
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[1].parse::<f64>().unwrap() > 0.0);
    }
    assert_eq!(&fs::read(&ckpt).unwrap()[..4], b"TDNM");

    let eval = tdn(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(eval.status.success());
    let text = String::from_utf8(eval.stdout).unwrap();
    let keys: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(keys, ["hit_at_1", "gap_at_20"]);

    let pics = dir.path().join("pics");
    let export = tdn(&["export-adjacency", "--checkpoint", s(&ckpt), "--data", s(&data), "--video", "1", "--out-dir", s(&pics)]);
    assert!(export.status.success());
    for k in 1..=2 {
        let bytes = fs::read(pics.join(format!("adj_1_{k}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
    }
    assert!(!pics.join("adj_1_3.pgm").exists());

    let missing = tdn(&["export-adjacency", "--checkpoint", s(&ckpt), "--data", s(&data), "--video", "6", "--out-dir", s(&pics)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tdn1");
    assert!(gen_small(&data, "1").status.success());
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"train": {"epoch": 3}}"#).unwrap();
    let run = tdn(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&dir.path().join("m.tdnm"))]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tdn1");
    assert!(gen_small(&data, "1").status.success());
    let ckpt = dir.path().join("bad.tdnm");
    fs::write(&ckpt, b"TDNX").unwrap();
    let run = tdn(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("format error at byte 0"));
}

#[test]
fn gradcheck_reports_every_field() {
    let run = tdn(&["gradcheck", "--trials", "2", "--seed", "4"]);
    let text = String::from_utf8(run.stdout).unwrap();
    let keys: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(
        keys,
        [
            "trials",
            "entries_checked",
            "max_rel_error",
            "worst_parameter",
            "worst_config",
            "max_rel_error_resolvable",
            "unresolvable_entries",
            "status"
        ]
    );
    let passed = text.contains("status\tpass");
    assert_eq!(run.status.code(), Some(if passed { 0 } else { 1 }));
}
