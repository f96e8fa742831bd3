use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ltm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltm"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn short_config(dir: &Path) {
    fs::write(
        dir.join("c.json"),
        r#"{"epochs": 3, "t_warm": 1, "batch_size": 16, "blob_train_per_class": 12,
            "blob_test_per_class": 4, "checkpoint": "c.ckpt", "report": "ib.csv"}"#,
    )
    .unwrap();
}

#[test]
fn gradcheck_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ltm(dir.path(), &["gradcheck", "--trials", "8"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("trials 8  max relative error"), "{out}");
    assert!(out.trim_end().ends_with("failures 0"));
}

#[test]
fn flops_csv_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ltm_core::transformer::ModelSpec::toy(2, 0.5, 3);
    fs::write(dir.path().join("s.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let o = ltm(dir.path(), &["flops", "--spec", "s.json", "--csv"]);
    assert!(o.status.success());
    let mut want = Vec::new();
    ltm_core::flops::model_flops(&spec)
        .unwrap()
        .write_csv(&mut want)
        .unwrap();
    assert_eq!(o.stdout, want);
}

#[test]
fn train_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    short_config(d);
    let o = ltm(d, &["train", "--config", "c.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("warm") && lines[1].contains("merge"));

    let csv = fs::read_to_string(d.join("ib.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), ltm_core::ib::CSV_HEADER);
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let o = ltm(d, &["ib-report", "--checkpoint", "c.ckpt"]);
    assert_eq!(stdout(&o), csv);

    let o = ltm(d, &["eval", "--checkpoint", "c.ckpt", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["samples"], 12);
    assert_eq!(v["layers"].as_array().unwrap().len(), 2);

    let o = ltm(
        d,
        &[
            "export-mask",
            "--checkpoint",
            "c.ckpt",
            "--block",
            "0",
            "--samples",
            "1,2",
        ],
    );
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "sample,token,merged,weight");
    assert_eq!(rows.len(), 1 + 2 * 16 * 8);
    // Each merged column is a convex combination of the 16 tokens.
    let total: f64 = rows[1..]
        .iter()
        .filter(|r| r.starts_with("2,"))
        .map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 8.0).abs() < 1e-4, "{total}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    short_config(d);
    assert!(ltm(d, &["train", "--config", "c.json"]).status.success());
    let whole = fs::read(d.join("c.ckpt")).unwrap();

    let mut ck = ltm_core::trainer::Checkpoint::load(&d.join("c.ckpt")).unwrap();
    let (tr, te) = ck.config.load_data().unwrap();
    let mut t = ltm_core::trainer::Trainer::new(ck.config.clone(), &tr, te.as_ref()).unwrap();
    t.run_epoch().unwrap();
    ck = t.into_checkpoint();
    ck.save(&d.join("part.ckpt")).unwrap();

    let o = ltm(d, &["train", "--resume", "part.ckpt", "--checkpoint", "done.ckpt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert_eq!(fs::read(d.join("done.ckpt")).unwrap(), whole);
}

#[test]
fn gen_data_files_train_through_idx() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ltm(
        d,
        &[
            "gen-data",
            "--out",
            "data",
            "--train-per-class",
            "6",
            "--test-per-class",
            "2",
        ],
    );
    assert!(o.status.success());
    fs::write(
        d.join("idx.json"),
        r#"{"epochs": 2, "t_warm": 1, "data": "idx", "checkpoint": "i.ckpt",
            "train_images": "data/train-images.idx", "train_labels": "data/train-labels.idx",
            "test_images": "data/test-images.idx", "test_labels": "data/test-labels.idx"}"#,
    )
    .unwrap();
    let o = ltm(d, &["train", "--config", "idx.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = ltm(d, &["eval", "--checkpoint", "i.ckpt"]);
    assert!(stdout(&o).starts_with("epoch 2  samples 6\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| ltm(d, args).status.code().unwrap();
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    fs::write(d.join("bad.json"), r#"{"epoch": 3}"#).unwrap();
    assert_eq!(code(&["train", "--config", "bad.json"]), 2);
    fs::write(d.join("warm.json"), r#"{"epochs": 2, "t_warm": 3}"#).unwrap();
    assert_eq!(code(&["train", "--config", "warm.json"]), 2);
    assert_eq!(code(&["eval", "--checkpoint", "missing.ckpt"]), 3);
    fs::write(d.join("junk.ckpt"), b"NOTACKPTxxxx").unwrap();
    assert_eq!(code(&["ib-report", "--checkpoint", "junk.ckpt"]), 3);
    fs::write(
        d.join("idx.json"),
        r#"{"data": "idx", "train_images": "a", "train_labels": "b", "checkpoint": "x"}"#,
    )
    .unwrap();
    assert_eq!(code(&["train", "--config", "idx.json"]), 3);

    short_config(d);
    assert_eq!(code(&["train", "--config", "c.json"]), 0);
    assert_eq!(code(&["export-mask", "--checkpoint", "c.ckpt", "--block", "7"]), 2);
    assert_eq!(
        code(&[
            "export-mask",
            "--checkpoint",
            "c.ckpt",
            "--block",
            "0",
            "--samples",
            "99"
        ]),
        2
    );
}
