use std::fs;
use std::path::Path;
use std::process::Command;

use uma_core::model::checkpoint::Checkpoint;
use uma_core::synthdata::read_dataset;
use uma_core::traineval::evaluate;
use uma_core::uma::detect_valleys;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["uma"];
    full.extend_from_slice(args);
    uma_cli::main_with_args(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: usize) {
    let n = format!("data.utterances={n}");
    assert_eq!(run(&["gen", "--set", &n, "--out", s(dir)]), 0);
}

/// Dataset plus a two-epoch run in `root/data` and `root/run`.
fn trained(root: &Path) {
    gen(&root.join("data"), 20);
    let code = run(&[
        "train",
        "--data",
        s(&root.join("data")),
        "--out",
        s(&root.join("run")),
        "--set",
        "train.epochs=2",
        "--set",
        "train.warmup_steps=10",
    ]);
    assert_eq!(code, 0);
}

#[test]
fn gen_is_deterministic_with_expected_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a, 10);
    gen(&b, 10);
    for f in ["train.txt", "dev.txt", "test.txt", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let d = read_dataset(&a).unwrap();
    assert_eq!((d.train.len(), d.dev.len(), d.test.len()), (8, 1, 1));
    let c = dir.path().join("c");
    assert_eq!(run(&["gen", "--set", "data.utterances=10", "--seed", "99", "--out", s(&c)]), 0);
    assert_ne!(fs::read(a.join("train.txt")).unwrap(), fs::read(c.join("train.txt")).unwrap());
}

#[test]
fn train_writes_checkpoints_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let out = dir.path().join("run");
    for f in ["best.ckpt", "last.ckpt", "metrics.jsonl", "config.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let before = Checkpoint::<f64>::load(&out.join("last.ckpt")).unwrap();
    let step = before.header.extra["step"].as_u64().unwrap();
    assert!(step > 0);
    let code = run(&[
        "train",
        "--data",
        s(&dir.path().join("data")),
        "--out",
        s(&out),
        "--resume",
        "--set",
        "train.epochs=3",
        "--set",
        "train.warmup_steps=10",
    ]);
    assert_eq!(code, 0);
    let after = Checkpoint::<f64>::load(&out.join("last.ckpt")).unwrap();
    assert_eq!(after.header.extra["epoch"], 3);
    assert_eq!(after.header.extra["step"].as_u64().unwrap(), step + step / 2);
}

#[test]
fn eval_is_reproducible_and_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let ck = dir.path().join("run/best.ckpt");
    let data = dir.path().join("data");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    assert_eq!(run(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&e1)]), 0);
    assert_eq!(run(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&e2)]), 0);
    let text = fs::read_to_string(e1.join("eval_dev.txt")).unwrap();
    assert_eq!(text, fs::read_to_string(e2.join("eval_dev.txt")).unwrap());
    for col in ["sub", "del", "ins", "CER", "I/T'"] {
        assert!(text.contains(col), "report lacks {col}");
    }
    let model = Checkpoint::<f64>::load(&ck).unwrap().into_model().unwrap();
    let ds = read_dataset(&data).unwrap();
    let lib = evaluate(&model, &ds.dev).unwrap();
    assert_eq!(text, lib.to_text());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(e1.join("eval_dev.json")).unwrap()).unwrap();
    assert_eq!(json["cer"].as_f64().unwrap(), lib.summary.cer);
}

#[test]
fn eval_rejects_other_checkpoint_versions() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let ck = dir.path().join("run/best.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    let bad = dir.path().join("v7.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_uma"))
        .args(["eval", "--checkpoint", s(&bad), "--data", s(&dir.path().join("data"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('7') && err.contains('1'), "{err}");
}

#[test]
fn inspect_rows_match_valleys() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let ck = dir.path().join("run/best.ckpt");
    let data = dir.path().join("data");
    let ds = read_dataset(&data).unwrap();
    let u = &ds.dev[0];
    let out = dir.path().join("inspect");
    assert_eq!(
        run(&["inspect", "--checkpoint", s(&ck), "--data", s(&data), "--utterance", &u.id, "--out", s(&out)]),
        0
    );
    let csv = fs::read_to_string(out.join(format!("weights_{}.csv", u.id))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,alpha,valley,segment,true_boundary");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let model = Checkpoint::<f64>::load(&ck).unwrap().into_model().unwrap();
    let tr = model.forward(&u.features).unwrap();
    assert_eq!(rows.len(), tr.encoder_len());
    let seg = detect_valleys(&tr.alpha);
    for (t, row) in rows.iter().enumerate() {
        assert_eq!(row[0], t.to_string());
        assert_eq!(row[2] == "1", seg.is_valley(t));
    }
    let code = run(&["inspect", "--checkpoint", s(&ck), "--data", s(&data), "--utterance", "nope"]);
    assert_eq!(code, 2);
}

#[test]
fn bench_report_has_config_and_timer_note() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let ck = dir.path().join("run/best.ckpt");
    let out = dir.path().join("bench");
    let code = run(&[
        "bench",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&dir.path().join("data")),
        "--repeats",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(out.join("bench.txt")).unwrap();
    assert!(text.contains("model config {"));
    assert!(text.contains("timer: "));
    assert!(text.contains("ratio"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    let e = dir.path().join("eval");
    run(&["eval", "--checkpoint", s(&ck), "--data", s(&dir.path().join("data")), "--out", s(&e)]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join("eval_dev.json")).unwrap()).unwrap();
    let (a, b) = (json["mean_length_ratio"].as_f64().unwrap(), eval["mean_length_ratio"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(run(&["train", "--data", s(&missing), "--out", s(&dir.path().join("r"))]), 2);
    assert_eq!(run(&["eval", "--checkpoint", s(&missing), "--data", s(&missing)]), 2);
    assert_eq!(run(&["gen", "--set", "model.no_such_key=1", "--out", s(&dir.path().join("g"))]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    let file = dir.path().join("file");
    fs::write(&file, "x").unwrap();
    assert_eq!(run(&["gen", "--set", "data.utterances=10", "--out", s(&file.join("sub"))]), 2);
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let last = dir.path().join("run/last.ckpt");
    let mut ck = Checkpoint::<f64>::load(&last).unwrap();
    ck.params.get_mut("dec.out.w").unwrap().data_mut()[0] = f64::NAN;
    ck.save(&last).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_uma"))
        .args([
            "train",
            "--data",
            s(&dir.path().join("data")),
            "--out",
            s(&dir.path().join("run")),
            "--resume",
            "--set",
            "train.epochs=3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("utt"));
}
