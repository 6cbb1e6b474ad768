use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dasconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dasconv"))
        .args(args)
        .env("DASCONV_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    for (cmd, flags) in [
        ("audit", &["--config", "--out", "--seed"][..]),
        ("train", &["--config", "--data", "--out", "--seed", "--epochs", "--checkpoint"][..]),
        ("eval", &["--data", "--out", "--checkpoint", "--seed"][..]),
        ("predict", &["--data", "--out", "--checkpoint", "--seed"][..]),
        ("synth", &["--out", "--seed"][..]),
        ("preprocess", &["--data", "--out", "--seed"][..]),
        ("gradcheck", &["--out", "--seed"][..]),
    ] {
        let o = dasconv(&[cmd, "--help"]);
        assert!(o.status.success());
        for f in flags {
            assert!(stdout(&o).contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn bad_invocations_exit_2() {
    assert_eq!(dasconv(&["audit", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(dasconv(&["transmogrify"]).status.code(), Some(2));
    assert_eq!(dasconv(&["audit", "--config", "/no/such/file.json"]).status.code(), Some(2));
    let o = dasconv(&["gradcheck", "conv3d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("conv2d"));
    let o = Command::new(env!("CARGO_BIN_EXE_dasconv"))
        .args(["audit"])
        .env("DASCONV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_names_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"num_classes\": 9,\n  \"dilation_rates\": [1]\n}\n").unwrap();
    let o = dasconv(&["audit", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("dilation_rates") && err.contains("line 3"), "{err}");

    fs::write(&cfg, r#"{"dilation_set": [8, 4], "num_classes": 1}"#).unwrap();
    let o = dasconv(&["audit", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("strictly increasing"));
}

#[test]
fn audit_default_and_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("audit");
    let o = dasconv(&["audit", "--out", p(&out), "--diff-miou", "3.77"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("2.972M") && text.contains("4.614M") && text.contains("6.3386G"));
    assert!(text.contains("effectiveness"));
    for f in ["audit.txt", "audit.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("audit.json")).unwrap()).unwrap();
    assert_eq!(json["total_params"], 7_586_641);

    let cfg = dir.path().join("wide.json");
    fs::write(&cfg, r#"{"dilation_set": [12, 24, 32]}"#).unwrap();
    let o = dasconv(&["audit", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("not applicable"));
}

#[test]
fn gradcheck_scopes_and_fault() {
    let o = dasconv(&["gradcheck", "conv2d"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 2);
    let o = dasconv(&["gradcheck", "--inject-fault", "conv2d", "conv2d"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("conv2d"));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn failed_command_removes_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("images"), "in the way").unwrap();
    let o = dasconv(&["synth", "--out", p(dir.path()), "--n", "1", "--size", "16"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!dir.path().join("manifest.json").exists());
    assert!(dir.path().join("images").is_file());

    let fresh = dir.path().join("fresh");
    let o = dasconv(&["eval", "--data", p(dir.path()), "--checkpoint", "/none.ckpt", "--out", p(&fresh)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!fresh.exists());
}

#[test]
fn synth_preprocess_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = dasconv(&["synth", "--out", p(&data), "--n", "40", "--seed", "3", "--size", "64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(data.join("images/rgb/s00000.png").exists());
    assert!(data.join("labels/planter_skip").is_dir());

    let pre = dir.path().join("pre");
    let o = dasconv(&["preprocess", "--data", p(&data), "--out", p(&pre), "--split", "all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let freq: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(pre.join("class_frequency.json")).unwrap()).unwrap();
    let mut ranked: Vec<(&String, u64)> = freq.iter().map(|(k, v)| (k, v.as_u64().unwrap())).collect();
    ranked.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
    let names: Vec<&str> = ranked.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(
        names,
        [
            "drydown",
            "nutrient_deficiency",
            "weed_cluster",
            "water",
            "endrow",
            "double_plant",
            "waterway",
            "planter_skip"
        ]
    );
    assert!(pre.join("records/s00000.dast").exists());
    assert!(pre.join("labels/s00039.png").exists());

    let cfg = dir.path().join("small.json");
    fs::write(&cfg, r#"{"input_hw": [64, 64]}"#).unwrap();
    let run = dir.path().join("run");
    let o = dasconv(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--epochs", "2", "--width", "0.25",
        "--batch-size", "8", "--seed", "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,train_loss,val_miou\n"));
    assert_eq!(log.lines().count(), 3);
    let ckpt = run.join("model.ckpt");

    let ev = dir.path().join("eval");
    let o = dasconv(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&ev)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(ev.join("eval.txt")).unwrap();
    assert!(table.contains("BG") && table.contains("WC"));

    let pred = dir.path().join("pred");
    let o = dasconv(&["predict", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&pred)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let img = fs::read(pred.join("predictions/s00000.png")).unwrap();
    assert_eq!(&img[1..4], b"PNG");

    // Wrong image size for the reference config.
    let o = dasconv(&["train", "--data", p(&data), "--out", p(&dir.path().join("x")), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("input_hw"));
}
