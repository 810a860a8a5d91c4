use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn partseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PARTSEG_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 10] = [
    "--set", "synth.train_samples=6",
    "--set", "synth.val_samples=3",
    "--set", "synth.height=32",
    "--set", "synth.width=32",
    "--set", "data.dir=ds",
];

const TINY_MODEL: [&str; 16] = [
    "--set", "model.height=32",
    "--set", "model.width=32",
    "--set", "model.token_h=8",
    "--set", "model.token_w=8",
    "--set", "train.total_iters=3",
    "--set", "train.warmup_iters=1",
    "--set", "train.batch_size=2",
    "--set", "train.checkpoint_every=0",
];

#[test]
fn help_lists_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["train", "--help"][..]] {
        let o = partseg(args, dir.path());
        assert!(o.status.success());
        let s = stdout(&o);
        for key in ["train.base_lr", "loss.lambda_sep", "attn.gamma", "eval.protocol"] {
            assert!(s.contains(key), "{key} missing from {args:?}");
        }
    }
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = partseg(&["train", "--set", "train.nonsense=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.nonsense"));
    let o = partseg(&["train", "--set", "attn.gamma=1.5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("attn.gamma"));
    fs::write(dir.path().join("bad.cfg"), "train.base_lr = fast\n").unwrap();
    let o = partseg(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.base_lr"));
}

#[test]
fn taxonomy_validate_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = partseg(&["taxonomy", "validate", "--builtin", "ade20k-part-234"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("234 object-specific parts, 44 objects"));
    fs::write(dir.path().join("t.json"), r#"{"categories": ["dog head"], "unseen_objects": []}"#).unwrap();
    let o = partseg(&["taxonomy", "validate", "--file", "t.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let mut gen: Vec<&str> = vec!["synth", "generate", "--out", "ds"];
    gen.extend(SMALL);
    assert!(partseg(&gen, cwd).status.success());
    let first = fs::read(cwd.join("ds/train.tsv")).unwrap();
    let img = fs::read(cwd.join("ds/images/train_00000.png")).unwrap();
    gen[3] = "ds2";
    assert!(partseg(&gen, cwd).status.success());
    assert_eq!(fs::read(cwd.join("ds2/train.tsv")).unwrap(), first);
    assert_eq!(fs::read(cwd.join("ds2/images/train_00000.png")).unwrap(), img);

    let mut train: Vec<&str> = vec!["train", "--out", "run", "--seed", "3"];
    train.extend(SMALL);
    train.extend(TINY_MODEL);
    let o = partseg(&train, cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = fs::read_to_string(cwd.join("run/config.cfg")).unwrap();
    assert!(cfg.starts_with("# config hash "));
    assert!(cfg.contains("train.seed = 3"));
    assert!(cfg.contains("train.total_iters = 3"));
    let log = fs::read_to_string(cwd.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    train[2] = "run2";
    assert!(partseg(&train, cwd).status.success());
    assert_eq!(fs::read_to_string(cwd.join("run2/train_log.jsonl")).unwrap(), log);
    assert_eq!(fs::read(cwd.join("run2/last.bin")).unwrap(), fs::read(cwd.join("run/last.bin")).unwrap());

    let mut eval: Vec<&str> = vec!["eval", "--checkpoint", "run/last.bin", "--out", "ev", "--protocol", "pred_all"];
    eval.extend(SMALL);
    let o = partseg(&eval, cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(cwd.join("ev/metrics_pred_all.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "pred_all");
    assert_eq!(report["samples"], 3);

    let mut infer: Vec<&str> = vec!["infer", "--checkpoint", "run/last.bin", "--image", "ds/images/val_00000.png", "--out", "inf"];
    infer.extend(SMALL);
    let o = partseg(&infer, cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(cwd.join("inf/val_00000_pred.png").is_file());

    let mut resume: Vec<&str> = vec!["train", "--out", "run3", "--resume", "run/last.bin", "--set", "train.total_iters=4"];
    resume.extend(SMALL);
    resume.extend(TINY_MODEL);
    let o = partseg(&resume, cwd);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config hash"));
    resume.push("--allow-config-mismatch");
    let o = partseg(&resume, cwd);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn losscheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = partseg(&["losscheck", "--instances", "3", "--out", "lc"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("lc/losscheck.json").is_file());
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = partseg(&["eval", "--checkpoint", "nope.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.bin"));
}
