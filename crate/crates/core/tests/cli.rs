use std::path::Path;
use std::process::{Command, Output};

use deepmcp::training::TRACE_HEADER;

const SMALL: [&str; 10] = [
    "world.n_users=150",
    "world.n_ads=40",
    "world.n_ad_clusters=5",
    "world.impressions_per_user=30",
    "train.hash_space=4096",
    "train.layer_dims=16,8",
    "train.repr_dim=8",
    "train.batch_size=32",
    "train.epochs=1",
    "train.eval_every=25",
];

fn deepmcp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepmcp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn deepmcp")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    for kv in SMALL {
        v.push("--set");
        v.push(kv);
    }
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path) {
    let o = deepmcp(dir, &with_small(&["gen", "--seed", "1"]));
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_train_eval_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    for f in ["train.tsv", "val.tsv", "test.tsv", "schema.csv"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }

    let o = deepmcp(dir, &with_small(&["train", "--data", "data", "--seed", "1", "--out", "m.ckpt"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("# effective config\n"));
    let metrics = std::fs::read_to_string(dir.join("m.ckpt.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 7));

    let o = deepmcp(dir, &["eval", "--checkpoint", "m.ckpt", "--input", "data/test.tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let parts: Vec<&str> = line.trim().split(' ').collect();
    assert_eq!(parts.len(), 2, "{line}");
    let auc: f64 = parts[0].strip_prefix("auc=").unwrap().parse().unwrap();
    let ll: f64 = parts[1].strip_prefix("logloss=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc) && ll > 0.0);

    let o = deepmcp(dir, &["predict", "--checkpoint", "m.ckpt", "--input", "data/test.tsv", "--out", "p.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = std::fs::read_to_string(dir.join("p.txt")).unwrap();
    let test_lines = std::fs::read_to_string(dir.join("data/test.tsv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .count();
    assert_eq!(preds.lines().count(), test_lines);
    assert!(preds.lines().all(|p| p.parse::<f64>().is_ok_and(|v| v > 0.0 && v < 1.0)));
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    for out in ["a.ckpt", "b.ckpt"] {
        let o = deepmcp(dir, &with_small(&["train", "--data", "data", "--seed", "5", "--out", out]));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(dir.join("a.ckpt")).unwrap(), std::fs::read(dir.join("b.ckpt")).unwrap());
    assert_eq!(
        std::fs::read(dir.join("a.ckpt.metrics.csv")).unwrap(),
        std::fs::read(dir.join("b.ckpt.metrics.csv")).unwrap()
    );
}

#[test]
fn config_file_then_set() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("c.conf"), "train.alpha = 0.25\ntrain.beta = 0.75 # comment\n").unwrap();
    let o = deepmcp(dir, &["train", "--config", "c.conf", "--set", "train.beta=0.5"]);
    // no data, but the echo comes first
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("train.alpha = 0.25\n"), "{err}");
    assert!(err.contains("train.beta = 0.5\n"), "{err}");
}

#[test]
fn ablate_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = deepmcp(tmp.path(), &with_small(&["ablate", "--models", "lr,fm,dnn"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "model,auc,logloss");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("lr,") && lines[2].starts_with("fm,") && lines[3].starts_with("dnn,"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    let code = |args: &[&str]| deepmcp(dir, args).status.code();

    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&[]), Some(2));
    assert_eq!(code(&["gen", "--set", "train.nope=1"]), Some(2));
    assert_eq!(code(&["gen", "--set", "world.base_ctr=2"]), Some(2));
    assert_eq!(code(&["ablate", "--models", "svm"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", "x", "--input", "y", "--set", "train.alpha=1"]), Some(2));

    assert_eq!(code(&["train", "--data", "nowhere"]), Some(3));
    std::fs::write(dir.join("bad.tsv"), "1\tu1\n").unwrap();
    assert_eq!(code(&with_small(&["train", "--data", "data", "--train", "bad.tsv"])), Some(3));
    assert_eq!(code(&["eval", "--checkpoint", "data/schema.csv", "--input", "data/test.tsv"]), Some(3));

    let o = deepmcp(dir, &with_small(&["train", "--data", "data", "--set", "train.learning_rate=1e30"]));
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));

    assert_eq!(code(&["--help"]), Some(0));
}
