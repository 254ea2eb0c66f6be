use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use difd_core::corpus::{load_jsonl, SplitCounts, SyntheticSpec};
use difd_core::ndgrad::{load_checkpoint, save_checkpoint};
use tempfile::TempDir;

fn difd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difd")).args(args).output().expect("spawn difd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_spec(dir: &Path, seed: u64) -> PathBuf {
    let mut spec = SyntheticSpec::desk(seed);
    spec.counts = SplitCounts { source_train: 60, source_test: 30, target_unlabeled: 60, target_gold: 30 };
    let path = dir.join(format!("spec{seed}.json"));
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path
}

fn generate(dir: &Path, seed: u64) -> PathBuf {
    let spec = small_spec(dir, seed);
    let out = dir.join(format!("data{seed}"));
    let o = difd(&["generate", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn train(data: &Path, out: &Path, variant: &str, extra: &[&str]) -> Output {
    let src = data.join("source_train.jsonl");
    let valid = data.join("source_test.jsonl");
    let tgt = data.join("target_unlabeled.jsonl");
    let mut args = vec!["train", "--source", p(&src), "--valid", p(&valid), "--variant", variant, "--out", p(out)];
    args.extend_from_slice(&["--max-epochs", "2", "--seed", "3", "--hidden", "4", "--embedding-dim", "8"]);
    if variant != "difd-s" && variant != "source-only" {
        args.extend_from_slice(&["--target", p(&tgt)]);
    }
    args.extend_from_slice(extra);
    difd(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_is_deterministic_and_counts_match() {
    let dir = TempDir::new().unwrap();
    let a = generate(dir.path(), 5);
    let spec = small_spec(dir.path(), 5);
    let b = dir.path().join("again");
    assert_eq!(code(&difd(&["generate", "--spec", p(&spec), "--out", p(&b)])), 0);
    for f in ["source_train.jsonl", "source_test.jsonl", "target_unlabeled.jsonl", "target_gold.jsonl", "stats.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(load_jsonl(&a.join("source_train.jsonl")).unwrap().len(), 60);
    assert_eq!(load_jsonl(&a.join("target_gold.jsonl")).unwrap().len(), 30);
    let stats = json(&a.join("stats.json"));
    assert_eq!(stats["aspect_overlap_pct"].as_f64(), Some(0.0));
    assert_eq!(stats["splits"]["target_unlabeled"]["instances"].as_u64(), Some(60));
}

#[test]
fn invalid_spec_is_rejected() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, "{\"seed\": 1}").unwrap();
    let o = difd(&["generate", "--spec", p(&spec), "--out", p(&dir.path().join("x"))]);
    assert_ne!(code(&o), 0);
    assert!(!stderr(&o).is_empty());
}

#[test]
fn gradcheck_passes_and_corruption_is_named() {
    let t = Instant::now();
    let o = difd(&["gradcheck", "--scale", "tiny"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    for group in ["encoder", "allocation", "asc", "ad", "dc"] {
        assert!(out.contains(&format!("PASS {group} ")), "{out}");
    }
    assert!(t.elapsed().as_secs() < 60);
    let bad = difd(&["gradcheck", "--corrupt-op", "tanh"]);
    assert_eq!(code(&bad), 3);
    assert!(stderr(&bad).contains("corrupted op: tanh"));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let data = generate(dir.path(), 1);
    let src = data.join("source_train.jsonl");
    let tgt = data.join("target_unlabeled.jsonl");
    let out = dir.path().join("run");
    let o = difd(&["train", "--source", p(&src), "--target", p(&tgt), "--variant", "difd-s", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("difd-s"));
    let o = difd(&["train", "--source", p(&src), "--variant", "difd", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&difd(&["train", "--source", p(&src), "--out", p(&out), "--bogus"])), 1);
    assert_eq!(code(&difd(&["train", "--source", p(&src), "--out", p(&out), "--variant", "difd-x"])), 1);
    assert_eq!(code(&difd(&["--help"])), 0);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let o = difd(&["eval", "--ckpt", p(&dir.path().join("none.ckpt")), "--data", "x", "--out", "y"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_probe_export_roundtrip() {
    let dir = TempDir::new().unwrap();
    let data = generate(dir.path(), 2);
    let run = dir.path().join("run");
    let o = train(&data, &run, "difd", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "history.jsonl", "best.ckpt", "final.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count(), 2);

    let again = dir.path().join("run2");
    assert_eq!(code(&train(&data, &again, "difd", &[])), 0);
    assert_eq!(fs::read(run.join("history.jsonl")).unwrap(), fs::read(again.join("history.jsonl")).unwrap());

    let ckpt = run.join("best.ckpt");
    let gold = data.join("target_gold.jsonl");
    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    let o = difd(&["eval", "--ckpt", p(&ckpt), "--data", p(&gold), "--out", p(&r1)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stderr(&o).contains("warning"));
    assert_eq!(code(&difd(&["eval", "--ckpt", p(&ckpt), "--data", p(&gold), "--out", p(&r2)])), 0);
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let report = json(&r1);
    for key in ["accuracy", "macro_f1", "confusion"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let train_split = data.join("source_train.jsonl");
    let o = difd(&["eval", "--ckpt", p(&ckpt), "--data", p(&train_split), "--out", p(&r2)]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("warning"));
    let unlabeled = data.join("target_unlabeled.jsonl");
    assert_eq!(code(&difd(&["eval", "--ckpt", p(&ckpt), "--data", p(&unlabeled), "--out", p(&r2)])), 2);

    let src_test = data.join("source_test.jsonl");
    for kind in ["invariant", "specific"] {
        let out = dir.path().join(format!("probe_{kind}.json"));
        let feats = dir.path().join(format!("feat_{kind}.csv"));
        let o = difd(&[
            "probe", "--ckpt", p(&ckpt), "--source-data", p(&src_test), "--target-data", p(&gold), "--kind", kind,
            "--repeats", "3", "--out", p(&out), "--features-out", p(&feats),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r = json(&out);
        assert_eq!(r["repeats"].as_u64(), Some(3));
        assert!(r["mean"].as_f64().unwrap().is_finite());
        assert!(r["std"].as_f64().unwrap().is_finite());
        assert!(fs::read_to_string(&feats).unwrap().starts_with("domain,"));
    }
    let o = difd(&["probe", "--ckpt", p(&ckpt), "--source-data", p(&src_test), "--target-data", p(&src_test), "--kind", "invariant"]);
    assert_eq!(code(&o), 0, "source rows relabelled per flag, so both domains are present");

    let beta = dir.path().join("beta.csv");
    let o = difd(&["export-ca", "--ckpt", p(&ckpt), "--data", p(&gold), "--out", p(&beta)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&beta).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sentence_id,position,token,beta_c,beta_d"));
    let tokens: usize = load_jsonl(&gold).unwrap().iter().map(|i| i.tokens.len()).sum();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), tokens);
    for row in rows {
        let cells: Vec<&str> = row.rsplitn(3, ',').collect();
        for c in &cells[..2] {
            let v: f64 = c.parse().unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
    }
}

#[test]
fn variant_flags_shape_the_model() {
    let dir = TempDir::new().unwrap();
    let data = generate(dir.path(), 4);
    let gold = data.join("target_gold.jsonl");

    let ca = dir.path().join("ca");
    assert_eq!(code(&train(&data, &ca, "difd-ca", &[])), 0);
    let (store, _) = load_checkpoint(&ca.join("best.ckpt")).unwrap();
    assert!(!store.contains("allocation.w_a"));
    let o = difd(&["export-ca", "--ckpt", p(&ca.join("best.ckpt")), "--data", p(&gold), "--out", p(&dir.path().join("b.csv"))]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("no allocation weights in this variant"));

    let at = dir.path().join("at");
    assert_eq!(code(&train(&data, &at, "difd-at", &[])), 0);
    for line in fs::read_to_string(at.join("history.jsonl")).unwrap().lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["train"]["alignment"].as_f64(), Some(0.0));
        assert!(r["discriminator_loss"].is_null());
        assert!(r["train"]["ad_target"].as_f64().unwrap() > 0.0);
    }

    let so = dir.path().join("so");
    let tgt = data.join("target_unlabeled.jsonl");
    assert_eq!(code(&train(&data, &so, "source-only", &["--target", p(&tgt)])), 0);
}

#[test]
fn checkpoint_config_mismatch_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = generate(dir.path(), 6);
    let run = dir.path().join("run");
    assert_eq!(code(&train(&data, &run, "difd-s", &[])), 0);
    let (store, meta) = load_checkpoint(&run.join("best.ckpt")).unwrap();
    let mut meta: serde_json::Value = serde_json::from_str(&meta).unwrap();
    meta["config"]["hidden"] = serde_json::json!(5);
    let bad = dir.path().join("bad.ckpt");
    save_checkpoint(&bad, &store, &meta.to_string()).unwrap();
    let gold = data.join("target_gold.jsonl");
    let o = difd(&["eval", "--ckpt", p(&bad), "--data", p(&gold), "--out", p(&dir.path().join("r.json"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));
}
