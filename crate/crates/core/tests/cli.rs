use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use shear::cli::{build_report, report_csv, RunManifest, RUN_MANIFEST};
use shear::metrics::read_metrics;

fn shear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shear")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = shear(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_source_config(dir: &Path) -> PathBuf {
    let p = dir.join("source.json");
    let cfg = r#"{
        "version": 1,
        "model": {"n_layers": 2, "hidden_dim": 16, "n_heads": 2, "head_dim": 8,
                  "intermediate_dim": 32, "vocab_size": 257, "max_seq_len": 32},
        "train": {"steps": 12, "batch_size": 4, "seq_len": 16, "eval_interval": 4, "eval_batch": 8}
    }"#;
    std::fs::write(&p, cfg).unwrap();
    p
}

fn tiny_prune_config(dir: &Path) -> PathBuf {
    let p = dir.join("prune.json");
    let cfg = r#"{
        "version": 1,
        "prune": {"steps": 6, "batch_size": 4, "seq_len": 16, "eval_interval": 3, "eval_batch": 8,
                  "target": {"n_layers": 1, "hidden_dim": 8, "n_heads": 1, "intermediate_dim": 16}}
    }"#;
    std::fs::write(&p, cfg).unwrap();
    p
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(RUN_MANIFEST)).unwrap()).unwrap()
}

/// corpus, trained source and its run dir
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let corpus = root.join("corpus");
    ok(&["gen-data", "--out", s(&corpus), "--tokens-per-domain", "20000", "--seed", "3"]);
    let src = root.join("source");
    let cfg = tiny_source_config(root);
    ok(&["train-source", "--corpus", s(&corpus), "--out", s(&src), "--config", s(&cfg)]);
    (corpus, src)
}

#[test]
fn gen_data_layout_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen-data", "--out", s(&a), "--tokens-per-domain", "30000", "--seed", "9"]);
    ok(&["gen-data", "--out", s(&b), "--tokens-per-domain", "30000", "--seed", "9"]);
    let mut subdirs = 0;
    for e in std::fs::read_dir(&a).unwrap() {
        let p = e.unwrap().path();
        if !p.is_dir() {
            continue;
        }
        subdirs += 1;
        let name = p.file_name().unwrap();
        let bytes: u64 = std::fs::read_dir(&p).unwrap().map(|f| f.unwrap().metadata().unwrap().len()).sum();
        assert!((bytes as f64 - 30000.0).abs() <= 300.0, "{bytes}");
        for f in ["train.txt", "validation.txt"] {
            assert_eq!(std::fs::read(p.join(f)).unwrap(), std::fs::read(b.join(name).join(f)).unwrap());
        }
    }
    assert_eq!(subdirs, 2);
    assert_eq!(manifest(&a).status, "ok");
    assert_eq!(manifest(&a).run_id, manifest(&b).run_id);

    let again = shear(&["gen-data", "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&["gen-data", "--out", s(&a), "--tokens-per-domain", "30000", "--seed", "9", "--force"]);
}

#[test]
fn redpajama_preset_takes_table_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("rp");
    ok(&["gen-data", "--out", s(&corpus), "--domains", "redpajama", "--tokens-per-domain", "5000"]);
    let src = tmp.path().join("src");
    let cfg = tiny_source_config(tmp.path());
    ok(&[
        "train-source", "--corpus", s(&corpus), "--out", s(&src), "--config", s(&cfg),
        "--set", "data.initial_weights=redpajama", "--steps", "2",
    ]);
    let m = read_metrics(&src.join("metrics.jsonl")).unwrap();
    // domains are loaded in lexicographic order
    let expected = [0.025, 0.045, 0.150, 0.670, 0.045, 0.020, 0.045];
    assert_eq!(m[0].domain_weights, expected);
}

#[test]
fn config_errors_exit_two_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["gen-data", "--out", s(&corpus), "--tokens-per-domain", "5000"]);
    let out = shear(&[
        "train-source", "--corpus", s(&corpus), "--out", s(&tmp.path().join("x")),
        "--set", "train.batch_size=-1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));
    let out = shear(&[
        "train-source", "--corpus", s(&corpus), "--out", s(&tmp.path().join("y")),
        "--set", "model.widht=3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
    assert!(!tmp.path().join("x").exists() && !tmp.path().join("y").exists());
}

#[test]
fn print_config_shows_resolved_keys() {
    let out = ok(&["prune", "--source", "s", "--corpus", "c", "--out", "o", "--steps", "9", "--print-config"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["prune"]["steps"], 9);
    assert_eq!(v["prune"]["lr_mask"], 1.0);
    assert_eq!(v["loader"]["mode"], "dynamic");
    assert_eq!(v["version"], 1);
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (corpus, src) = setup(root);
    let m = manifest(&src);
    assert_eq!(m.status, "ok");
    assert!(m.finished_at.unwrap() >= m.started_at);
    assert!(m.artifacts.contains_key("metrics.jsonl"));
    assert!(m.artifacts.contains_key("checkpoint/weights.bin"));

    // second source of a different size for the scaling fit
    let small = root.join("small");
    let cfg = tiny_source_config(root);
    ok(&[
        "train-source", "--corpus", s(&corpus), "--out", s(&small), "--config", s(&cfg),
        "--set", "model.intermediate_dim=16",
    ]);
    let smaller = root.join("smaller");
    ok(&[
        "train-source", "--corpus", s(&corpus), "--out", s(&smaller), "--config", s(&cfg),
        "--set", "model.intermediate_dim=8",
    ]);
    let fit = root.join("fit");
    let ckpts = format!(
        "{},{},{}",
        s(&smaller.join("checkpoint")),
        s(&small.join("checkpoint")),
        s(&src.join("checkpoint"))
    );
    let out = shear(&[
        "fit-scaling", "--corpus", s(&corpus), "--out", s(&fit), "--checkpoints", &ckpts,
        "--set", "target_params=2000",
    ]);
    // three tiny, briefly trained models need not give a usable fit; either
    // a reference file or a reported scaling error is acceptable
    if out.status.success() {
        let r: Value = serde_json::from_str(&std::fs::read_to_string(fit.join("reference.json")).unwrap()).unwrap();
        assert_eq!(r.as_object().unwrap().len(), 2);
    } else {
        assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(manifest(&fit).status, "failed");
    }

    let pcfg = tiny_prune_config(root);
    let pruned = root.join("pruned");
    ok(&["prune", "--source", s(&src.join("checkpoint")), "--corpus", s(&corpus), "--out", s(&pruned), "--config", s(&pcfg)]);
    let cfg: Value =
        serde_json::from_str(&std::fs::read_to_string(pruned.join("checkpoint/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["n_layers"], 1);
    assert_eq!(cfg["model"]["hidden_dim"], 8);
    assert!(pruned.join("masks.json").is_file() && pruned.join("loader.json").is_file());

    // static and dynamic continued pretraining share one metrics schema
    let mut keys = Vec::new();
    for mode in ["static", "dynamic"] {
        let dir = root.join(format!("ct-{mode}"));
        ok(&[
            "continue-pretrain", "--prune-run", s(&pruned), "--corpus", s(&corpus), "--out", s(&dir),
            "--loader", mode, "--steps", "8", "--set", "train.batch_size=4", "--set", "train.seq_len=16",
            "--set", "train.eval_interval=4", "--set", "train.eval_batch=8",
        ]);
        let lines = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
        let evals: Vec<Value> = lines
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .filter(|v| v.get("delta").is_some())
            .collect();
        assert_eq!(evals.len(), 2);
        let mut k: Vec<String> = evals[0].as_object().unwrap().keys().cloned().collect();
        k.sort();
        keys.push(k);
    }
    assert_eq!(keys[0], keys[1]);

    let ev = root.join("eval");
    ok(&["eval", "--checkpoint", s(&pruned.join("checkpoint")), "--corpus", s(&corpus), "--out", s(&ev), "--set", "seq_len=16"]);
    let e: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e["losses"].as_array().unwrap().len(), 2);

    let sweep = root.join("sweep");
    ok(&[
        "sweep", "--source", s(&src.join("checkpoint")), "--corpus", s(&corpus), "--out", s(&sweep),
        "--config", s(&pcfg), "--fractions", "0.5,1", "--set", "sweep.run_ct=false",
    ]);

    let dirs = vec![src.clone(), pruned.clone(), root.join("ct-static"), root.join("ct-dynamic"), sweep.clone()];
    let report = build_report(&dirs).unwrap();
    assert_eq!(report.runs.len(), 4);
    assert_eq!(report.sweeps.len(), 1);
    assert_eq!(report.sweeps[0].result.rows.len(), 2);
    for r in &report.runs {
        // conservation: per-domain usage adds up to the trained tokens
        assert_eq!(r.domain_tokens.iter().sum::<usize>(), r.tokens);
        assert_eq!(r.final_losses.len(), 2);
    }
    let ct = &report.runs[3];
    assert_eq!(ct.tokens, 8 * 4 * 16);
    assert!(ct.gap_spread.is_some());
    let csv = report_csv(&report);
    assert!(csv.contains("\nsweep,fraction"));
    let rows: Vec<&str> = csv.lines().take_while(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split(',').count() == 12));

    let json_out = ok(&["report", "--runs", s(&root.join("ct-static")), "--format", "json"]);
    let v: Value = serde_json::from_str(&json_out).unwrap();
    let row = &v["runs"][0];
    for key in [
        "run", "command", "stage", "steps", "tokens", "domains", "final_losses", "mean_final_loss",
        "final_delta", "gap_spread", "domain_tokens", "final_domain_weights",
    ] {
        assert!(row.get(key).is_some(), "missing {key}");
    }

    // outputs never overwrite an existing run
    let again = shear(&["eval", "--checkpoint", s(&pruned.join("checkpoint")), "--corpus", s(&corpus), "--out", s(&ev), "--set", "seq_len=16"]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn same_config_and_seed_reproduce_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (corpus, src) = setup(root);
    let src2 = root.join("source2");
    let cfg = tiny_source_config(root);
    ok(&["train-source", "--corpus", s(&corpus), "--out", s(&src2), "--config", s(&cfg)]);
    let (a, b) = (manifest(&src), manifest(&src2));
    assert_eq!(a.run_id, b.run_id);
    assert_eq!(a.artifacts, b.artifacts);
}

#[test]
fn prune_to_full_shape_preserves_function() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (corpus, src) = setup(root);
    let p = root.join("full.json");
    std::fs::write(
        &p,
        r#"{"prune": {"steps": 40, "batch_size": 2, "seq_len": 16, "eval_interval": 3, "lr_theta": 0.0,
            "target": {"n_layers": 2, "hidden_dim": 16, "n_heads": 2, "intermediate_dim": 32}}}"#,
    )
    .unwrap();
    let pruned = root.join("pruned");
    ok(&["prune", "--source", s(&src.join("checkpoint")), "--corpus", s(&corpus), "--out", s(&pruned), "--config", s(&p)]);
    let losses = |dir: &Path| -> Vec<f64> {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
        v["losses"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
    };
    let (e1, e2) = (root.join("e1"), root.join("e2"));
    ok(&["eval", "--checkpoint", s(&src.join("checkpoint")), "--corpus", s(&corpus), "--out", s(&e1), "--set", "seq_len=16"]);
    ok(&["eval", "--checkpoint", s(&pruned.join("checkpoint")), "--corpus", s(&corpus), "--out", s(&e2), "--set", "seq_len=16"]);
    for (a, b) in losses(&e1).iter().zip(losses(&e2)) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn report_rejects_missing_or_corrupt_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = shear(&["report", "--runs", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(tmp.path().join("metrics.jsonl"), "{not json\n").unwrap();
    let out = shear(&["report", "--runs", s(tmp.path())]);
    assert_ne!(out.status.code(), Some(0));
}
