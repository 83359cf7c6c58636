use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn redan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_redan"))
        .args(args)
        .current_dir(cwd)
        .env_remove("REDAN_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn last_json(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

/// Synthetic data plus a checkpoint trained for two epochs.
fn trained(dir: &Path, decoder: &str) {
    ok(redan(&["synth", "--out", "d", "--dialogs", "4", "--seed", "5"], dir));
    let ckpt = format!("{decoder}.ckpt");
    ok(redan(&["train", "--data", "d", "--decoder", decoder, "--epochs", "2", "--out", &ckpt], dir));
}

#[test]
fn eval_then_single_file_aggregate_is_a_copy() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p, "dis");
    let eval = last_json(&ok(redan(&["eval", "--ckpt", "dis.ckpt", "--data", "d", "--out", "r.jsonl"], p)));
    assert_eq!(eval["turns"], 40);
    for method in ["average", "reciprocal"] {
        let agg = ok(redan(&["aggregate", "--method", method, "r.jsonl", "--out", "a.jsonl"], p));
        let original: Vec<Value> = std::fs::read_to_string(p.join("r.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .collect();
        let fused: Vec<Value> = std::fs::read_to_string(p.join("a.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .collect();
        assert_eq!(original.len(), fused.len());
        for (o, f) in original.iter().zip(&fused) {
            assert_eq!(o["ranks"], f["ranks"]);
            assert_eq!(o["gt"], f["gt"]);
            assert_eq!(o["dialog_id"], f["dialog_id"]);
        }
        assert_eq!(last_json(&agg), eval);

        let twice = ok(redan(&["aggregate", "--method", method, "r.jsonl", "r.jsonl", "--out", "b.jsonl"], p));
        assert_eq!(last_json(&twice), eval);
    }
}

#[test]
fn trace_attention_is_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p, "gen");
    ok(redan(&["trace", "--ckpt", "gen.ckpt", "--data", "d", "--dialog", "1001", "--out", "t.json"], p));
    let trace: Value = serde_json::from_str(&std::fs::read_to_string(p.join("t.json")).unwrap()).unwrap();
    assert_eq!(trace["dialog_id"], 1001);
    let turns = trace["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 10);
    for (i, t) in turns.iter().enumerate() {
        let steps = t["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 2);
        for s in steps {
            for key in ["beta", "gamma"] {
                let sum: f64 = s[key].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
                assert!((sum - 1.0).abs() < 1e-6, "turn {i} {key} sums to {sum}");
            }
            assert_eq!(s["gamma"].as_array().unwrap().len(), i + 1);
        }
    }

    // The emitted file matches a trace recomputed from the checkpoint.
    let ck = redan::checkpoint::Checkpoint::load(p.join("gen.ckpt")).unwrap();
    let (file, feats) = redan::data::read_data_dir(p.join("d")).unwrap();
    let examples = redan::data::build_examples(&file, &feats, &ck.vocab, ck.model.config.truncation).unwrap();
    let ex = examples.iter().find(|e| e.image_id == 1001).unwrap();
    let recomputed = serde_json::to_value(redan::trace::trace_dialog(&ck.model, ex).unwrap()).unwrap();
    assert_eq!(recomputed, trace);
}

#[test]
fn errors_are_json_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    let out = redan(&["train", "--data", "d"], p);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["code"], 1);

    let out = redan(&["eval", "--ckpt", "missing.ckpt", "--data", "d", "--out", "r.jsonl"], p);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["code"], 2);
    assert!(err["message"].as_str().unwrap().contains("missing.ckpt"));

    std::fs::write(p.join("bad.jsonl"), "{\"dialog_id\":1}\n").unwrap();
    let out = redan(&["aggregate", "--method", "average", "bad.jsonl", "--out", "o.jsonl"], p);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(redan(&["--help"], p).status.code(), Some(0));
    assert_eq!(redan(&["--version"], p).status.code(), Some(0));
}

#[test]
fn seed_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let synth = |out: &str, seed: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_redan"));
        cmd.args(["synth", "--out", out, "--dialogs", "2", "--seed", seed]).current_dir(p);
        match env {
            Some(v) => cmd.env("REDAN_SEED", v),
            None => cmd.env_remove("REDAN_SEED"),
        };
        ok(cmd.output().unwrap());
        std::fs::read(p.join(out).join("dialogs.json")).unwrap()
    };
    let a = synth("a", "1", None);
    let b = synth("b", "2", None);
    let c = synth("c", "2", Some("1"));
    assert_ne!(a, b);
    assert_eq!(a, c);

    let out = Command::new(env!("CARGO_BIN_EXE_redan"))
        .args(["synth", "--out", "x"])
        .env("REDAN_SEED", "abc")
        .current_dir(p)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
