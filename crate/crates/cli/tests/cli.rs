use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.num_samples=48",
    "synth.num_test=16",
    "vq.iterations=5",
    "lamp.iterations=5",
    "t2m.iterations=5",
    "m2t.iterations=5",
    "eval.repeats=1",
    "eval.pool_size=8",
    "eval.mm_prompts=4",
    "eval.mm_generations=2",
    "eval.mm_pairs=1",
    "eval.diversity_pairs=4",
];

fn lamp(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lamp"));
    cmd.arg("--out").arg(out).env("RUST_LOG", "warn").env_remove("LAMP_CACHE_DIR");
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("spawn lamp")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lamp(dir.path(), &["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("10 of 10 checks passed"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn generate_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = lamp(dir.path(), &["generate", "--text", "a person walks forward"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("checkpoint missing"), "{}", stderr(&o));
}

#[test]
fn unknown_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = lamp(dir.path(), &["--set", "foo.bar=1", "make-synthetic"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("foo.bar"), "{}", stderr(&o));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn rank_check_reports_full_rank() {
    let dir = tempfile::tempdir().unwrap();
    let o = lamp(dir.path(), &["rank-check", "--trials", "10"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["full_rank_fraction"], 1.0);
    assert_eq!(v["causal_invariants_hold"], true);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    for stage in ["make-synthetic", "train-vq", "train-lamp", "train-t2m", "train-m2t", "evaluate"] {
        let o = lamp(run, &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for f in ["config.resolved.json", "vq.ckpt", "lamp.ckpt", "t2m.ckpt", "m2t.ckpt", "eval_report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["synth"]["num_samples"], 48);
    assert!(resolved["generator"]["alpha"].is_number());

    let motion = run.join("gen.f32");
    let o = lamp(run, &["generate", "--text", "a person walks left", "--motion", motion.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("gen.json")).unwrap()).unwrap();
    let frames = meta["frames"].as_u64().unwrap();
    let dim = meta["dim"].as_u64().unwrap();
    assert_eq!(std::fs::metadata(&motion).unwrap().len(), frames * dim * 4);
    assert_eq!(meta["text"], "a person walks left");
    assert!(meta["tokens"].as_array().unwrap().len() > 0);

    let o = lamp(run, &["retrieve", "--mode", "text2motion", "--query", "a person walks left", "--k", "5", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let ranked = r["ranked"].as_array().unwrap();
    assert_eq!(ranked.len(), 5);
    let scores: Vec<f64> = ranked.iter().map(|e| e[1].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let o = lamp(run, &["retrieve", "--mode", "motion2text", "--query", "s00003", "--k", "3", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["ranked"][0][0].as_str().unwrap().contains('#'));

    let o = lamp(run, &["caption", "--motion", motion.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = lamp(run, &["bertscore", "--candidate", "a person walks", "--reference", "a person walks"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["f1"], 1.0);
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for run in [a.path(), b.path()] {
        let o = lamp(run, &["--seed", "3", "run-all"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["data/manifest.json", "vq.ckpt", "lamp.ckpt", "t2m.ckpt", "m2t.ckpt", "eval_report.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
