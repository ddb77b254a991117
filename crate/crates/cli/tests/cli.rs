use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.n_videos=12",
    "data.frames=2",
    "data.channel_widths=[3,3,2]",
    "model.d=16",
    "model.n_layers=1",
    "model.n_heads=2",
    "train.epochs_stage1=3",
    "train.epochs_stage2=2",
    "train.warmup_steps=2",
    "train.batch_size=8",
    "train.mine.hidden=8",
];

fn tham(out: &Path, run_id: &str, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tham"));
    cmd.env_remove("THAM_OUT").arg("--out").arg(out).arg("--run-id").arg(run_id);
    for kv in TINY {
        cmd.arg("--set").arg(kv);
    }
    cmd.args(args).output().expect("spawn tham")
}

fn ok(o: &Output) -> PathBuf {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8_lossy(&o.stdout).lines().last().unwrap().trim())
}

fn visible_entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn corpus(root: &Path) -> PathBuf {
    ok(&tham(root, "data", &["gen-data"])).join("corpus.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible_byte_for_byte() {
    let t = tempfile::tempdir().unwrap();
    let a = ok(&tham(t.path(), "a", &["gen-data"]));
    let b = ok(&tham(t.path(), "b", &["gen-data"]));
    assert_eq!(fs::read(a.join("corpus.json")).unwrap(), fs::read(b.join("corpus.json")).unwrap());
    let c = ok(&tham(t.path(), "c", &["--seed", "8", "gen-data"]));
    assert_ne!(fs::read(a.join("corpus.json")).unwrap(), fs::read(c.join("corpus.json")).unwrap());
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(c.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["data"]["seed"], 8);
    assert_eq!(cfg["train"]["seed"], 8);
    assert_eq!(cfg["data"]["n_videos"], 12);
}

#[test]
fn usage_and_config_errors_have_distinct_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let o = tham(t.path(), "x", &["--no-such-flag", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let o = tham(t.path(), "x", &["--set", "train.alpha=-1", "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.alpha"));
    let o = tham(t.path(), "x", &["--set", "model.depth=3", "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    let o = tham(t.path(), "x", &["--preset", "huge", "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(visible_entries(t.path()).is_empty());
}

#[test]
fn paper_preset_sets_published_schedule() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tham"))
        .arg("--out")
        .arg(t.path())
        .args(["--run-id", "p", "--preset", "paper", "--set", "data.n_videos=8", "gen-data"])
        .output()
        .unwrap();
    let dir = ok(&o);
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["warmup_steps"], 10_000);
    assert_eq!(cfg["train"]["batch_size"], 8);
    assert_eq!(cfg["train"]["alpha"], 0.01);
    assert_eq!(cfg["model"]["dropout"], 0.3);
    assert_eq!(cfg["eval"]["beam"]["beam"], 5);
}

#[test]
fn failures_leave_no_partial_outputs() {
    let t = tempfile::tempdir().unwrap();
    let data = corpus(t.path());
    let o = tham(t.path(), "ev", &["evaluate", "--data", s(&data), "--checkpoint", "/no/such.ckpt"]);
    assert_ne!(o.status.code(), Some(0));
    let o = tham(
        t.path(),
        "s2",
        &["train-stage2", "--data", s(&data), "--rlm", "/no/r", "--hlm", "/no/h", "--lm", "/no/l"],
    );
    assert_ne!(o.status.code(), Some(0));
    let o = tham(t.path(), "pl", &["plot", "--run", s(t.path())]);
    assert_ne!(o.status.code(), Some(0));
    assert_eq!(visible_entries(t.path()), vec!["data".to_string()]);
}

#[test]
fn existing_and_locked_runs_are_refused() {
    let t = tempfile::tempdir().unwrap();
    ok(&tham(t.path(), "a", &["gen-data"]));
    let before = fs::read(t.path().join("a/corpus.json")).unwrap();
    let o = tham(t.path(), "a", &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read(t.path().join("a/corpus.json")).unwrap(), before);

    fs::create_dir(t.path().join(".busy.partial")).unwrap();
    let o = tham(t.path(), "busy", &["gen-data"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("in progress"));
    assert!(t.path().join(".busy.partial").is_dir());
    assert!(!t.path().join("busy").exists());
}

#[test]
fn out_root_defaults_to_environment() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tham"))
        .env("THAM_OUT", t.path())
        .args(["--run-id", "envrun", "--set", "data.n_videos=8", "gen-data"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(t.path().join("envrun/corpus.json").is_file());
}

#[test]
fn mi_selftest_writes_one_record_per_rho() {
    let t = tempfile::tempdir().unwrap();
    let dir = ok(&tham(
        t.path(),
        "mi",
        &[
            "--set",
            "selftest.steps=40",
            "--set",
            "selftest.eval_samples=200",
            "mi-selftest",
            "--rhos",
            "0,0.5",
        ],
    ));
    let recs: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(dir.join("mi_selftest.json")).unwrap()).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1]["rho"], 0.5);
    let analytic = recs[1]["analytic_mi"].as_f64().unwrap();
    assert!((analytic - 0.143_841).abs() < 1e-5);
    assert!(recs.iter().all(|r| r["estimate"].as_f64().unwrap().is_finite()));
}

#[test]
fn full_pipeline_and_resume() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    let data = corpus(root);

    let s1 = ok(&tham(root, "s1", &["train-stage1", "--data", s(&data)]));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(s1.join("stage1.json")).unwrap()).unwrap();
    let ck = |k: &str| PathBuf::from(summary[k].as_str().unwrap());
    for k in ["rlm", "hlm", "lm"] {
        assert!(ck(k).is_file(), "{k} checkpoint {:?}", ck(k));
        assert!(ck(k).starts_with(&s1));
    }

    let part = ok(&tham(root, "r1", &["train-stage1", "--data", s(&data), "--stop-after", "1"]));
    let st: serde_json::Value = serde_json::from_slice(&fs::read(part.join("stage1.json")).unwrap()).unwrap();
    assert_eq!(st["finished"], false);
    ok(&tham(root, "r1", &["train-stage1", "--data", s(&data), "--resume"]));
    assert_eq!(
        fs::read(s1.join("metrics.jsonl")).unwrap(),
        fs::read(part.join("metrics.jsonl")).unwrap()
    );
    assert!(!part.join(".lock").exists());

    let s2 = ok(&tham(
        root,
        "s2",
        &[
            "train-stage2",
            "--data",
            s(&data),
            "--rlm",
            s(&ck("rlm")),
            "--hlm",
            s(&ck("hlm")),
            "--lm",
            s(&ck("lm")),
        ],
    ));
    let st2: serde_json::Value = serde_json::from_slice(&fs::read(s2.join("stage2.json")).unwrap()).unwrap();
    let rlm2 = PathBuf::from(st2["rlm"].as_str().unwrap());
    assert!(rlm2.is_file());

    let ev = ok(&tham(root, "ev", &["evaluate", "--data", s(&data), "--checkpoint", s(&rlm2)]));
    for f in ["metrics.json", "predictions.jsonl", "hallucination.csv"] {
        assert!(ev.join(f).is_file(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(m["n_examples"].as_u64().unwrap() > 0);

    let dg = ok(&tham(
        root,
        "dg",
        &["diagnose", "--data", s(&data), "--predictions", s(&ev.join("predictions.jsonl"))],
    ));
    assert!(dg.join("hallucination.json").is_file());

    let df = ok(&tham(
        root,
        "df",
        &[
            "dump-features",
            "--data",
            s(&data),
            "--rlm",
            s(&rlm2),
            "--hlm",
            s(&ck("hlm")),
            "--lm",
            s(&ck("lm")),
            "--n-samples",
            "20",
        ],
    ));
    let csv = fs::read_to_string(df.join("scatter.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("f,f_star,g"));
    assert_eq!(csv.lines().count(), 21);

    let p = ok(&tham(root, "p1", &["plot", "--run", s(&s1)]));
    assert!(p.join("loss_stage1.svg").is_file());
    let p = ok(&tham(root, "p2", &["plot", "--run", s(&df)]));
    assert!(p.join("scatter.svg").is_file());
}
