use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use twinspeech::config::RunConfig;

fn twinspeech(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinspeech"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::tiny();
    cfg.train.steps = 4;
    cfg.train.checkpoint_every = 2;
    let path = dir.join("tiny.cfg");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = twinspeech(&["pretrain", "--frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_command_is_a_usage_error() {
    let o = twinspeech(&[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let o = twinspeech(&["grad-check", "--set", "learning_rate=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_exits_cleanly() {
    let o = twinspeech(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("grad-check"));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = twinspeech(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("missing.dhck")),
        "--corpus",
        "x.tsv",
        "--noise",
        "y.tsv",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.dhck"));
}

#[test]
fn grad_check_reports_every_probe() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = twinspeech(&["grad-check", "--trials", "32", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(out.join("gradcheck.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 32);
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["rel_err"].as_f64().unwrap() < 1e-4);
    }
    let strict = twinspeech(&["grad-check", "--trials", "4", "--tol", "0", "--out", p(&out)]);
    assert_eq!(code(&strict), 2);
}

#[test]
fn pretrain_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["pretrain", "--config", &cfg, "--seed", "42", "--out", p(&out)];
        args.extend_from_slice(extra);
        let o = twinspeech(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let a = run("run1", &[]);
    let b = run("run2", &[]);
    let metrics = fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(String::from_utf8_lossy(&metrics).lines().count(), 4);
    assert_eq!(metrics, fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(
        fs::read(a.join("checkpoints/final.dhck")).unwrap(),
        fs::read(b.join("checkpoints/final.dhck")).unwrap()
    );

    let half = run("half", &["--steps", "2"]);
    let ckpt = half.join("checkpoints/step_00000002.dhck");
    let o = twinspeech(&[
        "pretrain",
        "--resume",
        p(&ckpt),
        "--corpus",
        p(&half.join("data/corpus.tsv")),
        "--noise",
        p(&half.join("data/noise.tsv")),
        "--codebook",
        p(&half.join("codebook.dhcb")),
        "--steps",
        "4",
        "--out",
        p(&half),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(half.join("metrics.jsonl")).unwrap(), metrics);
}

#[test]
fn stages_write_under_out_and_leave_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let train = dir.path().join("train");
    let o = twinspeech(&["pretrain", "--config", &cfg, "--out", p(&train)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let corpus = train.join("data/corpus.tsv");
    let noise = train.join("data/noise.tsv");
    let speech = train.join("data/speech/utt0000.wav");
    let before = fs::read(&speech).unwrap();

    let mix = dir.path().join("mix");
    let o = twinspeech(&[
        "mix",
        "--speech",
        p(&speech),
        "--noise",
        p(&train.join("data/noise/hum.wav")),
        "--snr",
        "-5",
        "--out",
        p(&mix),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(mix.join("mix.json")).unwrap()).unwrap();
    assert!((report["measured_snr_db"].as_f64().unwrap() + 5.0).abs() < 0.1);
    assert!(mix.join("mix.wav").exists());
    assert_eq!(fs::read(&speech).unwrap(), before);

    let units = dir.path().join("units");
    let o = twinspeech(&["units", "--corpus", p(&corpus), "--k", "5", "--out", p(&units)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(units.join("codebook.dhcb").exists());
    assert!(units.join("features/utt0000.dhft").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(units.join("units.json")).unwrap()).unwrap();
    assert_eq!(summary["k"], 5);

    let ckpt = train.join("checkpoints/final.dhck");
    let layer = dir.path().join("layer");
    let o = twinspeech(&[
        "units", "--corpus", p(&corpus), "--source", "layer:1", "--checkpoint", p(&ckpt), "--out",
        p(&layer),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(layer.join("codebook.dhcb").exists());

    let ev = dir.path().join("eval");
    let o = twinspeech(&[
        "eval", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--noise", p(&noise), "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let probe: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("probe.json")).unwrap()).unwrap();
    assert_eq!(probe["classes"], 3);
    assert_eq!(probe["k"], 5);
    assert_eq!(probe["n"], 200);

    let emb = dir.path().join("emb");
    let o = twinspeech(&[
        "export-embeddings", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--noise", p(&noise),
        "--assignment", "all", "--out", p(&emb),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = twinspeech::evaluation::import_embeddings(emb.join("embeddings.csv")).unwrap();
    assert_eq!(rows.len(), 600);
}
