use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kamir_core::awareness::{export_traces, read_awareness_csv};
use kamir_core::lm::{checkpoint_bytes, HiddenStateTrace, PositionKind};
use kamir_core::pipeline::PipelineConfig;
use kamir_core::MiniLmModel;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn kamir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kamir")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config() -> PipelineConfig {
    let text = std::fs::read_to_string(fixture("tiny.toml")).unwrap();
    toml::from_str(&text).unwrap()
}

fn run_ok(args: &[&str]) {
    let o = kamir(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn select(out: &Path, seed: &str, threads: &str) {
    run_ok(&[
        "select",
        "--config",
        s(&fixture("tiny.toml")),
        "--model",
        s(&fixture("model.bin")),
        "--classifier",
        s(&fixture("classifier.bin")),
        "--corpus",
        s(&fixture("target.jsonl")),
        "--seed",
        seed,
        "--threads",
        threads,
        "--out",
        s(out),
    ]);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&kamir(&["bogus"])), 1);
    assert_eq!(code(&kamir(&["extract", "--corpus", "x.jsonl"])), 1);
    assert_eq!(code(&kamir(&["sft", "--model", "m", "--manifest", "m", "--group", "middle"])), 1);
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[extract]\nchunk_length = 3\n").unwrap();
    let o = kamir(&["report", "--config", s(&cfg), "--input", "a.csv", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("chunk_length"));
    let o = kamir(&["train-clf", "--input", "a.csv", "--batch-size", "0", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn help_is_exit_0_and_defaults_match_config() {
    let d = PipelineConfig::default();
    let help = |sub: &str| String::from_utf8(kamir(&[sub, "--help"]).stdout).unwrap();
    let o = kamir(&["--help"]);
    assert_eq!(code(&o), 0);
    let p = help("pretrain");
    assert!(p.contains(&format!("[default: {}]", d.pretrain.train.steps)));
    assert!(p.contains(&format!("[default: {}]", d.pretrain.train.lr)));
    assert!(p.contains(&format!("[default: {}]", d.model.n_layers)));
    assert!(p.contains(&format!("[default: {}]", d.model.hidden_dim)));
    let e = help("extract");
    assert!(e.contains(&format!("[default: {}]", d.extract.chunk_len)));
    assert!(e.contains(&format!("[default: {}]", d.extract.max_output)));
    let t = help("train-clf");
    let c = &d.classifier;
    assert!(t.contains(&format!("[default: {}]", c.train.epochs)));
    assert!(t.contains(&format!("[default: {}]", c.train.lr)));
    assert!(t.contains(&format!("[default: {}]", c.train.batch_size)));
    assert!(t.contains(&format!("[default: {}]", c.train.threshold)));
    assert!(t.contains(&format!("[default: {}]", c.test_fraction)));
    assert!(t.contains(&format!("[default: {}]", c.train.hidden[0])));
    let f = help("sft");
    assert!(f.contains(&format!("[default: {}]", d.sft.steps)));
    assert!(f.contains(&format!("[default: {}]", d.sft.lr)));
    assert!(f.contains(&format!("[default: {}]", d.sft.batch_size)));
    assert!(f.contains(&format!("[default: {}]", d.lora.rank)));
    assert!(f.contains(&format!("[default: {}]", d.lora.alpha)));
    assert!(f.contains("[default: q_proj,v_proj]"));
}

#[test]
fn missing_corpus_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = kamir(&["pretrain", "--corpus", "does/not/exist.jsonl", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("exist.jsonl"));
}

#[test]
fn zero_step_pretraining_reproduces_initialization() {
    let dir = TempDir::new().unwrap();
    run_ok(&[
        "pretrain",
        "--config",
        s(&fixture("tiny.toml")),
        "--corpus",
        s(&fixture("pretrain.jsonl")),
        "--steps",
        "0",
        "--seed",
        "11",
        "--out",
        s(dir.path()),
    ]);
    let mut cfg = tiny_config().model;
    cfg.seed = 11;
    let init = checkpoint_bytes(&MiniLmModel::new(cfg).unwrap()).unwrap();
    assert_eq!(std::fs::read(dir.path().join("model.bin")).unwrap(), init);
    let resolved = std::fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap();
    let back: PipelineConfig = toml::from_str(&resolved).unwrap();
    assert_eq!(back.pretrain.train.steps, 0);
    assert_eq!(back.pretrain.seed, 11);
}

#[test]
fn extract_writes_one_row_per_document() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("two.jsonl");
    std::fs::write(
        &corpus,
        "{\"id\":\"x\",\"text\":\"The old fox crossed the river.\"}\n{\"id\":\"y\",\"text\":\"zrae|KVOI12 qu\"}\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    run_ok(&[
        "extract",
        "--config",
        s(&fixture("tiny.toml")),
        "--model",
        s(&fixture("model.bin")),
        "--corpus",
        s(&corpus),
        "--label",
        "unfamiliar",
        "--out",
        s(&out),
    ]);
    let rows = read_awareness_csv(&out.join("awareness.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].doc_id, "x");
    assert_eq!(rows[1].values.len(), tiny_config().model.n_layers - 1);
    assert!(out.join("resolved_config.toml").exists());
}

#[test]
fn extract_from_imported_traces() {
    let dir = TempDir::new().unwrap();
    let traces = vec![
        HiddenStateTrace::new(
            "t0",
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            PositionKind::FinalGeneratedToken,
        )
        .unwrap(),
        HiddenStateTrace::new(
            "t1",
            vec![vec![2.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]],
            PositionKind::FinalGeneratedToken,
        )
        .unwrap(),
    ];
    let path = dir.path().join("traces.bin");
    export_traces(&traces, &path).unwrap();
    let out = dir.path().join("out");
    run_ok(&["extract", "--traces", s(&path), "--out", s(&out)]);
    let rows = read_awareness_csv(&out.join("awareness.csv")).unwrap();
    let h = std::f32::consts::FRAC_1_SQRT_2;
    assert_eq!(rows[0].values, vec![h, h]);
    assert_eq!(rows[1].values, vec![1.0, -1.0]);

    std::fs::write(&path, b"KAMIRHS1\x01").unwrap();
    assert_eq!(code(&kamir(&["extract", "--traces", s(&path), "--out", s(&out)])), 2);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let mut outs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("t{threads}"));
        run_ok(&[
            "extract",
            "--config",
            s(&fixture("tiny.toml")),
            "--model",
            s(&fixture("model.bin")),
            "--corpus",
            s(&fixture("labeled.jsonl")),
            "--threads",
            threads,
            "--out",
            s(&out.join("aw")),
        ]);
        select(&out.join("sel"), "3", threads);
        outs.push(out);
    }
    for f in ["aw/awareness.csv", "sel/manifest.json", "sel/predictions.csv", "sel/awareness.csv"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between thread counts");
    }
}

#[test]
fn selection_with_fixed_seed_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    select(&a, "7", "2");
    select(&b, "7", "2");
    select(&c, "8", "2");
    let read = |p: &Path| std::fs::read_to_string(p.join("manifest.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    let m: serde_json::Value = serde_json::from_str(&read(&a)).unwrap();
    let m8: serde_json::Value = serde_json::from_str(&read(&c)).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["familiar_ids"], m8["familiar_ids"]);
    let resolved: PipelineConfig =
        toml::from_str(&std::fs::read_to_string(a.join("resolved_config.toml")).unwrap()).unwrap();
    assert_eq!(resolved.select.seed, 7);
}

#[test]
fn sft_runs_and_empty_group_fails() {
    let dir = TempDir::new().unwrap();
    let sel = dir.path().join("sel");
    select(&sel, "7", "1");
    let manifest = sel.join("manifest.json");
    let out = dir.path().join("sft");
    run_ok(&[
        "sft",
        "--config",
        s(&fixture("tiny.toml")),
        "--model",
        s(&fixture("model.bin")),
        "--manifest",
        s(&manifest),
        "--group",
        "familiar",
        "--steps",
        "2",
        "--out",
        s(&out),
    ]);
    let summary = std::fs::read_to_string(out.join("dynamics_summary.csv")).unwrap();
    assert!(summary.starts_with("group,mean_loss,mean_entropy,mean_grad_norm\n"));
    assert_eq!(summary.lines().count(), 4);
    let dynamics = std::fs::read_to_string(out.join("dynamics.csv")).unwrap();
    assert_eq!(dynamics.lines().count(), 3);

    let rep = dir.path().join("rep");
    run_ok(&[
        "report",
        "--input",
        s(&sel.join("awareness.csv")),
        "--dynamics",
        s(&out.join("dynamics_summary.csv")),
        "--out",
        s(&rep),
    ]);
    assert!(rep.join("report.md").exists());
    assert!(rep.join("profiles.svg").exists());

    let mut m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["familiar_ids"] = serde_json::json!([]);
    let emptied = dir.path().join("empty.json");
    std::fs::write(&emptied, m.to_string()).unwrap();
    let o = kamir(&[
        "sft",
        "--config",
        s(&fixture("tiny.toml")),
        "--model",
        s(&fixture("model.bin")),
        "--manifest",
        s(&emptied),
        "--group",
        "familiar",
        "--out",
        s(&dir.path().join("sft2")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("familiar"));
}

#[test]
fn mismatched_stages_are_rejected_before_work() {
    let dir = TempDir::new().unwrap();
    let o = kamir(&[
        "select",
        "--model",
        s(&fixture("model.bin")),
        "--classifier",
        s(&fixture("classifier.bin")),
        "--corpus",
        s(&fixture("target.jsonl")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("chunk_len"));

    let mut cfg = tiny_config().model;
    cfg.n_layers = 4;
    let deeper = dir.path().join("deeper.bin");
    std::fs::write(&deeper, checkpoint_bytes(&MiniLmModel::new(cfg).unwrap()).unwrap()).unwrap();
    let out = dir.path().join("sel");
    let o = kamir(&[
        "select",
        "--config",
        s(&fixture("tiny.toml")),
        "--model",
        s(&deeper),
        "--classifier",
        s(&fixture("classifier.bin")),
        "--corpus",
        s(&fixture("target.jsonl")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("predictions.csv").exists());
}

#[test]
fn synth_writes_three_corpora() {
    let dir = TempDir::new().unwrap();
    run_ok(&["synth", "--n-pretrain", "3", "--n-heldout", "2", "--n-target", "1", "--out", s(dir.path())]);
    let lines = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!(lines("pretrain.jsonl"), 3);
    assert_eq!(lines("labeled.jsonl"), 4);
    assert_eq!(lines("target.jsonl"), 2);
}
