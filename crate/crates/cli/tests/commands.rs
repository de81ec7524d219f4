use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use serde_json::Value;

use capreward_cli::cli::{captioner_run, Cli, Command as Sub};
use capreward_core::checkpoint::Checkpoint;
use capreward_core::data_io::{load_captions, load_world_split, write_captions, write_generations, GenerationRecord};
use capreward_core::dual_encoder::DualEncoder;
use capreward_core::metrics::cider_d;
use capreward_core::textproc::Caption;

fn capreward(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capreward"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn capreward")
}

fn ok(args: &[&str]) -> Output {
    let out = capreward(args);
    assert!(
        out.status.success(),
        "capreward {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn world(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("world{seed}"));
    ok(&["generate-world", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", &s(&out)]);
    out
}

#[test]
fn generate_world_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["generate-world", "--n", "30", "--seed", "4", "--out", &s(d)]);
    }
    for split in ["train.json", "val.json", "test.json"] {
        assert_eq!(std::fs::read(a.join(split)).unwrap(), std::fs::read(b.join(split)).unwrap());
    }
    let c = tmp.path().join("c");
    ok(&["generate-world", "--n", "30", "--seed", "5", "--out", &s(&c)]);
    assert_ne!(std::fs::read(a.join("train.json")).unwrap(), std::fs::read(c.join("train.json")).unwrap());
    let m = read_json(&a.join("manifest.json"));
    assert_eq!(m["command"], "generate-world");
    assert_eq!(m["config"]["world"]["n_images"], 30);
}

#[test]
fn usage_and_config_errors_have_distinct_exit_codes() {
    let out = capreward(&["generate-world", "--n", "30"]);
    assert_eq!(out.status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = capreward(&["generate-world", "--n", "5", "--out", &s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_images"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n[generate_world]\nworld = { n_images = 20, d_img = 8 }\n").unwrap();
    let out = tmp.path().join("w");
    ok(&["--config", &s(&cfg), "generate-world", "--n", "25", "--out", &s(&out)]);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["config"]["seed"], 3);
    assert_eq!(m["config"]["world"]["n_images"], 25);
    assert_eq!(m["config"]["world"]["d_img"], 8);
    let train = load_world_split(&out.join("train.json")).unwrap();
    assert_eq!(train.examples[0].image.features.len(), 8);

    std::fs::write(&cfg, "[generate_world]\nbogus = 1\n").unwrap();
    let bad = capreward(&["--config", &s(&cfg), "generate-world", "--out", &s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));
}

#[test]
fn negatives_are_exported_per_caption() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 20, 1);
    let out = tmp.path().join("neg");
    ok(&["generate-negatives", "--data", &s(&w.join("train.json")), "--seed", "2", "--out", &s(&out)]);
    let text = std::fs::read_to_string(out.join("negatives.jsonl")).unwrap();
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    let ops = ["repeat", "remove", "insert", "swap", "shuffle"];
    for r in &records {
        assert!(ops.contains(&r["operation"].as_str().unwrap()));
        assert!(r["original"].is_string() && r["negative"].is_string());
    }
}

fn encoder(dir: &Path, w: &Path) -> PathBuf {
    let out = dir.join("clip");
    ok(&["train-clip", "--data", &s(&w.join("train.json")), "--epochs", "2", "--seed", "1", "--out", &s(&out)]);
    out.join("encoder.ckpt")
}

fn load_encoder(p: &Path) -> (DualEncoder, bool) {
    let (enc, head) = DualEncoder::from_checkpoint(&Checkpoint::load(p).unwrap()).unwrap();
    (enc, head.is_some())
}

#[test]
fn grammar_finetuning_freezes_the_image_tower() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 40, 2);
    let clip = encoder(tmp.path(), &w);
    let report: Vec<Value> = std::fs::read_to_string(clip.with_file_name("report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(report.len(), 2);

    let out = tmp.path().join("grammar");
    ok(&[
        "finetune-grammar", "--clip-ckpt", &s(&clip), "--data", &s(&w.join("train.json")),
        "--val", &s(&w.join("val.json")), "--epochs", "3", "--seed", "1", "--out", &s(&out),
    ]);
    let (before, had_head) = load_encoder(&clip);
    let (after, has_head) = load_encoder(&out.join("encoder.ckpt"));
    assert!(!had_head && has_head);
    assert_eq!(before.image_tower_params(), after.image_tower_params());
    assert_ne!(before.params, after.params);
    let lines = std::fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let held = read_json(&out.join("held_out.json"));
    let acc = held["held_out_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let zero = tmp.path().join("zero");
    ok(&[
        "finetune-grammar", "--clip-ckpt", &s(&clip), "--data", &s(&w.join("train.json")),
        "--epochs", "0", "--out", &s(&zero),
    ]);
    let (same, _) = load_encoder(&zero.join("encoder.ckpt"));
    assert_eq!(same.params, before.params);
    assert_eq!(std::fs::read_to_string(zero.join("report.jsonl")).unwrap(), "");
}

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("capreward").chain(args.iter().copied())).unwrap()
}

#[test]
fn named_schedules_resolve() {
    let cli = parse(&["train-captioner", "--data", "x", "--schedule", "paper-schedule", "--out", "o"]);
    let Sub::TrainCaptioner(a) = &cli.command else { panic!() };
    let run = captioner_run(a, None).unwrap();
    assert_eq!((run.schedule.mle_epochs, run.schedule.rl_epochs), (15, 25));
    assert_eq!(run.schedule_name, "paper-schedule");

    let cli = parse(&["train-captioner", "--data", "x", "--schedule", "paper-schedule", "--rl-epochs", "3", "--out", "o"]);
    let Sub::TrainCaptioner(a) = &cli.command else { panic!() };
    assert_eq!(captioner_run(a, None).unwrap().schedule.rl_epochs, 3);

    let cli = parse(&["train-captioner", "--data", "x", "--schedule", "weekly", "--out", "o"]);
    let Sub::TrainCaptioner(a) = &cli.command else { panic!() };
    let err = captioner_run(a, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("paper-schedule"));
}

#[test]
fn train_captioner_checks_reward_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 30, 3);
    let out = capreward(&[
        "train-captioner", "--data", &s(&w.join("train.json")), "--reward", "clip_s_grammar", "--out",
        &s(&tmp.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--clip-ckpt"));

    let out = capreward(&[
        "train-captioner", "--data", &s(&w.join("train.json")), "--reward", "bleu", "--out",
        &s(&tmp.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mle_training_needs_no_encoder_and_generates() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 30, 4);
    let caps = tmp.path().join("caps");
    ok(&[
        "train-captioner", "--data", &s(&w.join("train.json")), "--reward", "mle", "--mle-epochs", "2",
        "--rl-epochs", "5", "--run-id", "m", "--out", &s(&caps),
    ]);
    let run = caps.join("m");
    for f in ["0.ckpt", "1.ckpt", "final.ckpt", "report.jsonl", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(!run.join("2.ckpt").exists(), "mle runs no RL epochs");
    let gen = tmp.path().join("gen");
    ok(&["generate", "--ckpt", &s(&run.join("final.ckpt")), "--data", &s(&w.join("test.json")), "--out", &s(&gen)]);
    let g = read_json(&gen.join("generations.json"));
    let test = load_world_split(&w.join("test.json")).unwrap();
    assert_eq!(g["records"].as_array().unwrap().len(), test.examples.len());

    let greedy = tmp.path().join("greedy");
    ok(&[
        "generate", "--ckpt", &s(&run.join("final.ckpt")), "--data", &s(&w.join("test.json")), "--method", "greedy",
        "--out", &s(&greedy),
    ]);
    assert_eq!(read_json(&greedy.join("manifest.json"))["config"]["beam"]["beam_size"], 1);
}

fn self_reference_inputs(dir: &Path, w: &Path) -> (PathBuf, PathBuf) {
    let test = load_world_split(&w.join("test.json")).unwrap();
    let refs: BTreeMap<u64, Vec<Caption>> =
        test.examples.iter().map(|e| (e.image.image_id, vec![e.references[0].clone()])).collect();
    let gens: Vec<GenerationRecord> = test
        .examples
        .iter()
        .map(|e| GenerationRecord {
            image_id: e.image.image_id,
            caption: e.references[0].text().to_owned(),
            total_logprob: 0.0,
            method: "beam".into(),
        })
        .collect();
    let (r, g) = (dir.join("refs.json"), dir.join("gens.json"));
    write_captions(&r, &refs).unwrap();
    write_generations(&g, &gens).unwrap();
    (r, g)
}

#[test]
fn evaluate_scores_references_against_themselves() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 60, 5);
    let (refs, gens) = self_reference_inputs(tmp.path(), &w);
    let out = tmp.path().join("eval");
    let printed = ok(&["evaluate", "--gen", &s(&gens), "--refs", &s(&refs), "--out", &s(&out)]);
    let table = String::from_utf8_lossy(&printed.stdout);
    assert!(table.contains("n-gram"), "{table}");
    let report = read_json(&out.join("eval.json"));
    let m = &report["metrics"];
    assert!((m["bleu4"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert!((m["rouge_l"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    // Short captions have no 4-grams, so the toy corpus stays below 10.
    let refs_map = load_captions(&refs).unwrap();
    let cands = refs_map.iter().map(|(id, r)| (*id, r[0].clone())).collect();
    let want = cider_d(&cands, &refs_map).unwrap().mean;
    assert_eq!(m["cider_d"].as_f64().unwrap(), want);
    assert!(want > 0.0 && want <= 10.0 + 1e-9);
    assert!(m.get("recall@1").is_none());
}

#[test]
fn evaluate_retrieval_columns_follow_ks() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 60, 6);
    let clip = encoder(tmp.path(), &w);
    let (_, gens) = self_reference_inputs(tmp.path(), &w);
    let out = tmp.path().join("eval");
    ok(&[
        "evaluate", "--gen", &s(&gens), "--refs", &s(&w.join("test.json")), "--fine-grained",
        &s(&w.join("test.json")), "--clip-ckpt", &s(&clip), "--ks", "1,2,3", "--out", &s(&out),
    ]);
    let report = read_json(&out.join("eval.json"));
    let keys: Vec<&String> = report["metrics"].as_object().unwrap().keys().filter(|k| k.starts_with("recall@")).collect();
    assert_eq!(keys.len(), 3);
    assert_eq!(report["retrieval_encoder"], "encoder.ckpt");
    for k in ["clip_s", "word_recall_background", "word_recall_object", "word_recall_relation"] {
        assert!(report["metrics"].get(k).is_some(), "{k} missing");
    }
}

#[test]
fn evaluate_rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 60, 7);
    let out = capreward(&["evaluate", "--refs", &s(&w.join("test.json"))]);
    assert_eq!(out.status.code(), Some(2));

    let (refs, gens) = self_reference_inputs(tmp.path(), &w);
    let out = capreward(&["evaluate", "--gen", &s(&gens)]);
    assert_eq!(out.status.code(), Some(2));

    let other = world(tmp.path(), 80, 8);
    let out = capreward(&["evaluate", "--gen", &s(&gens), "--refs", &s(&other.join("test.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("generations") && err.chars().any(|c| c.is_ascii_digit()), "{err}");

    let out = capreward(&["evaluate", "--gen", &s(&gens), "--refs", &s(&refs), "--ks", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_reproduces_and_detects_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 30, 9);
    let neg = tmp.path().join("neg");
    ok(&["generate-negatives", "--data", &s(&w.join("train.json")), "--out", &s(&neg)]);
    let again = tmp.path().join("again");
    ok(&["replay", "--manifest", &s(&neg.join("manifest.json")), "--out", &s(&again)]);
    assert_eq!(
        std::fs::read(neg.join("negatives.jsonl")).unwrap(),
        std::fs::read(again.join("negatives.jsonl")).unwrap()
    );

    let world_again = tmp.path().join("world-again");
    ok(&["replay", "--manifest", &s(&w.join("manifest.json")), "--out", &s(&world_again)]);

    std::fs::write(w.join("train.json"), b"{}").unwrap();
    let out = capreward(&["replay", "--manifest", &s(&neg.join("manifest.json")), "--out", &s(&again)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}
