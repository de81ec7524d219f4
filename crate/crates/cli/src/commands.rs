//! Subcommand executors. Each takes a resolved config, named input files
//! and an output directory, writes its files and returns their paths
//! relative to that directory. `run_job` wraps an executor with manifest
//! writing, `replay` re-executes a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use capreward_core::captioner::Captioner;
use capreward_core::checkpoint::Checkpoint;
use capreward_core::data_io::{
    generate_world, load_captions, load_fine_grained, load_generations, load_world_split, write_generations,
    write_json, write_world_split, ImageRecord, WorldConfig,
};
use capreward_core::dual_encoder::{grammar_accuracy, DualEncoder, GrammarHead};
use capreward_core::seed::substream;
use capreward_core::textproc::{generate_negative, Caption, NegativeGenConfig, Vocabulary};
use capreward_core::Error;

use crate::error::{CliError, CliResult};
use crate::manifest::{digest_inputs, digest_outputs, Manifest, MANIFEST_FORMAT};
use crate::pipeline::{
    evaluate, finetune_grammar, generate, grammar_eval_set, init_captioner, reward_models, train_captioner, train_encoder, CaptionerRun,
    ClipRun, EvalInputs, EvaluateRun, GenerateRun, GrammarRun,
};

pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const CAPTIONER_FINAL: &str = "final.ckpt";
pub const REPORT: &str = "report.jsonl";
pub const GENERATIONS: &str = "generations.json";
pub const EVAL_REPORT: &str = "eval.json";
pub const NEGATIVES: &str = "negatives.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldRun {
    pub seed: u64,
    pub world: WorldConfig,
}

impl Default for WorldRun {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NegativesRun {
    pub negatives: NegativeGenConfig,
}

/// One negative-corpus record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeRecord {
    pub image_id: u64,
    pub original: String,
    pub negative: String,
    pub operation: String,
}

fn input<'a>(inputs: &'a BTreeMap<String, PathBuf>, role: &str) -> CliResult<&'a Path> {
    inputs
        .get(role)
        .map(PathBuf::as_path)
        .ok_or_else(|| CliError::Usage(format!("missing input --{}", role.replace('_', "-"))))
}

fn config<T: DeserializeOwned>(value: &Value) -> CliResult<T> {
    serde_json::from_value(value.clone()).map_err(|e| CliError::Config(e.to_string()))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Config(e.to_string()))?;
        let _ = writeln!(text, "{line}");
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_encoder(path: &Path) -> CliResult<(DualEncoder, Option<GrammarHead>)> {
    Ok(DualEncoder::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn save_encoder(
    path: &Path,
    enc: &DualEncoder,
    head: Option<&GrammarHead>,
) -> CliResult<()> {
    enc.to_checkpoint(head)?.save(path)?;
    Ok(())
}

fn exec_generate_world(cfg: &WorldRun, out: &Path) -> CliResult<Vec<String>> {
    let world = generate_world(&cfg.world, cfg.seed)?;
    let mut files = Vec::new();
    for split in world.splits() {
        let name = format!("{}.json", split.name.as_str());
        write_world_split(&out.join(&name), split)?;
        files.push(name);
    }
    info!(
        "wrote {} train / {} val / {} test scenes to {}",
        world.train.len(),
        world.val.len(),
        world.test.len(),
        out.display()
    );
    Ok(files)
}

fn exec_generate_negatives(cfg: &NegativesRun, inputs: &BTreeMap<String, PathBuf>, out: &Path) -> CliResult<Vec<String>> {
    let captions = load_captions(input(inputs, "data")?)?;
    let corpus: Vec<Caption> = captions.values().flatten().cloned().collect();
    let vocab = Vocabulary::build(&corpus, 1)?;
    let mut rng = substream(cfg.negatives.rng_seed, "negatives/export");
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (&image_id, caps) in &captions {
        for cap in caps {
            match generate_negative(cap, &vocab, &cfg.negatives, &mut rng) {
                Ok(neg) => records.push(NegativeRecord {
                    image_id,
                    original: cap.text().to_owned(),
                    negative: neg.caption.text().to_owned(),
                    operation: neg.op.as_str().to_owned(),
                }),
                Err(Error::CaptionTooShort { .. }) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} captions shorter than {} tokens", cfg.negatives.min_len());
    }
    write_jsonl(&out.join(NEGATIVES), &records)?;
    Ok(vec![NEGATIVES.into()])
}

fn exec_train_clip(cfg: &ClipRun, inputs: &BTreeMap<String, PathBuf>, out: &Path) -> CliResult<Vec<String>> {
    let data = load_world_split(input(inputs, "data")?)?;
    let (enc, reports) = train_encoder(&data, cfg)?;
    save_encoder(&out.join(ENCODER_CKPT), &enc, None)?;
    write_jsonl(&out.join(REPORT), &reports)?;
    Ok(vec![ENCODER_CKPT.into(), REPORT.into()])
}

#[derive(Debug, Clone, Serialize)]
struct HeldOut {
    held_out_accuracy: f64,
    examples: usize,
}

fn exec_finetune_grammar(cfg: &GrammarRun, inputs: &BTreeMap<String, PathBuf>, out: &Path) -> CliResult<Vec<String>> {
    let (enc, _) = load_encoder(input(inputs, "clip_ckpt")?)?;
    let data = load_world_split(input(inputs, "data")?)?;
    let (enc, head, reports) = finetune_grammar(&enc, &data, cfg)?;
    save_encoder(&out.join(ENCODER_CKPT), &enc, Some(&head))?;
    write_jsonl(&out.join(REPORT), &reports)?;
    let mut files = vec![ENCODER_CKPT.to_string(), REPORT.to_string()];
    if let Some(val) = inputs.get("val") {
        let val = load_world_split(val)?;
        let set = grammar_eval_set(&val, &enc.vocab, &cfg.finetune.negatives);
        let acc = grammar_accuracy(&enc, &head, &set)?;
        info!("held-out grammar accuracy {acc:.4} on {} captions", set.len());
        write_json(
            &out.join("held_out.json"),
            &HeldOut {
                held_out_accuracy: acc,
                examples: set.len(),
            },
        )?;
        files.push("held_out.json".into());
    }
    Ok(files)
}

fn exec_train_captioner(cfg: &CaptionerRun, inputs: &BTreeMap<String, PathBuf>, out: &Path) -> CliResult<Vec<String>> {
    if let Some(kind) = cfg.reward.kind() {
        if kind.needs_encoder() && !inputs.contains_key("clip_ckpt") {
            return Err(CliError::Usage(format!(
                "--reward {} requires --clip-ckpt",
                serde_json::to_value(cfg.reward).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            )));
        }
    }
    let data = load_world_split(input(inputs, "data")?)?;
    let val = inputs.get("val").map(|p| load_world_split(p)).transpose()?;
    let encoder = inputs.get("clip_ckpt").map(|p| load_encoder(p)).transpose()?;
    let train_data = capreward_core::rl_trainer::TrainExample::from_split(&data);
    let models = reward_models(cfg, &train_data, encoder)?;
    let mut files = Vec::new();
    let mut report_lines = Vec::new();
    let init = match inputs.get("init_ckpt") {
        Some(p) => Captioner::from_checkpoint(&Checkpoint::load(p)?)?,
        None => init_captioner(&data, cfg)?,
    };
    let (model, _) = train_captioner(&init, &data, val.as_ref(), &models, cfg, |m, r| {
        let name = format!("{}.ckpt", r.epoch);
        m.to_checkpoint()?.save(&out.join(&name))?;
        files.push(name);
        report_lines.push(r.clone());
        Ok(())
    })?;
    model.to_checkpoint()?.save(&out.join(CAPTIONER_FINAL))?;
    files.push(CAPTIONER_FINAL.into());
    write_jsonl(&out.join(REPORT), &report_lines)?;
    files.push(REPORT.into());
    Ok(files)
}

fn exec_generate(cfg: &GenerateRun, inputs: &BTreeMap<String, PathBuf>, out: &Path) -> CliResult<Vec<String>> {
    let model = Captioner::from_checkpoint(&Checkpoint::load(input(inputs, "ckpt")?)?)?;
    let data = load_world_split(input(inputs, "data")?)?;
    let records = generate(&model, &data.images(), cfg)?;
    let empty = records.iter().filter(|r| r.caption.is_empty()).count();
    if empty > 0 {
        warn!("{empty} generations are empty");
    }
    write_generations(&out.join(GENERATIONS), &records)?;
    Ok(vec![GENERATIONS.into()])
}

/// Evaluation as a value, shared by the subcommand and `--out`-less use.
pub fn evaluate_files(
    cfg: &EvaluateRun,
    inputs: &BTreeMap<String, PathBuf>,
) -> CliResult<capreward_core::metrics::EvalReport> {
    let gens: BTreeMap<u64, String> = load_generations(input(inputs, "gen")?)?
        .into_iter()
        .map(|r| (r.image_id, r.caption))
        .collect();
    let refs = inputs.get("refs").map(|p| load_captions(p)).transpose()?;
    let fine = inputs.get("fine_grained").map(|p| load_fine_grained(p)).transpose()?;
    if refs.is_none() && fine.is_none() {
        return Err(CliError::Usage("evaluate needs --refs or --fine-grained".into()));
    }
    let encoder = inputs.get("clip_ckpt").map(|p| load_encoder(p)).transpose()?;
    let images: Option<BTreeMap<u64, ImageRecord>> = match &encoder {
        None => None,
        Some(_) => {
            let source = ["images", "refs", "fine_grained"]
                .iter()
                .filter_map(|r| inputs.get(*r))
                .find_map(|p| load_world_split(p).ok())
                .ok_or_else(|| {
                    CliError::Usage("CLIP-S and retrieval need image features: pass a world split via --images".into())
                })?;
            Some(source.images().into_iter().map(|i| (i.image_id, i)).collect())
        }
    };
    let eval_inputs = EvalInputs {
        references: refs.as_ref(),
        fine_grained: fine.as_ref(),
        encoder: encoder.as_ref().zip(images.as_ref()).map(|((e, _), i)| (e, i)),
        encoder_name: inputs
            .get("clip_ckpt")
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned()),
    };
    Ok(evaluate(&gens, &eval_inputs, cfg)?)
}

fn exec_evaluate(cfg: &EvaluateRun, inputs: &BTreeMap<String, PathBuf>, out: &Path) -> CliResult<Vec<String>> {
    let report = evaluate_files(cfg, inputs)?;
    print!("{}", report.render_table());
    write_json(&out.join(EVAL_REPORT), &report)?;
    Ok(vec![EVAL_REPORT.into()])
}

pub const COMMANDS: [&str; 7] = [
    "generate-world",
    "generate-negatives",
    "train-clip",
    "finetune-grammar",
    "train-captioner",
    "generate",
    "evaluate",
];

/// Runs `command` with a resolved config. Returns output paths relative
/// to `out`.
pub fn execute(command: &str, cfg: &Value, inputs: &BTreeMap<String, PathBuf>, out: &Path) -> CliResult<Vec<String>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match command {
        "generate-world" => exec_generate_world(&config(cfg)?, out),
        "generate-negatives" => exec_generate_negatives(&config(cfg)?, inputs, out),
        "train-clip" => exec_train_clip(&config(cfg)?, inputs, out),
        "finetune-grammar" => exec_finetune_grammar(&config(cfg)?, inputs, out),
        "train-captioner" => exec_train_captioner(&config(cfg)?, inputs, out),
        "generate" => exec_generate(&config(cfg)?, inputs, out),
        "evaluate" => exec_evaluate(&config(cfg)?, inputs, out),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

/// Executes and writes `out/manifest.json`.
pub fn run_job<C: Serialize>(
    command: &str,
    cfg: &C,
    inputs: &BTreeMap<String, PathBuf>,
    out: &Path,
) -> CliResult<Manifest> {
    let config = serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let input_digests = digest_inputs(inputs)?;
    let files = execute(command, &config, inputs, out)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config,
        inputs: input_digests,
        outputs: digest_outputs(out, &files)?,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// Re-executes a manifest into `out` and checks every output digest.
pub fn replay(manifest_path: &Path, out: &Path) -> CliResult<Manifest> {
    let original = Manifest::load(manifest_path)?;
    let inputs = original.verified_inputs()?;
    let fresh = run_job(&original.command, &original.config, &inputs, out)?;
    let diff = fresh.output_differences(&original);
    if !diff.is_empty() {
        return Err(CliError::Replay(format!("outputs differ from the manifest: {}", diff.join(", "))));
    }
    Ok(fresh)
}
