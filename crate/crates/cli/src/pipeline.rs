//! In-process pipeline stages shared by the subcommands and the tests.

use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use capreward_core::captioner::{BeamConfig, Captioner, CaptionerConfig, DecodeMethod};
use capreward_core::data_io::{Criterion, DatasetSplit, FineGrainedAnnotation, GenerationRecord, ImageRecord};
use capreward_core::dual_encoder::{
    grammar_finetune, train_contrastive, ContrastiveTrainConfig, DualEncoder, DualEncoderConfig,
    EncoderEpochReport, FinetuneConfig, GrammarExample, GrammarHead, GrammarHeadConfig, TrainPair,
};
use capreward_core::metrics::{
    bleu4, cider_d, recall_key, repetition_rate, retrieval_recall, rouge_l, word_recall, EvalCounts, EvalReport,
    WordMatch,
};
use capreward_core::rl_trainer::{
    cider_stats, train, EpochReport, Estimator, RewardConfig, RewardKind, RewardModels, Schedule, ScstConfig,
    TrainConfig, TrainExample,
};
use capreward_core::seed::substream;
use capreward_core::textproc::{generate_negative, Caption, NegativeGenConfig, Vocabulary};
use capreward_core::{Error, Result};

/// Token used in place of an empty generation when scoring it.
pub const EMPTY_PLACEHOLDER: &str = "empty";

/// Every word of the training split: references plus distinctive captions.
pub fn world_vocab(split: &DatasetSplit) -> Result<Vocabulary> {
    let corpus: Vec<Caption> = split
        .examples
        .iter()
        .flat_map(|e| e.references.iter().cloned().chain([e.distinctive.clone()]))
        .collect();
    Vocabulary::build(&corpus, 1)
}

pub fn d_img_of(split: &DatasetSplit) -> Result<usize> {
    split
        .examples
        .first()
        .map(|e| e.image.features.len())
        .ok_or(Error::EmptyCorpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRun {
    pub seed: u64,
    pub encoder: DualEncoderConfig,
    pub train: ContrastiveTrainConfig,
}

impl Default for ClipRun {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: DualEncoderConfig::default(),
            train: ContrastiveTrainConfig::default(),
        }
    }
}

pub fn train_encoder(train_split: &DatasetSplit, run: &ClipRun) -> Result<(DualEncoder, Vec<EncoderEpochReport>)> {
    let mut cfg = run.encoder.clone();
    cfg.d_img = d_img_of(train_split)?;
    let enc = DualEncoder::new(cfg, world_vocab(train_split)?, &mut substream(run.seed, "clip/init"))?;
    let pairs = TrainPair::from_split(train_split);
    train_contrastive(&enc, &pairs, &run.train, &mut substream(run.seed, "clip/train"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarRun {
    pub seed: u64,
    pub head: GrammarHeadConfig,
    pub finetune: FinetuneConfig,
}

impl Default for GrammarRun {
    fn default() -> Self {
        Self {
            seed: 0,
            head: GrammarHeadConfig { d_hidden: 32 },
            finetune: FinetuneConfig::default(),
        }
    }
}

pub fn finetune_grammar(
    enc: &DualEncoder,
    train_split: &DatasetSplit,
    run: &GrammarRun,
) -> Result<(DualEncoder, GrammarHead, Vec<EncoderEpochReport>)> {
    let head = GrammarHead::new(run.head.clone(), enc.config.d_emb, &mut substream(run.seed, "grammar/init"))?;
    let pairs = TrainPair::from_split(train_split);
    grammar_finetune(enc, &head, &pairs, &run.finetune, &mut substream(run.seed, "grammar/train"))
}

/// Positives (references and distinctive captions) with one negative each,
/// for measuring held-out grammar accuracy.
pub fn grammar_eval_set(split: &DatasetSplit, vocab: &Vocabulary, cfg: &NegativeGenConfig) -> Vec<GrammarExample> {
    let mut rng = substream(cfg.rng_seed, "grammar/eval");
    let mut out = Vec::new();
    for ex in &split.examples {
        for cap in ex.references.iter().chain([&ex.distinctive]) {
            out.push(GrammarExample::positive(cap.clone()));
            match generate_negative(cap, vocab, cfg, &mut rng) {
                Ok(neg) => out.push(GrammarExample::negative(neg.caption)),
                Err(e) => debug!("no negative for {:?}: {e}", cap.text()),
            }
        }
    }
    out
}

/// Which objective the captioner is trained with after MLE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardChoice {
    Mle,
    Cider,
    ClipS,
    #[serde(alias = "cider_plus_clip_s")]
    CiderClipS,
    ClipSGrammar,
}

impl RewardChoice {
    pub const NAMES: [&'static str; 5] = ["mle", "cider", "clip_s", "cider_clip_s", "clip_s_grammar"];

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned())).ok()
    }

    pub fn kind(&self) -> Option<RewardKind> {
        match self {
            RewardChoice::Mle => None,
            RewardChoice::Cider => Some(RewardKind::Cider),
            RewardChoice::ClipS => Some(RewardKind::ClipS),
            RewardChoice::CiderClipS => Some(RewardKind::CiderPlusClipS),
            RewardChoice::ClipSGrammar => Some(RewardKind::ClipSGrammar),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionerRun {
    pub seed: u64,
    pub run_id: String,
    pub reward: RewardChoice,
    /// Name of the schedule the fields below started from.
    pub schedule_name: String,
    pub schedule: Schedule,
    pub captioner: CaptionerConfig,
    pub lambda: f64,
    pub mixing: f64,
    pub clip_w: f64,
    pub beam: BeamConfig,
    pub estimator: Estimator,
}

impl Default for CaptionerRun {
    fn default() -> Self {
        let reward = RewardConfig::new(RewardKind::ClipSGrammar);
        Self {
            seed: 0,
            run_id: "run".into(),
            reward: RewardChoice::Mle,
            schedule_name: "desk".into(),
            schedule: Schedule::desk(),
            captioner: CaptionerConfig::default(),
            lambda: reward.lambda,
            mixing: reward.mixing,
            clip_w: reward.clip.w,
            beam: BeamConfig::default(),
            estimator: Estimator::Beam,
        }
    }
}

impl CaptionerRun {
    pub fn reward_config(&self) -> Option<RewardConfig> {
        self.reward.kind().map(|kind| {
            let mut r = RewardConfig::new(kind);
            r.lambda = self.lambda;
            r.mixing = self.mixing;
            r.clip.w = self.clip_w;
            r
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut schedule = self.schedule.clone();
        if self.reward == RewardChoice::Mle {
            schedule.rl_epochs = 0;
        }
        TrainConfig {
            schedule,
            scst: self.reward_config().map(|reward| ScstConfig {
                reward,
                beam: self.beam,
                estimator: self.estimator,
            }),
            seed: self.seed,
            val_beam: self.beam,
        }
    }
}

/// Reward models for a captioner run. `encoder` is the (possibly
/// grammar-finetuned) dual encoder checkpoint content.
pub fn reward_models(
    run: &CaptionerRun,
    train_data: &[TrainExample],
    encoder: Option<(DualEncoder, Option<GrammarHead>)>,
) -> Result<RewardModels> {
    let mut models = RewardModels::default();
    if let Some((enc, head)) = encoder {
        models.encoder = Some(enc);
        models.grammar_head = head;
    }
    if run.reward.kind().is_some_and(|k| k.needs_references()) {
        models.cider = Some(cider_stats(train_data)?);
    }
    Ok(models)
}

/// Fresh captioner for a training split.
pub fn init_captioner(train_split: &DatasetSplit, run: &CaptionerRun) -> Result<Captioner> {
    let mut cfg = run.captioner.clone();
    cfg.d_img = d_img_of(train_split)?;
    Captioner::new(cfg, world_vocab(train_split)?, &mut substream(run.seed, "captioner/init"))
}

/// Runs the schedule of `run` starting from `init`.
pub fn train_captioner<F>(
    init: &Captioner,
    train_split: &DatasetSplit,
    val_split: Option<&DatasetSplit>,
    models: &RewardModels,
    run: &CaptionerRun,
    on_epoch: F,
) -> Result<(Captioner, Vec<EpochReport>)>
where
    F: FnMut(&Captioner, &EpochReport) -> Result<()>,
{
    let data = TrainExample::from_split(train_split);
    let val = val_split.map(TrainExample::from_split).unwrap_or_default();
    info!(
        "training captioner {} ({} parameters) on {} images",
        run.run_id,
        init.params.num_scalars(),
        data.len()
    );
    train(init, &data, &val, models, &run.train_config(), on_epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRun {
    pub seed: u64,
    pub method: DecodeMethod,
    pub beam: BeamConfig,
}

impl Default for GenerateRun {
    fn default() -> Self {
        Self {
            seed: 0,
            method: DecodeMethod::Beam,
            beam: BeamConfig::default(),
        }
    }
}

pub fn generate(captioner: &Captioner, images: &[ImageRecord], run: &GenerateRun) -> Result<Vec<GenerationRecord>> {
    let refs: Vec<&ImageRecord> = images.iter().collect();
    let decoded = match run.method {
        DecodeMethod::Beam => captioner.decode_batch(&refs, &run.beam),
        DecodeMethod::Greedy => captioner.decode_batch(&refs, &BeamConfig { beam_size: 1, ..run.beam }),
        DecodeMethod::Sample => {
            let mut rng = substream(run.seed, "generate/sample");
            refs.iter().map(|img| captioner.sample_decode(img, &mut rng)).collect()
        }
    };
    images
        .iter()
        .zip(decoded)
        .map(|(img, d)| {
            let d = d?;
            Ok(GenerationRecord {
                image_id: img.image_id,
                caption: d.caption(captioner).map(|c| c.text().to_owned()).unwrap_or_default(),
                total_logprob: d.total_logprob,
                method: run.method.as_str().to_owned(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRun {
    pub ks: Vec<usize>,
    pub word_match: WordMatch,
    pub clip_w: f64,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            word_match: WordMatch::Substring,
            clip_w: 2.5,
        }
    }
}

/// Everything `evaluate` can score against. At least one of `references`
/// and `fine_grained` must be present.
#[derive(Default)]
pub struct EvalInputs<'a> {
    pub references: Option<&'a BTreeMap<u64, Vec<Caption>>>,
    pub fine_grained: Option<&'a BTreeMap<u64, FineGrainedAnnotation>>,
    /// Encoder and image features for CLIP-S and retrieval.
    pub encoder: Option<(&'a DualEncoder, &'a BTreeMap<u64, ImageRecord>)>,
    pub encoder_name: Option<String>,
}

fn as_caption(text: &str) -> Caption {
    Caption::new(text).unwrap_or_else(|_| Caption::new(EMPTY_PLACEHOLDER).expect("placeholder is valid"))
}

fn check_ids<V>(gens: &BTreeMap<u64, String>, other: &BTreeMap<u64, V>, name: &str) -> Result<()> {
    let missing: Vec<u64> = other.keys().filter(|id| !gens.contains_key(id)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::IdMismatch {
            source_name: "generations".into(),
            ids: missing,
        });
    }
    let extra: Vec<u64> = gens.keys().filter(|id| !other.contains_key(id)).copied().collect();
    if !extra.is_empty() {
        return Err(Error::IdMismatch {
            source_name: name.into(),
            ids: extra,
        });
    }
    Ok(())
}

pub fn evaluate(gens: &BTreeMap<u64, String>, inputs: &EvalInputs<'_>, run: &EvaluateRun) -> Result<EvalReport> {
    if inputs.references.is_none() && inputs.fine_grained.is_none() {
        return Err(Error::MissingReferences(None));
    }
    let cands: BTreeMap<u64, Caption> = gens.iter().map(|(&id, t)| (id, as_caption(t))).collect();
    let mut n_refs = 0;
    if let Some(refs) = inputs.references {
        check_ids(gens, refs, "references")?;
        n_refs = refs.values().map(Vec::len).sum();
    }
    let mut report = EvalReport::new(EvalCounts {
        n_images: gens.len(),
        n_references: n_refs,
    });
    if let Some(refs) = inputs.references {
        report.insert("bleu4", bleu4(&cands, refs)?)?;
        report.insert("rouge_l", rouge_l(&cands, refs)?)?;
        if cands.len() >= 2 {
            report.insert("cider_d", cider_d(&cands, refs)?.mean)?;
        }
    }
    if let Some(fg) = inputs.fine_grained {
        check_ids(gens, fg, "fine-grained annotations")?;
        for (crit, key) in [
            (Criterion::Background, "word_recall_background"),
            (Criterion::Object, "word_recall_object"),
            (Criterion::Relation, "word_recall_relation"),
        ] {
            let phrases: BTreeMap<u64, Vec<String>> =
                fg.iter().map(|(&id, a)| (id, a.phrases(crit).to_vec())).collect();
            report.insert(key, word_recall(gens, &phrases, run.word_match)?)?;
        }
    }
    if let Some((enc, images)) = inputs.encoder {
        check_ids(gens, images, "images")?;
        let mut text_embs = BTreeMap::new();
        let mut image_embs = BTreeMap::new();
        let mut clip = 0.0;
        let cfg = capreward_core::dual_encoder::ClipScoreConfig { w: run.clip_w };
        for (id, cap) in &cands {
            let t = enc.encode_text(cap)?;
            let i = enc.encode_image(&images[id])?;
            clip += capreward_core::dual_encoder::clip_score(&cfg, &i, &t)?;
            text_embs.insert(*id, t);
            image_embs.insert(*id, i);
        }
        report.insert("clip_s", clip / cands.len() as f64)?;
        for (k, v) in retrieval_recall(&text_embs, &image_embs, &run.ks)? {
            report.insert(&recall_key(k), v)?;
        }
        report.retrieval_encoder = inputs.encoder_name.clone();
    }
    let rep: f64 = cands.values().map(|c| repetition_rate(c.tokens())).sum::<f64>() / cands.len().max(1) as f64;
    report.insert("repetition_rate", rep)?;
    Ok(report)
}
