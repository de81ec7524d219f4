//! Self-critical policy-gradient training of the captioner.
//!
//! Each SCST step decodes every image twice: greedily for the baseline and
//! with beam search for the sequence that is reinforced. The surrogate loss
//! `-(R(beam) - R(greedy)) * log P(beam)` is summed over the batch; decoding
//! choices and reward models receive no gradient.

mod reward;

pub use reward::{combine_reward, compute_reward, RewardBreakdown, RewardConfig, RewardKind, RewardModels};

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captioner::{BeamConfig, Captioner, DecodeResult, MleExample};
use crate::data_io::{DatasetSplit, ImageRecord};
use crate::error::{Error, Result};
use crate::metrics::{bleu4, cider_d, repetition_rate, rouge_l, CiderStats};
use crate::seed::{substream, StreamRng};
use crate::tensor::{clip_global_norm, sum_grads, Mat, OptimizerConfig, Tape};
use crate::textproc::Caption;

/// An image with its reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub image: ImageRecord,
    pub references: Vec<Caption>,
}

impl TrainExample {
    pub fn from_split(split: &DatasetSplit) -> Vec<TrainExample> {
        split
            .examples
            .iter()
            .map(|e| TrainExample {
                image: e.image.clone(),
                references: e.references.clone(),
            })
            .collect()
    }
}

/// Document frequencies for the CIDEr reward, taken from training references.
pub fn cider_stats(data: &[TrainExample]) -> Result<CiderStats> {
    CiderStats::from_references(data.iter().map(|e| e.references.as_slice()))
}

/// Which sequence is reinforced against the greedy baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Beam,
    /// Multinomial sampling, for ablations.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScstConfig {
    pub reward: RewardConfig,
    /// Shared by SCST decoding and evaluation.
    pub beam: BeamConfig,
    pub estimator: Estimator,
}

impl ScstConfig {
    pub fn new(kind: RewardKind) -> Self {
        Self {
            reward: RewardConfig::new(kind),
            beam: BeamConfig::default(),
            estimator: Estimator::Beam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScstSample {
    pub image_id: u64,
    pub greedy: DecodeResult,
    pub chosen: DecodeResult,
    /// Reward of the reinforced sequence with the greedy baseline attached.
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScstOutcome {
    pub loss: f64,
    pub grads: Vec<Mat>,
    pub samples: Vec<ScstSample>,
    /// Samples skipped because a reward could not be computed.
    pub dropped: Vec<(u64, String)>,
}

/// `-advantage * log P(tokens | image)` and its gradient. A zero advantage
/// short-circuits to exact zeros.
pub fn surrogate_loss_and_grads(
    captioner: &Captioner,
    image: &ImageRecord,
    tokens: &[usize],
    advantage: f64,
) -> Result<(f64, Vec<Mat>)> {
    if advantage == 0.0 {
        return Ok((0.0, captioner.params.zeros_like()));
    }
    let mut tape = Tape::new();
    let p = tape.bind(captioner.params.values());
    let lp = captioner.sequence_logprob(&mut tape, p, image, tokens)?;
    let loss = tape.scale(lp, -advantage);
    let mut g = tape.backward(loss);
    Ok((tape.scalar_value(loss), tape.block_grads(&mut g, p)))
}

fn reward_of(
    cfg: &RewardConfig,
    models: &RewardModels,
    captioner: &Captioner,
    ex: &TrainExample,
    decoded: &DecodeResult,
) -> Result<RewardBreakdown> {
    let caption = decoded.caption(captioner).ok_or(Error::EmptyCaption)?;
    compute_reward(cfg, models, &ex.image, &caption, Some(&ex.references))
}

enum SampleResult {
    Kept(ScstSample, f64, Vec<Mat>),
    Dropped(u64, String),
}

fn scst_one(
    captioner: &Captioner,
    ex: &TrainExample,
    models: &RewardModels,
    cfg: &ScstConfig,
    sample_seed: u64,
) -> Result<SampleResult> {
    let greedy = captioner.greedy_decode(&ex.image)?;
    let chosen = match cfg.estimator {
        Estimator::Beam => captioner.beam_search_with(&ex.image, &cfg.beam)?,
        Estimator::Sample => captioner.sample_decode(&ex.image, &mut StreamRng::seed_from_u64(sample_seed))?,
    };
    let rewards = reward_of(&cfg.reward, models, captioner, ex, &greedy)
        .and_then(|g| Ok((g, reward_of(&cfg.reward, models, captioner, ex, &chosen)?)));
    let (r_greedy, r_chosen) = match rewards {
        Ok(r) => r,
        Err(e) => return Ok(SampleResult::Dropped(ex.image.image_id, e.to_string())),
    };
    let reward = r_chosen.with_baseline(r_greedy.combined);
    let advantage = reward.advantage.expect("baseline attached");
    let (loss, grads) = surrogate_loss_and_grads(captioner, &ex.image, &chosen.tokens, advantage)?;
    Ok(SampleResult::Kept(
        ScstSample {
            image_id: ex.image.image_id,
            greedy,
            chosen,
            reward,
        },
        loss,
        grads,
    ))
}

/// One SCST batch: rewards, advantages, summed surrogate loss and its
/// gradient. Per-sample work runs in parallel; results are reduced in batch
/// order.
pub fn scst_step<R: Rng + ?Sized>(
    captioner: &Captioner,
    batch: &[&TrainExample],
    models: &RewardModels,
    cfg: &ScstConfig,
    rng: &mut R,
) -> Result<ScstOutcome> {
    models.check(&cfg.reward)?;
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let results: Vec<Result<SampleResult>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(ex, &seed)| scst_one(captioner, ex, models, cfg, seed))
        .collect();
    let mut out = ScstOutcome {
        loss: 0.0,
        grads: captioner.params.zeros_like(),
        samples: Vec::with_capacity(batch.len()),
        dropped: Vec::new(),
    };
    for r in results {
        match r? {
            SampleResult::Kept(sample, loss, grads) => {
                if sample.reward.advantage != Some(0.0) {
                    out.loss += loss;
                    sum_grads(&mut out.grads, &grads);
                }
                out.samples.push(sample);
            }
            SampleResult::Dropped(id, why) => {
                warn!("dropping image {id} from SCST batch: {why}");
                out.dropped.push((id, why));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub mle_epochs: usize,
    pub rl_epochs: usize,
    pub batch_size: usize,
    pub mle_optimizer: OptimizerConfig,
    pub rl_optimizer: OptimizerConfig,
    /// Global gradient norm limit applied before every update.
    pub grad_clip: Option<f64>,
}

impl Schedule {
    pub const NAMES: [&'static str; 2] = ["paper-schedule", "desk"];

    /// 15 MLE epochs followed by 25 RL epochs.
    pub fn full() -> Self {
        Self {
            mle_epochs: 15,
            rl_epochs: 25,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            mle_epochs: 15,
            rl_epochs: 10,
            batch_size: 32,
            mle_optimizer: OptimizerConfig::adam(2e-3),
            rl_optimizer: OptimizerConfig::Sgd { lr: 0.05 },
            grad_clip: Some(5.0),
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "paper-schedule" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    /// Required when the schedule has RL epochs.
    pub scst: Option<ScstConfig>,
    pub seed: u64,
    /// Decoding used for validation metrics.
    pub val_beam: BeamConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Mle,
    Rl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// Counts across both phases, starting at 0.
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub mean_reward: Option<f64>,
    pub mean_advantage: Option<f64>,
    pub dropped: usize,
    pub val_metrics: BTreeMap<String, f64>,
}

fn validate_run(captioner: &Captioner, data: &[TrainExample], models: &RewardModels, cfg: &TrainConfig) -> Result<()> {
    if cfg.schedule.batch_size == 0 {
        return Err(Error::ConfigInvalid("batch_size must be at least 1".into()));
    }
    if cfg.schedule.mle_epochs + cfg.schedule.rl_epochs == 0 {
        return Ok(());
    }
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for ex in data {
        if ex.image.features.len() != captioner.config.d_img {
            return Err(Error::DimensionMismatch {
                expected: captioner.config.d_img,
                got: ex.image.features.len(),
            });
        }
        for r in &ex.references {
            captioner.target_ids(r)?;
        }
    }
    if cfg.schedule.mle_epochs > 0 {
        if let Some(ex) = data.iter().find(|e| e.references.is_empty()) {
            return Err(Error::MissingReferences(Some(ex.image.image_id)));
        }
    }
    if cfg.schedule.rl_epochs > 0 {
        let scst = cfg
            .scst
            .as_ref()
            .ok_or_else(|| Error::ConfigInvalid("RL epochs scheduled without a reward".into()))?;
        models.check(&scst.reward)?;
        if scst.reward.kind.needs_references() {
            if let Some(ex) = data.iter().find(|e| e.references.is_empty()) {
                return Err(Error::MissingReferences(Some(ex.image.image_id)));
            }
        }
    }
    Ok(())
}

/// Validation metrics of beam (or greedy) captions.
pub fn validation_metrics(
    captioner: &Captioner,
    val: &[TrainExample],
    models: &RewardModels,
    reward: Option<&RewardConfig>,
    beam: &BeamConfig,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if val.is_empty() {
        return Ok(out);
    }
    let images: Vec<&ImageRecord> = val.iter().map(|e| &e.image).collect();
    let decoded = captioner.decode_batch(&images, beam);
    let mut cands = BTreeMap::new();
    let mut refs = BTreeMap::new();
    let mut rewards = Vec::new();
    let mut reps = Vec::new();
    let mut empty = 0usize;
    for (ex, d) in val.iter().zip(decoded) {
        let d = d?;
        match d.caption(captioner) {
            Some(c) => {
                reps.push(repetition_rate(c.tokens()));
                if let Some(rc) = reward {
                    if let Ok(r) = compute_reward(rc, models, &ex.image, &c, Some(&ex.references)) {
                        rewards.push(r.combined);
                    }
                }
                if !ex.references.is_empty() {
                    cands.insert(ex.image.image_id, c);
                    refs.insert(ex.image.image_id, ex.references.clone());
                }
            }
            None => empty += 1,
        }
    }
    out.insert("empty_captions".into(), empty as f64);
    if !reps.is_empty() {
        out.insert("repetition_rate".into(), reps.iter().sum::<f64>() / reps.len() as f64);
    }
    if !rewards.is_empty() {
        out.insert("reward".into(), rewards.iter().sum::<f64>() / rewards.len() as f64);
    }
    if !cands.is_empty() {
        out.insert("bleu4".into(), bleu4(&cands, &refs)?);
        out.insert("rouge_l".into(), rouge_l(&cands, &refs)?);
        if cands.len() >= 2 {
            out.insert("cider_d".into(), cider_d(&cands, &refs)?.mean);
        }
    }
    Ok(out)
}

fn apply(opt: &mut (dyn crate::tensor::Optimizer + Send), captioner: &mut Captioner, mut grads: Vec<Mat>, clip: Option<f64>) {
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    let trainable = vec![true; grads.len()];
    opt.step(captioner.params.values_mut(), &grads, &trainable);
}

/// MLE epochs then SCST epochs. `on_epoch` runs after every epoch with the
/// current weights, e.g. to write checkpoints.
pub fn train<F>(
    captioner: &Captioner,
    data: &[TrainExample],
    val: &[TrainExample],
    models: &RewardModels,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Captioner, Vec<EpochReport>)>
where
    F: FnMut(&Captioner, &EpochReport) -> Result<()>,
{
    validate_run(captioner, data, models, cfg)?;
    let mut model = captioner.clone();
    let mut reports = Vec::new();
    let sched = &cfg.schedule;
    let reward_cfg = cfg.scst.as_ref().map(|s| &s.reward).filter(|_| sched.rl_epochs > 0);

    let mut rng = substream(cfg.seed, "captioner/mle");
    let mut opt = sched.mle_optimizer.build();
    let pairs: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.references.len()).map(move |j| (i, j)))
        .collect();
    for epoch in 0..sched.mle_epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<MleExample> = chunk
                .iter()
                .map(|&(i, j)| MleExample {
                    image: &data[i].image,
                    caption: &data[i].references[j],
                })
                .collect();
            let (loss, grads) = model.mle_batch(&batch)?;
            apply(opt.as_mut(), &mut model, grads, sched.grad_clip);
            total += loss;
            batches += 1;
        }
        let report = EpochReport {
            epoch,
            phase: Phase::Mle,
            mean_loss: total / batches as f64,
            mean_reward: None,
            mean_advantage: None,
            dropped: 0,
            val_metrics: validation_metrics(&model, val, models, reward_cfg, &cfg.val_beam)?,
        };
        info!("mle epoch {epoch}: loss {:.4}", report.mean_loss);
        on_epoch(&model, &report)?;
        reports.push(report);
    }

    if sched.rl_epochs > 0 {
        let scst = cfg.scst.as_ref().expect("validated");
        let mut rng = substream(cfg.seed, "captioner/rl");
        let mut opt = sched.rl_optimizer.build();
        for k in 0..sched.rl_epochs {
            let mut order: Vec<&TrainExample> = data.iter().collect();
            order.shuffle(&mut rng);
            let (mut loss, mut reward, mut adv, mut n, mut dropped) = (0.0, 0.0, 0.0, 0usize, 0usize);
            for chunk in order.chunks(sched.batch_size) {
                let out = scst_step(&model, chunk, models, scst, &mut rng)?;
                loss += out.loss;
                dropped += out.dropped.len();
                for s in &out.samples {
                    reward += s.reward.combined;
                    adv += s.reward.advantage.unwrap_or(0.0);
                    n += 1;
                }
                apply(opt.as_mut(), &mut model, out.grads, sched.grad_clip);
            }
            let nf = n as f64;
            let mean = |x: f64| (n > 0).then(|| x / nf);
            let report = EpochReport {
                epoch: sched.mle_epochs + k,
                phase: Phase::Rl,
                mean_loss: mean(loss).unwrap_or(0.0),
                mean_reward: mean(reward),
                mean_advantage: mean(adv),
                dropped,
                val_metrics: validation_metrics(&model, val, models, reward_cfg, &cfg.val_beam)?,
            };
            info!(
                "rl epoch {}: reward {:?} advantage {:?} dropped {dropped}",
                report.epoch, report.mean_reward, report.mean_advantage
            );
            on_epoch(&model, &report)?;
            reports.push(report);
        }
    }
    Ok((model, reports))
}
