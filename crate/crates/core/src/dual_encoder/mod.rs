//! Toy contrastive image-text encoder used as a reference-free reward.
//!
//! The image tower is a two-layer MLP over feature vectors. The text tower
//! embeds `[BOS] tokens [EOS]` with learned position vectors, mixes each
//! adjacent pair of positions through one tanh layer (so word order
//! matters), pools the bigram features by mean and max, and projects to the
//! shared embedding space.

mod grammar;
mod train;

pub use grammar::{bce, GrammarExample, GrammarHead, GrammarHeadConfig};
pub use train::{
    grammar_accuracy, grammar_finetune, train_contrastive, ContrastiveTrainConfig, EncoderEpochReport,
    FinetuneConfig, TrainPair,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_io::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::{glorot, Bound, Mat, ParamSet, Tape, Var};
use crate::textproc::{Caption, Vocabulary, BOS, EOS};

pub const CHECKPOINT_KIND: &str = "dual_encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderConfig {
    pub d_img: usize,
    pub d_tok: usize,
    pub d_hidden: usize,
    pub d_emb: usize,
    /// Longest caption (in words) the text tower accepts.
    pub max_tokens: usize,
    /// Fixed softmax temperature of the contrastive objective.
    pub temperature: f64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            d_img: 64,
            d_tok: 32,
            d_hidden: 64,
            d_emb: 32,
            max_tokens: 40,
            temperature: 0.07,
        }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_img == 0 || self.d_tok == 0 || self.d_hidden == 0 || self.d_emb == 0 || self.max_tokens == 0 {
            return Err(Error::ConfigInvalid("dual encoder dimensions must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::ConfigInvalid("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// CLIP-S scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipScoreConfig {
    pub w: f64,
}

impl Default for ClipScoreConfig {
    fn default() -> Self {
        Self { w: 2.5 }
    }
}

// Parameter order; the first four make up the image tower.
const IMG_W1: usize = 0;
const IMG_B1: usize = 1;
const IMG_W2: usize = 2;
const IMG_B2: usize = 3;
const TXT_TOK: usize = 4;
const TXT_POS: usize = 5;
const TXT_MIX_A: usize = 6;
const TXT_MIX_B: usize = 7;
const TXT_MIX_BIAS: usize = 8;
const TXT_PROJ: usize = 9;
const TXT_PROJ_B: usize = 10;

pub const IMAGE_TOWER_PARAMS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: DualEncoderConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    encoder: DualEncoderConfig,
    vocab: Vocabulary,
    grammar_head: Option<GrammarHeadConfig>,
}

impl DualEncoder {
    pub fn new<R: Rng + ?Sized>(config: DualEncoderConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let v = vocab.len();
        let mut p = ParamSet::new();
        p.push("image.w1", glorot(rng, c.d_img, c.d_hidden));
        p.push("image.b1", Mat::zeros((1, c.d_hidden)));
        p.push("image.w2", glorot(rng, c.d_hidden, c.d_emb));
        p.push("image.b2", Mat::zeros((1, c.d_emb)));
        p.push("text.tok", crate::tensor::randn(rng, v, c.d_tok, 0.5));
        p.push("text.pos", crate::tensor::randn(rng, c.max_tokens + 2, c.d_tok, 0.5));
        p.push("text.mix_a", glorot(rng, c.d_tok, c.d_hidden));
        p.push("text.mix_b", glorot(rng, c.d_tok, c.d_hidden));
        p.push("text.mix_bias", Mat::zeros((1, c.d_hidden)));
        p.push("text.proj", glorot(rng, 2 * c.d_hidden, c.d_emb));
        p.push("text.proj_b", Mat::zeros((1, c.d_emb)));
        Ok(Self {
            config,
            vocab,
            params: p,
        })
    }

    /// Which parameters belong to the text tower (trainable during grammar
    /// finetuning).
    pub fn text_tower_mask(&self) -> Vec<bool> {
        (0..self.params.len()).map(|i| i >= IMAGE_TOWER_PARAMS).collect()
    }

    pub fn image_tower_params(&self) -> &[Mat] {
        &self.params.values()[..IMAGE_TOWER_PARAMS]
    }

    pub(crate) fn image_tower(&self, tape: &mut Tape, p: Bound, x: Var) -> Var {
        let h = tape.linear(x, p.var(IMG_W1), p.var(IMG_B1));
        let h = tape.tanh(h);
        tape.linear(h, p.var(IMG_W2), p.var(IMG_B2))
    }

    pub(crate) fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyCaption);
        }
        if ids.len() > self.config.max_tokens {
            return Err(Error::CaptionTooLong {
                len: ids.len(),
                max: self.config.max_tokens,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(Error::parse("text tower", format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// `1×d_emb` text embedding of word ids (without BOS/EOS).
    pub(crate) fn text_tower(&self, tape: &mut Tape, p: Bound, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let mut seq = Vec::with_capacity(ids.len() + 2);
        seq.push(BOS);
        seq.extend_from_slice(ids);
        seq.push(EOS);
        let m = seq.len();
        let tok = tape.gather(p.var(TXT_TOK), &seq);
        let pos = tape.slice_rows(p.var(TXT_POS), 0, m);
        let h = tape.add(tok, pos);
        let left = tape.slice_rows(h, 0, m - 1);
        let right = tape.slice_rows(h, 1, m - 1);
        let a = tape.matmul(left, p.var(TXT_MIX_A));
        let b = tape.matmul(right, p.var(TXT_MIX_B));
        let ab = tape.add(a, b);
        let pre = tape.add_row(ab, p.var(TXT_MIX_BIAS));
        let u = tape.tanh(pre);
        let mean = tape.mean_rows(u);
        let max = tape.max_rows(u);
        let pooled = tape.concat_cols(&[mean, max]);
        Ok(tape.linear(pooled, p.var(TXT_PROJ), p.var(TXT_PROJ_B)))
    }

    pub fn encode_image(&self, image: &ImageRecord) -> Result<Vec<f64>> {
        if image.features.len() != self.config.d_img {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_img,
                got: image.features.len(),
            });
        }
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let x = tape.constant(Mat::from_shape_vec((1, self.config.d_img), image.features.clone()).unwrap());
        let e = self.image_tower(&mut tape, p, x);
        Ok(tape.value(e).row(0).to_vec())
    }

    pub fn encode_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let e = self.text_tower(&mut tape, p, ids)?;
        Ok(tape.value(e).row(0).to_vec())
    }

    pub fn encode_text(&self, caption: &Caption) -> Result<Vec<f64>> {
        self.encode_ids(&self.vocab.encode(caption))
    }

    pub fn clip_s(&self, cfg: &ClipScoreConfig, image: &ImageRecord, caption: &Caption) -> Result<f64> {
        clip_score(cfg, &self.encode_image(image)?, &self.encode_text(caption)?)
    }

    pub fn to_checkpoint(&self, head: Option<&GrammarHead>) -> Result<Checkpoint> {
        let stored = StoredConfig {
            encoder: self.config.clone(),
            vocab: self.vocab.clone(),
            grammar_head: head.map(|h| h.config.clone()),
        };
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, &stored)?;
        ck.add_params("encoder", &self.params);
        if let Some(h) = head {
            ck.add_params("grammar_head", &h.params);
        }
        Ok(ck)
    }

    /// Restores an encoder and, when present, its grammar head.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<GrammarHead>)> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let stored: StoredConfig = ck.config_as()?;
        let mut rng = crate::seed::substream(0, "checkpoint-template");
        let template = Self::new(stored.encoder, stored.vocab, &mut rng)?;
        let params = ck.extract_params("encoder", &template.params)?;
        let enc = Self { params, ..template };
        let head = match stored.grammar_head {
            Some(hc) => {
                let t = GrammarHead::new(hc, enc.config.d_emb, &mut rng)?;
                let params = ck.extract_params("grammar_head", &t.params)?;
                Some(GrammarHead { params, ..t })
            }
            None => None,
        };
        if !enc.params.all_finite() {
            return Err(Error::Checkpoint("non-finite encoder weights".into()));
        }
        Ok((enc, head))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `w * max(cos(image, text), 0)`
pub fn clip_score(cfg: &ClipScoreConfig, image_emb: &[f64], text_emb: &[f64]) -> Result<f64> {
    Ok(cfg.w * cosine(image_emb, text_emb)?.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;

    pub(crate) fn toy_vocab() -> Vocabulary {
        let words = "a big small red blue cube sphere on the grass sand left of";
        Vocabulary::from_words(words.split(' ').map(String::from)).unwrap()
    }

    fn small_config() -> DualEncoderConfig {
        DualEncoderConfig {
            d_img: 6,
            d_tok: 5,
            d_hidden: 7,
            d_emb: 4,
            max_tokens: 12,
            temperature: 0.07,
        }
    }

    #[test]
    fn zero_image_maps_to_zero_embedding() {
        let enc = DualEncoder::new(small_config(), toy_vocab(), &mut substream(1, "t")).unwrap();
        let img = ImageRecord {
            image_id: 0,
            features: vec![0.0; 6],
        };
        assert!(enc.encode_image(&img).unwrap().iter().all(|&v| v == 0.0));
        let bad = ImageRecord {
            image_id: 0,
            features: vec![0.0; 5],
        };
        assert!(matches!(
            enc.encode_image(&bad),
            Err(Error::DimensionMismatch { expected: 6, got: 5 })
        ));
    }

    #[test]
    fn encoders_are_pure() {
        let enc = DualEncoder::new(small_config(), toy_vocab(), &mut substream(2, "t")).unwrap();
        let img = ImageRecord {
            image_id: 3,
            features: vec![0.3, -0.1, 0.7, 0.0, 1.0, -0.4],
        };
        assert_eq!(enc.encode_image(&img).unwrap(), enc.encode_image(&img).unwrap());
        let c = Caption::new("a big red cube").unwrap();
        assert_eq!(enc.encode_text(&c).unwrap(), enc.encode_text(&c).unwrap());
        let single = enc.encode_text(&Caption::new("cube").unwrap()).unwrap();
        assert_eq!(single.len(), 4);
        assert!(single.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn text_tower_is_order_sensitive() {
        let enc = DualEncoder::new(small_config(), toy_vocab(), &mut substream(3, "t")).unwrap();
        let words = enc.vocab.words().to_vec();
        let mut rng = substream(4, "captions");
        let mut checked = 0;
        while checked < 100 {
            let n = rng.random_range(2..8);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..words.len()) + 4).collect();
            let rev: Vec<usize> = ids.iter().rev().copied().collect();
            if rev == ids {
                continue;
            }
            assert_ne!(enc.encode_ids(&ids).unwrap(), enc.encode_ids(&rev).unwrap());
            checked += 1;
        }
    }

    #[test]
    fn clip_score_examples() {
        let cfg = ClipScoreConfig::default();
        assert!((clip_score(&cfg, &[1.0, 2.0], &[1.0, 2.0]).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(clip_score(&cfg, &[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        // cosine -0.3
        let b = [-0.3, (1.0f64 - 0.09).sqrt()];
        assert_eq!(clip_score(&cfg, &[1.0, 0.0], &b).unwrap(), 0.0);
        assert!(matches!(clip_score(&cfg, &[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroEmbedding)));
    }

    #[test]
    fn checkpoint_round_trip_with_and_without_head() {
        let mut rng = substream(5, "t");
        let enc = DualEncoder::new(small_config(), toy_vocab(), &mut rng).unwrap();
        let head = GrammarHead::new(GrammarHeadConfig { d_hidden: 3 }, 4, &mut rng).unwrap();
        let ck = enc.to_checkpoint(Some(&head)).unwrap();
        let (e2, h2) = DualEncoder::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(e2, enc);
        assert_eq!(h2.unwrap(), head);
        let (_, none) = DualEncoder::from_checkpoint(&enc.to_checkpoint(None).unwrap()).unwrap();
        assert!(none.is_none());
    }
}
