use std::collections::HashSet;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grammar::grammar_loss_on_tape;
use super::{DualEncoder, GrammarExample, GrammarHead};
use crate::data_io::{DatasetSplit, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Mat, OptimizerConfig, Tape, Var};
use crate::textproc::{generate_negative, Caption, NegativeGenConfig};

/// An image with every caption that may be paired with it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub image: ImageRecord,
    pub captions: Vec<Caption>,
}

impl TrainPair {
    /// Distinctive caption plus the salient references of every example.
    pub fn from_split(split: &DatasetSplit) -> Vec<TrainPair> {
        split
            .examples
            .iter()
            .map(|ex| {
                let mut captions = vec![ex.distinctive.clone()];
                captions.extend(ex.references.iter().cloned());
                TrainPair {
                    image: ex.image.clone(),
                    captions,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ContrastiveTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(3e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Use only the `-y log g` term of the grammar objective.
    pub one_sided_bce: bool,
    pub negatives: NegativeGenConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(2e-3),
            one_sided_bce: false,
            negatives: NegativeGenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpochReport {
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub contrastive: f64,
    pub grammar: Option<f64>,
    pub grammar_accuracy: Option<f64>,
    pub skipped_negatives: usize,
}

/// Symmetric InfoNCE over the in-batch cosine matrix.
pub(crate) fn contrastive_loss_on_tape(
    enc: &DualEncoder,
    tape: &mut Tape,
    p: Bound,
    images: &[&ImageRecord],
    texts: &[Vec<usize>],
) -> Result<Var> {
    let n = images.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut seen = HashSet::with_capacity(n);
    for img in images {
        if !seen.insert(img.image_id) {
            return Err(Error::DuplicateImage(img.image_id));
        }
        if img.features.len() != enc.config.d_img {
            return Err(Error::DimensionMismatch {
                expected: enc.config.d_img,
                got: img.features.len(),
            });
        }
    }
    let mut x = Mat::zeros((n, enc.config.d_img));
    for (r, img) in images.iter().enumerate() {
        x.row_mut(r).assign(&ndarray::ArrayView1::from(&img.features[..]));
    }
    let x = tape.constant(x);
    let ei = enc.image_tower(tape, p, x);
    let mut rows = Vec::with_capacity(n);
    for ids in texts {
        rows.push(enc.text_tower(tape, p, ids)?);
    }
    let et = tape.concat_rows(&rows);
    let ni = tape.normalize_rows(ei);
    let nt = tape.normalize_rows(et);
    let sims = tape.matmul_t(ni, nt);
    let logits = tape.scale(sims, 1.0 / enc.config.temperature);
    Ok(symmetric_cross_entropy(tape, logits))
}

/// Mean of row-wise and column-wise cross-entropy with the diagonal as target.
pub(crate) fn symmetric_cross_entropy(tape: &mut Tape, logits: Var) -> Var {
    let n = tape.value(logits).nrows();
    let diag: Vec<usize> = (0..n).collect();
    let i2t = tape.log_softmax_rows(logits);
    let i2t = tape.pick(i2t, &diag);
    let i2t = tape.mean(i2t);
    let lt = tape.transpose(logits);
    let t2i = tape.log_softmax_rows(lt);
    let t2i = tape.pick(t2i, &diag);
    let t2i = tape.mean(t2i);
    let sum = tape.add(i2t, t2i);
    tape.scale(sum, -0.5)
}

impl DualEncoder {
    /// Contrastive loss of a batch of distinct-image pairs and its gradients.
    pub fn contrastive_loss(&self, batch: &[(&ImageRecord, &Caption)]) -> Result<(f64, Vec<Mat>)> {
        let images: Vec<&ImageRecord> = batch.iter().map(|(i, _)| *i).collect();
        let texts: Vec<Vec<usize>> = batch.iter().map(|(_, c)| self.vocab.encode(c)).collect();
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let loss = contrastive_loss_on_tape(self, &mut tape, p, &images, &texts)?;
        let mut grads = tape.backward(loss);
        Ok((tape.scalar_value(loss), tape.block_grads(&mut grads, p)))
    }
}

/// One caption per image, images in a fresh random order, chunked.
fn epoch_batches<R: Rng + ?Sized>(data: &[TrainPair], batch_size: usize, rng: &mut R) -> Vec<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let picks: Vec<(usize, usize)> = order
        .into_iter()
        .map(|i| (i, rng.random_range(0..data[i].captions.len())))
        .collect();
    picks
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn validate_pairs(data: &[TrainPair]) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::BatchTooSmall(data.len()));
    }
    if let Some(p) = data.iter().find(|p| p.captions.is_empty()) {
        return Err(Error::EmptyEntry(p.image.image_id));
    }
    Ok(())
}

/// Contrastive pretraining of both towers.
pub fn train_contrastive<R: Rng + ?Sized>(
    enc: &DualEncoder,
    data: &[TrainPair],
    cfg: &ContrastiveTrainConfig,
    rng: &mut R,
) -> Result<(DualEncoder, Vec<EncoderEpochReport>)> {
    let mut enc = enc.clone();
    if cfg.epochs == 0 {
        return Ok((enc, Vec::new()));
    }
    validate_pairs(data)?;
    let mut opt = cfg.optimizer.build();
    let trainable = vec![true; enc.params.len()];
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data, cfg.batch_size, rng);
        for batch in &batches {
            let pairs: Vec<(&ImageRecord, &Caption)> =
                batch.iter().map(|&(i, c)| (&data[i].image, &data[i].captions[c])).collect();
            let (loss, grads) = enc.contrastive_loss(&pairs)?;
            opt.step(enc.params.values_mut(), &grads, &trainable);
            total += loss;
        }
        let mean = total / batches.len() as f64;
        info!("contrastive epoch {epoch}: loss {mean:.4}");
        reports.push(EncoderEpochReport {
            epoch,
            phase: "contrastive".into(),
            loss: mean,
            contrastive: mean,
            grammar: None,
            grammar_accuracy: None,
            skipped_negatives: 0,
        });
    }
    Ok((enc, reports))
}

/// Jointly finetunes the text tower and grammar head on the contrastive
/// objective plus grammar BCE. The image tower is frozen. Each epoch draws
/// one fresh negative per sampled reference caption.
pub fn grammar_finetune<R: Rng + ?Sized>(
    enc: &DualEncoder,
    head: &GrammarHead,
    data: &[TrainPair],
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<(DualEncoder, GrammarHead, Vec<EncoderEpochReport>)> {
    let mut enc = enc.clone();
    let mut head = head.clone();
    if cfg.epochs == 0 {
        return Ok((enc, head, Vec::new()));
    }
    validate_pairs(data)?;
    cfg.negatives.validate()?;
    let mut opt_enc = cfg.optimizer.build();
    let mut opt_head = cfg.optimizer.build();
    let enc_mask = enc.text_tower_mask();
    let head_mask = vec![true; head.params.len()];
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut sum_c, mut sum_g, mut correct, mut seen, mut skipped) = (0.0, 0.0, 0usize, 0usize, 0usize);
        let batches = epoch_batches(data, cfg.batch_size, rng);
        for batch in &batches {
            let images: Vec<&ImageRecord> = batch.iter().map(|&(i, _)| &data[i].image).collect();
            let captions: Vec<&Caption> = batch.iter().map(|&(i, c)| &data[i].captions[c]).collect();
            let texts: Vec<Vec<usize>> = captions.iter().map(|c| enc.vocab.encode(c)).collect();
            let mut examples: Vec<GrammarExample> =
                captions.iter().map(|c| GrammarExample::positive((*c).clone())).collect();
            for c in &captions {
                match generate_negative(c, &enc.vocab, &cfg.negatives, rng) {
                    Ok(neg) => examples.push(GrammarExample::negative(neg.caption)),
                    Err(e @ Error::CaptionTooShort { .. }) => {
                        debug!("no negative for {:?}: {e}", c.text());
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            let mut tape = Tape::new();
            let pe = tape.bind(enc.params.values());
            let ph = tape.bind(head.params.values());
            let lc = contrastive_loss_on_tape(&enc, &mut tape, pe, &images, &texts)?;
            let lg = grammar_loss_on_tape(&enc, &head, &mut tape, pe, ph, &examples, cfg.one_sided_bce)?;
            let total = tape.add(lc, lg);
            let mut grads = tape.backward(total);
            let ge = tape.block_grads(&mut grads, pe);
            let gh = tape.block_grads(&mut grads, ph);
            sum_c += tape.scalar_value(lc);
            sum_g += tape.scalar_value(lg);
            drop(tape);
            for ex in &examples {
                let g = head.score(&enc, &ex.caption)?;
                correct += usize::from((g >= 0.5) == (ex.label == 1.0));
                seen += 1;
            }
            opt_enc.step(enc.params.values_mut(), &ge, &enc_mask);
            opt_head.step(head.params.values_mut(), &gh, &head_mask);
        }
        let nb = batches.len() as f64;
        let acc = correct as f64 / seen.max(1) as f64;
        info!(
            "grammar epoch {epoch}: contrastive {:.4} grammar {:.4} train acc {acc:.3}",
            sum_c / nb,
            sum_g / nb
        );
        reports.push(EncoderEpochReport {
            epoch,
            phase: "grammar_finetune".into(),
            loss: (sum_c + sum_g) / nb,
            contrastive: sum_c / nb,
            grammar: Some(sum_g / nb),
            grammar_accuracy: Some(acc),
            skipped_negatives: skipped,
        });
    }
    Ok((enc, head, reports))
}

/// Fraction of captions classified correctly at threshold 0.5.
pub fn grammar_accuracy(enc: &DualEncoder, head: &GrammarHead, examples: &[GrammarExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut correct = 0usize;
    for ex in examples {
        let g = head.score(enc, &ex.caption)?;
        correct += usize::from((g >= 0.5) == (ex.label == 1.0));
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_world, WorldConfig};
    use crate::dual_encoder::{DualEncoderConfig, GrammarHeadConfig};
    use crate::seed::substream;
    use crate::textproc::Vocabulary;

    fn setup(n: usize) -> (DualEncoder, Vec<TrainPair>) {
        let world = generate_world(&WorldConfig::with_images(n), 11).unwrap();
        let pairs = TrainPair::from_split(&world.train);
        let corpus: Vec<Caption> = pairs.iter().flat_map(|p| p.captions.iter().cloned()).collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let enc = DualEncoder::new(DualEncoderConfig::default(), vocab, &mut substream(1, "enc")).unwrap();
        (enc, pairs)
    }

    #[test]
    fn uniform_similarities_give_log_n() {
        for n in [2usize, 3, 7] {
            let mut tape = Tape::new();
            let logits = tape.constant(Mat::from_elem((n, n), 0.37));
            let l = symmetric_cross_entropy(&mut tape, logits);
            assert!((tape.scalar_value(l) - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_limit_goes_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.constant(Mat::eye(2) * 1e3);
        let l = symmetric_cross_entropy(&mut tape, logits);
        assert!(tape.scalar_value(l) < 1e-12);
    }

    #[test]
    fn batch_contract() {
        let (enc, pairs) = setup(20);
        let one = [(&pairs[0].image, &pairs[0].captions[0])];
        assert!(matches!(enc.contrastive_loss(&one), Err(Error::BatchTooSmall(1))));
        let dup = [
            (&pairs[0].image, &pairs[0].captions[0]),
            (&pairs[0].image, &pairs[0].captions[1]),
        ];
        assert!(matches!(enc.contrastive_loss(&dup), Err(Error::DuplicateImage(_))));
        let ok = [
            (&pairs[0].image, &pairs[0].captions[0]),
            (&pairs[1].image, &pairs[1].captions[0]),
        ];
        let (loss, _) = enc.contrastive_loss(&ok).unwrap();
        assert!(loss >= 0.0);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (enc, pairs) = setup(20);
        let mut rng = substream(2, "t");
        let head = GrammarHead::new(GrammarHeadConfig::default(), 32, &mut rng).unwrap();
        let cfg = ContrastiveTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (e2, reports) = train_contrastive(&enc, &pairs, &cfg, &mut rng).unwrap();
        assert_eq!(e2, enc);
        assert!(reports.is_empty());
        let fcfg = FinetuneConfig {
            epochs: 0,
            ..Default::default()
        };
        let (e3, h3, _) = grammar_finetune(&enc, &head, &pairs, &fcfg, &mut rng).unwrap();
        assert_eq!(e3, enc);
        assert_eq!(h3, head);
    }

    #[test]
    fn finetuning_freezes_image_tower_bitwise() {
        let (enc, pairs) = setup(40);
        let mut rng = substream(3, "t");
        let head = GrammarHead::new(GrammarHeadConfig::default(), 32, &mut rng).unwrap();
        let cfg = FinetuneConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let (e2, h2, reports) = grammar_finetune(&enc, &head, &pairs, &cfg, &mut rng).unwrap();
        assert_eq!(reports.len(), 2);
        for (a, b) in enc.image_tower_params().iter().zip(e2.image_tower_params()) {
            let bits = |m: &Mat| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_ne!(enc.params.values()[super::super::TXT_TOK], e2.params.values()[super::super::TXT_TOK]);
        assert_ne!(head, h2);
    }

    #[test]
    fn contrastive_training_reduces_loss() {
        let (enc, pairs) = setup(60);
        let cfg = ContrastiveTrainConfig {
            epochs: 8,
            batch_size: 12,
            ..Default::default()
        };
        let (_, reports) = train_contrastive(&enc, &pairs, &cfg, &mut substream(4, "t")).unwrap();
        assert!(reports.last().unwrap().loss < reports[0].loss);
    }

    fn small_encoder() -> (DualEncoder, Vec<TrainPair>) {
        let world = generate_world(&WorldConfig::with_images(10), 5).unwrap();
        let mut pairs = TrainPair::from_split(&world.train);
        pairs.truncate(3);
        let corpus: Vec<Caption> = pairs.iter().flat_map(|p| p.captions.iter().cloned()).collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let cfg = DualEncoderConfig {
            d_img: 64,
            d_tok: 3,
            d_hidden: 4,
            d_emb: 3,
            max_tokens: 30,
            temperature: 0.5,
        };
        (DualEncoder::new(cfg, vocab, &mut substream(6, "fd")).unwrap(), pairs)
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let (enc, pairs) = small_encoder();
        let batch: Vec<(&ImageRecord, &Caption)> = pairs.iter().map(|p| (&p.image, &p.captions[0])).collect();
        let (_, grads) = enc.contrastive_loss(&batch).unwrap();
        let err = crate::tensor::max_fd_error(enc.params.values(), &grads, |vals| {
            let mut e = enc.clone();
            e.params.values_mut().clone_from_slice(vals);
            e.contrastive_loss(&batch).unwrap().0
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn grammar_gradients_match_finite_differences() {
        let (enc, pairs) = small_encoder();
        let head = GrammarHead::new(GrammarHeadConfig { d_hidden: 3 }, 3, &mut substream(7, "fd")).unwrap();
        let examples = vec![
            GrammarExample::positive(pairs[0].captions[0].clone()),
            GrammarExample::negative(pairs[1].captions[1].clone()),
            GrammarExample::positive(pairs[2].captions[2].clone()),
        ];
        for one_sided in [false, true] {
            let (_, ge, gh) = enc.grammar_loss(&head, &examples, one_sided).unwrap();
            let err = crate::tensor::max_fd_error(enc.params.values(), &ge, |vals| {
                let mut e = enc.clone();
                e.params.values_mut().clone_from_slice(vals);
                e.grammar_loss(&head, &examples, one_sided).unwrap().0
            });
            assert!(err < 1e-6, "encoder error {err}");
            let err = crate::tensor::max_fd_error(head.params.values(), &gh, |vals| {
                let mut h = head.clone();
                h.params.values_mut().clone_from_slice(vals);
                enc.grammar_loss(&h, &examples, one_sided).unwrap().0
            });
            assert!(err < 1e-6, "head error {err}");
        }
    }
}
