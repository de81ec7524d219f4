use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DualEncoder;
use crate::error::{Error, Result};
use crate::tensor::{glorot, sigmoid, Bound, Mat, ParamSet, Tape, Var};
use crate::textproc::Caption;

/// Logits are clamped to this range before squashing so scores stay
/// strictly inside (0, 1).
const LOGIT_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarHeadConfig {
    pub d_hidden: usize,
}

impl Default for GrammarHeadConfig {
    fn default() -> Self {
        Self { d_hidden: 32 }
    }
}

/// Two-layer perceptron from a text embedding to P(grammatical).
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarHead {
    pub config: GrammarHeadConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarExample {
    pub caption: Caption,
    /// 1.0 for reference captions, 0.0 for synthetic negatives.
    pub label: f64,
}

impl GrammarExample {
    pub fn positive(caption: Caption) -> Self {
        Self { caption, label: 1.0 }
    }

    pub fn negative(caption: Caption) -> Self {
        Self { caption, label: 0.0 }
    }
}

impl GrammarHead {
    pub fn new<R: Rng + ?Sized>(config: GrammarHeadConfig, d_emb: usize, rng: &mut R) -> Result<Self> {
        if config.d_hidden == 0 || d_emb == 0 {
            return Err(Error::ConfigInvalid("grammar head dimensions must be positive".into()));
        }
        let mut params = ParamSet::new();
        params.push("w1", glorot(rng, d_emb, config.d_hidden));
        params.push("b1", Mat::zeros((1, config.d_hidden)));
        params.push("w2", glorot(rng, config.d_hidden, 1));
        params.push("b2", Mat::zeros((1, 1)));
        Ok(Self { config, params })
    }

    /// `n×1` logits for `n×d_emb` embeddings.
    pub(crate) fn logits(&self, tape: &mut Tape, p: Bound, emb: Var) -> Var {
        let h = tape.linear(emb, p.var(0), p.var(1));
        let h = tape.tanh(h);
        tape.linear(h, p.var(2), p.var(3))
    }

    pub fn score_ids(&self, enc: &DualEncoder, ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let pe = tape.bind(enc.params.values());
        let ph = tape.bind(self.params.values());
        let e = enc.text_tower(&mut tape, pe, ids)?;
        let z = self.logits(&mut tape, ph, e);
        Ok(sigmoid(tape.scalar_value(z).clamp(-LOGIT_LIMIT, LOGIT_LIMIT)))
    }

    /// g(c) in (0, 1).
    pub fn score(&self, enc: &DualEncoder, caption: &Caption) -> Result<f64> {
        self.score_ids(enc, &enc.vocab.encode(caption))
    }
}

/// Binary cross-entropy of probability `g` against label `y`.
pub fn bce(g: f64, y: f64) -> f64 {
    -y * g.ln() - (1.0 - y) * (1.0 - g).ln()
}

/// Mean BCE over `n×1` logits. The one-sided variant keeps only the
/// `-y log g` term.
pub(crate) fn bce_from_logits(tape: &mut Tape, logits: Var, labels: &[f64], one_sided: bool) -> Var {
    let n = labels.len();
    let y = tape.constant(Mat::from_shape_vec((n, 1), labels.to_vec()).unwrap());
    let per = if one_sided {
        // y * softplus(-z)
        let neg = tape.scale(logits, -1.0);
        let sp = tape.softplus(neg);
        tape.mul(sp, y)
    } else {
        // softplus(z) - y z
        let sp = tape.softplus(logits);
        let yz = tape.mul(logits, y);
        tape.sub(sp, yz)
    };
    tape.mean(per)
}

/// Grammar loss on a batch of labelled captions. Returns the loss and the
/// gradients of encoder and head parameters.
pub(crate) fn grammar_loss_on_tape(
    enc: &DualEncoder,
    head: &GrammarHead,
    tape: &mut Tape,
    pe: Bound,
    ph: Bound,
    examples: &[GrammarExample],
    one_sided: bool,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        rows.push(enc.text_tower(tape, pe, &enc.vocab.encode(&ex.caption))?);
    }
    let emb = tape.concat_rows(&rows);
    let z = head.logits(tape, ph, emb);
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    Ok(bce_from_logits(tape, z, &labels, one_sided))
}

impl DualEncoder {
    /// Mean grammar BCE and its gradients `(encoder, head)`.
    pub fn grammar_loss(
        &self,
        head: &GrammarHead,
        examples: &[GrammarExample],
        one_sided: bool,
    ) -> Result<(f64, Vec<Mat>, Vec<Mat>)> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut tape = Tape::new();
        let pe = tape.bind(self.params.values());
        let ph = tape.bind(head.params.values());
        let loss = grammar_loss_on_tape(self, head, &mut tape, pe, ph, examples, one_sided)?;
        let mut grads = tape.backward(loss);
        let ge = tape.block_grads(&mut grads, pe);
        let gh = tape.block_grads(&mut grads, ph);
        Ok((tape.scalar_value(loss), ge, gh))
    }
}
