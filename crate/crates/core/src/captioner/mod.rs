//! Transformer encoder-decoder captioner.
//!
//! The image feature vector is projected to a single encoder token. Both
//! stacks use pre-layer-norm residual blocks; the decoder adds causal
//! self-attention and cross-attention over the encoder output. Positions
//! count from the BOS token, so a caption of `n` words plus EOS needs
//! `n + 1 <= max_len`.

mod decode;

pub use decode::{BeamConfig, DecodeMethod, DecodeResult};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_io::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::{glorot, randn, sum_grads, Bound, Mat, ParamSet, Tape, Var};
use crate::textproc::{Caption, Vocabulary, BOS, EOS};

pub const CHECKPOINT_KIND: &str = "captioner";
const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub d_img: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_ff: usize,
    /// Decoder positions including BOS.
    pub max_len: usize,
}

impl CaptionerConfig {
    /// Small default used for the toy world.
    pub fn desk(d_img: usize) -> Self {
        Self {
            d_img,
            d_model: 64,
            n_heads: 4,
            n_enc: 2,
            n_dec: 2,
            d_ff: 256,
            max_len: 20,
        }
    }

    /// Six encoder and six decoder layers.
    pub fn full_shape(d_img: usize) -> Self {
        Self {
            n_enc: 6,
            n_dec: 6,
            ..Self::desk(d_img)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("captioner: {m}")));
        if self.d_img == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("n_heads must divide d_model");
        }
        if self.n_enc == 0 || self.n_dec == 0 {
            return bad("n_enc and n_dec must be at least 1");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        Ok(())
    }
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self::desk(64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LnIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EncLayer {
    ln1: LnIdx,
    attn: AttnIdx,
    ln2: LnIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DecLayer {
    ln1: LnIdx,
    self_attn: AttnIdx,
    ln2: LnIdx,
    cross: AttnIdx,
    ln3: LnIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    vis_w: usize,
    vis_b: usize,
    tok: usize,
    pos: usize,
    enc: Vec<EncLayer>,
    enc_ln: LnIdx,
    dec: Vec<DecLayer>,
    dec_ln: LnIdx,
    out_w: usize,
    out_b: usize,
}

struct Builder<'a, R: ?Sized> {
    params: ParamSet,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn weight(&mut self, name: String, i: usize, o: usize) -> usize {
        let m = glorot(self.rng, i, o);
        self.params.push(name, m)
    }

    fn zeros(&mut self, name: String, r: usize, c: usize) -> usize {
        self.params.push(name, Mat::zeros((r, c)))
    }

    fn ln(&mut self, name: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.params.push(format!("{name}.g"), Mat::ones((1, d))),
            b: self.zeros(format!("{name}.b"), 1, d),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.weight(format!("{name}.wq"), d, d),
            bq: self.zeros(format!("{name}.bq"), 1, d),
            wk: self.weight(format!("{name}.wk"), d, d),
            bk: self.zeros(format!("{name}.bk"), 1, d),
            wv: self.weight(format!("{name}.wv"), d, d),
            bv: self.zeros(format!("{name}.bv"), 1, d),
            wo: self.weight(format!("{name}.wo"), d, d),
            bo: self.zeros(format!("{name}.bo"), 1, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, h: usize) -> FfIdx {
        FfIdx {
            w1: self.weight(format!("{name}.w1"), d, h),
            b1: self.zeros(format!("{name}.b1"), 1, h),
            w2: self.weight(format!("{name}.w2"), h, d),
            b2: self.zeros(format!("{name}.b2"), 1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    captioner: CaptionerConfig,
    vocab: Vocabulary,
}

/// One teacher-forced training pair.
#[derive(Debug, Clone, Copy)]
pub struct MleExample<'a> {
    pub image: &'a ImageRecord,
    pub caption: &'a Caption,
}

impl Captioner {
    pub fn new<R: Rng + ?Sized>(config: CaptionerConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.clone();
        let (d, v) = (c.d_model, vocab.len());
        let mut b = Builder {
            params: ParamSet::new(),
            rng,
        };
        let vis_w = b.weight("visual.w".into(), c.d_img, d);
        let vis_b = b.zeros("visual.b".into(), 1, d);
        let tok = {
            let m = randn(b.rng, v, d, 0.1);
            b.params.push("embed.tok", m)
        };
        let pos = {
            let m = randn(b.rng, c.max_len, d, 0.1);
            b.params.push("embed.pos", m)
        };
        let enc = (0..c.n_enc)
            .map(|l| {
                let n = format!("enc{l}");
                EncLayer {
                    ln1: b.ln(&format!("{n}.ln1"), d),
                    attn: b.attn(&format!("{n}.attn"), d),
                    ln2: b.ln(&format!("{n}.ln2"), d),
                    ff: b.ff(&format!("{n}.ff"), d, c.d_ff),
                }
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec = (0..c.n_dec)
            .map(|l| {
                let n = format!("dec{l}");
                DecLayer {
                    ln1: b.ln(&format!("{n}.ln1"), d),
                    self_attn: b.attn(&format!("{n}.self"), d),
                    ln2: b.ln(&format!("{n}.ln2"), d),
                    cross: b.attn(&format!("{n}.cross"), d),
                    ln3: b.ln(&format!("{n}.ln3"), d),
                    ff: b.ff(&format!("{n}.ff"), d, c.d_ff),
                }
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        let out_w = b.weight("out.w".into(), d, v);
        let out_b = b.zeros("out.b".into(), 1, v);
        let layout = Layout {
            vis_w,
            vis_b,
            tok,
            pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
        };
        Ok(Self {
            config,
            vocab,
            params: b.params,
            layout,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn check_image(&self, image: &ImageRecord) -> Result<()> {
        if image.features.len() != self.config.d_img {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_img,
                got: image.features.len(),
            });
        }
        Ok(())
    }

    fn layer_norm(tape: &mut Tape, p: Bound, x: Var, ln: LnIdx) -> Var {
        tape.layer_norm(x, p.var(ln.g), p.var(ln.b), LN_EPS)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. Returns the concatenated heads.
    fn heads(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Var {
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..h)
            .map(|i| {
                let qh = tape.slice_cols(q, i * dh, dh);
                let kh = tape.slice_cols(k, i * dh, dh);
                let vh = tape.slice_cols(v, i * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let mut s = tape.scale(s, scale);
                if let Some(m) = mask {
                    s = tape.add(s, m);
                }
                let a = tape.softmax_rows(s);
                tape.matmul(a, vh)
            })
            .collect();
        if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        }
    }

    fn project_kv(tape: &mut Tape, p: Bound, x: Var, a: AttnIdx) -> (Var, Var) {
        let k = tape.linear(x, p.var(a.wk), p.var(a.bk));
        let v = tape.linear(x, p.var(a.wv), p.var(a.bv));
        (k, v)
    }

    fn attend(&self, tape: &mut Tape, p: Bound, x: Var, k: Var, v: Var, a: AttnIdx, mask: Option<Var>) -> Var {
        let q = tape.linear(x, p.var(a.wq), p.var(a.bq));
        let o = self.heads(tape, q, k, v, mask);
        tape.linear(o, p.var(a.wo), p.var(a.bo))
    }

    fn feed_forward(tape: &mut Tape, p: Bound, x: Var, f: FfIdx) -> Var {
        let h = tape.linear(x, p.var(f.w1), p.var(f.b1));
        let h = tape.gelu(h);
        tape.linear(h, p.var(f.w2), p.var(f.b2))
    }

    /// Encoder output (`1×d_model`) for an image.
    fn encode(&self, tape: &mut Tape, p: Bound, image: &ImageRecord) -> Result<Var> {
        self.check_image(image)?;
        let x = tape.constant(Mat::from_shape_vec((1, self.config.d_img), image.features.clone()).unwrap());
        let mut h = tape.linear(x, p.var(self.layout.vis_w), p.var(self.layout.vis_b));
        for l in &self.layout.enc {
            let n = Self::layer_norm(tape, p, h, l.ln1);
            let (k, v) = Self::project_kv(tape, p, n, l.attn);
            let a = self.attend(tape, p, n, k, v, l.attn, None);
            h = tape.add(h, a);
            let n = Self::layer_norm(tape, p, h, l.ln2);
            let f = Self::feed_forward(tape, p, n, l.ff);
            h = tape.add(h, f);
        }
        Ok(Self::layer_norm(tape, p, h, self.layout.enc_ln))
    }

    fn check_prefix(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::PrefixTooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if ids.first() != Some(&BOS) {
            return Err(Error::PrefixMissingBos);
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::parse("captioner prefix", format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn causal_mask(t: usize) -> Mat {
        Mat::from_shape_fn((t, t), |(i, j)| if j > i { MASKED } else { 0.0 })
    }

    /// Teacher-forced `T×V` log-probabilities for an input prefix.
    pub(crate) fn forward(&self, tape: &mut Tape, p: Bound, image: &ImageRecord, ids: &[usize]) -> Result<Var> {
        self.check_prefix(ids)?;
        let memory = self.encode(tape, p, image)?;
        let t = ids.len();
        let tok = tape.gather(p.var(self.layout.tok), ids);
        let pos = tape.slice_rows(p.var(self.layout.pos), 0, t);
        let mut y = tape.add(tok, pos);
        let mask = tape.constant(Self::causal_mask(t));
        for l in &self.layout.dec {
            let n = Self::layer_norm(tape, p, y, l.ln1);
            let (k, v) = Self::project_kv(tape, p, n, l.self_attn);
            let a = self.attend(tape, p, n, k, v, l.self_attn, Some(mask));
            y = tape.add(y, a);
            let n = Self::layer_norm(tape, p, y, l.ln2);
            let (k, v) = Self::project_kv(tape, p, memory, l.cross);
            let a = self.attend(tape, p, n, k, v, l.cross, None);
            y = tape.add(y, a);
            let n = Self::layer_norm(tape, p, y, l.ln3);
            let f = Self::feed_forward(tape, p, n, l.ff);
            y = tape.add(y, f);
        }
        let n = Self::layer_norm(tape, p, y, self.layout.dec_ln);
        let z = tape.linear(n, p.var(self.layout.out_w), p.var(self.layout.out_b));
        Ok(tape.log_softmax_rows(z))
    }

    /// Per-position log-probability rows for a prefix starting with BOS.
    pub fn logits(&self, image: &ImageRecord, prefix: &[usize]) -> Result<Mat> {
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let out = self.forward(&mut tape, p, image, prefix)?;
        Ok(tape.value(out).clone())
    }

    /// Word ids of a caption followed by EOS; errors when it cannot fit.
    pub fn target_ids(&self, caption: &Caption) -> Result<Vec<usize>> {
        let mut ids = self.vocab.encode(caption);
        ids.push(EOS);
        if ids.len() > self.config.max_len {
            return Err(Error::CaptionTooLong {
                len: caption.len(),
                max: self.config.max_len - 1,
            });
        }
        Ok(ids)
    }

    /// `log P(tokens | image)` on the tape. `tokens` may end with EOS or be
    /// a truncated sequence of length `max_len`.
    pub(crate) fn sequence_logprob(&self, tape: &mut Tape, p: Bound, image: &ImageRecord, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyCaption);
        }
        let mut input = Vec::with_capacity(tokens.len());
        input.push(BOS);
        input.extend_from_slice(&tokens[..tokens.len() - 1]);
        let lp = self.forward(tape, p, image, &input)?;
        let picked = tape.pick(lp, tokens);
        Ok(tape.sum(picked))
    }

    /// Scalar `log P(tokens | image)` without gradients.
    pub fn score_tokens(&self, image: &ImageRecord, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let v = self.sequence_logprob(&mut tape, p, image, tokens)?;
        Ok(tape.scalar_value(v))
    }

    fn mle_on_tape(&self, tape: &mut Tape, p: Bound, image: &ImageRecord, caption: &Caption) -> Result<Var> {
        let targets = self.target_ids(caption)?;
        let mut input = Vec::with_capacity(targets.len());
        input.push(BOS);
        input.extend_from_slice(&targets[..targets.len() - 1]);
        let lp = self.forward(tape, p, image, &input)?;
        let picked = tape.pick(lp, &targets);
        let m = tape.mean(picked);
        Ok(tape.scale(m, -1.0))
    }

    /// Mean token negative log-likelihood (EOS included) under teacher
    /// forcing.
    pub fn mle_loss(&self, image: &ImageRecord, caption: &Caption) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let l = self.mle_on_tape(&mut tape, p, image, caption)?;
        Ok(tape.scalar_value(l))
    }

    pub fn mle_loss_and_grads(&self, image: &ImageRecord, caption: &Caption) -> Result<(f64, Vec<Mat>)> {
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let l = self.mle_on_tape(&mut tape, p, image, caption)?;
        let mut g = tape.backward(l);
        Ok((tape.scalar_value(l), tape.block_grads(&mut g, p)))
    }

    /// Batch mean of per-example losses and gradients. Examples are
    /// processed in parallel and reduced in input order.
    pub fn mle_batch(&self, batch: &[MleExample<'_>]) -> Result<(f64, Vec<Mat>)> {
        if batch.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let parts: Vec<Result<(f64, Vec<Mat>)>> = batch
            .par_iter()
            .map(|ex| self.mle_loss_and_grads(ex.image, ex.caption))
            .collect();
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss += l;
            sum_grads(&mut grads, &g);
        }
        let n = batch.len() as f64;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v / n);
        }
        Ok((loss / n, grads))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let stored = StoredConfig {
            captioner: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, &stored)?;
        ck.add_params("captioner", &self.params);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let stored: StoredConfig = ck.config_as()?;
        let template = Self::new(stored.captioner, stored.vocab, &mut crate::seed::substream(0, "checkpoint-template"))?;
        let params = ck.extract_params("captioner", &template.params)?;
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite captioner weights".into()));
        }
        Ok(Self { params, ..template })
    }
}

#[cfg(test)]
mod tests;
