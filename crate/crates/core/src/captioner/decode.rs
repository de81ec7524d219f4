use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Captioner;
use crate::data_io::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::{Mat, Tape};
use crate::textproc::{Caption, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMethod {
    Greedy,
    Beam,
    Sample,
}

impl DecodeMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMethod::Greedy => "greedy",
            DecodeMethod::Beam => "beam",
            DecodeMethod::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Rank hypotheses by mean instead of summed log-probability.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Emitted ids, ending in EOS unless truncated at `max_len`.
    pub tokens: Vec<usize>,
    pub token_logprobs: Vec<f64>,
    pub total_logprob: f64,
    pub method: DecodeMethod,
    pub beam_size: usize,
}

impl DecodeResult {
    pub fn ended_with_eos(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// The words before EOS, or `None` for an empty caption.
    pub fn caption(&self, captioner: &Captioner) -> Option<Caption> {
        captioner.vocab.decode_caption(&self.tokens)
    }
}

/// Keys and values projected from the encoder output, one pair per decoder
/// layer.
struct CrossCache {
    kv: Vec<(Mat, Mat)>,
}

#[derive(Clone)]
struct DecodeState {
    pos: usize,
    self_kv: Vec<Option<(Mat, Mat)>>,
}

fn allowed(token: usize) -> bool {
    token != PAD && token != BOS
}

impl Captioner {
    fn cross_cache(&self, image: &ImageRecord) -> Result<CrossCache> {
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let memory = self.encode(&mut tape, p, image)?;
        let kv = self
            .layout
            .dec
            .iter()
            .map(|l| {
                let (k, v) = Self::project_kv(&mut tape, p, memory, l.cross);
                (tape.value(k).clone(), tape.value(v).clone())
            })
            .collect();
        Ok(CrossCache { kv })
    }

    fn fresh_state(&self) -> DecodeState {
        DecodeState {
            pos: 0,
            self_kv: vec![None; self.layout.dec.len()],
        }
    }

    /// Feeds one token and returns the next-token log-probabilities.
    fn step(&self, cross: &CrossCache, state: &mut DecodeState, token: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = tape.bind(self.params.values());
        let tok = tape.gather(p.var(self.layout.tok), &[token]);
        let pos = tape.slice_rows(p.var(self.layout.pos), state.pos, 1);
        let mut y = tape.add(tok, pos);
        for (li, l) in self.layout.dec.iter().enumerate() {
            let n = Self::layer_norm(&mut tape, p, y, l.ln1);
            let (k, v) = Self::project_kv(&mut tape, p, n, l.self_attn);
            let (k, v) = match &state.self_kv[li] {
                Some((ck, cv)) => {
                    let ck = tape.constant(ck.clone());
                    let cv = tape.constant(cv.clone());
                    (tape.concat_rows(&[ck, k]), tape.concat_rows(&[cv, v]))
                }
                None => (k, v),
            };
            let a = self.attend(&mut tape, p, n, k, v, l.self_attn, None);
            state.self_kv[li] = Some((tape.value(k).clone(), tape.value(v).clone()));
            y = tape.add(y, a);
            let n = Self::layer_norm(&mut tape, p, y, l.ln2);
            let ck = tape.constant(cross.kv[li].0.clone());
            let cv = tape.constant(cross.kv[li].1.clone());
            let a = self.attend(&mut tape, p, n, ck, cv, l.cross, None);
            y = tape.add(y, a);
            let n = Self::layer_norm(&mut tape, p, y, l.ln3);
            let f = Self::feed_forward(&mut tape, p, n, l.ff);
            y = tape.add(y, f);
        }
        let n = Self::layer_norm(&mut tape, p, y, self.layout.dec_ln);
        let z = tape.linear(n, p.var(self.layout.out_w), p.var(self.layout.out_b));
        let lp = tape.log_softmax_rows(z);
        state.pos += 1;
        tape.value(lp).row(0).to_vec()
    }

    /// Log-probability rows for `prefix` computed one token at a time with
    /// cached keys and values.
    pub fn incremental_logits(&self, image: &ImageRecord, prefix: &[usize]) -> Result<Mat> {
        self.check_prefix(prefix)?;
        let cross = self.cross_cache(image)?;
        let mut state = self.fresh_state();
        let mut out = Mat::zeros((prefix.len(), self.vocab.len()));
        for (t, &tok) in prefix.iter().enumerate() {
            let lp = self.step(&cross, &mut state, tok);
            out.row_mut(t).assign(&ndarray::ArrayView1::from(&lp[..]));
        }
        Ok(out)
    }

    /// Argmax decoding. PAD and BOS are never emitted; ties go to the
    /// lowest token id.
    pub fn greedy_decode(&self, image: &ImageRecord) -> Result<DecodeResult> {
        let cross = self.cross_cache(image)?;
        let mut state = self.fresh_state();
        let mut prev = BOS;
        let (mut tokens, mut lps, mut total) = (Vec::new(), Vec::new(), 0.0);
        for _ in 0..self.config.max_len {
            let lp = self.step(&cross, &mut state, prev);
            let mut best = usize::MAX;
            for (tok, &v) in lp.iter().enumerate() {
                if allowed(tok) && (best == usize::MAX || v > lp[best]) {
                    best = tok;
                }
            }
            tokens.push(best);
            lps.push(lp[best]);
            total += lp[best];
            if best == EOS {
                break;
            }
            prev = best;
        }
        Ok(DecodeResult {
            tokens,
            token_logprobs: lps,
            total_logprob: total,
            method: DecodeMethod::Greedy,
            beam_size: 1,
        })
    }

    pub fn beam_search(&self, image: &ImageRecord, beam_size: usize) -> Result<DecodeResult> {
        self.beam_search_with(
            image,
            &BeamConfig {
                beam_size,
                length_normalize: false,
            },
        )
    }

    /// Beam search over summed log-probabilities. Each step ranks every
    /// extension of every live hypothesis by (score, beam index, token id).
    /// EOS extensions ranked inside the top `beam_size` become finished;
    /// the best `beam_size` other extensions stay live. Reaching `max_len`
    /// also finishes a hypothesis.
    pub fn beam_search_with(&self, image: &ImageRecord, cfg: &BeamConfig) -> Result<DecodeResult> {
        if cfg.beam_size == 0 {
            return Err(Error::ConfigInvalid("beam_size must be at least 1".into()));
        }
        struct Hyp {
            tokens: Vec<usize>,
            lps: Vec<f64>,
            score: f64,
            state: Option<DecodeState>,
        }
        let rank = |score: f64, len: usize| {
            if cfg.length_normalize {
                score / len as f64
            } else {
                score
            }
        };
        let cross = self.cross_cache(image)?;
        let mut alive = vec![Hyp {
            tokens: Vec::new(),
            lps: Vec::new(),
            score: 0.0,
            state: Some(self.fresh_state()),
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for step in 0..self.config.max_len {
            let last_step = step + 1 == self.config.max_len;
            let expanded: Vec<(Vec<f64>, DecodeState)> = alive
                .iter_mut()
                .map(|h| {
                    let mut st = h.state.take().expect("live hypothesis keeps its state");
                    let prev = h.tokens.last().copied().unwrap_or(BOS);
                    let lp = self.step(&cross, &mut st, prev);
                    (lp, st)
                })
                .collect();
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (b, (lp, _)) in expanded.iter().enumerate() {
                let len = alive[b].tokens.len() + 1;
                for (tok, &v) in lp.iter().enumerate() {
                    if allowed(tok) {
                        cands.push((rank(alive[b].score + v, len), b, tok));
                    }
                }
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut next = Vec::new();
            for (r, &(_, b, tok)) in cands.iter().enumerate() {
                let finishing = tok == EOS || last_step;
                if r >= cfg.beam_size && (next.len() >= cfg.beam_size || last_step) {
                    break;
                }
                if finishing && r >= cfg.beam_size {
                    continue;
                }
                if !finishing && next.len() >= cfg.beam_size {
                    continue;
                }
                let parent = &alive[b];
                let v = expanded[b].0[tok];
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                let mut lps = parent.lps.clone();
                lps.push(v);
                let hyp = Hyp {
                    tokens,
                    lps,
                    score: parent.score + v,
                    state: None,
                };
                if finishing {
                    finished.push(hyp);
                } else {
                    next.push(Hyp {
                        state: Some(expanded[b].1.clone()),
                        ..hyp
                    });
                }
            }
            alive = next;
            if alive.is_empty() {
                break;
            }
            if !cfg.length_normalize {
                let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
                let best_live = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
                if best_done >= best_live {
                    break;
                }
            }
        }
        let best = finished
            .into_iter()
            .min_by(|a, b| {
                rank(b.score, b.tokens.len())
                    .total_cmp(&rank(a.score, a.tokens.len()))
                    .then_with(|| a.tokens.cmp(&b.tokens))
            })
            .expect("beam search always finishes a hypothesis");
        Ok(DecodeResult {
            tokens: best.tokens,
            token_logprobs: best.lps,
            total_logprob: best.score,
            method: DecodeMethod::Beam,
            beam_size: cfg.beam_size,
        })
    }

    /// Ancestral sampling restricted to emittable tokens. Recorded
    /// log-probabilities are those of the unrestricted model distribution.
    pub fn sample_decode<R: Rng + ?Sized>(&self, image: &ImageRecord, rng: &mut R) -> Result<DecodeResult> {
        let cross = self.cross_cache(image)?;
        let mut state = self.fresh_state();
        let mut prev = BOS;
        let (mut tokens, mut lps, mut total) = (Vec::new(), Vec::new(), 0.0);
        for _ in 0..self.config.max_len {
            let lp = self.step(&cross, &mut state, prev);
            let mass: f64 = lp.iter().enumerate().filter(|(t, _)| allowed(*t)).map(|(_, v)| v.exp()).sum();
            let mut u = rng.random::<f64>() * mass;
            let mut pick = EOS;
            for (tok, &v) in lp.iter().enumerate() {
                if !allowed(tok) {
                    continue;
                }
                pick = tok;
                u -= v.exp();
                if u <= 0.0 {
                    break;
                }
            }
            tokens.push(pick);
            lps.push(lp[pick]);
            total += lp[pick];
            if pick == EOS {
                break;
            }
            prev = pick;
        }
        Ok(DecodeResult {
            tokens,
            token_logprobs: lps,
            total_logprob: total,
            method: DecodeMethod::Sample,
            beam_size: 1,
        })
    }

    /// Greedy (`beam_size == 1` and no normalization) or beam decoding of
    /// many images in parallel; output order follows input order.
    pub fn decode_batch(&self, images: &[&ImageRecord], cfg: &BeamConfig) -> Vec<Result<DecodeResult>> {
        images
            .par_iter()
            .map(|img| {
                if cfg.beam_size == 1 && !cfg.length_normalize {
                    self.greedy_decode(img)
                } else {
                    self.beam_search_with(img, cfg)
                }
            })
            .collect()
    }
}
