//! Synthetic negative captions for grammar finetuning.
//!
//! Five corruptions (repeat, remove, insert, swap, shuffle), one chosen
//! uniformly per call. Every random draw goes through [`Draws::randint`]
//! (inclusive on both ends) so the index and count semantics can be traced
//! exactly, including the asymmetry that `insert` never appends at the end
//! while `repeat` may.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Caption, Vocabulary};
use crate::error::{Error, Result};

/// Source of uniform integer draws.
pub trait Draws {
    /// Uniform integer in `lo..=hi`.
    fn randint(&mut self, lo: usize, hi: usize) -> usize;
}

impl<R: Rng + ?Sized> Draws for R {
    fn randint(&mut self, lo: usize, hi: usize) -> usize {
        self.random_range(lo..=hi)
    }
}

/// Replays a fixed list of draws; used to trace the algorithm by hand.
#[derive(Debug, Clone, Default)]
pub struct ScriptedDraws {
    queue: VecDeque<usize>,
}

impl ScriptedDraws {
    pub fn new(draws: &[usize]) -> Self {
        Self {
            queue: draws.iter().copied().collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }
}

impl Draws for ScriptedDraws {
    fn randint(&mut self, lo: usize, hi: usize) -> usize {
        let v = self.queue.pop_front().expect("scripted draws exhausted");
        assert!(lo <= v && v <= hi, "scripted draw {v} outside {lo}..={hi}");
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeOp {
    Repeat,
    Remove,
    Insert,
    Swap,
    Shuffle,
}

impl NegativeOp {
    pub const ALL: [NegativeOp; 5] = [
        NegativeOp::Repeat,
        NegativeOp::Remove,
        NegativeOp::Insert,
        NegativeOp::Swap,
        NegativeOp::Shuffle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NegativeOp::Repeat => "repeat",
            NegativeOp::Remove => "remove",
            NegativeOp::Insert => "insert",
            NegativeOp::Swap => "swap",
            NegativeOp::Shuffle => "shuffle",
        }
    }
}

impl fmt::Display for NegativeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeGenConfig {
    pub n_max_gram: usize,
    pub n_max_repeat: usize,
    pub n_max_tokens: usize,
    pub rng_seed: u64,
}

impl Default for NegativeGenConfig {
    fn default() -> Self {
        Self {
            n_max_gram: 3,
            n_max_repeat: 3,
            n_max_tokens: 3,
            rng_seed: 0,
        }
    }
}

impl NegativeGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max_gram == 0 || self.n_max_repeat == 0 || self.n_max_tokens == 0 {
            return Err(Error::ConfigInvalid(
                "negative generator maxima must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Shortest caption the generator accepts.
    pub fn min_len(&self) -> usize {
        self.n_max_gram + 1
    }
}

/// One in-place replacement performed by `swap`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapEdit {
    pub index: usize,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negative {
    pub caption: Caption,
    pub op: NegativeOp,
    /// Replacement trace; empty unless `op` is `Swap`.
    pub swaps: Vec<SwapEdit>,
}

/// Corrupts `caption` with one uniformly chosen operation.
pub fn generate_negative<D: Draws + ?Sized>(
    caption: &Caption,
    vocab: &Vocabulary,
    cfg: &NegativeGenConfig,
    draws: &mut D,
) -> Result<Negative> {
    cfg.validate()?;
    if caption.len() < cfg.min_len() {
        return Err(Error::CaptionTooShort {
            len: caption.len(),
            min: cfg.min_len(),
        });
    }
    let words = vocab.words();
    let tokens = caption.tokens().to_vec();
    let op = NegativeOp::ALL[draws.randint(0, NegativeOp::ALL.len() - 1)];
    let mut swaps = Vec::new();
    let out = match op {
        NegativeOp::Repeat => repeat(tokens, cfg.n_max_gram, cfg.n_max_repeat, draws),
        NegativeOp::Remove => remove(tokens, cfg.n_max_gram, draws),
        NegativeOp::Insert => {
            require_words(words, 1)?;
            insert(tokens, words, cfg.n_max_tokens, draws)
        }
        NegativeOp::Swap => {
            require_words(words, 2)?;
            swap(tokens, words, cfg.n_max_tokens, draws, &mut swaps)
        }
        NegativeOp::Shuffle => shuffle(tokens, draws),
    };
    Ok(Negative {
        caption: Caption::from_tokens(&out)?,
        op,
        swaps,
    })
}

fn require_words(words: &[String], needed: usize) -> Result<()> {
    if words.len() < needed {
        Err(Error::VocabTooSmall {
            needed,
            have: words.len(),
        })
    } else {
        Ok(())
    }
}

fn repeat<D: Draws + ?Sized>(
    mut tokens: Vec<String>,
    n_max_gram: usize,
    n_max_repeat: usize,
    draws: &mut D,
) -> Vec<String> {
    let n_gram = draws.randint(1, n_max_gram);
    let repeat_idx = draws.randint(0, tokens.len() - n_gram);
    let repeated = tokens[repeat_idx..repeat_idx + n_gram].to_vec();
    let n_repeat = draws.randint(1, n_max_repeat);
    for _ in 0..n_repeat {
        let insert_idx = draws.randint(0, tokens.len());
        tokens.splice(insert_idx..insert_idx, repeated.iter().cloned());
    }
    tokens
}

fn remove<D: Draws + ?Sized>(mut tokens: Vec<String>, n_max_gram: usize, draws: &mut D) -> Vec<String> {
    let n_gram = draws.randint(1, n_max_gram);
    let remove_idx = draws.randint(0, tokens.len() - n_gram);
    tokens.drain(remove_idx..remove_idx + n_gram);
    tokens
}

fn insert<D: Draws + ?Sized>(
    mut tokens: Vec<String>,
    words: &[String],
    n_max_tokens: usize,
    draws: &mut D,
) -> Vec<String> {
    let n_insert = draws.randint(1, n_max_tokens);
    for _ in 0..n_insert {
        let insert_idx = draws.randint(0, tokens.len() - 1);
        let tok = words[draws.randint(0, words.len() - 1)].clone();
        tokens.insert(insert_idx, tok);
    }
    tokens
}

fn swap<D: Draws + ?Sized>(
    mut tokens: Vec<String>,
    words: &[String],
    n_max_tokens: usize,
    draws: &mut D,
    edits: &mut Vec<SwapEdit>,
) -> Vec<String> {
    let n_swap = draws.randint(1, n_max_tokens);
    for _ in 0..n_swap {
        let idx = draws.randint(0, tokens.len() - 1);
        let mut replacement = &words[draws.randint(0, words.len() - 1)];
        while *replacement == tokens[idx] {
            replacement = &words[draws.randint(0, words.len() - 1)];
        }
        edits.push(SwapEdit {
            index: idx,
            from: std::mem::replace(&mut tokens[idx], replacement.clone()),
            to: replacement.clone(),
        });
    }
    tokens
}

/// Fisher-Yates, walking from the back like Python's `random.shuffle`.
fn shuffle<D: Draws + ?Sized>(mut tokens: Vec<String>, draws: &mut D) -> Vec<String> {
    for i in (1..tokens.len()).rev() {
        let j = draws.randint(0, i);
        tokens.swap(i, j);
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_words(words.iter().map(|w| w.to_string())).unwrap()
    }

    fn toks(c: &Caption) -> Vec<&str> {
        c.tokens().iter().map(String::as_str).collect()
    }

    fn op_index(op: NegativeOp) -> usize {
        NegativeOp::ALL.iter().position(|&o| o == op).unwrap()
    }

    #[test]
    fn remove_bigram_at_index_one() {
        let c = Caption::new("a b c d").unwrap();
        let v = vocab(&["a", "b", "c", "d", "x"]);
        // op, n_gram, remove_idx
        let mut d = ScriptedDraws::new(&[op_index(NegativeOp::Remove), 2, 1]);
        let neg = generate_negative(&c, &v, &NegativeGenConfig::default(), &mut d).unwrap();
        assert_eq!(toks(&neg.caption), ["a", "d"]);
        assert_eq!(d.remaining(), 0);
    }

    #[test]
    fn swap_rejects_equal_replacement() {
        let c = Caption::new("a b c").unwrap();
        let v = vocab(&["a", "b", "c", "x"]);
        let cfg = NegativeGenConfig {
            n_max_gram: 2,
            ..Default::default()
        };
        // op, n_swap=1, idx=0, draw "a" (rejected), then "x"
        let mut d = ScriptedDraws::new(&[op_index(NegativeOp::Swap), 1, 0, 0, 3]);
        let neg = generate_negative(&c, &v, &cfg, &mut d).unwrap();
        assert_eq!(toks(&neg.caption), ["x", "b", "c"]);
        assert_eq!(
            neg.swaps,
            vec![SwapEdit {
                index: 0,
                from: "a".into(),
                to: "x".into()
            }]
        );
    }

    #[test]
    fn shuffle_of_singleton_is_identity() {
        let single = vec!["a".to_string()];
        let mut d = ScriptedDraws::new(&[]);
        assert_eq!(shuffle(single, &mut d), ["a"]);
    }

    #[test]
    fn repeat_and_insert_trace() {
        let c = Caption::new("a b c d").unwrap();
        let v = vocab(&["a", "b", "c", "d", "x"]);
        let cfg = NegativeGenConfig::default();
        // repeat: n_gram=2, idx=1 -> [b c], n_repeat=2, insert at 4 then at 0
        let mut d = ScriptedDraws::new(&[op_index(NegativeOp::Repeat), 2, 1, 2, 4, 0]);
        let neg = generate_negative(&c, &v, &cfg, &mut d).unwrap();
        assert_eq!(toks(&neg.caption), ["b", "c", "a", "b", "c", "d", "b", "c"]);
        // insert: one token at index 3 (last legal slot is before the final token)
        let mut d = ScriptedDraws::new(&[op_index(NegativeOp::Insert), 1, 3, 4]);
        let neg = generate_negative(&c, &v, &cfg, &mut d).unwrap();
        assert_eq!(toks(&neg.caption), ["a", "b", "c", "x", "d"]);
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn insert_never_appends_at_end() {
        let c = Caption::new("a b c d").unwrap();
        let v = vocab(&["x"]);
        let mut d = ScriptedDraws::new(&[op_index(NegativeOp::Insert), 1, 4, 0]);
        let _ = generate_negative(&c, &v, &NegativeGenConfig::default(), &mut d);
    }

    #[test]
    fn too_short_and_small_vocab() {
        let v = vocab(&["a", "b"]);
        let cfg = NegativeGenConfig::default();
        let c = Caption::new("a b c").unwrap();
        let mut rng = substream(1, "t");
        assert!(matches!(
            generate_negative(&c, &v, &cfg, &mut rng),
            Err(Error::CaptionTooShort { len: 3, min: 4 })
        ));
        let one = vocab(&["a"]);
        let c = Caption::new("a a a a").unwrap();
        let mut d = ScriptedDraws::new(&[op_index(NegativeOp::Swap)]);
        assert!(matches!(
            generate_negative(&c, &one, &cfg, &mut d),
            Err(Error::VocabTooSmall { needed: 2, have: 1 })
        ));
    }

    #[test]
    fn seeded_generation_is_pure() {
        let c = Caption::new("a big red cube on the grass").unwrap();
        let v = vocab(&["a", "big", "red", "cube", "on", "the", "grass", "sand"]);
        let cfg = NegativeGenConfig::default();
        let run = || {
            let mut rng = substream(42, "neg");
            (0..50)
                .map(|_| generate_negative(&c, &v, &cfg, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
