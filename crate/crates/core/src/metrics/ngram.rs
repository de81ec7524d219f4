//! Reference-based n-gram metrics: corpus BLEU-4, CIDEr-D and ROUGE-L.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::textproc::Caption;

pub type NGram = Vec<String>;

pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<NGram, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Pairs every candidate with its non-empty reference list.
pub(crate) fn paired<'a>(
    cands: &'a BTreeMap<u64, Caption>,
    refs: &'a BTreeMap<u64, Vec<Caption>>,
) -> Result<Vec<(&'a Caption, &'a [Caption])>> {
    if cands.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cands
        .iter()
        .map(|(id, c)| match refs.get(id) {
            Some(r) if !r.is_empty() => Ok((c, r.as_slice())),
            _ => Err(Error::MissingReferences(Some(*id))),
        })
        .collect()
}

/// Corpus BLEU with up to 4-grams, clipped counts and the brevity penalty
/// against the closest reference length (shorter wins a tie). No
/// smoothing: any order with zero matches gives 0. Scaled to 0..100.
pub fn bleu4(cands: &BTreeMap<u64, Caption>, refs: &BTreeMap<u64, Vec<Caption>>) -> Result<f64> {
    let pairs = paired(cands, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, rs) in pairs {
        let ct = cand.tokens();
        c_len += ct.len();
        r_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(ct.len()), l))
            .expect("non-empty references");
        for n in 1..=4 {
            let cc = ngram_counts(ct, n);
            let mut max_ref: BTreeMap<&NGram, usize> = BTreeMap::new();
            let ref_counts: Vec<_> = rs.iter().map(|r| ngram_counts(r.tokens(), n)).collect();
            for rc in &ref_counts {
                for (g, &k) in rc {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, &k) in &cc {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += ct.len().saturating_sub(n - 1);
        }
    }
    if (0..4).any(|i| matched[i] == 0 || total[i] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Per-order n-gram counts of one sentence.
fn cook(tokens: &[String]) -> Vec<BTreeMap<NGram, usize>> {
    (1..=CIDER_N).map(|n| ngram_counts(tokens, n)).collect()
}

struct TfIdf {
    vec: Vec<BTreeMap<NGram, f64>>,
    norm: [f64; CIDER_N],
    /// Number of bigrams; the length term of the Gaussian penalty.
    length: f64,
}

/// Document frequencies over a reference corpus, counting each image once
/// per n-gram.
#[derive(Debug, Clone, PartialEq)]
pub struct CiderStats {
    df: BTreeMap<NGram, f64>,
    log_n_images: f64,
}

impl CiderStats {
    pub fn from_references<'a, I>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Caption]>,
    {
        let mut df: BTreeMap<NGram, f64> = BTreeMap::new();
        let mut n_images = 0usize;
        for refs in corpus {
            n_images += 1;
            let mut seen: BTreeSet<NGram> = BTreeSet::new();
            for r in refs {
                for order in cook(r.tokens()) {
                    seen.extend(order.into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        if n_images < 2 {
            return Err(Error::CorpusTooSmall(n_images));
        }
        Ok(Self {
            df,
            log_n_images: (n_images as f64).ln(),
        })
    }

    fn vectorize(&self, tokens: &[String]) -> TfIdf {
        let mut vec = Vec::with_capacity(CIDER_N);
        let mut norm = [0.0; CIDER_N];
        let mut length = 0.0;
        for (n, counts) in cook(tokens).into_iter().enumerate() {
            let mut v = BTreeMap::new();
            for (g, tf) in counts {
                let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
                let w = tf as f64 * (self.log_n_images - df.ln());
                norm[n] += w * w;
                if n == 1 {
                    length += tf as f64;
                }
                v.insert(g, w);
            }
            vec.push(v);
        }
        for x in norm.iter_mut() {
            *x = x.sqrt();
        }
        TfIdf { vec, norm, length }
    }

    fn similarity(hyp: &TfIdf, r: &TfIdf) -> [f64; CIDER_N] {
        let delta = hyp.length - r.length;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut val = [0.0; CIDER_N];
        for n in 0..CIDER_N {
            for (g, &h) in &hyp.vec[n] {
                if let Some(&rv) = r.vec[n].get(g) {
                    val[n] += h.min(rv) * rv;
                }
            }
            if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
                val[n] /= hyp.norm[n] * r.norm[n];
            }
            val[n] *= penalty;
        }
        val
    }

    /// Sentence-level CIDEr-D of one candidate against its references.
    pub fn score(&self, cand: &Caption, refs: &[Caption]) -> Result<f64> {
        if refs.is_empty() {
            return Err(Error::MissingReferences(None));
        }
        let hyp = self.vectorize(cand.tokens());
        let mut acc = [0.0; CIDER_N];
        for r in refs {
            let s = Self::similarity(&hyp, &self.vectorize(r.tokens()));
            for n in 0..CIDER_N {
                acc[n] += s[n];
            }
        }
        let mean = acc.iter().sum::<f64>() / CIDER_N as f64;
        Ok(10.0 * mean / refs.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderResult {
    pub mean: f64,
    pub per_image: BTreeMap<u64, f64>,
}

/// Corpus CIDEr-D with document frequencies from the evaluation references.
pub fn cider_d(cands: &BTreeMap<u64, Caption>, refs: &BTreeMap<u64, Vec<Caption>>) -> Result<CiderResult> {
    let pairs = paired(cands, refs)?;
    let stats = CiderStats::from_references(pairs.iter().map(|(_, r)| *r))?;
    let mut per_image = BTreeMap::new();
    for ((id, _), (cand, rs)) in cands.iter().zip(&pairs) {
        per_image.insert(*id, stats.score(cand, rs)?);
    }
    let mean = per_image.values().sum::<f64>() / per_image.len() as f64;
    Ok(CiderResult { mean, per_image })
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L: best precision and best recall over the references
/// combined into an F-measure with beta 1.2.
pub fn rouge_l_sentence(cand: &Caption, refs: &[Caption]) -> f64 {
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in refs {
        let l = lcs_len(cand.tokens(), r.tokens()) as f64;
        p_max = p_max.max(l / cand.len() as f64);
        r_max = r_max.max(l / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

/// Mean sentence ROUGE-L, scaled to 0..100.
pub fn rouge_l(cands: &BTreeMap<u64, Caption>, refs: &BTreeMap<u64, Vec<Caption>>) -> Result<f64> {
    let pairs = paired(cands, refs)?;
    let total: f64 = pairs.iter().map(|(c, r)| rouge_l_sentence(c, r)).sum();
    Ok(100.0 * total / pairs.len() as f64)
}
