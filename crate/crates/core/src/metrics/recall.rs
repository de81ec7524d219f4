use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textproc::normalize;

/// How a ground-truth word is matched against a predicted sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordMatch {
    /// Substring containment in the sentence string ("car" matches "cars").
    #[default]
    Substring,
    /// Equality with one of the sentence's whitespace tokens.
    Token,
}

fn normalize_or_empty(s: &str) -> String {
    normalize(s).unwrap_or_default()
}

/// Word-level recall of ground-truth phrases, scaled to 0..100.
///
/// For every image each phrase scores the fraction of its words found in
/// the prediction; phrase scores are averaged per image, then over images.
/// Both sides are normalized first.
pub fn word_recall(
    preds: &BTreeMap<u64, String>,
    gt_phrases: &BTreeMap<u64, Vec<String>>,
    mode: WordMatch,
) -> Result<f64> {
    if gt_phrases.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for (id, phrases) in gt_phrases {
        let pred = preds.get(id).ok_or(Error::MissingPrediction(*id))?;
        let sentence = normalize_or_empty(pred);
        let tokens: HashSet<&str> = sentence.split_whitespace().collect();
        if phrases.is_empty() {
            return Err(Error::EmptyEntry(*id));
        }
        let mut image_score = 0.0;
        for phrase in phrases {
            let phrase = normalize(phrase)?;
            let words: Vec<&str> = phrase.split_whitespace().collect();
            let hits = words
                .iter()
                .filter(|w| match mode {
                    WordMatch::Substring => sentence.contains(*w),
                    WordMatch::Token => tokens.contains(*w),
                })
                .count();
            image_score += hits as f64 / words.len() as f64;
        }
        total += image_score / phrases.len() as f64;
    }
    Ok(total / gt_phrases.len() as f64 * 100.0)
}

fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Text-to-image recall@k, scaled to 0..100.
///
/// Each caption ranks every image by cosine similarity; an image ties ahead
/// of its own image only if it comes earlier in id order. Both maps must
/// cover the same ids.
pub fn retrieval_recall(
    caption_embs: &BTreeMap<u64, Vec<f64>>,
    image_embs: &BTreeMap<u64, Vec<f64>>,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if image_embs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let missing: Vec<u64> = image_embs
        .keys()
        .filter(|id| !caption_embs.contains_key(id))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::IdMismatch {
            source_name: "caption embeddings".into(),
            ids: missing,
        });
    }
    let extra: Vec<u64> = caption_embs
        .keys()
        .filter(|id| !image_embs.contains_key(id))
        .copied()
        .collect();
    if !extra.is_empty() {
        return Err(Error::IdMismatch {
            source_name: "image embeddings".into(),
            ids: extra,
        });
    }
    let dim = image_embs.values().next().map(Vec::len).unwrap_or(0);
    for v in image_embs.values().chain(caption_embs.values()) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    let images: Vec<&Vec<f64>> = image_embs.values().collect();
    let mut ranks = Vec::with_capacity(images.len());
    for (own, text) in caption_embs.values().enumerate() {
        let sims: Vec<f64> = images.iter().map(|img| cosine_or_zero(text, img)).collect();
        let s = sims[own];
        let ahead = sims
            .iter()
            .enumerate()
            .filter(|&(j, &x)| x > s || (x == s && j < own))
            .count();
        ranks.push(ahead + 1);
    }
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect())
}

/// `1 - distinct bigrams / bigrams`; 0 below two tokens.
pub fn repetition_rate<S: AsRef<str>>(tokens: &[S]) -> f64 {
    if tokens.len() < 2 {
        return 0.0;
    }
    let bigrams: Vec<(&str, &str)> = tokens.windows(2).map(|w| (w[0].as_ref(), w[1].as_ref())).collect();
    let distinct: HashSet<_> = bigrams.iter().collect();
    1.0 - distinct.len() as f64 / bigrams.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(id: u64, pred: &str, phrases: &[&str]) -> (BTreeMap<u64, String>, BTreeMap<u64, Vec<String>>) {
        let p = BTreeMap::from([(id, pred.to_string())]);
        let g = BTreeMap::from([(id, phrases.iter().map(|s| s.to_string()).collect())]);
        (p, g)
    }

    #[test]
    fn word_recall_examples() {
        let (p, g) = one(1, "a blue car parked", &["blue car", "red truck"]);
        assert_eq!(word_recall(&p, &g, WordMatch::Substring).unwrap(), 50.0);
        let (p, g) = one(1, "cars on road", &["car"]);
        assert_eq!(word_recall(&p, &g, WordMatch::Substring).unwrap(), 100.0);
        assert_eq!(word_recall(&p, &g, WordMatch::Token).unwrap(), 0.0);
        let (p, g) = one(1, "A Blue Car!", &["blue car"]);
        assert_eq!(word_recall(&p, &g, WordMatch::Substring).unwrap(), 100.0);
        let (_, g) = one(7, "x", &["x"]);
        assert!(matches!(
            word_recall(&BTreeMap::new(), &g, WordMatch::Substring),
            Err(Error::MissingPrediction(7))
        ));
    }

    #[test]
    fn retrieval_examples() {
        let imgs: BTreeMap<u64, Vec<f64>> = (0..4u64)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i as usize] = 1.0;
                (i, v)
            })
            .collect();
        let r = retrieval_recall(&imgs, &imgs, &[1, 5]).unwrap();
        assert_eq!(r[&1], 100.0);
        let same: BTreeMap<u64, Vec<f64>> = (0..4u64).map(|i| (i, vec![1.0, 2.0])).collect();
        let r = retrieval_recall(&same, &same, &[1, 2, 4]).unwrap();
        assert_eq!(r[&1], 25.0);
        assert_eq!(r[&2], 50.0);
        assert_eq!(r[&4], 100.0);
        let mut short = imgs.clone();
        short.remove(&2);
        assert!(matches!(
            retrieval_recall(&short, &imgs, &[1]),
            Err(Error::IdMismatch { ids, .. }) if ids == vec![2]
        ));
        let mut bad = imgs.clone();
        bad.insert(2, vec![1.0]);
        assert!(matches!(retrieval_recall(&bad, &imgs, &[1]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(repetition_rate(&["a", "b", "c", "d"]), 0.0);
        assert!((repetition_rate(&["a", "a", "a", "a"]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(repetition_rate(&["position", "position", "position"]), 0.5);
        assert_eq!(repetition_rate(&["solo"]), 0.0);
    }
}
