//! Caption evaluation: n-gram overlap metrics, fine-grained word recall,
//! text-to-image retrieval and a repetition diagnostic.
//!
//! Scales: BLEU-4, ROUGE-L, recalls and word recall are in 0..100; CIDEr-D
//! keeps its native x10 scale, so a perfect single-reference match is 10.

mod ngram;
mod recall;

pub use ngram::{bleu4, cider_d, ngram_counts, rouge_l, rouge_l_sentence, CiderResult, CiderStats, NGram};
pub use recall::{repetition_rate, retrieval_recall, word_recall, WordMatch};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub n_images: usize,
    pub n_references: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub counts: EvalCounts,
    /// Checkpoint that produced the embedding and retrieval columns.
    pub retrieval_encoder: Option<String>,
}

/// Column groups of the printed table, in display order.
pub const GROUPS: [(&str, &[&str]); 5] = [
    ("n-gram", &["bleu4", "cider_d", "rouge_l"]),
    ("embedding", &["clip_s"]),
    ("retrieval", &[]),
    ("fine-grained", &["word_recall_background", "word_recall_object", "word_recall_relation"]),
    ("diagnostic", &["repetition_rate"]),
];

pub fn recall_key(k: usize) -> String {
    format!("recall@{k}")
}

impl EvalReport {
    pub fn new(counts: EvalCounts) -> Self {
        Self {
            metrics: BTreeMap::new(),
            counts,
            retrieval_encoder: None,
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::ConfigInvalid(format!("metric {name} is not finite")));
        }
        self.metrics.insert(name.to_owned(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    fn group_columns(&self, group: &str, names: &[&str]) -> Vec<(String, f64)> {
        if group == "retrieval" {
            let mut r: Vec<(usize, f64)> = self
                .metrics
                .iter()
                .filter_map(|(k, &v)| k.strip_prefix("recall@").and_then(|x| x.parse().ok()).map(|k| (k, v)))
                .collect();
            r.sort_by_key(|p| p.0);
            return r.into_iter().map(|(k, v)| (format!("R@{k}"), v)).collect();
        }
        names
            .iter()
            .filter_map(|n| self.get(n).map(|v| (n.to_string(), v)))
            .collect()
    }

    /// Plain-text table with one header row of groups and one of columns.
    pub fn render_table(&self) -> String {
        let mut groups_line = String::new();
        let mut names_line = String::new();
        let mut values_line = String::new();
        for (group, names) in GROUPS {
            let cols = self.group_columns(group, names);
            if cols.is_empty() {
                continue;
            }
            let widths: Vec<usize> = cols.iter().map(|(n, _)| n.len().max(8)).collect();
            let span = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
            let span = span.max(group.len());
            let _ = write!(groups_line, "| {group:^span$} ");
            let mut names_part = String::new();
            let mut values_part = String::new();
            for (i, ((n, v), w)) in cols.iter().zip(&widths).enumerate() {
                if i > 0 {
                    names_part.push_str(" | ");
                    values_part.push_str(" | ");
                }
                let _ = write!(names_part, "{n:>w$}");
                let _ = write!(values_part, "{:>w$}", format!("{v:.2}"));
            }
            let _ = write!(names_line, "| {names_part:>span$} ");
            let _ = write!(values_line, "| {values_part:>span$} ");
        }
        format!(
            "{groups_line}|\n{names_line}|\n{values_line}|\nimages: {}  references: {}\n",
            self.counts.n_images, self.counts.n_references
        )
    }
}
