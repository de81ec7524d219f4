use serde::{Deserialize, Serialize};

use crate::data_io::ImageRecord;
use crate::dual_encoder::{clip_score, ClipScoreConfig, DualEncoder, GrammarHead};
use crate::error::{Error, Result};
use crate::metrics::CiderStats;
use crate::textproc::Caption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Cider,
    ClipS,
    #[serde(alias = "cider_clip_s")]
    CiderPlusClipS,
    ClipSGrammar,
}

impl RewardKind {
    pub const ALL: [RewardKind; 4] = [
        RewardKind::Cider,
        RewardKind::ClipS,
        RewardKind::CiderPlusClipS,
        RewardKind::ClipSGrammar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RewardKind::Cider => "cider",
            RewardKind::ClipS => "clip_s",
            RewardKind::CiderPlusClipS => "cider_plus_clip_s",
            RewardKind::ClipSGrammar => "clip_s_grammar",
        }
    }

    pub fn needs_references(&self) -> bool {
        matches!(self, RewardKind::Cider | RewardKind::CiderPlusClipS)
    }

    pub fn needs_encoder(&self) -> bool {
        !matches!(self, RewardKind::Cider)
    }

    pub fn needs_grammar_head(&self) -> bool {
        matches!(self, RewardKind::ClipSGrammar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub kind: RewardKind,
    /// Weight on CLIP-S in the grammar-augmented reward.
    pub lambda: f64,
    pub clip: ClipScoreConfig,
    /// Weight on CLIP-S when it is added to CIDEr.
    pub mixing: f64,
}

impl RewardConfig {
    pub fn new(kind: RewardKind) -> Self {
        Self {
            kind,
            lambda: 2.0,
            clip: ClipScoreConfig::default(),
            mixing: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::ConfigInvalid("reward lambda must be > 0".into()));
        }
        if !self.mixing.is_finite() || !self.clip.w.is_finite() {
            return Err(Error::ConfigInvalid("reward weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Present whenever an encoder was available.
    pub clip_s: Option<f64>,
    pub grammar: Option<f64>,
    pub cider: Option<f64>,
    pub combined: f64,
    pub baseline: Option<f64>,
    pub advantage: Option<f64>,
}

impl RewardBreakdown {
    /// Attaches the greedy baseline and the resulting advantage.
    pub fn with_baseline(mut self, baseline: f64) -> Self {
        self.baseline = Some(baseline);
        self.advantage = Some(self.combined - baseline);
        self
    }
}

/// Frozen reward models. Nothing here is ever updated during SCST.
#[derive(Debug, Clone, Default)]
pub struct RewardModels {
    pub encoder: Option<DualEncoder>,
    pub grammar_head: Option<GrammarHead>,
    pub cider: Option<CiderStats>,
}

impl RewardModels {
    /// Checks that every model `cfg` needs is present.
    pub fn check(&self, cfg: &RewardConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.kind.needs_encoder() && self.encoder.is_none() {
            return Err(Error::ConfigInvalid(format!(
                "reward {} needs a dual encoder checkpoint",
                cfg.kind.as_str()
            )));
        }
        if cfg.kind.needs_grammar_head() && self.grammar_head.is_none() {
            return Err(Error::ConfigInvalid(format!(
                "reward {} needs an encoder checkpoint with a grammar head",
                cfg.kind.as_str()
            )));
        }
        if cfg.kind.needs_references() && self.cider.is_none() {
            return Err(Error::ConfigInvalid(format!(
                "reward {} needs CIDEr statistics from training references",
                cfg.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// Reward of one caption for one image (no baseline attached).
pub fn compute_reward(
    cfg: &RewardConfig,
    models: &RewardModels,
    image: &ImageRecord,
    caption: &Caption,
    references: Option<&[Caption]>,
) -> Result<RewardBreakdown> {
    models.check(cfg)?;
    let refs = match references {
        Some(r) if !r.is_empty() => Some(r),
        _ => None,
    };
    if cfg.kind.needs_references() && refs.is_none() {
        return Err(Error::MissingReferences(Some(image.image_id)));
    }
    let clip_s = match &models.encoder {
        Some(enc) => {
            let score = enc
                .encode_image(image)
                .and_then(|img| clip_score(&cfg.clip, &img, &enc.encode_text(caption)?));
            if cfg.kind.needs_encoder() {
                Some(score?)
            } else {
                score.ok()
            }
        }
        None => None,
    };
    let grammar = match (cfg.kind.needs_grammar_head(), &models.grammar_head, &models.encoder) {
        (true, Some(head), Some(enc)) => Some(head.score(enc, caption)?),
        _ => None,
    };
    let cider = match (&models.cider, refs) {
        (Some(stats), Some(r)) if cfg.kind.needs_references() => Some(stats.score(caption, r)?),
        _ => None,
    };
    let combined = combine_reward(cfg, clip_s, grammar, cider)?;
    Ok(RewardBreakdown {
        clip_s,
        grammar,
        cider,
        combined,
        baseline: None,
        advantage: None,
    })
}

/// The combined reward from its components.
pub fn combine_reward(cfg: &RewardConfig, clip_s: Option<f64>, grammar: Option<f64>, cider: Option<f64>) -> Result<f64> {
    let need = |v: Option<f64>, what: &str| {
        v.ok_or_else(|| Error::ConfigInvalid(format!("reward {} is missing its {what} term", cfg.kind.as_str())))
    };
    Ok(match cfg.kind {
        RewardKind::ClipS => need(clip_s, "clip_s")?,
        RewardKind::ClipSGrammar => cfg.lambda * need(clip_s, "clip_s")? + need(grammar, "grammar")?,
        RewardKind::Cider => need(cider, "cider")?,
        RewardKind::CiderPlusClipS => need(cider, "cider")? + cfg.mixing * need(clip_s, "clip_s")?,
    })
}
