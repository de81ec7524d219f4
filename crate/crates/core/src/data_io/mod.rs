//! Synthetic world generation and the on-disk formats shared by every stage.

mod formats;
mod world;

pub use formats::{
    load_captions, load_embeddings, load_fine_grained, load_generations, load_world_split, read_json,
    write_captions, write_embeddings, write_fine_grained, write_generations, write_json,
    write_world_split, CaptionFile, EmbeddingRow, EmbeddingTable, FineGrainedFile, GenerationFile,
    GenerationRecord, WorldSplitFile, FORMAT_VERSION,
};
pub use world::{
    generate_world, DatasetSplit, FeatureRenderer, Relation, SceneObject, SceneSpec, SplitName,
    World, WorldConfig, WorldExample, BACKGROUNDS, COLORS, PREDICATES, SCENE_CODE_DIM, SHAPES,
    SIZES,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textproc::{normalize, Caption};

/// An image as the models see it: an id and a dense feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Background,
    Object,
    Relation,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Background, Criterion::Object, Criterion::Relation];

    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::Background => "background",
            Criterion::Object => "object",
            Criterion::Relation => "relation",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorCount {
    pub background: usize,
    pub object: usize,
    pub relation: usize,
    pub overall: usize,
}

impl AnnotatorCount {
    pub fn uniform(n: usize) -> Self {
        Self {
            background: n,
            object: n,
            relation: n,
            overall: n,
        }
    }
}

/// Fine-grained annotation of one image: phrases per criterion plus
/// whole-image captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedAnnotation {
    pub image_id: u64,
    pub background: Vec<String>,
    pub object: Vec<String>,
    pub relation: Vec<String>,
    pub overall: Vec<Caption>,
    pub annotator_count: AnnotatorCount,
}

impl FineGrainedAnnotation {
    pub fn new(
        image_id: u64,
        background: Vec<String>,
        object: Vec<String>,
        relation: Vec<String>,
        overall: Vec<Caption>,
        annotators: usize,
    ) -> Result<Self> {
        let mut a = Self {
            image_id,
            background,
            object,
            relation,
            overall,
            annotator_count: AnnotatorCount::uniform(annotators),
        };
        a.normalize_in_place()?;
        Ok(a)
    }

    /// Normalizes every phrase and checks that no criterion is empty.
    pub fn normalize_in_place(&mut self) -> Result<()> {
        let id = self.image_id;
        for list in [&mut self.background, &mut self.object, &mut self.relation] {
            if list.is_empty() {
                return Err(Error::EmptyEntry(id));
            }
            for phrase in list.iter_mut() {
                *phrase = normalize(phrase).map_err(|_| Error::EmptyEntry(id))?;
            }
        }
        if self.overall.is_empty() {
            return Err(Error::EmptyEntry(id));
        }
        Ok(())
    }

    pub fn phrases(&self, criterion: Criterion) -> &[String] {
        match criterion {
            Criterion::Background => &self.background,
            Criterion::Object => &self.object,
            Criterion::Relation => &self.relation,
        }
    }
}
