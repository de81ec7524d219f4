//! Synthetic micro-world: scenes rendered to feature vectors, with captions
//! written from the same closed vocabulary.
//!
//! Reference captions deliberately describe only the largest object, the way
//! crowd-sourced captions tend to stick to the most prominent thing in view.
//! The distinctive caption and the fine-grained annotation cover the whole
//! scene, so the bias is measurable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{FineGrainedAnnotation, ImageRecord};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, substream, StreamRng};
use crate::tensor::{randn, Mat};
use crate::textproc::Caption;

pub const BACKGROUNDS: [&str; 6] = ["grass", "sand", "snow", "water", "road", "wood"];
pub const SHAPES: [&str; 5] = ["cube", "sphere", "cylinder", "cone", "pyramid"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "purple", "orange"];
/// Largest first.
pub const SIZES: [&str; 3] = ["big", "medium", "small"];
pub const PREDICATES: [&str; 6] = ["left of", "right of", "behind", "in front of", "next to", "above"];

const MAX_OBJECTS: usize = 3;
const SLOT_WIDTH: usize = 1 + SHAPES.len() + COLORS.len() + SIZES.len();
/// Width of the one-hot scene code that gets projected to `d_img`.
pub const SCENE_CODE_DIM: usize =
    BACKGROUNDS.len() + MAX_OBJECTS * SLOT_WIDTH + (MAX_OBJECTS - 1) * PREDICATES.len();

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: String,
    pub color: String,
    pub size: String,
}

impl SceneObject {
    pub fn phrase(&self) -> String {
        format!("{} {} {}", self.size, self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
}

/// Ground truth for one synthetic image. Objects are stored largest first,
/// so `objects[0]` is the salient one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: u64,
    pub background: String,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::ConfigInvalid(format!(
                "scene {} has {} objects",
                self.image_id,
                self.objects.len()
            )));
        }
        for r in &self.relations {
            if r.subject >= self.objects.len() || r.object >= self.objects.len() || r.subject == r.object {
                return Err(Error::ConfigInvalid(format!(
                    "scene {} has an invalid relation",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    /// One-hot code of the scene (background, object slots, relations).
    pub fn code(&self) -> Vec<f64> {
        let mut code = vec![0.0; SCENE_CODE_DIM];
        code[index_of(&BACKGROUNDS, &self.background)] = 1.0;
        for (slot, obj) in self.objects.iter().enumerate() {
            let base = BACKGROUNDS.len() + slot * SLOT_WIDTH;
            code[base] = 1.0;
            code[base + 1 + index_of(&SHAPES, &obj.shape)] = 1.0;
            code[base + 1 + SHAPES.len() + index_of(&COLORS, &obj.color)] = 1.0;
            code[base + 1 + SHAPES.len() + COLORS.len() + index_of(&SIZES, &obj.size)] = 1.0;
        }
        let rel_base = BACKGROUNDS.len() + MAX_OBJECTS * SLOT_WIDTH;
        for r in &self.relations {
            let slot = r.object - 1;
            code[rel_base + slot * PREDICATES.len() + index_of(&PREDICATES, &r.predicate)] = 1.0;
        }
        code
    }

    /// Everything in the scene: background, all objects and relations.
    pub fn distinctive_text(&self) -> String {
        let mut parts = vec![format!("a {}", self.objects[0].phrase())];
        for (k, r) in self.relations.iter().enumerate() {
            if k > 0 {
                parts.push("and".into());
            }
            parts.push(format!("{} a {}", r.predicate, self.objects[r.object].phrase()));
        }
        parts.push(format!("on the {}", self.background));
        parts.join(" ")
    }

    /// Caption templates that mention only the salient object.
    pub fn salient_texts(&self) -> Vec<String> {
        let o = &self.objects[0];
        let bg = &self.background;
        vec![
            format!("a {} {} {}", o.size, o.color, o.shape),
            format!("a {} {}", o.color, o.shape),
            format!("the {} {} {}", o.size, o.color, o.shape),
            format!("there is a {} {}", o.color, o.shape),
            format!("a {} {} on the {}", o.color, o.shape, bg),
            format!("a {} {} {} on the {}", o.size, o.color, o.shape, bg),
            format!("a photo of a {} {}", o.color, o.shape),
        ]
    }

    fn overall_texts(&self) -> Vec<String> {
        let d = self.distinctive_text();
        vec![
            d.clone(),
            format!("there is {d}"),
            format!("a photo of {d}"),
            format!("an image of {d}"),
            format!("a picture of {d}"),
        ]
    }

    pub fn annotation(&self, annotators: usize) -> Result<FineGrainedAnnotation> {
        let mut objects: Vec<String> = Vec::new();
        for o in &self.objects {
            let p = o.phrase();
            if !objects.contains(&p) {
                objects.push(p);
            }
        }
        let mut relations: Vec<String> = Vec::new();
        for r in &self.relations {
            if !relations.contains(&r.predicate) {
                relations.push(r.predicate.clone());
            }
        }
        let overall = self
            .overall_texts()
            .iter()
            .map(|t| Caption::new(t))
            .collect::<Result<Vec<_>>>()?;
        FineGrainedAnnotation::new(
            self.image_id,
            vec![self.background.clone()],
            objects,
            relations,
            overall,
            annotators,
        )
    }
}

fn index_of(set: &[&str], value: &str) -> usize {
    set.iter()
        .position(|s| *s == value)
        .unwrap_or_else(|| panic!("{value:?} is not in the closed vocabulary"))
}

/// Fixed random projection from scene codes to image features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRenderer {
    projection: Mat,
}

impl FeatureRenderer {
    pub fn new(seed: u64, d_img: usize) -> Self {
        let mut rng = substream(seed, "world/projection");
        Self {
            projection: randn(&mut rng, SCENE_CODE_DIM, d_img, 1.0 / (8.0f64).sqrt()),
        }
    }

    pub fn d_img(&self) -> usize {
        self.projection.ncols()
    }

    pub fn render(&self, scene: &SceneSpec) -> Vec<f64> {
        let code = ndarray::Array1::from(scene.code());
        code.dot(&self.projection).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_images: usize,
    pub d_img: usize,
    pub refs_per_image: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub annotators: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_images: 500,
            d_img: 64,
            refs_per_image: 5,
            min_objects: 2,
            max_objects: 3,
            train_fraction: 0.6,
            val_fraction: 0.2,
            annotators: 5,
        }
    }
}

impl WorldConfig {
    pub fn with_images(n_images: usize) -> Self {
        Self {
            n_images,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.n_images < 10 {
            return bad("n_images must be at least 10");
        }
        if self.d_img == 0 {
            return bad("d_img must be positive");
        }
        if self.refs_per_image == 0 || self.refs_per_image > 7 {
            return bad("refs_per_image must be in 1..=7");
        }
        if self.min_objects < 2 || self.max_objects > MAX_OBJECTS || self.min_objects > self.max_objects {
            return bad("objects per scene must satisfy 2 <= min <= max <= 3");
        }
        if self.annotators == 0 {
            return bad("annotators must be positive");
        }
        let (n_train, n_val, n_test) = self.split_sizes();
        if !(self.train_fraction > 0.0 && self.val_fraction > 0.0 && self.train_fraction + self.val_fraction < 1.0)
            || n_train == 0
            || n_val == 0
            || n_test == 0
        {
            return bad("split fractions must leave every split non-empty");
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_images;
        let n_train = (n as f64 * self.train_fraction).round() as usize;
        let n_val = (n as f64 * self.val_fraction).round() as usize;
        (n_train, n_val, n.saturating_sub(n_train + n_val))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// One image of the micro-world with all of its text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldExample {
    pub scene: SceneSpec,
    pub image: ImageRecord,
    pub references: Vec<Caption>,
    pub distinctive: Caption,
    pub annotation: FineGrainedAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub examples: Vec<WorldExample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn images(&self) -> Vec<ImageRecord> {
        self.examples.iter().map(|e| e.image.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl World {
    pub fn splits(&self) -> [&DatasetSplit; 3] {
        [&self.train, &self.val, &self.test]
    }
}

fn sample_scene(image_id: u64, cfg: &WorldConfig, rng: &mut StreamRng, scene_seed: u64) -> SceneSpec {
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    // Salient object is big or medium; every other object is strictly smaller.
    let salient_size = rng.random_range(0..SIZES.len() - 1);
    let mut objects = Vec::with_capacity(n_obj);
    for k in 0..n_obj {
        let size = if k == 0 {
            salient_size
        } else {
            rng.random_range(salient_size + 1..SIZES.len())
        };
        objects.push(SceneObject {
            shape: SHAPES[rng.random_range(0..SHAPES.len())].to_string(),
            color: COLORS[rng.random_range(0..COLORS.len())].to_string(),
            size: SIZES[size].to_string(),
        });
    }
    let relations = (1..n_obj)
        .map(|k| Relation {
            subject: 0,
            predicate: PREDICATES[rng.random_range(0..PREDICATES.len())].to_string(),
            object: k,
        })
        .collect();
    SceneSpec {
        image_id,
        background: BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())].to_string(),
        objects,
        relations,
        rng_seed: scene_seed,
    }
}

fn build_example(
    scene: SceneSpec,
    renderer: &FeatureRenderer,
    cfg: &WorldConfig,
) -> Result<WorldExample> {
    let mut rng = StreamRng::seed_from_u64(scene.rng_seed);
    let mut templates = scene.salient_texts();
    templates.shuffle(&mut rng);
    let references = templates[..cfg.refs_per_image]
        .iter()
        .map(|t| Caption::new(t))
        .collect::<Result<Vec<_>>>()?;
    let distinctive = Caption::new(&scene.distinctive_text())?;
    let annotation = scene.annotation(cfg.annotators)?;
    let image = ImageRecord {
        image_id: scene.image_id,
        features: renderer.render(&scene),
    };
    Ok(WorldExample {
        scene,
        image,
        references,
        distinctive,
        annotation,
    })
}

/// Generates train/val/test splits. A pure function of `(cfg, seed)`.
pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let renderer = FeatureRenderer::new(seed, cfg.d_img);
    let mut rng = substream(seed, "world/scenes");
    let mut examples = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let image_id = i as u64;
        let scene_seed = derive_seed(seed, &format!("world/scene/{i}"));
        let scene = sample_scene(image_id, cfg, &mut rng, scene_seed);
        examples.push(build_example(scene, &renderer, cfg)?);
    }
    let (n_train, n_val, _) = cfg.split_sizes();
    let test = examples.split_off(n_train + n_val);
    let val = examples.split_off(n_train);
    Ok(World {
        train: DatasetSplit {
            name: SplitName::Train,
            examples,
        },
        val: DatasetSplit {
            name: SplitName::Val,
            examples: val,
        },
        test: DatasetSplit {
            name: SplitName::Test,
            examples: test,
        },
    })
}
