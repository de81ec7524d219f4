//! JSON file formats. Every file carries a `format` tag and a `version`.
//!
//! | format tag                  | contents                                     |
//! |-----------------------------|----------------------------------------------|
//! | `capreward.captions`        | `images: [{image_id, captions: [str]}]`      |
//! | `capreward.fine_grained`    | `images: [FineGrainedAnnotation]`            |
//! | `capreward.world_split`     | `split, d_img, examples: [WorldExample]`     |
//! | `capreward.generations`     | `records: [{image_id, caption, total_logprob, method}]` |
//! | `capreward.embeddings`      | `dim, rows: [{image_id, vector}]`            |
//!
//! Caption and annotation loaders also accept a world split file and pull
//! the matching part out of it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DatasetSplit, FineGrainedAnnotation, SplitName, WorldExample};
use crate::error::{Error, Result};
use crate::textproc::Caption;

pub const FORMAT_VERSION: u32 = 1;

const CAPTIONS: &str = "capreward.captions";
const FINE_GRAINED: &str = "capreward.fine_grained";
const WORLD_SPLIT: &str = "capreward.world_split";
const GENERATIONS: &str = "capreward.generations";
const EMBEDDINGS: &str = "capreward.embeddings";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Reads a file, checks its header, and returns `(format, body)`.
fn read_tagged(path: &Path, accepted: &[&str]) -> Result<(String, Value)> {
    let ctx = path.display().to_string();
    let value: Value = read_json(path)?;
    let format = value
        .get("format")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse(&ctx, "missing \"format\" field"))?
        .to_owned();
    if !accepted.contains(&format.as_str()) {
        return Err(Error::parse(&ctx, format!("expected one of {accepted:?}, found {format:?}")));
    }
    let version = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::parse(&ctx, "missing \"version\" field"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::parse(&ctx, format!("unsupported version {version}")));
    }
    Ok((format, value))
}

/// Deserializes each element of `value[key]` with its index in the context.
fn records<T: DeserializeOwned>(path: &Path, value: &Value, key: &str) -> Result<Vec<T>> {
    let ctx = path.display().to_string();
    let list = value
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(&ctx, format!("missing \"{key}\" array")))?;
    list.iter()
        .enumerate()
        .map(|(i, v)| T::deserialize(v).map_err(|e| Error::parse(format!("{ctx}: {key}[{i}]"), e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub image_id: u64,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionFile {
    pub format: String,
    pub version: u32,
    pub images: Vec<CaptionEntry>,
}

pub fn write_captions(path: &Path, captions: &BTreeMap<u64, Vec<Caption>>) -> Result<()> {
    let file = CaptionFile {
        format: CAPTIONS.into(),
        version: FORMAT_VERSION,
        images: captions
            .iter()
            .map(|(&image_id, caps)| CaptionEntry {
                image_id,
                captions: caps.iter().map(|c| c.text().to_owned()).collect(),
            })
            .collect(),
    };
    write_json(path, &file)
}

/// Loads reference captions keyed by image id, normalizing on the way in.
pub fn load_captions(path: &Path) -> Result<BTreeMap<u64, Vec<Caption>>> {
    let (format, value) = read_tagged(path, &[CAPTIONS, WORLD_SPLIT])?;
    let mut out = BTreeMap::new();
    if format == WORLD_SPLIT {
        for ex in records::<WorldExample>(path, &value, "examples")? {
            if ex.references.is_empty() {
                return Err(Error::EmptyEntry(ex.image.image_id));
            }
            out.insert(ex.image.image_id, ex.references);
        }
        return Ok(out);
    }
    for (i, entry) in records::<CaptionEntry>(path, &value, "images")?.into_iter().enumerate() {
        if entry.captions.is_empty() {
            return Err(Error::EmptyEntry(entry.image_id));
        }
        let caps = entry
            .captions
            .iter()
            .map(|c| {
                Caption::new(c).map_err(|e| Error::parse(format!("{}: images[{i}]", path.display()), e))
            })
            .collect::<Result<Vec<_>>>()?;
        if out.insert(entry.image_id, caps).is_some() {
            return Err(Error::parse(
                format!("{}: images[{i}]", path.display()),
                format!("duplicate image_id {}", entry.image_id),
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedFile {
    pub format: String,
    pub version: u32,
    pub images: Vec<FineGrainedAnnotation>,
}

pub fn write_fine_grained(path: &Path, annotations: &BTreeMap<u64, FineGrainedAnnotation>) -> Result<()> {
    let file = FineGrainedFile {
        format: FINE_GRAINED.into(),
        version: FORMAT_VERSION,
        images: annotations.values().cloned().collect(),
    };
    write_json(path, &file)
}

/// Loads fine-grained annotations; all four criteria are required per image.
pub fn load_fine_grained(path: &Path) -> Result<BTreeMap<u64, FineGrainedAnnotation>> {
    let (format, value) = read_tagged(path, &[FINE_GRAINED, WORLD_SPLIT])?;
    let list: Vec<FineGrainedAnnotation> = if format == WORLD_SPLIT {
        records::<WorldExample>(path, &value, "examples")?
            .into_iter()
            .map(|ex| ex.annotation)
            .collect()
    } else {
        records(path, &value, "images")?
    };
    let mut out = BTreeMap::new();
    for mut a in list {
        a.normalize_in_place()?;
        out.insert(a.image_id, a);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSplitFile {
    pub format: String,
    pub version: u32,
    pub split: SplitName,
    pub d_img: usize,
    pub examples: Vec<WorldExample>,
}

pub fn write_world_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let file = WorldSplitFile {
        format: WORLD_SPLIT.into(),
        version: FORMAT_VERSION,
        split: split.name,
        d_img: split.examples.first().map_or(0, |e| e.image.features.len()),
        examples: split.examples.clone(),
    };
    write_json(path, &file)
}

pub fn load_world_split(path: &Path) -> Result<DatasetSplit> {
    let (_, value) = read_tagged(path, &[WORLD_SPLIT])?;
    let name: SplitName = serde_json::from_value(value.get("split").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::parse(format!("{}: split", path.display()), e))?;
    let examples: Vec<WorldExample> = records(path, &value, "examples")?;
    for ex in &examples {
        if ex.references.is_empty() {
            return Err(Error::EmptyEntry(ex.image.image_id));
        }
    }
    Ok(DatasetSplit { name, examples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub image_id: u64,
    pub caption: String,
    pub total_logprob: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFile {
    pub format: String,
    pub version: u32,
    pub records: Vec<GenerationRecord>,
}

pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let file = GenerationFile {
        format: GENERATIONS.into(),
        version: FORMAT_VERSION,
        records: records.to_vec(),
    };
    write_json(path, &file)
}

pub fn load_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let (_, value) = read_tagged(path, &[GENERATIONS])?;
    records(path, &value, "records")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub image_id: u64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

pub fn write_embeddings(path: &Path, dim: usize, rows: &[EmbeddingRow]) -> Result<()> {
    if let Some(bad) = rows.iter().find(|r| r.vector.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.vector.len(),
        });
    }
    let table = EmbeddingTable {
        format: EMBEDDINGS.into(),
        version: FORMAT_VERSION,
        dim,
        rows: rows.to_vec(),
    };
    write_json(path, &table)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let (_, value) = read_tagged(path, &[EMBEDDINGS])?;
    let table: EmbeddingTable =
        serde_json::from_value(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    if let Some(bad) = table.rows.iter().find(|r| r.vector.len() != table.dim) {
        return Err(Error::DimensionMismatch {
            expected: table.dim,
            got: bad.vector.len(),
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_world, WorldConfig};

    fn caps(lines: &[&str]) -> Vec<Caption> {
        lines.iter().map(|l| Caption::new(l).unwrap()).collect()
    }

    #[test]
    fn captions_round_trip_and_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caps.json");
        let mut m = BTreeMap::new();
        m.insert(3, caps(&["a cat", "the cat", "one cat", "cat here", "cats"]));
        m.insert(9, caps(&["a dog"]));
        write_captions(&path, &m).unwrap();
        let back = load_captions(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back[&3].len(), 5);

        fs::write(
            &path,
            r#"{"format":"capreward.captions","version":1,"images":[{"image_id":1,"captions":["A Dog!"]}]}"#,
        )
        .unwrap();
        assert_eq!(load_captions(&path).unwrap()[&1][0].text(), "a dog");
    }

    #[test]
    fn empty_caption_list_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caps.json");
        fs::write(
            &path,
            r#"{"format":"capreward.captions","version":1,"images":[{"image_id":42,"captions":[]}]}"#,
        )
        .unwrap();
        assert!(matches!(load_captions(&path), Err(Error::EmptyEntry(42))));
    }

    #[test]
    fn parse_errors_carry_record_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caps.json");
        fs::write(
            &path,
            r#"{"format":"capreward.captions","version":1,"images":[{"image_id":1,"captions":["x"]},{"captions":["y"]}]}"#,
        )
        .unwrap();
        let err = load_captions(&path).unwrap_err().to_string();
        assert!(err.contains("images[1]") && err.contains("image_id"), "{err}");
        fs::write(&path, r#"{"format":"capreward.captions","version":7,"images":[]}"#).unwrap();
        assert!(load_captions(&path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn fine_grained_table_one_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fg.json");
        let json = r#"{
          "format": "capreward.fine_grained", "version": 1,
          "images": [{
            "image_id": 1,
            "background": ["white house", "truck digging soil in front of the house", "trees and bushes"],
            "object": ["a blue car", "a blue car", "black car", "car", "dozer"],
            "relation": ["parked in the front yard", "in front", "parked in front of", "Parked", "car standing on the road"],
            "overall": [
              "A blue car parked in the front yard of an off white house with a truck digging soil in front of the house.",
              "A blue car in front of a house surrounded by a small garden with trees and bushes in the background.",
              "A black car parked in front of a house with a mini excavator behind it with other houses in the background.",
              "A car and a dozer parked in front of two white and grey buildings and greenery on both sides.",
              "A black car standing on the road surrounded by green bushes on both sides and two houses and a blue and white colored machine in the background."
            ],
            "annotator_count": {"background": 5, "object": 5, "relation": 5, "overall": 5}
          }]
        }"#;
        fs::write(&path, json).unwrap();
        let m = load_fine_grained(&path).unwrap();
        let a = &m[&1];
        assert!(a.background.contains(&"white house".to_string()));
        assert!(a.object.contains(&"a blue car".to_string()));
        assert!(a.relation.contains(&"parked in front of".to_string()));
        assert!(a.relation.contains(&"parked".to_string()));
        assert_eq!(a.overall.len(), 5);
        assert!(a.overall[0].text().starts_with("a blue car parked in the front yard"));

        let out = dir.path().join("fg2.json");
        write_fine_grained(&out, &m).unwrap();
        assert_eq!(load_fine_grained(&out).unwrap(), m);

        let missing = json.replace("\"relation\"", "\"relations\"");
        fs::write(&path, missing).unwrap();
        let err = load_fine_grained(&path).unwrap_err().to_string();
        assert!(err.contains("relation"), "{err}");
    }

    #[test]
    fn world_split_round_trip_and_views() {
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&WorldConfig::with_images(20), 1).unwrap();
        let path = dir.path().join("test.json");
        write_world_split(&path, &world.test).unwrap();
        assert_eq!(load_world_split(&path).unwrap(), world.test);
        let refs = load_captions(&path).unwrap();
        assert_eq!(refs.len(), world.test.len());
        assert!(refs.values().all(|r| r.len() == 5));
        let fg = load_fine_grained(&path).unwrap();
        assert_eq!(fg.len(), world.test.len());
    }

    #[test]
    fn generations_and_embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gp = dir.path().join("gen.json");
        let recs = vec![GenerationRecord {
            image_id: 4,
            caption: "a red cube".into(),
            total_logprob: -1.25,
            method: "beam".into(),
        }];
        write_generations(&gp, &recs).unwrap();
        assert_eq!(load_generations(&gp).unwrap(), recs);

        let ep = dir.path().join("emb.json");
        let rows = vec![EmbeddingRow {
            image_id: 1,
            vector: vec![0.1, 0.2],
        }];
        write_embeddings(&ep, 2, &rows).unwrap();
        assert_eq!(load_embeddings(&ep).unwrap().rows, rows);
        assert!(write_embeddings(&ep, 3, &rows).is_err());
    }
}
