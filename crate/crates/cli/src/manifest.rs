//! Run manifests: the resolved configuration, input digests and output
//! digests of one subcommand invocation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use capreward_core::data_io::{read_json, write_json};
use capreward_core::Error;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT: &str = "capreward.manifest";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: Value,
    /// Input role to absolute path and digest.
    pub inputs: BTreeMap<String, FileDigest>,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest_inputs(inputs: &BTreeMap<String, PathBuf>) -> CliResult<BTreeMap<String, FileDigest>> {
    inputs
        .iter()
        .map(|(role, path)| {
            let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
            Ok((
                role.clone(),
                FileDigest {
                    path: abs.display().to_string(),
                    sha256: sha256_file(path)?,
                },
            ))
        })
        .collect()
}

pub fn digest_outputs(dir: &Path, rel: &[String]) -> CliResult<Vec<FileDigest>> {
    let mut out: Vec<FileDigest> = rel
        .iter()
        .map(|r| {
            Ok(FileDigest {
                path: r.clone(),
                sha256: sha256_file(&dir.join(r))?,
            })
        })
        .collect::<CliResult<_>>()?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let m: Manifest = read_json(path)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::parse(path.display().to_string(), format!("not a manifest: {:?}", m.format)).into());
        }
        Ok(m)
    }

    /// Input paths, after checking each file still has its recorded digest.
    pub fn verified_inputs(&self) -> CliResult<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        for (role, d) in &self.inputs {
            let path = PathBuf::from(&d.path);
            let now = sha256_file(&path)?;
            if now != d.sha256 {
                return Err(CliError::Replay(format!("input {role} ({}) changed since the run", d.path)));
            }
            out.insert(role.clone(), path);
        }
        Ok(out)
    }

    /// Names of outputs whose digests differ from `other`'s.
    pub fn output_differences(&self, other: &Manifest) -> Vec<String> {
        let theirs: BTreeMap<&str, &str> = other
            .outputs
            .iter()
            .map(|d| (d.path.as_str(), d.sha256.as_str()))
            .collect();
        let ours: BTreeMap<&str, &str> = self.outputs.iter().map(|d| (d.path.as_str(), d.sha256.as_str())).collect();
        let mut diff: Vec<String> = ours
            .iter()
            .filter(|(p, h)| theirs.get(*p) != Some(*h))
            .map(|(p, _)| p.to_string())
            .collect();
        diff.extend(theirs.keys().filter(|p| !ours.contains_key(*p)).map(|p| p.to_string()));
        diff
    }
}
