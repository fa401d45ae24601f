//! Artifact sidecars: every stage output carries the hash of the config
//! slice that produced it plus checksums of its files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use georewrite_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub stage: String,
    pub hash: String,
    /// The config slice the hash covers, kept for readable diffs.
    pub key: Value,
    /// Relative output path to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

/// Sidecar path: `dir/name.meta.json` for an artifact `dir/name[.ext]`.
pub fn sidecar(artifact: &Path) -> PathBuf {
    let stem = artifact
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    artifact.with_file_name(format!("{stem}.meta.json"))
}

pub fn hash_value(v: &Value) -> String {
    // serde_json maps are ordered, so this serialization is canonical.
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Checksums of a file, or of every file below a directory keyed by its
/// path relative to `base`.
pub fn checksum_tree(path: &Path, base: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(path, e)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            checksum_tree(&p, base, out)?;
        }
        Ok(())
    } else {
        let rel = path
            .strip_prefix(base)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        out.insert(rel, sha256_file(path)?);
        Ok(())
    }
}

impl Meta {
    pub fn new(stage: &str, key: Value, outputs: &[PathBuf], base: &Path) -> Result<Self> {
        let mut sums = BTreeMap::new();
        for o in outputs {
            checksum_tree(o, base, &mut sums)?;
        }
        Ok(Meta {
            stage: stage.to_string(),
            hash: hash_value(&key),
            key,
            outputs: sums,
        })
    }

    pub fn read(path: &Path) -> Result<Option<Meta>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// True when every recorded output still exists with its checksum.
    pub fn outputs_intact(&self, base: &Path) -> Result<bool> {
        for (rel, sum) in &self.outputs {
            let p = base.join(rel);
            if !p.is_file() || sha256_file(&p)? != *sum {
                return Ok(false);
            }
        }
        Ok(!self.outputs.is_empty())
    }
}

/// Line-per-leaf diff of two JSON values, `path: old -> new`.
pub fn json_diff(old: &Value, new: &Value) -> String {
    let mut lines = Vec::new();
    diff_into("", old, new, &mut lines);
    if lines.is_empty() {
        lines.push("(config slices are equal; hash scheme changed)".to_string());
    }
    lines.join("\n")
}

fn diff_into(path: &str, old: &Value, new: &Value, out: &mut Vec<String>) {
    match (old, new) {
        (Value::Object(a), Value::Object(b)) => {
            let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            for k in keys {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (a.get(k), b.get(k)) {
                    (Some(x), Some(y)) => diff_into(&p, x, y, out),
                    (Some(x), None) => out.push(format!("  {p}: {x} -> (absent)")),
                    (None, Some(y)) => out.push(format!("  {p}: (absent) -> {y}")),
                    (None, None) => {}
                }
            }
        }
        _ if old != new => out.push(format!("  {path}: {old} -> {new}")),
        _ => {}
    }
}
