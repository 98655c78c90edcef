use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "hiermoe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Offset into the blob, in f64 elements.
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// "stage1", "stage2", "finetune", …
    pub kind: String,
    pub config: RunConfig,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters plus the manifest that describes them. Non-parameter arrays
/// (such as voxel fingerprints) live in the same store under `aux.` names.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub store: ParamStore,
}

pub const AUX_PREFIX: &str = "aux.";

impl Checkpoint {
    pub fn new(kind: &str, config: RunConfig, step: u64, metrics: BTreeMap<String, f64>, store: ParamStore) -> Self {
        Self {
            manifest: CheckpointManifest {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                kind: kind.into(),
                config,
                step,
                metrics,
                blob: String::new(),
                tensors: Vec::new(),
            },
            store,
        }
    }

    /// Write `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
    pub fn save(&mut self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut offset = 0u64;
        for (_, name, t) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                offset,
                shape: t.shape().to_vec(),
            });
            offset += t.len() as u64;
            for &x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        self.manifest.tensors = tensors;
        self.manifest.blob = format!("{stem}.bin");
        let bin = dir.join(&self.manifest.blob);
        std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        let path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unknown format {:?}", manifest.format)));
        }
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: CHECKPOINT_VERSION,
                found: manifest.version,
            });
        }
        let bin = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let total: u64 = manifest
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum();
        if (bytes.len() as u64) < total * 8 {
            return Err(Error::Truncated {
                path: bin,
                expected: total * 8,
                found: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 != total * 8 {
            return Err(bad(format!("blob holds {} bytes, directory needs {}", bytes.len(), total * 8)));
        }
        let mut seen = HashSet::new();
        let mut store = ParamStore::new();
        let mut expect = 0u64;
        for t in &manifest.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(bad(format!("tensor {} listed twice", t.name)));
            }
            if t.offset != expect {
                return Err(bad(format!("tensor {} at offset {}, expected {expect}", t.name, t.offset)));
            }
            let n = t.shape.iter().product::<usize>();
            let start = t.offset as usize * 8;
            let data = bytes[start..start + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
            expect += n as u64;
        }
        Ok(Self { manifest, store })
    }

    /// Names and bit patterns of every tensor whose name starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> Vec<(String, Vec<u64>)> {
        self.store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    }
}
