use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::world::{Dataset, WorldSpec};

pub const MAGIC: [u8; 4] = *b"MRBD";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 40;

/// Sibling JSON of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: WorldSpec,
    pub subject: u64,
    pub data_seed: u64,
    pub n: u64,
}

/// `data.mrbd` → `data.mrbd.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn record_width(v: usize, d_embed: usize, d: usize) -> usize {
    v + 2 * d_embed + d
}

pub fn save_dataset(path: &Path, ds: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    let (n, v, de, d) = (ds.len(), ds.voxels(), ds.target(), ds.latent());
    let width = record_width(v, de, d);
    let mut buf = Vec::with_capacity(HEADER_BYTES + n * width * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for w in [v, de, d] {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&[0u8; 12]);
    for r in 0..n {
        for part in [&ds.x, &ds.y_img, &ds.y_text, &ds.s] {
            for &x in part.row_slice(r) {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&mpath, e))?;
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |expected: u64| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_BYTES as u64));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_BYTES {
        return Err(truncated(HEADER_BYTES as u64));
    }
    let version = u32_at(&bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let (v, de, d) = (
        u32_at(&bytes, 16) as usize,
        u32_at(&bytes, 20) as usize,
        u32_at(&bytes, 24) as usize,
    );
    let width = record_width(v, de, d) as u64;
    let expected = n
        .checked_mul(width * 4)
        .and_then(|b| b.checked_add(HEADER_BYTES as u64))
        .ok_or_else(|| Error::invalid("load_dataset", "header sizes overflow"))?;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    if bytes.len() as u64 > expected {
        return Err(Error::invalid(
            "load_dataset",
            format!("{} trailing bytes after {n} records", bytes.len() as u64 - expected),
        ));
    }
    let n = n as usize;
    let mut cols: [Vec<f64>; 4] = [
        Vec::with_capacity(n * v),
        Vec::with_capacity(n * de),
        Vec::with_capacity(n * de),
        Vec::with_capacity(n * d),
    ];
    let mut vals = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for _ in 0..n {
        for (k, w) in [v, de, de, d].into_iter().enumerate() {
            cols[k].extend(vals.by_ref().take(w));
        }
    }
    let [x, yi, yt, s] = cols;
    Ok(Dataset {
        x: Tensor::matrix(n, v, x)?,
        y_img: Tensor::matrix(n, de, yi)?,
        y_text: Tensor::matrix(n, de, yt)?,
        s: Tensor::matrix(n, d, s)?,
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))
}
