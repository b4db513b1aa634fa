//! Representation dumps: `manifest.json` plus one `layer_<ℓ>_<split>.lup`
//! pair file per layer transition and split.
//!
//! Pair file layout, little-endian: magic `LUP1` | u32 version | u32 layer |
//! u32 dim | u64 count | count × { u32 seq_id | u32 pos | u32 token_id |
//! dim × f32 h_in | dim × f32 h_out }.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use layerlens_core::repr::{LayerDataset, ReprPair, Split};
use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LUP1";
const PAIR_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFile {
    pub layer_index: u32,
    pub path: String,
    pub count: u64,
    pub split: String,
}

/// Toy-model artifacts that let `run` intervene without a resume service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArtifacts {
    pub checkpoint: String,
    pub tokens: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub model_name: String,
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub dtype: String,
    pub seq_len: u32,
    pub seed: u64,
    pub layer_files: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hook: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyArtifacts>,
}

pub fn pair_file_name(layer: u32, split: Split) -> String {
    format!("layer_{layer}_{split}.lup")
}

impl DumpManifest {
    /// Manifest describing `datasets` with the standard file names.
    pub fn describe(model_name: &str, num_layers: u32, seq_len: u32, seed: u64, datasets: &[LayerDataset]) -> Self {
        DumpManifest {
            format_version: FORMAT_VERSION,
            model_name: model_name.to_string(),
            num_layers,
            hidden_dim: datasets.first().map_or(0, |d| d.dim() as u32),
            dtype: "f32".into(),
            seq_len,
            seed,
            layer_files: datasets
                .iter()
                .map(|d| LayerFile {
                    layer_index: d.layer_index(),
                    path: pair_file_name(d.layer_index(), d.split()),
                    count: d.len() as u64,
                    split: d.split().to_string(),
                })
                .collect(),
            hook: Some("block_output".into()),
            toy: None,
        }
    }

    fn validate(&self, at: &Path) -> Result<()> {
        let bad = |msg: String| Err(LensError::format(at, msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "version mismatch: format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.dtype != "f32" {
            return bad(format!("unsupported dtype {:?}", self.dtype));
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive".into());
        }
        if self.num_layers < 2 {
            return bad("num_layers must be at least 2".into());
        }
        let mut keys = BTreeSet::new();
        for f in &self.layer_files {
            let split =
                Split::parse(&f.split).ok_or_else(|| LensError::format(at, format!("unknown split {:?}", f.split)))?;
            if f.layer_index >= self.num_layers {
                return bad(format!(
                    "layer {} out of range for {} layers",
                    f.layer_index, self.num_layers
                ));
            }
            if !keys.insert((f.layer_index, split)) {
                return bad(format!("layer {} split {} listed twice", f.layer_index, f.split));
            }
            if Path::new(&f.path).is_absolute() || f.path.contains("..") {
                return bad(format!("layer file path {:?} must stay inside the dump", f.path));
            }
        }
        Ok(())
    }

    pub fn splits(&self, layer: u32) -> impl Iterator<Item = &LayerFile> {
        self.layer_files.iter().filter(move |f| f.layer_index == layer)
    }

    /// Distinct layer indices with at least one file, ascending.
    pub fn layers(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.layer_files.iter().map(|f| f.layer_index).collect();
        set.into_iter().collect()
    }
}

pub fn encode_pairs(dataset: &LayerDataset) -> Vec<u8> {
    let d = dataset.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + dataset.len() * (12 + 8 * d));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&PAIR_VERSION.to_le_bytes());
    out.extend_from_slice(&dataset.layer_index().to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for p in dataset.pairs() {
        out.extend_from_slice(&p.seq_id.to_le_bytes());
        out.extend_from_slice(&p.pos.to_le_bytes());
        out.extend_from_slice(&p.token_id.to_le_bytes());
        for v in p.h_in.iter().chain(&p.h_out) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Header fields of a pair file: `(layer, dim, count)`.
pub fn decode_header(bytes: &[u8], at: &Path) -> Result<(u32, usize, u64)> {
    if bytes.len() < HEADER_LEN {
        return Err(LensError::format(at, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(LensError::format(at, "bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if u32_at(4) != PAIR_VERSION {
        return Err(LensError::format(
            at,
            format!("version mismatch: pair file version {}", u32_at(4)),
        ));
    }
    let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    Ok((u32_at(8), u32_at(12) as usize, count))
}

pub fn decode_pairs(bytes: &[u8], split: Split, at: &Path) -> Result<LayerDataset> {
    let (layer, dim, count) = decode_header(bytes, at)?;
    let record = 12 + 8 * dim;
    let body = &bytes[HEADER_LEN..];
    if dim == 0 || (body.len() as u64) != count.saturating_mul(record as u64) {
        return Err(LensError::format(
            at,
            "dimension mismatch: payload length disagrees with header",
        ));
    }
    let pairs = body
        .chunks_exact(record)
        .map(|r| {
            let word = |i: usize| u32::from_le_bytes(r[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
            let floats: Vec<f32> = r[12..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ReprPair {
                seq_id: word(0),
                pos: word(1),
                token_id: word(2),
                h_in: floats[..dim].to_vec(),
                h_out: floats[dim..].to_vec(),
            }
        })
        .collect();
    LayerDataset::new(layer, dim, split, pairs).map_err(|e| LensError::format(at, e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| LensError::io(path, e))
}

/// Writes `manifest` and one pair file per dataset into `dir`. The manifest
/// must list exactly the given datasets.
pub fn write_dump(manifest: &DumpManifest, datasets: &[LayerDataset], dir: &Path) -> Result<()> {
    let mpath = dir.join(MANIFEST);
    manifest.validate(&mpath)?;
    let mismatch = |msg: String| LensError::format(&mpath, format!("manifest/dataset mismatch: {msg}"));
    if manifest.layer_files.len() != datasets.len() {
        return Err(mismatch(format!(
            "{} files declared, {} datasets given",
            manifest.layer_files.len(),
            datasets.len()
        )));
    }
    for (f, d) in manifest.layer_files.iter().zip(datasets) {
        if f.layer_index != d.layer_index()
            || f.split != d.split().as_str()
            || f.count != d.len() as u64
            || d.dim() != manifest.hidden_dim as usize
        {
            return Err(mismatch(format!("entry for {} does not describe its dataset", f.path)));
        }
        d.check_positions(manifest.seq_len as usize)
            .map_err(|e| mismatch(e.to_string()))?;
    }
    fs::create_dir_all(dir).map_err(|e| LensError::io(dir, e))?;
    for (f, d) in manifest.layer_files.iter().zip(datasets) {
        write_file(&dir.join(&f.path), &encode_pairs(d))?;
    }
    let mut json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    json.push(b'\n');
    write_file(&mpath, &json)
}

pub fn read_manifest(dir: &Path) -> Result<DumpManifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| LensError::io(&mpath, e))?;
    let manifest: DumpManifest = serde_json::from_slice(&text).map_err(|e| LensError::format(&mpath, e.to_string()))?;
    manifest.validate(&mpath)?;
    Ok(manifest)
}

/// Loads one listed pair file, checking it against the manifest.
pub fn read_layer_file(dir: &Path, manifest: &DumpManifest, file: &LayerFile) -> Result<LayerDataset> {
    let path: PathBuf = dir.join(&file.path);
    let bytes = fs::read(&path).map_err(|e| LensError::io(&path, e))?;
    let split = Split::parse(&file.split).expect("validated manifest");
    let (layer, dim, count) = decode_header(&bytes, &path)?;
    if layer != file.layer_index || dim != manifest.hidden_dim as usize || count != file.count {
        return Err(LensError::format(&path, "header disagrees with manifest"));
    }
    let ds = decode_pairs(&bytes, split, &path)?;
    ds.check_positions(manifest.seq_len as usize)
        .map_err(|e| LensError::format(&path, e.to_string()))?;
    Ok(ds)
}

/// Reads and validates a whole dump, in manifest order.
pub fn read_dump(dir: &Path) -> Result<(DumpManifest, Vec<LayerDataset>)> {
    let manifest = read_manifest(dir)?;
    let datasets = manifest
        .layer_files
        .iter()
        .map(|f| read_layer_file(dir, &manifest, f))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, datasets))
}

/// Finds the dataset for `(layer, split)` in `read_dump` output.
pub fn find(datasets: &[LayerDataset], layer: u32, split: Split) -> Option<&LayerDataset> {
    datasets.iter().find(|d| d.layer_index() == layer && d.split() == split)
}
