//! `LMP1` map files: the fitted maps of one layer, keyed by the token they
//! were evaluated at, for reuse across metric runs.
//!
//! Layout, little-endian: magic `LMP1` | u32 version | u32 layer | u32 dim |
//! u64 count | count × record. A record is u32 seq_id | u32 pos | u8 class |
//! u32 rank | u8 flags | u64 anchor | f64 ridge | params | optional SVD.
//! Matrices are stored as u32 rows | u32 cols | column-major f64.

use std::fs;
use std::path::Path;

use layerlens_core::fit::{Activation, MapClass, MapParams, MlpParams, TokenwiseMap};
use layerlens_core::linalg::Svd;
use nalgebra::{DMatrix, DVector};

use crate::error::{LensError, Result};

const MAGIC: &[u8; 4] = b"LMP1";
const VERSION: u32 = 1;

const DEGENERATE: u8 = 1;
const INTERPOLATED: u8 = 2;
const HAS_ANCHOR: u8 = 4;
const HAS_SVD: u8 = 8;

/// A map together with the token it was assigned to.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedMap {
    pub seq_id: u32,
    pub pos: u32,
    pub map: TokenwiseMap,
}

/// Decoded contents of a map file.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    pub layer: u32,
    pub dim: usize,
    pub maps: Vec<KeyedMap>,
}

pub fn map_file_name(layer: u32) -> String {
    format!("maps_{layer}.lmp")
}

fn class_code(class: MapClass) -> (u8, u32) {
    match class {
        MapClass::GlobalDiagPsd => (0, 0),
        MapClass::LocalDiagPsd => (1, 0),
        MapClass::LocalLowRank { rank } => (2, rank as u32),
        MapClass::Orthogonal => (3, 0),
        MapClass::Mlp => (4, 0),
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_vector(out: &mut Vec<u8>, v: &DVector<f64>) {
    put_matrix(out, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
}

pub fn encode(layer: u32, dim: usize, maps: &[KeyedMap]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&layer.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(maps.len() as u64).to_le_bytes());
    for KeyedMap { seq_id, pos, map } in maps {
        if map.dim() != dim {
            return Err(LensError::Config(format!(
                "map for sequence {seq_id} position {pos} has dimension {} instead of {dim}",
                map.dim()
            )));
        }
        let (code, rank) = class_code(map.class);
        let mut flags = 0;
        if map.degenerate {
            flags |= DEGENERATE;
        }
        if map.interpolated {
            flags |= INTERPOLATED;
        }
        if map.anchor_index.is_some() {
            flags |= HAS_ANCHOR;
        }
        if map.svd.is_some() {
            flags |= HAS_SVD;
        }
        out.extend_from_slice(&seq_id.to_le_bytes());
        out.extend_from_slice(&pos.to_le_bytes());
        out.push(code);
        out.extend_from_slice(&rank.to_le_bytes());
        out.push(flags);
        out.extend_from_slice(&(map.anchor_index.unwrap_or(0) as u64).to_le_bytes());
        out.extend_from_slice(&map.ridge.to_le_bytes());
        match &map.params {
            MapParams::Diagonal(d) => {
                out.push(0);
                put_vector(&mut out, d);
            }
            MapParams::Linear(a) => {
                out.push(1);
                put_matrix(&mut out, a);
            }
            MapParams::Mlp(p) => {
                out.push(2);
                out.push(match p.activation {
                    Activation::Tanh => 0,
                    Activation::Relu => 1,
                });
                put_matrix(&mut out, &p.w1);
                put_vector(&mut out, &p.b1);
                put_matrix(&mut out, &p.w2);
                put_vector(&mut out, &p.b2);
            }
        }
        if let Some(svd) = &map.svd {
            put_matrix(&mut out, &svd.u);
            put_vector(&mut out, &svd.sigma);
            put_matrix(&mut out, &svd.v);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self) -> Option<DMatrix<f64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let len = rows.checked_mul(cols)?;
        if len.checked_mul(8)? > self.bytes.len() - self.at {
            return None;
        }
        let data = (0..len).map(|_| self.f64()).collect::<Option<Vec<_>>>()?;
        Some(DMatrix::from_vec(rows, cols, data))
    }

    fn vector(&mut self) -> Option<DVector<f64>> {
        let m = self.matrix()?;
        (m.ncols() == 1).then(|| DVector::from_column_slice(m.as_slice()))
    }
}

fn decode_record(r: &mut Reader<'_>, dim: usize) -> std::result::Result<KeyedMap, String> {
    let short = || "truncated record".to_string();
    let seq_id = r.u32().ok_or_else(short)?;
    let pos = r.u32().ok_or_else(short)?;
    let code = r.u8().ok_or_else(short)?;
    let rank = r.u32().ok_or_else(short)? as usize;
    let flags = r.u8().ok_or_else(short)?;
    let anchor = r.u64().ok_or_else(short)?;
    let ridge = r.f64().ok_or_else(short)?;
    let class = match code {
        0 => MapClass::GlobalDiagPsd,
        1 => MapClass::LocalDiagPsd,
        2 => MapClass::LocalLowRank { rank },
        3 => MapClass::Orthogonal,
        4 => MapClass::Mlp,
        other => return Err(format!("unknown map class code {other}")),
    };
    let params = match r.u8().ok_or_else(short)? {
        0 => MapParams::Diagonal(r.vector().ok_or_else(short)?),
        1 => MapParams::Linear(r.matrix().ok_or_else(short)?),
        2 => {
            let activation = match r.u8().ok_or_else(short)? {
                0 => Activation::Tanh,
                1 => Activation::Relu,
                other => return Err(format!("unknown activation code {other}")),
            };
            MapParams::Mlp(MlpParams {
                w1: r.matrix().ok_or_else(short)?,
                b1: r.vector().ok_or_else(short)?,
                w2: r.matrix().ok_or_else(short)?,
                b2: r.vector().ok_or_else(short)?,
                activation,
            })
        }
        other => return Err(format!("unknown parameter kind {other}")),
    };
    let svd = if flags & HAS_SVD != 0 {
        Some(Svd {
            u: r.matrix().ok_or_else(short)?,
            sigma: r.vector().ok_or_else(short)?,
            v: r.matrix().ok_or_else(short)?,
        })
    } else {
        None
    };
    let map = TokenwiseMap {
        class,
        params,
        svd,
        anchor_index: (flags & HAS_ANCHOR != 0).then_some(anchor as usize),
        degenerate: flags & DEGENERATE != 0,
        interpolated: flags & INTERPOLATED != 0,
        ridge,
    };
    let consistent = match &map.params {
        MapParams::Diagonal(d) => d.len() == dim,
        MapParams::Linear(a) => a.shape() == (dim, dim),
        MapParams::Mlp(p) => {
            let h = p.w1.nrows();
            p.w1.ncols() == dim && p.b1.len() == h && p.w2.shape() == (dim, h) && p.b2.len() == dim
        }
    };
    if !consistent {
        return Err(format!(
            "dimension mismatch in map for sequence {seq_id} position {pos}"
        ));
    }
    let finite = match &map.params {
        MapParams::Diagonal(d) => d.iter().all(|x| x.is_finite()),
        MapParams::Linear(a) => a.iter().all(|x| x.is_finite()),
        MapParams::Mlp(p) => p.is_finite(),
    };
    if !finite || !ridge.is_finite() {
        return Err(format!("non-finite value in map for sequence {seq_id} position {pos}"));
    }
    Ok(KeyedMap { seq_id, pos, map })
}

pub fn decode(bytes: &[u8], at: &Path) -> Result<MapFile> {
    let bad = |msg: String| LensError::format(at, msg);
    let mut r = Reader { bytes, at: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic".into()));
    }
    let (version, layer, dim, count) = match (r.u32(), r.u32(), r.u32(), r.u64()) {
        (Some(v), Some(l), Some(d), Some(c)) => (v, l, d as usize, c),
        _ => return Err(bad("truncated header".into())),
    };
    if version != VERSION {
        return Err(bad(format!("version mismatch: map file version {version}")));
    }
    let mut maps = Vec::new();
    for _ in 0..count {
        maps.push(decode_record(&mut r, dim).map_err(bad)?);
    }
    if r.at != bytes.len() {
        return Err(bad("trailing bytes after last record".into()));
    }
    Ok(MapFile { layer, dim, maps })
}

pub fn save(path: &Path, layer: u32, dim: usize, maps: &[KeyedMap]) -> Result<()> {
    fs::write(path, encode(layer, dim, maps)?).map_err(|e| LensError::io(path, e))
}

pub fn load(path: &Path) -> Result<MapFile> {
    let bytes = fs::read(path).map_err(|e| LensError::io(path, e))?;
    decode(&bytes, path)
}
