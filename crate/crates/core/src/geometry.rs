//! Directional alignment and subspace energy of the full update, the
//! tokenwise update and the residual.

use alloc::vec::Vec;

// Float math comes from the trait on targets without inherent float methods.
use crate::error::{Error, Result};
use crate::fit::{MapClass, TokenwiseMap};
use crate::linalg::{dot, norm, sub, to_f64, ZERO_NORM};
use crate::repr::LayerDataset;
#[allow(unused_imports)]
use num_traits::Float;

/// `Δ_full = h_out − h_in`, `Δ_tok = T(h_in) − h_in`, `r = h_out − T(h_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateTriple {
    pub delta_full: Vec<f64>,
    pub delta_tok: Vec<f64>,
    pub residual: Vec<f64>,
    pub t_out: Vec<f64>,
}

pub fn make_triple(h_in: &[f64], h_out: &[f64], map: &TokenwiseMap) -> Result<UpdateTriple> {
    if h_in.len() != h_out.len() {
        return Err(Error::DimensionMismatch {
            expected: h_in.len(),
            got: h_out.len(),
        });
    }
    let t_out = map.apply(h_in)?;
    Ok(UpdateTriple {
        delta_full: sub(h_out, h_in),
        delta_tok: sub(&t_out, h_in),
        residual: sub(h_out, &t_out),
        t_out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// `|vᵀu| / (‖v‖‖u‖)`.
    pub abs_cos: f64,
    pub signed_cos: f64,
    /// `arccos(abs_cos)` in degrees, within `[0, 90]`.
    pub angle_deg: f64,
}

/// `None` when either vector is numerically zero.
pub fn alignment(v: &[f64], u: &[f64]) -> Option<Alignment> {
    let nv = norm(v);
    let nu = norm(u);
    if nv < ZERO_NORM || nu < ZERO_NORM {
        return None;
    }
    let signed_cos = (dot(v, u) / (nv * nu)).clamp(-1.0, 1.0);
    let abs_cos = signed_cos.abs();
    Some(Alignment {
        abs_cos,
        signed_cos,
        angle_deg: abs_cos.acos().to_degrees(),
    })
}

/// Fraction `‖U_kᵀ v‖² / ‖v‖²` of `v`'s energy in the span of the map's top-`k`
/// left singular vectors. `Ok(None)` for a numerically zero `v`.
///
/// MLP maps only carry output-layer factors; they are rejected unless
/// `allow_heuristic` is set.
pub fn subspace_projection(v: &[f64], map: &TokenwiseMap, k: usize, allow_heuristic: bool) -> Result<Option<f64>> {
    if map.class == MapClass::Mlp && !allow_heuristic {
        return Err(Error::UnsupportedClass {
            op: "subspace projection",
            class: map.class,
        });
    }
    let svd = map.svd.as_ref().ok_or(Error::UnsupportedClass {
        op: "subspace projection",
        class: map.class,
    })?;
    let d = svd.u.nrows();
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: v.len(),
        });
    }
    if k > svd.u.ncols() {
        return Err(Error::TooMany {
            requested: k,
            available: svd.u.ncols(),
        });
    }
    let energy = dot(v, v);
    if energy.sqrt() < ZERO_NORM {
        return Ok(None);
    }
    let captured: f64 = (0..k)
        .map(|j| {
            let c: f64 = svd.u.column(j).iter().zip(v).map(|(a, b)| a * b).sum();
            c * c
        })
        .sum();
    Ok(Some((captured / energy).clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub k: usize,
    pub full: Option<f64>,
    pub tok: Option<f64>,
    pub res: Option<f64>,
}

/// Geometry of one token's decomposition. `None` entries are undefined
/// because a vector involved was numerically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryRecord {
    pub seq_id: u32,
    pub pos: u32,
    pub full_tok: Option<Alignment>,
    pub res_tok: Option<Alignment>,
    pub projections: Vec<Projection>,
    pub full_norm: f64,
    pub residual_norm: f64,
}

pub fn geometry_record(
    seq_id: u32,
    pos: u32,
    triple: &UpdateTriple,
    map: &TokenwiseMap,
    ks: &[usize],
    allow_heuristic: bool,
) -> Result<GeometryRecord> {
    let projections = ks
        .iter()
        .map(|&k| {
            Ok(Projection {
                k,
                full: subspace_projection(&triple.delta_full, map, k, allow_heuristic)?,
                tok: subspace_projection(&triple.delta_tok, map, k, allow_heuristic)?,
                res: subspace_projection(&triple.residual, map, k, allow_heuristic)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeometryRecord {
        seq_id,
        pos,
        full_tok: alignment(&triple.delta_full, &triple.delta_tok),
        res_tok: alignment(&triple.residual, &triple.delta_tok),
        projections,
        full_norm: norm(&triple.delta_full),
        residual_norm: norm(&triple.residual),
    })
}

/// One record per pair of `dataset`, where `maps[i]` is the map assigned to
/// pair `i`. Output is ordered by `(seq_id, pos)`.
pub fn geometry_batch(
    dataset: &LayerDataset,
    maps: &[TokenwiseMap],
    ks: &[usize],
    allow_heuristic: bool,
) -> Result<Vec<GeometryRecord>> {
    if maps.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            got: maps.len(),
        });
    }
    let mut out = dataset
        .pairs()
        .iter()
        .zip(maps)
        .map(|(p, map)| {
            let triple = make_triple(&to_f64(&p.h_in), &to_f64(&p.h_out), map)?;
            geometry_record(p.seq_id, p.pos, &triple, map, ks, allow_heuristic)
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|r| (r.seq_id, r.pos));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{MapParams, Ridge};
    use alloc::vec;
    use nalgebra::DMatrix;

    fn zero_diag(d: usize) -> TokenwiseMap {
        crate::fit::fit_diag_psd(&DMatrix::zeros(1, d), &DMatrix::zeros(1, d)).unwrap()
    }

    #[test]
    fn triple_examples() {
        let id = TokenwiseMap::identity(2);
        let t = make_triple(&[1.0, 2.0], &[1.0, 2.0], &id).unwrap();
        assert!(t
            .delta_full
            .iter()
            .chain(&t.delta_tok)
            .chain(&t.residual)
            .all(|&x| x == 0.0));

        let t = make_triple(&[1.0, 2.0], &[2.0, 2.0], &id).unwrap();
        assert_eq!(t.delta_tok, vec![0.0, 0.0]);
        assert_eq!(t.residual, vec![1.0, 0.0]);
        assert_eq!(t.delta_full, vec![1.0, 0.0]);

        let t = make_triple(&[1.0, 0.0], &[0.0, 1.0], &zero_diag(2)).unwrap();
        assert_eq!(t.delta_full, vec![-1.0, 1.0]);
        assert_eq!(t.delta_tok, vec![-1.0, 0.0]);
        assert_eq!(t.residual, vec![0.0, 1.0]);

        assert!(make_triple(&[1.0], &[1.0, 2.0], &id).is_err());
    }

    #[test]
    fn alignment_examples() {
        let a = alignment(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((a.abs_cos - 1.0).abs() < 1e-12 && a.angle_deg.abs() < 1e-5);
        let a = alignment(&[1.0, 0.0], &[0.0, 3.0]).unwrap();
        assert_eq!((a.abs_cos, a.signed_cos, a.angle_deg), (0.0, 0.0, 90.0));
        let a = alignment(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((a.abs_cos - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        assert!((a.signed_cos - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        assert!((a.angle_deg - 45.0).abs() < 1e-9);
        let a = alignment(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert_eq!((a.abs_cos, a.signed_cos), (1.0, -1.0));
        assert_eq!(alignment(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn projection_examples() {
        let map = crate::fit::fit_low_rank(
            &DMatrix::identity(3, 3),
            &DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0])),
            3,
            Ridge::Fixed(0.0),
        )
        .unwrap();
        let s = core::f64::consts::FRAC_1_SQRT_2;
        assert!((subspace_projection(&[s, s, 0.0], &map, 1, false).unwrap().unwrap() - 0.5).abs() < 1e-12);
        assert!((subspace_projection(&[1.0, 1.0, 0.0], &map, 2, false).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            subspace_projection(&[0.0, 0.0, 1.0], &map, 2, false).unwrap(),
            Some(0.0)
        );
        assert_eq!(subspace_projection(&[0.0, 0.0, 0.0], &map, 2, false).unwrap(), None);
        assert!(subspace_projection(&[1.0, 0.0, 0.0], &map, 4, false).is_err());
    }

    #[test]
    fn mlp_projection_requires_heuristic_flag() {
        let x = DMatrix::identity(2, 2);
        let cfg = crate::fit::MlpConfig {
            steps: 3,
            ..Default::default()
        };
        let mlp = crate::fit::fit_mlp(&x, &x, &cfg).unwrap();
        assert!(subspace_projection(&[1.0, 0.0], &mlp, 1, false).is_err());
        assert!(subspace_projection(&[1.0, 0.0], &mlp, 1, true).is_ok());
        let mut bare = TokenwiseMap::identity(2);
        bare.svd = None;
        assert!(matches!(bare.params, MapParams::Diagonal(_)));
        assert!(subspace_projection(&[1.0, 0.0], &bare, 1, false).is_err());
    }

    #[test]
    fn single_token_record_matches_hand_values() {
        // A = diag(2, 0.5, 0): h_in = (1, 1, 1) → T = (2, 0.5, 0); h_out = (2, 1, 1).
        let x = DMatrix::identity(3, 3);
        let y = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5, 0.0]));
        let map = crate::fit::fit_diag_psd(&x, &y).unwrap();
        let t = make_triple(&[1.0, 1.0, 1.0], &[2.0, 1.0, 1.0], &map).unwrap();
        let rec = geometry_record(0, 0, &t, &map, &[1, 2], false).unwrap();
        // Δ_full = (1,0,0), Δ_tok = (1,-0.5,-1), r = (0,0.5,1)
        let ft = rec.full_tok.unwrap();
        assert!((ft.abs_cos - 1.0 / 1.5).abs() < 1e-12);
        let rt = rec.res_tok.unwrap();
        assert!((rt.signed_cos - (-1.25 / (1.5 * 1.25f64.sqrt()))).abs() < 1e-12);
        // U₁ = e₁, U₂ = {e₁, e₂}
        let p1 = rec.projections[0];
        assert_eq!(p1.full, Some(1.0));
        assert!((p1.tok.unwrap() - 1.0 / 2.25).abs() < 1e-12);
        assert_eq!(p1.res, Some(0.0));
        let p2 = rec.projections[1];
        assert!((p2.tok.unwrap() - 1.25 / 2.25).abs() < 1e-12);
        assert!((p2.res.unwrap() - 0.25 / 1.25).abs() < 1e-12);
    }
}
