use log::warn;
use nalgebra::{Matrix3, Vector3};
use ndarray::Array3;

use super::types::{apply_affine, check_affine, Affine, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::sampling::{affine_map, resample_labels_with, resample_with, Interp};

pub const DEFAULT_MM: f64 = 1.0;
pub const DEFAULT_SHAPE: [usize; 3] = [256, 256, 256];

/// Axis assignment that brings an affine closest to positive-diagonal (RAS+).
///
/// `perm[i]` is the source voxel axis that becomes output axis `i`, and
/// `flip[i]` is true when that axis runs in the negative world direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Orientation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

pub fn closest_ras(affine: &Affine) -> Result<Orientation> {
    check_affine(affine)?;
    let lin = affine.fixed_view::<3, 3>(0, 0);
    let mut perm = [usize::MAX; 3];
    let mut flip = [false; 3];
    let mut row_used = [false; 3];
    let mut col_used = [false; 3];
    // Greedy: repeatedly take the largest remaining |world_i . voxel_j| component.
    for _ in 0..3 {
        let mut best = (0, 0, -1.0f64);
        for i in 0..3 {
            for j in 0..3 {
                if !row_used[i] && !col_used[j] && lin[(i, j)].abs() > best.2 {
                    best = (i, j, lin[(i, j)].abs());
                }
            }
        }
        let (i, j, _) = best;
        row_used[i] = true;
        col_used[j] = true;
        perm[i] = j;
        flip[i] = lin[(i, j)] < 0.0;
    }
    Ok(Orientation { perm, flip })
}

/// Output affine of a conformed grid: RAS+-ordered direction cosines, isotropic
/// `mm` spacing, and the input grid's world-space centre at the output centre.
pub fn conformed_affine(input: &Affine, in_shape: [usize; 3], mm: f64, out_shape: [usize; 3]) -> Result<Affine> {
    if !(mm > 0.0 && mm.is_finite()) {
        return Err(Error::Config(format!("target spacing must be positive, got {mm}")));
    }
    let o = closest_ras(input)?;
    let lin = input.fixed_view::<3, 3>(0, 0);
    let mut dirs = Matrix3::<f64>::zeros();
    for i in 0..3 {
        let mut col: Vector3<f64> = lin.column(o.perm[i]).into();
        if o.flip[i] {
            col = -col;
        }
        dirs.set_column(i, &(col / col.norm()));
    }
    let centre_in = [
        (in_shape[0] as f64 - 1.0) / 2.0,
        (in_shape[1] as f64 - 1.0) / 2.0,
        (in_shape[2] as f64 - 1.0) / 2.0,
    ];
    let c = apply_affine(input, centre_in);
    let m_lin = dirs * mm;
    let half = Vector3::new(
        (out_shape[0] as f64 - 1.0) / 2.0,
        (out_shape[1] as f64 - 1.0) / 2.0,
        (out_shape[2] as f64 - 1.0) / 2.0,
    );
    let t = Vector3::new(c[0], c[1], c[2]) - m_lin * half;
    let mut out = Affine::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&m_lin);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    Ok(out)
}

fn index_map(input: &Affine, output: &Affine) -> Result<Affine> {
    let inv = input
        .try_inverse()
        .ok_or_else(|| Error::Geometry("input affine is not invertible".into()))?;
    Ok(inv * output)
}

/// Resamples to isotropic spacing in RAS+ order on a fixed grid.
pub fn conform(v: &Volume, target_mm: f64, target_shape: [usize; 3], interp: Interp) -> Result<Volume> {
    check_shape(target_shape)?;
    let out_affine = conformed_affine(&v.affine, v.shape(), target_mm, target_shape)?;
    let t = index_map(&v.affine, &out_affine)?;
    let data = resample_with(&v.data, target_shape, interp, affine_map(&t));
    Ok(Volume {
        data,
        affine: out_affine,
    })
}

/// Label-map conformance; always nearest-neighbour so no new values appear.
pub fn conform_labels(l: &LabelMap, target_mm: f64, target_shape: [usize; 3]) -> Result<LabelMap> {
    check_shape(target_shape)?;
    let out_affine = conformed_affine(&l.affine, l.shape(), target_mm, target_shape)?;
    let t = index_map(&l.affine, &out_affine)?;
    let data = resample_labels_with(&l.data, target_shape, 0u16, affine_map(&t));
    Ok(LabelMap {
        data,
        affine: out_affine,
        scheme: l.scheme.clone(),
    })
}

fn check_shape(s: [usize; 3]) -> Result<()> {
    if s.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("target shape {s:?} has a zero extent")));
    }
    Ok(())
}

/// Clips to the 0.5/99.5 percentiles and rescales to [0, 1].
///
/// A volume with no intensity spread maps to all zeros (with a warning).
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    if let Some(bad) = v.data.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite intensity {bad} in input")));
    }
    let lo = percentile(&v.data, 0.5);
    let hi = percentile(&v.data, 99.5);
    let data = if hi > lo {
        let span = hi - lo;
        v.data.mapv(|x| (((x as f64).clamp(lo, hi) - lo) / span) as f32)
    } else {
        warn!("constant-intensity volume; normalized output is all zeros");
        Array3::zeros(v.data.raw_dim())
    };
    Ok(Volume {
        data,
        affine: v.affine,
    })
}

/// Linear-interpolated percentile (`q` in [0, 100]) over all voxels.
pub fn percentile(data: &Array3<f32>, q: f64) -> f64 {
    let mut vals: Vec<f32> = data.iter().copied().collect();
    percentile_in_place(&mut vals, q)
}

pub(crate) fn percentile_in_place(vals: &mut [f32], q: f64) -> f64 {
    let n = vals.len();
    if n == 0 {
        return 0.0;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_v, right) = vals.select_nth_unstable_by(lo, |a, b| a.total_cmp(b));
    let lo_v = *lo_v as f64;
    if frac == 0.0 || right.is_empty() {
        return lo_v;
    }
    let hi_v = right.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    lo_v + frac * (hi_v - lo_v)
}
