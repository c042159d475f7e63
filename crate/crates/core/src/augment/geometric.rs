use nalgebra::{Matrix3, Rotation3, Vector3};

use super::Step;
use crate::error::{Error, Result};
use crate::sampling::{resample_labels_with, resample_with, Interp};
use crate::volume_io::{LabelMap, Volume};

/// Applies one spatial step to the image (linear) and the labels (nearest).
/// Voxels mapped from outside the grid become 0 / background.
pub fn apply_geometric(v: &Volume, l: Option<&LabelMap>, step: &Step) -> Result<(Volume, Option<LabelMap>)> {
    apply_geometric_chain(v, l, std::slice::from_ref(step))
}

/// Applies several spatial steps, in order, with a single resampling pass.
/// A voxel whose path leaves the grid at any intermediate step is zero-filled,
/// as it would be if the steps were resampled one after another.
pub fn apply_geometric_chain(v: &Volume, l: Option<&LabelMap>, steps: &[Step]) -> Result<(Volume, Option<LabelMap>)> {
    let shape = v.shape();
    let maps = steps.iter().map(|s| source_map(s, shape)).collect::<Result<Vec<_>>>()?;
    let outside = |p: [f64; 3]| (0..3).any(|a| p[a] < -0.5 || p[a] > shape[a] as f64 - 0.5);
    let map = move |p: [f64; 3]| {
        let mut q = p;
        for (i, m) in maps.iter().enumerate().rev() {
            q = m(q);
            if i > 0 && outside(q) {
                return [-2.0; 3];
            }
        }
        q
    };
    let data = resample_with(&v.data, shape, Interp::Linear, &map).mapv(|x| x.clamp(0.0, 1.0));
    let labels = l.map(|l| LabelMap {
        data: resample_labels_with(&l.data, shape, 0u16, &map),
        affine: l.affine,
        scheme: l.scheme.clone(),
    });
    Ok((Volume { data, affine: v.affine }, labels))
}

type SourceMap = Box<dyn Fn([f64; 3]) -> [f64; 3] + Sync>;

/// Output voxel index -> source voxel index.
fn source_map(step: &Step, shape: [usize; 3]) -> Result<SourceMap> {
    let centre: [f64; 3] = std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0);
    match step {
        Step::Translation { shift } => {
            // A shift past the grid edge is legal and leaves only background.
            let s = shift.map(|v| v as f64);
            Ok(Box::new(move |p| [p[0] - s[0], p[1] - s[1], p[2] - s[2]]))
        }
        Step::Rotation { degrees } => {
            if degrees.iter().any(|d| !(d.abs() <= 180.0)) {
                return Err(Error::Config(format!("rotation {degrees:?} outside [-180, 180] degrees")));
            }
            let r = Rotation3::from_euler_angles(degrees[0].to_radians(), degrees[1].to_radians(), degrees[2].to_radians());
            let inv: Matrix3<f64> = r.inverse().into_inner();
            let c = Vector3::from(centre);
            Ok(Box::new(move |p| {
                let q = inv * (Vector3::from(p) - c) + c;
                [q[0], q[1], q[2]]
            }))
        }
        Step::GridDistortion { cell_scales } => {
            let knots: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
                .map(|a| distortion_knots(&cell_scales[a], shape[a]))
                .collect::<Result<_>>()?;
            Ok(Box::new(move |p| std::array::from_fn(|a| piecewise(&knots[a].0, &knots[a].1, p[a]))))
        }
        other => Err(Error::Contract(format!("{} is not a geometric transform", other.name()))),
    }
}

/// Uniform output knots and matching source knots whose cell widths are
/// proportional to `scales`, both spanning `[0, n - 1]`.
fn distortion_knots(scales: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config("grid distortion cell scales must be positive".into()));
    }
    let span = (n as f64 - 1.0).max(0.0);
    let k = scales.len();
    let out: Vec<f64> = (0..=k).map(|i| span * i as f64 / k as f64).collect();
    let total: f64 = scales.iter().sum();
    let mut src = vec![0.0];
    let mut acc = 0.0;
    for s in scales {
        acc += s;
        src.push(span * acc / total);
    }
    src[k] = span;
    Ok((out, src))
}

fn piecewise(out: &[f64], src: &[f64], x: f64) -> f64 {
    let k = out.len() - 1;
    if out[k] <= 0.0 {
        return x;
    }
    let i = out.partition_point(|&o| o <= x).clamp(1, k) - 1;
    let t = (x - out[i]) / (out[i + 1] - out[i]);
    src[i] + t * (src[i + 1] - src[i])
}
