//! Grid resampling shared by conformance, augmentation and motion simulation.
//!
//! Coordinates are continuous voxel indices of the source grid. Samples that
//! fall outside the grid read the fill value (zero for images, background for
//! labels). Coordinates within `SNAP` of an integer are snapped so identity
//! and pure permutation maps reproduce the input exactly.

use nalgebra::{Matrix4, Vector4};
use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

const SNAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Linear,
    Nearest,
}

#[inline]
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP {
        r
    } else {
        c
    }
}

/// Trilinear sample with zero contribution from outside the grid.
#[inline]
pub fn sample_linear(src: &Array3<f32>, p: [f64; 3]) -> f32 {
    let s = src.shape();
    let p = [snap(p[0]), snap(p[1]), snap(p[2])];
    let mut base = [0isize; 3];
    let mut frac = [0f64; 3];
    for ax in 0..3 {
        if p[ax] <= -1.0 || p[ax] >= s[ax] as f64 {
            return 0.0;
        }
        let f = p[ax].floor();
        base[ax] = f as isize;
        frac[ax] = p[ax] - f;
    }
    let mut acc = 0f64;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for ax in 0..3 {
            let hi = (corner >> ax) & 1 == 1;
            let wa = if hi { frac[ax] } else { 1.0 - frac[ax] };
            if wa == 0.0 {
                inside = false;
                break;
            }
            let i = base[ax] + hi as isize;
            if i < 0 || i >= s[ax] as isize {
                inside = false;
                break;
            }
            w *= wa;
            idx[ax] = i as usize;
        }
        if inside {
            acc += w * src[idx] as f64;
        }
    }
    acc as f32
}

#[inline]
pub fn sample_nearest<T: Copy>(src: &Array3<T>, p: [f64; 3], fill: T) -> T {
    let s = src.shape();
    let mut idx = [0usize; 3];
    for ax in 0..3 {
        let r = (snap(p[ax]) + 0.5).floor();
        if r < 0.0 || r >= s[ax] as f64 {
            return fill;
        }
        idx[ax] = r as usize;
    }
    src[idx]
}

/// Resamples an image through `map(output index) -> source coordinate`.
pub fn resample_with<F>(src: &Array3<f32>, out_shape: [usize; 3], interp: Interp, map: F) -> Array3<f32>
where
    F: Fn([f64; 3]) -> [f64; 3] + Sync,
{
    let mut out = Array3::<f32>::zeros(out_shape);
    Zip::indexed(&mut out).par_for_each(|(i, j, k), o| {
        let p = map([i as f64, j as f64, k as f64]);
        *o = match interp {
            Interp::Linear => sample_linear(src, p),
            Interp::Nearest => sample_nearest(src, p, 0.0),
        };
    });
    out
}

/// Nearest-neighbour resampling for integer maps.
pub fn resample_labels_with<T, F>(src: &Array3<T>, out_shape: [usize; 3], fill: T, map: F) -> Array3<T>
where
    T: Copy + Send + Sync,
    F: Fn([f64; 3]) -> [f64; 3] + Sync,
{
    let mut out = Array3::<T>::from_elem(out_shape, fill);
    Zip::indexed(&mut out).par_for_each(|(i, j, k), o| {
        *o = sample_nearest(src, map([i as f64, j as f64, k as f64]), fill);
    });
    out
}

/// Affine map from output voxel index to source voxel index.
pub fn affine_map(t: &Matrix4<f64>) -> impl Fn([f64; 3]) -> [f64; 3] + Sync + '_ {
    move |p| {
        let v = t * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }
}
