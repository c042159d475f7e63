use ndarray::{Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Step;
use crate::error::{Error, Result};
use crate::kspace::{fft3, to_complex, Direction};
use crate::volume_io::{percentile, Volume};

/// Exponents `(a, b, c)` of the monomials `x^a y^b z^c` with total degree 1..=3.
pub(crate) const POLY3_TERMS: [[u8; 3]; 19] = [
    [1, 0, 0], [0, 1, 0], [0, 0, 1],
    [2, 0, 0], [0, 2, 0], [0, 0, 2], [1, 1, 0], [1, 0, 1], [0, 1, 1],
    [3, 0, 0], [0, 3, 0], [0, 0, 3], [2, 1, 0], [2, 0, 1], [1, 2, 0], [0, 2, 1], [1, 0, 2], [0, 1, 2], [1, 1, 1],
];

/// Applies one intensity step; output is clipped to [0, 1].
pub fn apply_intensity(v: &Volume, step: &Step) -> Result<Volume> {
    let cfg = |m: &str| Err(Error::Config(format!("{}: {m}", step.name())));
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    let d = &v.data;
    let out = match *step {
        Step::Blur { kernel } => {
            if kernel % 2 == 0 || kernel == 0 {
                return cfg("kernel must be odd");
            }
            box_blur(d, kernel / 2)
        }
        Step::SaltPepper { amount, salt, seed } => {
            if !unit(amount) || !unit(salt) {
                return cfg("amount and salt must be in [0, 1]");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            d.mapv(|x| {
                let hit = rng.gen::<f64>() < amount;
                let is_salt = rng.gen::<f64>() < salt;
                match (hit, is_salt) {
                    (false, _) => x,
                    (true, true) => 1.0,
                    (true, false) => 0.0,
                }
            })
        }
        Step::Gaussian { std, seed } => {
            if !(std >= 0.0 && std.is_finite()) {
                return cfg("std must be >= 0");
            }
            if std == 0.0 {
                d.clone()
            } else {
                let normal = Normal::new(0.0, std).expect("valid std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                d.mapv(|x| (x as f64 + normal.sample(&mut rng)) as f32)
            }
        }
        Step::Downscale { scale } => {
            if !(scale > 0.0 && scale <= 1.0) {
                return cfg("scale must be in (0, 1]");
            }
            let s = v.shape();
            let small = s.map(|n| ((n as f64 * scale).round() as usize).max(1));
            resize_linear(&resize_linear(d, small), s)
        }
        Step::Gamma { clip, gamma } => {
            if !((0.0..0.5).contains(&clip) && gamma > 0.0 && gamma.is_finite()) {
                return cfg("need clip in [0, 0.5) and gamma > 0");
            }
            let lo = percentile(d, clip * 100.0);
            let hi = percentile(d, (1.0 - clip) * 100.0);
            if hi > lo {
                d.mapv(|x| (((x as f64).clamp(lo, hi) - lo) / (hi - lo)).powf(gamma) as f32)
            } else {
                d.clone()
            }
        }
        Step::Contrast { alpha } => {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return cfg("alpha must be >= 0");
            }
            let mean = d.iter().map(|&x| x as f64).sum::<f64>() / d.len().max(1) as f64;
            d.mapv(|x| (mean + alpha * (x as f64 - mean)) as f32)
        }
        Step::Ghosting { axis, every, intensity } => {
            if axis > 2 || every < 2 || !unit(intensity) {
                return cfg("need axis < 3, every >= 2, intensity in [0, 1]");
            }
            ghost(d, axis, every, intensity)
        }
        Step::SliceSpacing { spacing_mm } => {
            if !(spacing_mm >= 1.0 && spacing_mm.is_finite()) {
                return cfg("spacing_mm must be >= 1");
            }
            slice_spacing(d, spacing_mm)
        }
        Step::Inhomogeneity { ref coefficients } => {
            if coefficients.len() != POLY3_TERMS.len() || coefficients.iter().any(|c| !c.is_finite()) {
                return cfg("expected 19 finite polynomial coefficients");
            }
            let s = v.shape();
            let mut out = d.clone();
            Zip::indexed(&mut out).for_each(|(i, j, k), o| {
                let p = [norm_coord(i, s[0]), norm_coord(j, s[1]), norm_coord(k, s[2])];
                let e: f64 = POLY3_TERMS
                    .iter()
                    .zip(coefficients)
                    .map(|(t, c)| c * p[0].powi(t[0] as i32) * p[1].powi(t[1] as i32) * p[2].powi(t[2] as i32))
                    .sum();
                *o = (*o as f64 * e.exp()) as f32;
            });
            out
        }
        Step::FieldBias { cycles, phases, scale } => {
            if !(scale >= 1.0 && cycles.iter().all(|c| *c >= 0.0)) {
                return cfg("need scale >= 1 and non-negative cycles");
            }
            let s = v.shape();
            let ln = scale.ln();
            let mut out = d.clone();
            Zip::indexed(&mut out).for_each(|(i, j, k), o| {
                let idx = [i, j, k];
                let w: f64 = (0..3)
                    .map(|a| (std::f64::consts::TAU * cycles[a] * idx[a] as f64 / s[a] as f64 + phases[a]).sin())
                    .sum::<f64>()
                    / 3.0;
                *o = (*o as f64 * (ln * w).exp()) as f32;
            });
            out
        }
        ref other => return Err(Error::Contract(format!("{} is not an intensity transform", other.name()))),
    };
    let data = out.mapv(|x| if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 });
    Ok(Volume { data, affine: v.affine })
}

fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Mean over the in-grid part of a `(2r+1)^3` box, separably.
fn box_blur(d: &Array3<f32>, r: usize) -> Array3<f32> {
    let mut cur = d.mapv(|x| x as f64);
    for ax in 0..3 {
        let mut next = cur.clone();
        for (src, mut dst) in cur.lanes(Axis(ax)).into_iter().zip(next.lanes_mut(Axis(ax))) {
            let n = src.len();
            let mut prefix = vec![0.0; n + 1];
            for i in 0..n {
                prefix[i + 1] = prefix[i] + src[i];
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(n);
                dst[i] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            }
        }
        cur = next;
    }
    cur.mapv(|x| x as f32)
}

/// Linear interpolation along one axis at fractional source positions
/// (clamped to the valid range).
fn resample_axis(d: &Array3<f32>, ax: usize, positions: &[f64]) -> Array3<f32> {
    let mut shape = [d.shape()[0], d.shape()[1], d.shape()[2]];
    let n = shape[ax];
    shape[ax] = positions.len();
    let mut out = Array3::<f32>::zeros(shape);
    for (src, mut dst) in d.lanes(Axis(ax)).into_iter().zip(out.lanes_mut(Axis(ax))) {
        for (o, &p) in dst.iter_mut().zip(positions) {
            let p = p.clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let t = p - i0 as f64;
            *o = ((1.0 - t) * src[i0] as f64 + t * src[i1] as f64) as f32;
        }
    }
    out
}

/// Separable linear resize with half-voxel-centred sampling and edge clamping.
pub fn resize_linear(d: &Array3<f32>, out_shape: [usize; 3]) -> Array3<f32> {
    let mut cur = d.clone();
    for (ax, &m) in out_shape.iter().enumerate() {
        let n = cur.shape()[ax];
        let pos: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * n as f64 / m as f64 - 0.5).collect();
        cur = resample_axis(&cur, ax, &pos);
    }
    cur
}

/// Keeps axial (axis 2) samples every `spacing` voxels, then interpolates back.
fn slice_spacing(d: &Array3<f32>, spacing: f64) -> Array3<f32> {
    let n = d.shape()[2];
    let m = (((n - 1) as f64 / spacing).floor() as usize) + 1;
    let kept: Vec<f64> = (0..m).map(|i| i as f64 * spacing).collect();
    let thick = resample_axis(d, 2, &kept);
    let back: Vec<f64> = (0..n).map(|z| z as f64 / spacing).collect();
    resample_axis(&thick, 2, &back)
}

fn ghost(d: &Array3<f32>, axis: usize, every: usize, intensity: f64) -> Array3<f32> {
    let mut k = to_complex(d);
    fft3(&mut k, Direction::Forward);
    let factor = 1.0 - intensity;
    for (i, mut plane) in k.axis_iter_mut(Axis(axis)).enumerate() {
        if i != 0 && i % every == 0 {
            plane.mapv_inplace(|c| c * factor);
        }
    }
    fft3(&mut k, Direction::Inverse);
    k.mapv(|c| c.norm() as f32)
}
