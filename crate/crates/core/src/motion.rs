//! Rigid-motion artefacts synthesized in k-space.
//!
//! The phase-encode axis (array axis 1) is walked in acquisition order, from
//! the most negative to the most positive frequency, and split into
//! `num_events + 1` contiguous bands. Band 0 is read from the still volume;
//! band `i` is read from the spectrum of the volume after the `i`-th random
//! rigid displacement.

use nalgebra::{Rotation3, Vector3};
use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{centred_rank, fft3, to_complex, Direction};
use crate::sampling::{resample_with, Interp};
use crate::volume_io::Volume;

/// Phase-encode axis along which k-space is partitioned.
pub const PHASE_AXIS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    /// Severity: translation std is `2 * alpha` voxels, rotation std `2 * alpha` degrees.
    pub alpha: f64,
    pub num_events: usize,
    pub seed: u64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self { alpha: 0.0, num_events: 4, seed: 0 }
    }
}

impl MotionSpec {
    pub fn new(alpha: f64, seed: u64) -> Self {
        Self { alpha, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("motion alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One rigid displacement: translation in voxels, rotation in degrees about the grid centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidEvent {
    pub translation: [f64; 3],
    pub rotation_deg: [f64; 3],
}

impl RigidEvent {
    fn is_identity(&self) -> bool {
        self.translation.iter().chain(&self.rotation_deg).all(|&x| x == 0.0)
    }

    fn apply(&self, data: &Array3<f32>) -> Array3<f32> {
        if self.is_identity() {
            return data.clone();
        }
        let shape = [data.shape()[0], data.shape()[1], data.shape()[2]];
        let c = Vector3::from(std::array::from_fn::<f64, 3, _>(|a| (shape[a] as f64 - 1.0) / 2.0));
        let [rx, ry, rz] = self.rotation_deg.map(f64::to_radians);
        let inv = Rotation3::from_euler_angles(rx, ry, rz).inverse();
        let t = Vector3::from(self.translation);
        resample_with(data, shape, Interp::Linear, move |p| {
            let q = inv * (Vector3::from(p) - c - t) + c;
            [q[0], q[1], q[2]]
        })
    }
}

/// Draws the `num_events` displacements for a spec.
pub fn draw_events(spec: &MotionSpec) -> Vec<RigidEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = 2.0 * spec.alpha;
    (0..spec.num_events)
        .map(|_| {
            let mut g = || {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            };
            RigidEvent {
                translation: [g(), g(), g()],
                rotation_deg: [g(), g(), g()],
            }
        })
        .collect()
}

/// Band of phase-encode index `j` out of `n`.
pub fn band_of(j: usize, n: usize, bands: usize) -> usize {
    centred_rank(j, n) * bands / n
}

pub fn simulate_motion(v: &Volume, spec: &MotionSpec) -> Result<Volume> {
    spec.validate()?;
    if let Some(bad) = v.data.iter().find(|x| !x.is_finite()) {
        return Err(Error::Contract(format!("motion input has non-finite voxel {bad}")));
    }
    let events = draw_events(spec);
    if events.iter().all(RigidEvent::is_identity) {
        return Ok(v.clone());
    }
    let bands = events.len() + 1;
    let n = v.shape()[PHASE_AXIS];

    let mut k = to_complex(&v.data);
    fft3(&mut k, Direction::Forward);
    // Events leave the composite unchanged when they are the identity.
    for (i, ev) in events.iter().enumerate().filter(|(_, e)| !e.is_identity()) {
        let mut moved = to_complex(&ev.apply(&v.data));
        fft3(&mut moved, Direction::Forward);
        for j in (0..n).filter(|&j| band_of(j, n, bands) == i + 1) {
            k.index_axis_mut(Axis(PHASE_AXIS), j).assign(&moved.index_axis(Axis(PHASE_AXIS), j));
        }
    }
    fft3(&mut k, Direction::Inverse);
    let data = k.mapv(|c| (c.norm() as f32).clamp(0.0, 1.0));
    Ok(Volume { data, affine: v.affine })
}
