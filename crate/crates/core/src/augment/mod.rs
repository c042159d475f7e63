//! Group-structured random augmentation of image/label pairs.
//!
//! A plan is drawn per sample: with probability `1 - apply_probability` it is
//! empty; otherwise every table row is drawn independently with its own
//! probability. Steps run in the fixed order geometric, noise, artefacts.
//! Each step carries fully resolved parameters (including a seed for the
//! stochastic ones), so a serialized plan replays bit-identically.

mod geometric;
mod intensity;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{LabelMap, Volume};

pub use geometric::{apply_geometric, apply_geometric_chain};
pub use intensity::{apply_intensity, resize_linear};

/// Transform family and its parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    /// Integer shift per axis, uniform in `[-max_shift, max_shift]` voxels.
    Translation { max_shift: i32 },
    /// Rotation about each axis, uniform in `[-max_degrees, max_degrees]`.
    Rotation { max_degrees: f64 },
    /// Piecewise-linear warp with `steps` cells per axis, each resized by up to ±`distortion`.
    GridDistortion { steps: usize, distortion: f64 },
    /// Box filter; odd kernel size drawn from `3..=limit`.
    Blur { limit: usize },
    /// Fraction `amount` of voxels replaced; a fraction `salt` of those set to 1, the rest to 0.
    SaltPepper { amount: f64, salt: f64 },
    /// Additive noise with standard deviation uniform in `[0, amount]`.
    Gaussian { amount: f64 },
    /// Linear down- then up-sampling with factor uniform in `[min_scale, max_scale]`.
    Downscale { min_scale: f64, max_scale: f64 },
    /// Percentile clip of `clip` per tail, rescale, then power law with
    /// log-uniform exponent in `[1 / max_gamma, max_gamma]`.
    Gamma { clip: f64, max_gamma: f64 },
    /// Scales deviations from the mean by a factor uniform in `[min_alpha, max_alpha]`.
    Contrast { min_alpha: f64, max_alpha: f64 },
    /// Attenuates every n-th k-space plane (n in `2..=max_repetitions`) along a random axis.
    Ghosting { max_repetitions: usize, min_intensity: f64, max_intensity: f64 },
    /// Decimates the axial axis (2) to a spacing uniform in `[min_mm, max_mm]` and re-interpolates.
    SliceSpacing { min_mm: f64, max_mm: f64 },
    /// Multiplicative `exp(p(x, y, z))`, `p` a cubic polynomial with coefficients bounded by `max_coefficient / degree`.
    Inhomogeneity { max_coefficient: f64 },
    /// Multiplicative sinusoidal field with up to `max_cycles` cycles per axis, ranging over `[1/scale, scale]`.
    FieldBias { max_cycles: f64, scale: f64 },
}

impl TransformSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TransformSpec::Translation { .. } => "translation",
            TransformSpec::Rotation { .. } => "rotation",
            TransformSpec::GridDistortion { .. } => "grid_distortion",
            TransformSpec::Blur { .. } => "blur",
            TransformSpec::SaltPepper { .. } => "salt_pepper",
            TransformSpec::Gaussian { .. } => "gaussian",
            TransformSpec::Downscale { .. } => "downscale",
            TransformSpec::Gamma { .. } => "gamma",
            TransformSpec::Contrast { .. } => "contrast",
            TransformSpec::Ghosting { .. } => "ghosting",
            TransformSpec::SliceSpacing { .. } => "slice_spacing",
            TransformSpec::Inhomogeneity { .. } => "inhomogeneity",
            TransformSpec::FieldBias { .. } => "field_bias",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{}: {what}", self.name())));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        match *self {
            TransformSpec::Translation { max_shift } if max_shift < 0 => bad("max_shift must be >= 0"),
            TransformSpec::Rotation { max_degrees } if !(0.0..=180.0).contains(&max_degrees) => bad("max_degrees must be in [0, 180]"),
            TransformSpec::GridDistortion { steps, distortion } if steps == 0 || !(0.0..1.0).contains(&distortion) => {
                bad("steps must be positive and distortion in [0, 1)")
            }
            TransformSpec::Blur { limit } if limit < 3 => bad("limit must be >= 3"),
            TransformSpec::SaltPepper { amount, salt } if !unit(amount) || !unit(salt) => bad("amount and salt must be in [0, 1]"),
            TransformSpec::Gaussian { amount } if !(amount >= 0.0 && amount.is_finite()) => bad("amount must be >= 0"),
            TransformSpec::Downscale { min_scale, max_scale } if !(min_scale > 0.0 && min_scale <= max_scale && max_scale <= 1.0) => {
                bad("need 0 < min_scale <= max_scale <= 1")
            }
            TransformSpec::Gamma { clip, max_gamma } if !((0.0..0.5).contains(&clip) && max_gamma >= 1.0) => bad("need clip in [0, 0.5) and max_gamma >= 1"),
            TransformSpec::Contrast { min_alpha, max_alpha } if !(min_alpha >= 0.0 && min_alpha <= max_alpha) => bad("need 0 <= min_alpha <= max_alpha"),
            TransformSpec::Ghosting { max_repetitions, min_intensity, max_intensity }
                if max_repetitions < 2 || !unit(min_intensity) || !unit(max_intensity) || min_intensity > max_intensity =>
            {
                bad("need max_repetitions >= 2 and 0 <= min_intensity <= max_intensity <= 1")
            }
            TransformSpec::SliceSpacing { min_mm, max_mm } if !(min_mm >= 1.0 && min_mm <= max_mm) => bad("need 1 <= min_mm <= max_mm"),
            TransformSpec::Inhomogeneity { max_coefficient } if !(0.0..=2.0).contains(&max_coefficient) => bad("max_coefficient must be in [0, 2]"),
            TransformSpec::FieldBias { max_cycles, scale } if !(max_cycles >= 0.0 && scale >= 1.0) => bad("need max_cycles >= 0 and scale >= 1"),
            _ => Ok(()),
        }
    }

    fn is_geometric(&self) -> bool {
        matches!(self, TransformSpec::Translation { .. } | TransformSpec::Rotation { .. } | TransformSpec::GridDistortion { .. })
    }

    /// Draws concrete parameters.
    fn resolve<R: Rng>(&self, rng: &mut R) -> Step {
        let seed = rng.gen::<u64>();
        match *self {
            TransformSpec::Translation { max_shift } => Step::Translation {
                shift: std::array::from_fn(|_| rng.gen_range(-max_shift..=max_shift)),
            },
            TransformSpec::Rotation { max_degrees } => Step::Rotation {
                degrees: std::array::from_fn(|_| rng.gen_range(-max_degrees..=max_degrees)),
            },
            TransformSpec::GridDistortion { steps, distortion } => Step::GridDistortion {
                cell_scales: std::array::from_fn(|_| (0..steps).map(|_| 1.0 + rng.gen_range(-distortion..=distortion)).collect()),
            },
            TransformSpec::Blur { limit } => {
                let k = 3 + 2 * rng.gen_range(0..=(limit - 3) / 2);
                Step::Blur { kernel: k }
            }
            TransformSpec::SaltPepper { amount, salt } => Step::SaltPepper { amount, salt, seed },
            TransformSpec::Gaussian { amount } => Step::Gaussian { std: rng.gen_range(0.0..=amount), seed },
            TransformSpec::Downscale { min_scale, max_scale } => Step::Downscale { scale: rng.gen_range(min_scale..=max_scale) },
            TransformSpec::Gamma { clip, max_gamma } => {
                let l = max_gamma.ln();
                Step::Gamma { clip, gamma: rng.gen_range(-l..=l).exp() }
            }
            TransformSpec::Contrast { min_alpha, max_alpha } => Step::Contrast { alpha: rng.gen_range(min_alpha..=max_alpha) },
            TransformSpec::Ghosting { max_repetitions, min_intensity, max_intensity } => Step::Ghosting {
                axis: rng.gen_range(0..3),
                every: rng.gen_range(2..=max_repetitions),
                intensity: rng.gen_range(min_intensity..=max_intensity),
            },
            TransformSpec::SliceSpacing { min_mm, max_mm } => Step::SliceSpacing { spacing_mm: rng.gen_range(min_mm..=max_mm) },
            TransformSpec::Inhomogeneity { max_coefficient } => Step::Inhomogeneity {
                coefficients: intensity::POLY3_TERMS
                    .iter()
                    .map(|t| {
                        let deg = (t[0] + t[1] + t[2]) as f64;
                        let b = max_coefficient / deg;
                        rng.gen_range(-b..=b)
                    })
                    .collect(),
            },
            TransformSpec::FieldBias { max_cycles, scale } => Step::FieldBias {
                cycles: std::array::from_fn(|_| rng.gen_range(0.0..=max_cycles)),
                phases: std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)),
                scale,
            },
        }
    }
}

/// One transform with fully resolved parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Translation { shift: [i32; 3] },
    Rotation { degrees: [f64; 3] },
    GridDistortion { cell_scales: [Vec<f64>; 3] },
    Blur { kernel: usize },
    SaltPepper { amount: f64, salt: f64, seed: u64 },
    Gaussian { std: f64, seed: u64 },
    Downscale { scale: f64 },
    Gamma { clip: f64, gamma: f64 },
    Contrast { alpha: f64 },
    Ghosting { axis: usize, every: usize, intensity: f64 },
    SliceSpacing { spacing_mm: f64 },
    Inhomogeneity { coefficients: Vec<f64> },
    FieldBias { cycles: [f64; 3], phases: [f64; 3], scale: f64 },
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::Translation { .. } => "translation",
            Step::Rotation { .. } => "rotation",
            Step::GridDistortion { .. } => "grid_distortion",
            Step::Blur { .. } => "blur",
            Step::SaltPepper { .. } => "salt_pepper",
            Step::Gaussian { .. } => "gaussian",
            Step::Downscale { .. } => "downscale",
            Step::Gamma { .. } => "gamma",
            Step::Contrast { .. } => "contrast",
            Step::Ghosting { .. } => "ghosting",
            Step::SliceSpacing { .. } => "slice_spacing",
            Step::Inhomogeneity { .. } => "inhomogeneity",
            Step::FieldBias { .. } => "field_bias",
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Step::Translation { .. } | Step::Rotation { .. } | Step::GridDistortion { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    #[serde(flatten)]
    pub transform: TransformSpec,
    pub prob: f64,
}

impl Row {
    fn new(transform: TransformSpec, prob: f64) -> Self {
        Self { transform, prob }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub apply_probability: f64,
    pub geometric: Vec<Row>,
    pub noise: Vec<Row>,
    pub artefacts: Vec<Row>,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        use TransformSpec::*;
        let third = 1.0 / 3.0;
        let ninth = 1.0 / 9.0;
        Self {
            apply_probability: 0.9,
            geometric: vec![
                Row::new(Translation { max_shift: 20 }, third),
                Row::new(Rotation { max_degrees: 10.0 }, third),
                Row::new(GridDistortion { steps: 4, distortion: 0.1 }, third),
            ],
            noise: vec![
                Row::new(Blur { limit: 3 }, ninth),
                Row::new(SaltPepper { amount: 0.01, salt: 0.2 }, ninth),
                Row::new(Gaussian { amount: 0.2 }, ninth),
                Row::new(Downscale { min_scale: 0.25, max_scale: 0.75 }, ninth),
                Row::new(Gamma { clip: 0.025, max_gamma: 1.5 }, ninth),
                Row::new(Contrast { min_alpha: 0.5, max_alpha: 3.0 }, ninth),
            ],
            artefacts: vec![
                Row::new(Ghosting { max_repetitions: 4, min_intensity: 0.5, max_intensity: 1.0 }, ninth),
                Row::new(SliceSpacing { min_mm: 2.0, max_mm: 5.0 }, ninth),
                Row::new(Inhomogeneity { max_coefficient: 0.3 }, 1.0),
                Row::new(FieldBias { max_cycles: 5.0, scale: 2.0 }, ninth),
            ],
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// A spec that never augments.
    pub fn disabled() -> Self {
        Self { apply_probability: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!("apply_probability must be in [0, 1], got {}", self.apply_probability)));
        }
        for (group, rows) in [("geometric", &self.geometric), ("noise", &self.noise), ("artefacts", &self.artefacts)] {
            for r in rows.iter() {
                if !(0.0..=1.0).contains(&r.prob) {
                    return Err(Error::Config(format!("{group}.{}: prob must be in [0, 1]", r.transform.name())));
                }
                if (group == "geometric") != r.transform.is_geometric() {
                    return Err(Error::Config(format!("{} is not allowed in the {group} group", r.transform.name())));
                }
                r.transform.validate()?;
            }
        }
        Ok(())
    }

    /// Independent RNG stream for one sample of one epoch.
    pub fn sample_rng(&self, epoch: u64, index: u64) -> ChaCha8Rng {
        sample_rng(self.seed, epoch, index)
    }
}

/// Deterministic per-sample stream from `(base seed, epoch, sample index)`.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<Step>,
}

impl Plan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn sample_plan<R: Rng>(spec: &AugmentationSpec, rng: &mut R) -> Plan {
    if rng.gen::<f64>() >= spec.apply_probability {
        return Plan::default();
    }
    let mut steps = Vec::new();
    for row in spec.geometric.iter().chain(&spec.noise).chain(&spec.artefacts) {
        // Draw the gate for every row so later rows see a stable stream.
        let hit = rng.gen::<f64>() < row.prob;
        if hit {
            steps.push(row.transform.resolve(rng));
        }
    }
    Plan { steps }
}

/// Applies every step in order; runs of consecutive geometric steps are
/// resampled once. Labels are only touched by geometric steps.
pub fn apply_plan(v: &Volume, l: Option<&LabelMap>, plan: &Plan) -> Result<(Volume, Option<LabelMap>)> {
    if let Some(l) = l {
        l.check_pairs_with(v)?;
    }
    let mut v = v.clone();
    let mut l = l.cloned();
    let mut i = 0;
    while i < plan.steps.len() {
        let run = plan.steps[i..].iter().take_while(|s| s.is_geometric()).count();
        if run > 0 {
            let (nv, nl) = apply_geometric_chain(&v, l.as_ref(), &plan.steps[i..i + run])?;
            v = nv;
            l = nl;
            i += run;
        } else {
            v = apply_intensity(&v, &plan.steps[i])?;
            i += 1;
        }
    }
    Ok((v, l))
}
