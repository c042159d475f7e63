use nalgebra::{Matrix4, Vector4};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Affine = Matrix4<f64>;

/// Ordered class names; position in the list is the channel index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassScheme {
    names: Vec<String>,
}

pub const BACKGROUND: &str = "background";

impl ClassScheme {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "class scheme needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if names[0] != BACKGROUND {
            return Err(Error::Config(format!(
                "class 0 must be `{BACKGROUND}`, got `{}`",
                names[0]
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// Seven channels with background at index 0; ventricles are folded into CSF.
    pub fn raw7() -> Self {
        Self::new([
            BACKGROUND,
            "gray_matter",
            "white_matter",
            "csf",
            "cerebellum",
            "brainstem",
            "basal_ganglia",
        ])
        .expect("preset is valid")
    }

    /// Background plus the seven tissue classes.
    pub fn raw8() -> Self {
        Self::new([
            BACKGROUND,
            "gray_matter",
            "white_matter",
            "csf",
            "ventricles",
            "cerebellum",
            "brainstem",
            "basal_ganglia",
        ])
        .expect("preset is valid")
    }

    pub fn skullstripped4() -> Self {
        Self::new([BACKGROUND, "csf", "gray_matter", "white_matter"]).expect("preset is valid")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "raw7" => Ok(Self::raw7()),
            "raw8" => Ok(Self::raw8()),
            "skullstripped4" | "ss4" => Ok(Self::skullstripped4()),
            other => Err(Error::Config(format!(
                "unknown class scheme preset `{other}` (expected raw7, raw8 or skullstripped4)"
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ClassScheme {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        ClassScheme::new(v)
    }
}

impl From<ClassScheme> for Vec<String> {
    fn from(s: ClassScheme) -> Self {
        s.names
    }
}

/// Dense scalar image with a voxel-index to world-mm affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub affine: Affine,
}

impl Volume {
    pub fn new(data: Array3<f32>, affine: Affine) -> Result<Self> {
        check_affine(&affine)?;
        Ok(Self { data, affine })
    }

    /// Unit-spacing volume centred on the world origin.
    pub fn with_identity_geometry(data: Array3<f32>) -> Self {
        let affine = centered_affine(shape3(&data), 1.0);
        Self { data, affine }
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.data)
    }

    pub fn voxel_to_world(&self, ijk: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, ijk)
    }
}

/// Integer class map sharing a [`Volume`]'s geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub data: Array3<u16>,
    pub affine: Affine,
    pub scheme: ClassScheme,
}

impl LabelMap {
    pub fn new(data: Array3<u16>, affine: Affine, scheme: ClassScheme) -> Result<Self> {
        check_affine(&affine)?;
        let l = Self {
            data,
            affine,
            scheme,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.data)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.scheme.num_classes();
        if let Some(bad) = self.data.iter().find(|&&v| v as usize >= c) {
            return Err(Error::Contract(format!(
                "label value {bad} out of range for a {c}-class scheme"
            )));
        }
        Ok(())
    }

    /// Checks that `v` has exactly this map's shape and affine.
    pub fn check_pairs_with(&self, v: &Volume) -> Result<()> {
        if self.shape() != v.shape() {
            return Err(Error::Contract(format!(
                "label shape {:?} does not match volume shape {:?}",
                self.shape(),
                v.shape()
            )));
        }
        if self.affine != v.affine {
            return Err(Error::Contract(
                "label affine does not match volume affine".into(),
            ));
        }
        Ok(())
    }

    /// Sorted set of label values present.
    pub fn value_set(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &v in self.data.iter() {
            seen[v as usize] = true;
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| i as u16)
            .collect()
    }
}

/// One-hot encodes a label map into an (X, Y, Z, C) array.
pub fn one_hot(l: &LabelMap) -> Result<Array4<f32>> {
    l.validate()?;
    let [x, y, z] = l.shape();
    let c = l.scheme.num_classes();
    let mut out = Array4::<f32>::zeros((x, y, z, c));
    for ((i, j, k), &v) in l.data.indexed_iter() {
        out[[i, j, k, v as usize]] = 1.0;
    }
    Ok(out)
}

pub(crate) fn shape3<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

pub(crate) fn check_affine(a: &Affine) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Geometry("affine has non-finite entries".into()));
    }
    let det = a.fixed_view::<3, 3>(0, 0).determinant();
    if det.abs() < 1e-12 {
        return Err(Error::Geometry(format!(
            "affine is singular (det of linear part = {det:e})"
        )));
    }
    Ok(())
}

pub fn apply_affine(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    let w = a * Vector4::new(p[0], p[1], p[2], 1.0);
    [w[0], w[1], w[2]]
}

/// RAS+ affine with isotropic `mm` spacing whose grid centre sits at world origin.
pub fn centered_affine(shape: [usize; 3], mm: f64) -> Affine {
    let mut a = Affine::identity();
    for ax in 0..3 {
        a[(ax, ax)] = mm;
        a[(ax, 3)] = -mm * (shape[ax] as f64 - 1.0) / 2.0;
    }
    a
}
