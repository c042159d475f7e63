use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{generate, PhantomSpec};
use crate::volume_io::{list_nifti, load_labels, load_volume, ClassScheme, LabelMap, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Where a stage reads its volumes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// `path/images/<id>.nii[.gz]` paired with `path/labels/<id>.nii[.gz]`.
    /// Volumes must already be conformed and normalized.
    Dir { path: PathBuf },
    /// `count` synthetic phantoms drawn with seeds `seed, seed + 1, ...`.
    Phantom {
        count: usize,
        seed: u64,
        #[serde(default)]
        spec: PhantomSpec,
    },
}

impl DataSource {
    pub fn load(&self, scheme: &ClassScheme) -> Result<Dataset> {
        match self {
            DataSource::Dir { path } => Dataset::load_dir(path, scheme),
            DataSource::Phantom { count, seed, spec } => Ok(Dataset::phantoms(spec, scheme, *seed, *count)),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn phantoms(spec: &PhantomSpec, scheme: &ClassScheme, seed: u64, count: usize) -> Self {
        let samples = (0..count as u64)
            .map(|i| {
                let s = seed.wrapping_add(i);
                let (volume, labels) = generate(spec, scheme, s);
                Sample { id: format!("phantom_{s:06}"), volume, labels }
            })
            .collect();
        Self { samples }
    }

    pub fn load_dir(root: &Path, scheme: &ClassScheme) -> Result<Self> {
        let images = list_nifti(&root.join("images"))?;
        let labels = list_nifti(&root.join("labels"))?;
        let mut samples = Vec::with_capacity(images.len());
        for (id, img) in images {
            let Some((_, lab)) = labels.iter().find(|(l, _)| *l == id) else {
                return Err(Error::Config(format!("{}: image `{id}` has no label map", root.display())));
            };
            let volume = load_volume(&img)?;
            let labels = load_labels(lab, scheme)?;
            labels.check_pairs_with(&volume)?;
            samples.push(Sample { id, volume, labels });
        }
        Ok(Self { samples })
    }

    /// Every sample must match the network input shape and class count.
    pub(crate) fn check_against(&self, what: &str, shape: [usize; 3], num_classes: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config(format!("{what} set is empty")));
        }
        for s in &self.samples {
            if s.volume.shape() != shape {
                return Err(Error::Contract(format!(
                    "{what} volume `{}` has shape {:?}, network expects {shape:?}",
                    s.id,
                    s.volume.shape()
                )));
            }
            if s.labels.scheme.num_classes() != num_classes {
                return Err(Error::ClassMismatch { found: s.labels.scheme.num_classes(), expected: num_classes });
            }
        }
        Ok(())
    }
}
