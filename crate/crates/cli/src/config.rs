//! The TOML run config. Every block is optional; command-line flags win over
//! config values, which win over built-in defaults.

use std::path::{Path, PathBuf};

use lodseg_core::augment::AugmentationSpec;
use lodseg_core::trainer::{PipelineKind, TrainConfig};
use lodseg_core::{Error, Interp, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: Option<String>,
    pub workers: Option<usize>,
    pub conform: Option<ConformSection>,
    pub train: Option<TrainSection>,
    pub augmentation: Option<AugmentationSpec>,
    pub motion: Option<MotionSection>,
    pub evaluate: Option<EvaluateSection>,
    pub robustness: Option<RobustnessSection>,
    pub mesh: Option<MeshSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformSection {
    pub mm: Option<f64>,
    pub shape: Option<usize>,
    pub interp: Option<Interp>,
}

/// One stage run on its own, or a full pipeline when `pipeline` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub pipeline: Option<PipelineKind>,
    pub stages: Vec<TrainConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSection {
    pub alpha: Option<f64>,
    pub num_events: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub method: Option<String>,
    pub classes: Option<String>,
    pub metadata: Option<PathBuf>,
    pub plots: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSection {
    pub alphas: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub classes: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub class: Option<String>,
    pub classes: Option<String>,
    pub smoothing_iters: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(level) = &self.log_level {
            level
                .parse::<log::LevelFilter>()
                .map_err(|_| Error::Config(format!("log_level: unknown level `{level}`")))?;
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        if let Some(t) = &self.train {
            if t.stages.is_empty() {
                return Err(Error::Config("train.stages is empty".into()));
            }
            let mut prev_out: Option<PathBuf> = None;
            for s in &t.stages {
                let mut s = s.clone();
                // Pipeline stages inherit the previous stage's checkpoint.
                if t.pipeline.is_some() && s.checkpoint_in.is_none() {
                    s.checkpoint_in = prev_out.clone();
                }
                s.validate().map_err(|e| Error::Stage { stage: s.stage.name().into(), source: Box::new(e) })?;
                prev_out = s.checkpoint_out.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("seed = 1\nbogus_key = 2\n", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("bogus_key")), "{err}");
        let err = RunConfig::parse("[motion]\nalpha = 1.0\nspeed = 2\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("speed"), "{err}");
    }

    #[test]
    fn stage_blocks_parse() {
        let text = r#"
seed = 3
[train]
pipeline = "raw"
[[train.stages]]
stage = "adult_prior"
epochs = 2
checkpoint_out = "a.ckpt"
train = { kind = "phantom", count = 2, seed = 1 }
val = { kind = "phantom", count = 1, seed = 9 }
[train.stages.network]
input_shape = [16, 16, 16]
[[train.stages]]
stage = "infant_upper"
checkpoint_out = "b.ckpt"
"#;
        let cfg = RunConfig::parse(text, Path::new("run.toml")).unwrap();
        let t = cfg.train.unwrap();
        assert_eq!(t.pipeline, Some(PipelineKind::Raw));
        assert_eq!(t.stages.len(), 2);
        assert_eq!(t.stages[0].network.input_shape, [16; 3]);
        assert_eq!(t.stages[1].epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("log_level = \"loud\"", Path::new("x")).is_err());
        assert!(RunConfig::parse("workers = 0", Path::new("x")).is_err());
        assert!(RunConfig::parse("[augmentation]\napply_probability = 2.0", Path::new("x")).is_err());
        let lone = "[train]\n[[train.stages]]\nstage = \"infant_upper\"\ncheckpoint_out = \"b.ckpt\"\n";
        assert!(RunConfig::parse(lone, Path::new("x")).is_err(), "a transfer stage outside a pipeline needs checkpoint_in");
    }
}
