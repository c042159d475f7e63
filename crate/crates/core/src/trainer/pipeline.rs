//! Bottom-up stage sequences.
//!
//! Every stage writes its best-validation checkpoint to `checkpoint_out` and,
//! once it has finished, a completion marker `<checkpoint_out>.done.json`
//! holding its report and resolved config. With `resume`, a stage whose
//! marker and checkpoint exist and whose config is unchanged is skipped and its
//! checkpoint is used as the next stage's input.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_stage, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::nn::{load_checkpoint, NetworkState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// adult_prior, then infant_upper.
    Raw,
    /// skullstripped_upper (which performs the head swap), then finetune.
    Skullstripped,
}

impl PipelineKind {
    pub fn stages(self) -> [Stage; 2] {
        match self {
            PipelineKind::Raw => [Stage::AdultPrior, Stage::InfantUpper],
            PipelineKind::Skullstripped => [Stage::SkullstrippedUpper, Stage::Finetune],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    pub stages: Vec<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub skipped: bool,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub state: NetworkState,
    pub stages: Vec<StageReport>,
}

impl PipelineOutcome {
    /// Last logged validation loss of the last stage.
    pub fn final_val_loss(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.final_val_loss)
    }
}

#[derive(Serialize, Deserialize)]
struct Marker {
    report: StageReport,
    config: serde_json::Value,
}

pub fn marker_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".done.json");
    PathBuf::from(s)
}

fn tag(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| Error::Stage { stage: stage.name().to_string(), source: Box::new(e) }
}

impl PipelineConfig {
    /// Checks the stage sequence and chains each stage's `checkpoint_in` to the
    /// previous stage's `checkpoint_out` where unset. Runs before any training.
    pub fn resolve(&self) -> Result<Vec<TrainConfig>> {
        let expected = self.kind.stages();
        for (i, want) in expected.iter().enumerate() {
            match self.stages.get(i) {
                None => {
                    return Err(Error::Config(format!(
                        "{:?} pipeline is missing stage {} ({want})",
                        self.kind,
                        i + 1
                    )))
                }
                Some(c) if c.stage != *want => {
                    return Err(Error::Config(format!("stage {} must be {want}, found {}", i + 1, c.stage)))
                }
                Some(_) => {}
            }
        }
        if self.stages.len() > expected.len() {
            return Err(Error::Config(format!("{:?} pipeline has {} stages, expected {}", self.kind, self.stages.len(), expected.len())));
        }
        let mut out: Vec<TrainConfig> = Vec::with_capacity(self.stages.len());
        for cfg in &self.stages {
            let mut cfg = cfg.clone();
            let t = tag(cfg.stage);
            let Some(ckpt) = cfg.checkpoint_out.clone() else {
                return Err(t(Error::Config("checkpoint_out is required in a pipeline".into())));
            };
            if cfg.checkpoint_in.is_none() {
                cfg.checkpoint_in = out.last().and_then(|p| p.checkpoint_out.clone());
            }
            if cfg.log_path.is_none() {
                cfg.log_path = Some(ckpt.with_extension("log.jsonl"));
            }
            if cfg.train.is_none() || cfg.val.is_none() {
                return Err(t(Error::Config("both `train` and `val` data sources are required".into())));
            }
            cfg.validate().map_err(&t)?;
            out.push(cfg);
        }
        Ok(out)
    }
}

fn finished(cfg: &TrainConfig) -> Option<StageReport> {
    let ckpt = cfg.checkpoint_out.as_ref()?;
    let bytes = read(&marker_path(ckpt)).ok()?;
    let m: Marker = serde_json::from_slice(&bytes).ok()?;
    let same = serde_json::to_value(cfg).ok()? == m.config;
    if !same {
        log::warn!("stage {}: config changed since the checkpoint was written, re-running", cfg.stage);
    }
    (same && ckpt.exists()).then_some(m.report)
}

pub fn run_pipeline(pc: &PipelineConfig, resume: bool) -> Result<PipelineOutcome> {
    let stages = pc.resolve()?;
    let mut reports = Vec::new();
    let mut state = None;
    for cfg in &stages {
        let t = tag(cfg.stage);
        let ckpt = cfg.checkpoint_out.clone().expect("resolved");
        if resume {
            if let Some(mut report) = finished(cfg) {
                log::info!("stage {}: complete, resuming from {}", cfg.stage, ckpt.display());
                report.skipped = true;
                state = Some(load_checkpoint(&ckpt).map_err(&t)?);
                reports.push(report);
                continue;
            }
        }
        let scheme = cfg.scheme().map_err(&t)?;
        let train = cfg.train.as_ref().expect("resolved").load(&scheme).map_err(&t)?;
        let val = cfg.val.as_ref().expect("resolved").load(&scheme).map_err(&t)?;
        let res = run_stage(cfg, &train, &val).map_err(&t)?;
        let report = StageReport {
            stage: cfg.stage,
            skipped: false,
            checkpoint: ckpt.clone(),
            best_epoch: res.best_epoch,
            best_val_loss: res.best_val_loss,
            final_val_loss: res.final_val_loss(),
        };
        let marker = Marker {
            report: report.clone(),
            config: serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
        };
        let bytes = serde_json::to_vec_pretty(&marker).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&marker_path(&ckpt), &bytes).map_err(&t)?;
        reports.push(report);
        state = Some(res.state);
    }
    Ok(PipelineOutcome { state: state.expect("pipelines have stages"), stages: reports })
}

/// adult_prior then infant_upper.
pub fn run_pipeline_raw(stages: &[TrainConfig], resume: bool) -> Result<PipelineOutcome> {
    run_pipeline(&PipelineConfig { kind: PipelineKind::Raw, stages: stages.to_vec() }, resume)
}

/// skullstripped_upper (adult lower level, new 4-class head) then finetune.
pub fn run_pipeline_skullstripped(stages: &[TrainConfig], resume: bool) -> Result<PipelineOutcome> {
    run_pipeline(&PipelineConfig { kind: PipelineKind::Skullstripped, stages: stages.to_vec() }, resume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationSpec;
    use crate::nn::{save_checkpoint, Level, NetworkConfig};
    use crate::phantom::PhantomSpec;
    use crate::trainer::tests::tiny_network;
    use crate::trainer::DataSource;

    fn phantoms(seed: u64, count: usize) -> Option<DataSource> {
        Some(DataSource::Phantom { count, seed, spec: PhantomSpec { size: 8, ..PhantomSpec::default() } })
    }

    fn stage(stage: Stage, dir: &Path, name: &str) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: 2,
            lr_init: 1e-3,
            augmentation: AugmentationSpec::disabled(),
            network: tiny_network(8),
            checkpoint_out: Some(dir.join(format!("{name}.ckpt"))),
            train: phantoms(1, 2),
            val: phantoms(50, 1),
            ..TrainConfig::for_stage(stage)
        }
    }

    #[test]
    fn missing_or_misordered_stages_rejected_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let s1 = stage(Stage::AdultPrior, dir.path(), "a");
        let err = run_pipeline_raw(&[s1.clone()], false).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("infant_upper")), "{err}");
        assert!(run_pipeline_raw(&[stage(Stage::InfantUpper, dir.path(), "b"), s1], false).is_err());
        assert!(!dir.path().join("a.ckpt").exists());
    }

    #[test]
    fn raw_pipeline_freezes_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let stages = [stage(Stage::AdultPrior, dir.path(), "s1"), stage(Stage::InfantUpper, dir.path(), "s2")];
        let full = run_pipeline_raw(&stages, false).unwrap();
        let s1 = load_checkpoint(dir.path().join("s1.ckpt")).unwrap();
        for (name, p) in full.state.params.iter().filter(|(_, p)| p.level == Level::L0) {
            assert_eq!(p.data, s1.params[name].data);
        }
        std::fs::remove_file(marker_path(&dir.path().join("s2.ckpt"))).unwrap();
        let resumed = run_pipeline_raw(&stages, true).unwrap();
        assert!(resumed.stages[0].skipped && !resumed.stages[1].skipped);
        assert_eq!(resumed.final_val_loss().to_bits(), full.final_val_loss().to_bits());
        assert_eq!(resumed.state.params, full.state.params);
    }

    #[test]
    fn skullstripped_pipeline_swaps_head_and_tags_failures() {
        let dir = tempfile::tempdir().unwrap();
        let adult = NetworkState::build(NetworkConfig { num_classes: 7, ..tiny_network(8) }).unwrap();
        save_checkpoint(&adult, dir.path().join("adult.ckpt")).unwrap();
        let mut b = stage(Stage::SkullstrippedUpper, dir.path(), "b");
        b.checkpoint_in = Some(dir.path().join("adult.ckpt"));
        let c = stage(Stage::Finetune, dir.path(), "c");
        let out = run_pipeline_skullstripped(&[b.clone(), c.clone()], false).unwrap();
        assert_eq!(out.state.num_classes(), 4);
        assert!(out.state.is_frozen(Level::L0));

        let mut empty = b;
        empty.train = Some(DataSource::Phantom { count: 0, seed: 0, spec: PhantomSpec::default() });
        let err = run_pipeline_skullstripped(&[empty, c], false).unwrap_err();
        match err {
            Error::Stage { stage, source } => {
                assert_eq!(stage, "skullstripped_upper");
                assert!(matches!(*source, Error::Config(_)));
            }
            other => panic!("{other}"),
        }
    }
}
