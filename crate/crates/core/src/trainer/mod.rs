//! Staged training: one stage at a time with [`run_stage`], or whole
//! bottom-up sequences with the functions in [`pipeline`].

mod data;
pub mod pipeline;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_plan, sample_plan, sample_rng, AugmentationSpec};
use crate::error::{Error, Result};
use crate::losses::dice_coefficient;
use crate::nn::{
    argmax_cm, eval_loss, load_checkpoint, load_checkpoint_for, loss_and_grads, onehot_cm, save_checkpoint, volume_tensor, Adam,
    Level, NetworkConfig, NetworkState,
};
use crate::volume_io::{ClassScheme, LabelMap};

pub use data::{DataSource, Dataset, Sample};
pub use pipeline::{run_pipeline, run_pipeline_raw, run_pipeline_skullstripped, PipelineConfig, PipelineKind, PipelineOutcome, StageReport};
pub use schedule::PlateauScheduler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Whole hierarchy from scratch on adult data.
    #[default]
    AdultPrior,
    /// Upper level on infant data, lower level taken from the adult prior.
    InfantUpper,
    /// Adult lower level plus a fresh upper level and 4-class head on skull-stripped data.
    SkullstrippedUpper,
    /// Small gold-standard set, starting from the previous stage.
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::AdultPrior => "adult_prior",
            Stage::InfantUpper => "infant_upper",
            Stage::SkullstrippedUpper => "skullstripped_upper",
            Stage::Finetune => "finetune",
        }
    }

    pub fn default_classes(self) -> &'static str {
        match self {
            Stage::AdultPrior | Stage::InfantUpper => "raw7",
            Stage::SkullstrippedUpper | Stage::Finetune => "skullstripped4",
        }
    }

    pub fn is_transfer(self) -> bool {
        self != Stage::AdultPrior
    }

    pub fn default_frozen(self) -> BTreeSet<Level> {
        if self.is_transfer() {
            BTreeSet::from([Level::L0])
        } else {
            BTreeSet::new()
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    /// Minimum val-loss decrease that counts as an improvement.
    pub plateau_threshold: f64,
    pub batch_size: usize,
    /// `None` takes the stage default: nothing for `adult_prior`, level 0 otherwise.
    pub frozen_levels: Option<BTreeSet<Level>>,
    pub augmentation: AugmentationSpec,
    pub checkpoint_in: Option<PathBuf>,
    /// Receives the best-validation state whenever it improves.
    pub checkpoint_out: Option<PathBuf>,
    /// JSON-lines training log.
    pub log_path: Option<PathBuf>,
    /// Class scheme preset; `None` takes the stage default.
    pub classes: Option<String>,
    /// Architecture for stages that start from scratch (`num_classes` is taken
    /// from the class scheme).
    pub network: NetworkConfig,
    /// Re-draw the upper level and head after loading `checkpoint_in` in `infant_upper`.
    pub reinit_upper: bool,
    pub include_background: bool,
    pub train: Option<DataSource>,
    pub val: Option<DataSource>,
    /// Drives shuffling, dropout and re-initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::AdultPrior,
            epochs: 100,
            lr_init: 5e-4,
            lr_factor: 0.25,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            batch_size: 1,
            frozen_levels: None,
            augmentation: AugmentationSpec::default(),
            checkpoint_in: None,
            checkpoint_out: None,
            log_path: None,
            classes: None,
            network: NetworkConfig::default(),
            reinit_upper: false,
            include_background: true,
            train: None,
            val: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self { stage, ..Self::default() }
    }

    pub fn scheme(&self) -> Result<ClassScheme> {
        ClassScheme::preset(self.classes.as_deref().unwrap_or(self.stage.default_classes()))
    }

    pub fn frozen(&self) -> BTreeSet<Level> {
        self.frozen_levels.clone().unwrap_or_else(|| self.stage.default_frozen())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.stage)));
        if self.epochs == 0 || self.batch_size == 0 || self.plateau_patience == 0 {
            return bad("epochs, batch_size and plateau_patience must be >= 1".into());
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor must be in (0, 1), got {}", self.lr_factor));
        }
        if !(self.plateau_threshold >= 0.0) {
            return bad("plateau_threshold must be >= 0".into());
        }
        if self.stage.is_transfer() && self.checkpoint_in.is_none() {
            return bad("checkpoint_in is required for a transfer stage".into());
        }
        if self.stage == Stage::AdultPrior && self.checkpoint_in.is_none() {
            self.network.validate()?;
        }
        self.augmentation.validate()?;
        self.scheme()?;
        Ok(())
    }

    /// Network state the stage starts from, with the stage's frozen set applied.
    pub fn initial_state(&self) -> Result<NetworkState> {
        self.validate()?;
        let c = self.scheme()?.num_classes();
        let mut state = match (self.stage, &self.checkpoint_in) {
            (Stage::AdultPrior, None) => NetworkState::build(NetworkConfig { num_classes: c, ..self.network.clone() })?,
            (_, None) => unreachable!("validated"),
            (Stage::SkullstrippedUpper, Some(p)) => transfer_lower_level(load_checkpoint(p)?, c, self.seed)?,
            (stage, Some(p)) => {
                let mut s = load_checkpoint_for(p, c)?;
                if stage == Stage::InfantUpper && self.reinit_upper {
                    s.reinit_levels(&[Level::L1, Level::Head], self.seed);
                }
                s
            }
        };
        state.set_frozen(self.frozen());
        Ok(state)
    }
}

/// Keeps the lower level of `adult`, re-draws the upper level and installs a
/// fresh `num_classes` head.
pub fn transfer_lower_level(mut adult: NetworkState, num_classes: usize, seed: u64) -> Result<NetworkState> {
    adult.swap_head(num_classes, seed)?;
    adult.reinit_levels(&[Level::L1], seed);
    Ok(adult)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    #[serde(with = "finite_or_null")]
    pub train_loss: f64,
    #[serde(with = "finite_or_null")]
    pub val_loss: f64,
    /// Mean validation Dice per foreground class.
    pub val_dice_per_class: BTreeMap<String, f64>,
    pub lr: f64,
    pub wall_time_s: f64,
    /// Set on the final record of an aborted run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// JSON has no NaN: non-finite losses are written as `null` and read back as NaN.
mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    /// State with the lowest validation loss.
    pub state: NetworkState,
    pub log: Vec<TrainLogRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl StageResult {
    pub fn final_val_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.val_loss)
    }
}

struct LogSink(Option<BufWriter<File>>);

impl LogSink {
    fn create(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else { return Ok(Self(None)) };
        if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self(Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))))
    }

    fn push(&mut self, rec: &TrainLogRecord, path: Option<&Path>) -> Result<()> {
        if let (Some(w), Some(p)) = (self.0.as_mut(), path) {
            let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Forward/backward on one (augmented) training sample.
fn sample_pass(state: &NetworkState, cfg: &TrainConfig, s: &Sample, epoch: u64, index: u64) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let mut aug_rng = cfg.augmentation.sample_rng(epoch, index);
    let plan = sample_plan(&cfg.augmentation, &mut aug_rng);
    let (v, l) = if plan.is_empty() {
        (s.volume.clone(), s.labels.clone())
    } else {
        let (v, l) = apply_plan(&s.volume, Some(&s.labels), &plan)?;
        (v, l.expect("labels were passed"))
    };
    let x = volume_tensor::<f32>(&v);
    let target = onehot_cm(&l.data, state.num_classes());
    let mut drop_rng = sample_rng(cfg.seed, epoch, index);
    Ok(loss_and_grads(state, &x, &target, cfg.include_background, &mut drop_rng))
}

/// Mean soft-Dice loss and mean foreground Dice per class over a set.
pub fn validate_set(state: &NetworkState, set: &Dataset, scheme: &ClassScheme, include_background: bool) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut loss = 0.0;
    let mut dice: BTreeMap<String, f64> = BTreeMap::new();
    for s in &set.samples {
        let x = volume_tensor::<f32>(&s.volume);
        let (l, probs) = eval_loss(state, &x, &onehot_cm(&s.labels.data, state.num_classes()), include_background);
        loss += l;
        let pred = LabelMap { data: argmax_cm(&probs), affine: s.labels.affine, scheme: scheme.clone() };
        for (k, d) in dice_coefficient(&pred, &s.labels, scheme, false)?.per_class {
            *dice.entry(k).or_default() += d;
        }
    }
    let n = set.len() as f64;
    dice.values_mut().for_each(|d| *d /= n);
    Ok((loss / n, dice))
}

/// Trains one stage. The returned state (also written to `checkpoint_out`) is
/// the one with the lowest validation loss.
pub fn run_stage(cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<StageResult> {
    let mut state = cfg.initial_state()?;
    run_stage_from(cfg, &mut state, train, val)
}

/// As [`run_stage`], starting from a caller-provided state (its frozen set is kept).
pub fn run_stage_from(cfg: &TrainConfig, state: &mut NetworkState, train: &Dataset, val: &Dataset) -> Result<StageResult> {
    cfg.validate()?;
    let scheme = cfg.scheme()?;
    let shape = state.config.input_shape;
    train.check_against("training", shape, state.num_classes())?;
    val.check_against("validation", shape, state.num_classes())?;

    let log_path = cfg.log_path.as_deref();
    let mut sink = LogSink::create(log_path)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut adam = Adam::default();
    let mut sched = PlateauScheduler::new(cfg.lr_init, cfg.lr_factor, cfg.plateau_patience, cfg.plateau_threshold);
    let mut best: Option<(f64, usize, NetworkState)> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64, u64::MAX));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_pass(state, cfg, &train.samples[i], epoch as u64, i as u64))
                .collect::<Result<Vec<_>>>()?;
            let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for (&i, (loss, g)) in batch.iter().zip(results) {
                if !loss.is_finite() {
                    let rec = TrainLogRecord {
                        epoch,
                        train_loss: loss,
                        val_loss: f64::NAN,
                        val_dice_per_class: BTreeMap::new(),
                        lr,
                        wall_time_s: start.elapsed().as_secs_f64(),
                        diagnostic: Some(format!("non-finite training loss on sample `{}`", train.samples[i].id)),
                    };
                    sink.push(&rec, log_path)?;
                    return Err(Error::Numeric(format!("epoch {epoch}: non-finite loss on sample `{}`", train.samples[i].id)));
                }
                loss_sum += loss;
                for (k, gv) in g {
                    match grads.get_mut(&k) {
                        Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(k, gv);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= inv));
            adam.step(state, &grads, lr);
        }

        let (val_loss, dice) = validate_set(state, val, &scheme, cfg.include_background)?;
        let mut rec = TrainLogRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_dice_per_class: dice,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
            diagnostic: None,
        };
        if !val_loss.is_finite() {
            rec.diagnostic = Some("non-finite validation loss".into());
            sink.push(&rec, log_path)?;
            return Err(Error::Numeric(format!("epoch {epoch}: non-finite validation loss")));
        }
        sink.push(&rec, log_path)?;
        log::info!("{} epoch {epoch}: train {:.5} val {:.5} lr {:.3e}", cfg.stage, rec.train_loss, val_loss, lr);
        log.push(rec);

        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            if let Some(out) = &cfg.checkpoint_out {
                save_checkpoint(state, out)?;
            }
            best = Some((val_loss, epoch, state.clone()));
        }
        if sched.observe(val_loss) {
            log::info!("{} epoch {epoch}: plateau, lr -> {:.3e}", cfg.stage, sched.lr());
        }
    }
    let (best_val_loss, best_epoch, state) = best.expect("at least one epoch");
    Ok(StageResult { state, log, best_epoch, best_val_loss })
}
