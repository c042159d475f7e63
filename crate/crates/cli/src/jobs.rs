//! Fully resolved commands. A `Job` holds every value a run depends on, so the
//! manifest written beside its outputs is enough to re-run it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lodseg_core::augment::{apply_plan, sample_plan, AugmentationSpec, Plan};
use lodseg_core::evaluator::{
    evaluate_set, extract_surface, infer_volume, plot_dice_boxplot, plot_robustness, rank_discordant, robustness_csv, robustness_sweep,
    spearman, EvalRecord, EvalReport, Metadata,
};
use lodseg_core::motion::{simulate_motion, MotionSpec};
use lodseg_core::nn::{load_checkpoint, NetworkState};
use lodseg_core::phantom::PhantomSpec;
use lodseg_core::trainer::{run_pipeline, run_stage, DataSource, Dataset, PipelineConfig};
use lodseg_core::volume_io::{
    conform, conform_labels, list_nifti, load_labels, load_volume, normalize_intensity, save_labels, save_volume,
};
use lodseg_core::{write_atomic, ClassScheme, Error, Interp, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::TrainSection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    Conform {
        input: PathBuf,
        output: PathBuf,
        mm: f64,
        shape: usize,
        interp: Interp,
        /// Class scheme when the input is a label map.
        labels: Option<String>,
        normalize: bool,
    },
    Train {
        train: TrainSection,
        resume: bool,
    },
    Infer {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        classes: Option<String>,
        conform: bool,
    },
    Evaluate {
        pred: PathBuf,
        gt: PathBuf,
        out: PathBuf,
        method: String,
        classes: String,
        metadata: Option<PathBuf>,
        plots: bool,
    },
    Discordant {
        reports: Vec<PathBuf>,
        k: usize,
        out: PathBuf,
    },
    Robustness {
        checkpoint: PathBuf,
        data: DataSource,
        classes: Option<String>,
        alphas: Vec<f64>,
        seeds: Vec<u64>,
        out: PathBuf,
    },
    AugmentPreview {
        input: PathBuf,
        labels: Option<PathBuf>,
        classes: String,
        out: PathBuf,
        count: usize,
        augmentation: AugmentationSpec,
    },
    MotionSim {
        input: PathBuf,
        output: PathBuf,
        motion: MotionSpec,
    },
    Mesh {
        labels: PathBuf,
        classes: String,
        class: String,
        smoothing_iters: usize,
        output: PathBuf,
    },
    Synth {
        out: PathBuf,
        count: usize,
        seed: u64,
        classes: String,
        phantom: PhantomSpec,
    },
}

/// What a finished job produced.
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    /// The manifest goes beside this path.
    pub anchor: PathBuf,
    pub seeds: BTreeMap<String, u64>,
    /// Printed to stdout as JSON.
    pub summary: Value,
}

impl Outcome {
    fn new(anchor: &Path, outputs: Vec<PathBuf>, summary: Value) -> Self {
        Self { outputs, anchor: anchor.to_path_buf(), seeds: BTreeMap::new(), summary }
    }

    fn seed(mut self, name: &str, s: u64) -> Self {
        self.seeds.insert(name.into(), s);
        self
    }
}

fn json_bytes(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

/// Scheme for a checkpoint: the named preset, or the preset matching its class count.
pub fn scheme_for(state: &NetworkState, classes: Option<&str>) -> Result<ClassScheme> {
    let scheme = match classes {
        Some(name) => ClassScheme::preset(name)?,
        None => match state.num_classes() {
            4 => ClassScheme::skullstripped4(),
            7 => ClassScheme::raw7(),
            8 => ClassScheme::raw8(),
            n => return Err(Error::Config(format!("no preset has {n} classes; pass --classes"))),
        },
    };
    if scheme.num_classes() != state.num_classes() {
        return Err(Error::ClassMismatch { found: state.num_classes(), expected: scheme.num_classes() });
    }
    Ok(scheme)
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Conform { .. } => "conform",
            Job::Train { .. } => "train",
            Job::Infer { .. } => "infer",
            Job::Evaluate { .. } => "evaluate",
            Job::Discordant { .. } => "discordant",
            Job::Robustness { .. } => "robustness",
            Job::AugmentPreview { .. } => "augment-preview",
            Job::MotionSim { .. } => "motion-sim",
            Job::Mesh { .. } => "mesh",
            Job::Synth { .. } => "synth",
        }
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        match self {
            Job::Conform { mm, shape, labels, .. } => {
                if !(*mm > 0.0 && mm.is_finite()) {
                    return Err(Error::Config(format!("--mm must be positive, got {mm}")));
                }
                if *shape == 0 {
                    return Err(Error::Config("--shape must be positive".into()));
                }
                if let Some(c) = labels {
                    ClassScheme::preset(c)?;
                }
            }
            Job::Train { train, .. } => {
                if train.stages.is_empty() {
                    return Err(Error::Config("train.stages is empty".into()));
                }
                match train.pipeline {
                    Some(kind) => {
                        PipelineConfig { kind, stages: train.stages.clone() }.resolve()?;
                    }
                    None if train.stages.len() > 1 => {
                        return Err(Error::Config("several stages need `train.pipeline` (raw or skullstripped)".into()));
                    }
                    None => {
                        let s = &train.stages[0];
                        s.validate()?;
                        if s.train.is_none() || s.val.is_none() {
                            return Err(Error::Config("both `train` and `val` data sources are required".into()));
                        }
                        if s.checkpoint_out.is_none() {
                            return Err(Error::Config("checkpoint_out is required".into()));
                        }
                    }
                }
            }
            Job::Evaluate { classes, .. } | Job::AugmentPreview { classes, .. } | Job::Synth { classes, .. } => {
                ClassScheme::preset(classes)?;
            }
            Job::Mesh { classes, class, .. } => {
                let scheme = ClassScheme::preset(classes)?;
                if !matches!(class.as_str(), "inner_gm" | "outer_gm") && scheme.index_of(class).is_none() {
                    return Err(Error::Config(format!("unknown surface class `{class}`")));
                }
            }
            Job::Discordant { reports, .. } if reports.is_empty() => {
                return Err(Error::Config("discordant needs at least one report".into()));
            }
            Job::Robustness { alphas, seeds, .. } => {
                if alphas.is_empty() || seeds.is_empty() {
                    return Err(Error::Config("robustness needs at least one alpha and one seed".into()));
                }
                for &a in alphas {
                    MotionSpec::new(a, 0).validate()?;
                }
            }
            Job::MotionSim { motion, .. } => motion.validate()?,
            _ => {}
        }
        Ok(())
    }

    pub fn run(&self) -> Result<Outcome> {
        self.validate()?;
        match self {
            Job::Conform { input, output, mm, shape, interp, labels, normalize } => {
                let grid = [*shape; 3];
                match labels {
                    Some(c) => {
                        let l = load_labels(input, &ClassScheme::preset(c)?)?;
                        save_labels(&conform_labels(&l, *mm, grid)?, output)?;
                    }
                    None => {
                        let mut v = conform(&load_volume(input)?, *mm, grid, *interp)?;
                        if *normalize {
                            v = normalize_intensity(&v)?;
                        }
                        save_volume(&v, output)?;
                    }
                }
                Ok(Outcome::new(output, vec![output.clone()], json!({ "output": output, "shape": grid, "mm": mm })))
            }
            Job::Train { train, resume } => run_train(train, *resume),
            Job::Infer { checkpoint, input, output, classes, conform } => {
                let state = load_checkpoint(checkpoint)?;
                let scheme = scheme_for(&state, classes.as_deref())?;
                let pairs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
                    ensure_dir(output)?;
                    list_nifti(input)?.into_iter().map(|(id, p)| (p, output.join(format!("{id}.nii.gz")))).collect()
                } else {
                    vec![(input.clone(), output.clone())]
                };
                if pairs.is_empty() {
                    return Err(Error::Config(format!("no NIfTI volumes in {}", input.display())));
                }
                for (src, dst) in &pairs {
                    let v = if *conform { crate::cache::conformed(src, state.config.input_shape)? } else { load_volume(src)? };
                    save_labels(&infer_volume(&state, &v, &scheme)?, dst)?;
                    log::info!("{} -> {}", src.display(), dst.display());
                }
                let outputs = pairs.into_iter().map(|(_, d)| d).collect();
                Ok(Outcome::new(output, outputs, json!({ "output": output, "classes": scheme.names() })))
            }
            Job::Evaluate { pred, gt, out, method, classes, metadata, plots } => {
                let scheme = ClassScheme::preset(classes)?;
                let meta = metadata.as_deref().map(Metadata::load).transpose()?;
                let report = evaluate_set(pred, gt, method, &scheme, meta.as_ref())?;
                ensure_dir(out)?;
                report.write_dir(out)?;
                let mut outputs: Vec<PathBuf> = ["records.jsonl", "aggregate.csv", "report.json"].iter().map(|f| out.join(f)).collect();
                if *plots && !report.records.is_empty() {
                    outputs.extend(write_group_plots(&report, out)?);
                }
                let summary = json!({ "volumes": report.records.len(), "excluded": report.exclusions.len(), "out": out });
                Ok(Outcome::new(out, outputs, summary))
            }
            Job::Discordant { reports, k, out } => {
                let loaded = reports.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>>>()?;
                let ranked = rank_discordant(&loaded, *k)?;
                write_atomic(out, &json_bytes(&ranked)?)?;
                Ok(Outcome::new(out, vec![out.clone()], json!({ "volumes": ranked.len(), "out": out })))
            }
            Job::Robustness { checkpoint, data, classes, alphas, seeds, out } => {
                let state = load_checkpoint(checkpoint)?;
                let scheme = scheme_for(&state, classes.as_deref())?;
                let set = data.load(&scheme)?;
                let rows = robustness_sweep(&state, &set.samples, &scheme, alphas, seeds)?;
                let rho = spearman(&rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), &rows.iter().map(|r| r.mean_dice).collect::<Vec<_>>());
                ensure_dir(out)?;
                let files = [out.join("robustness.csv"), out.join("robustness.json"), out.join("dice_vs_alpha.svg")];
                write_atomic(&files[0], &robustness_csv(&rows)?)?;
                write_atomic(&files[1], &json_bytes(&json!({ "rows": rows, "spearman_alpha_dice": rho }))?)?;
                plot_robustness(&rows, &files[2])?;
                let mut o = Outcome::new(out, files.to_vec(), json!({ "spearman_alpha_dice": rho, "out": out }));
                for (i, s) in seeds.iter().enumerate() {
                    o = o.seed(&format!("motion_{i}"), *s);
                }
                Ok(o)
            }
            Job::AugmentPreview { input, labels, classes, out, count, augmentation } => {
                let v = load_volume(input)?;
                let l = labels.as_ref().map(|p| load_labels(p, &ClassScheme::preset(classes)?)).transpose()?;
                ensure_dir(out)?;
                let mut outputs = Vec::new();
                let mut plans: Vec<Plan> = Vec::with_capacity(*count);
                for i in 0..*count {
                    let plan = sample_plan(augmentation, &mut augmentation.sample_rng(0, i as u64));
                    let (av, al) = apply_plan(&v, l.as_ref(), &plan)?;
                    let p = out.join(format!("sample_{i:03}.nii.gz"));
                    save_volume(&av, &p)?;
                    outputs.push(p);
                    if let Some(al) = al {
                        let p = out.join(format!("sample_{i:03}_labels.nii.gz"));
                        save_labels(&al, &p)?;
                        outputs.push(p);
                    }
                    plans.push(plan);
                }
                let plan_path = out.join("plans.json");
                write_atomic(&plan_path, &json_bytes(&json!({ "augmentation": augmentation, "plans": plans }))?)?;
                outputs.push(plan_path);
                Ok(Outcome::new(out, outputs, json!({ "samples": count, "out": out })).seed("augmentation", augmentation.seed))
            }
            Job::MotionSim { input, output, motion } => {
                let moved = simulate_motion(&load_volume(input)?, motion)?;
                save_volume(&moved, output)?;
                Ok(Outcome::new(output, vec![output.clone()], json!({ "output": output, "alpha": motion.alpha })).seed("motion", motion.seed))
            }
            Job::Mesh { labels, classes, class, smoothing_iters, output } => {
                let l = load_labels(labels, &ClassScheme::preset(classes)?)?;
                let mesh = extract_surface(&l, class, *smoothing_iters)?;
                mesh.save_ply(output)?;
                let summary = json!({
                    "output": output,
                    "vertices": mesh.vertices.len(),
                    "faces": mesh.faces.len(),
                    "watertight": mesh.is_watertight(),
                });
                Ok(Outcome::new(output, vec![output.clone()], summary))
            }
            Job::Synth { out, count, seed, classes, phantom } => {
                let scheme = ClassScheme::preset(classes)?;
                let set = Dataset::phantoms(phantom, &scheme, *seed, *count);
                let mut outputs = Vec::new();
                for s in &set.samples {
                    for (sub, is_label) in [("images", false), ("labels", true)] {
                        let p = out.join(sub).join(format!("{}.nii.gz", s.id));
                        if is_label {
                            save_labels(&s.labels, &p)?;
                        } else {
                            save_volume(&s.volume, &p)?;
                        }
                        outputs.push(p);
                    }
                }
                ensure_dir(out)?;
                Ok(Outcome::new(out, outputs, json!({ "volumes": count, "out": out })).seed("phantom", *seed))
            }
        }
    }
}

fn run_train(train: &TrainSection, resume: bool) -> Result<Outcome> {
    let mut seeds = BTreeMap::new();
    for s in &train.stages {
        seeds.insert(format!("{}.seed", s.stage), s.seed);
        seeds.insert(format!("{}.augmentation", s.stage), s.augmentation.seed);
        seeds.insert(format!("{}.init", s.stage), s.network.init_seed);
    }
    let (reports, anchor) = match train.pipeline {
        Some(kind) => {
            let outcome = run_pipeline(&PipelineConfig { kind, stages: train.stages.clone() }, resume)?;
            let anchor = outcome.stages.last().map(|r| r.checkpoint.clone()).expect("pipelines have stages");
            (serde_json::to_value(&outcome.stages).map_err(|e| Error::Format(e.to_string()))?, anchor)
        }
        None => {
            let cfg = &train.stages[0];
            let scheme = cfg.scheme()?;
            let tr = cfg.train.as_ref().expect("validated").load(&scheme)?;
            let va = cfg.val.as_ref().expect("validated").load(&scheme)?;
            let res = run_stage(cfg, &tr, &va)?;
            let anchor = cfg.checkpoint_out.clone().expect("validated");
            let report = json!([{
                "stage": cfg.stage,
                "checkpoint": anchor,
                "best_epoch": res.best_epoch,
                "best_val_loss": res.best_val_loss,
                "final_val_loss": res.final_val_loss(),
            }]);
            (report, anchor)
        }
    };
    let mut outputs = Vec::new();
    for s in &train.stages {
        outputs.extend(s.checkpoint_out.iter().cloned());
        outputs.extend(s.log_path.iter().cloned());
    }
    let mut o = Outcome::new(&anchor, outputs, json!({ "stages": reports }));
    o.seeds = seeds;
    Ok(o)
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// One boxplot over all records, then one per site and per age bucket.
fn write_group_plots(report: &EvalReport, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut plot = |name: String, title: String, keep: &dyn Fn(&EvalRecord) -> bool| -> Result<()> {
        let sub = EvalReport { records: report.records.iter().filter(|r| keep(r)).cloned().collect(), ..EvalReport::default() };
        if !sub.records.is_empty() {
            let p = out.join(format!("{name}.svg"));
            plot_dice_boxplot(&sub, &title, &p)?;
            written.push(p);
        }
        Ok(())
    };
    plot("dice_all".into(), "Dice, all volumes".into(), &|_| true)?;
    let sites: std::collections::BTreeSet<String> = report.records.iter().filter_map(|r| r.site.clone()).collect();
    for s in sites {
        plot(format!("dice_site_{}", file_safe(&s)), format!("Dice, site {s}"), &|r| r.site.as_deref() == Some(s.as_str()))?;
    }
    let ages: std::collections::BTreeSet<String> = report.records.iter().filter_map(|r| r.age_bucket.clone()).collect();
    for a in ages {
        plot(format!("dice_age_{}", file_safe(&a)), format!("Dice, age {a} months"), &|r| r.age_bucket.as_deref() == Some(a.as_str()))?;
    }
    Ok(written)
}
