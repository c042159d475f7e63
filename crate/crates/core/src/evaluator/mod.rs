//! Inference, Dice reports, discordance ranking, motion-robustness sweeps and
//! surface extraction.

mod mesh;
mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::losses::dice_coefficient;
use crate::motion::{simulate_motion, MotionSpec};
use crate::nn::{forward, NetworkState};
use crate::trainer::Sample;
use crate::volume_io::{list_nifti, load_labels, ClassScheme, LabelMap, Volume};

pub use mesh::{extract_surface, marching_cubes, surface_classes, SurfaceMesh};
pub use plot::{plot_dice_boxplot, plot_robustness};

pub const EVAL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DISCORDANT_K: usize = 30;
/// Upper bounds (months) of the age buckets `0-3, 3-6, 6-9, 9-12, 12-24`.
pub const AGE_BUCKETS: [(f64, f64, &str); 5] = [(0.0, 3.0, "0-3"), (3.0, 6.0, "3-6"), (6.0, 9.0, "6-9"), (9.0, 12.0, "9-12"), (12.0, 24.0, "12-24")];

/// Per-voxel argmax of the network output (ties go to the lowest class index).
pub fn infer_volume(state: &NetworkState, v: &Volume, scheme: &ClassScheme) -> Result<LabelMap> {
    if scheme.num_classes() != state.num_classes() {
        return Err(Error::ClassMismatch { found: state.num_classes(), expected: scheme.num_classes() });
    }
    let out = forward(state, v)?;
    Ok(LabelMap { data: out.argmax(), affine: v.affine, scheme: scheme.clone() })
}

/// Half-open month ranges; the last bucket also includes 24.
pub fn age_bucket(months: f64) -> Option<&'static str> {
    AGE_BUCKETS
        .iter()
        .find(|(lo, hi, _)| months >= *lo && (months < *hi || (*hi == 24.0 && months == 24.0)))
        .map(|b| b.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub volume_id: String,
    pub site: String,
    pub age_months: f64,
}

/// Metadata CSV with header `volume_id,site,age_months`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    pub rows: BTreeMap<String, MetadataRow>,
}

impl Metadata {
    pub fn from_reader(r: impl std::io::Read) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for row in csv::Reader::from_reader(r).deserialize::<MetadataRow>() {
            let row = row.map_err(|e| Error::Format(format!("metadata CSV: {e}")))?;
            if rows.insert(row.volume_id.clone(), row.clone()).is_some() {
                return Err(Error::Format(format!("metadata CSV: duplicate volume_id `{}`", row.volume_id)));
            }
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub volume_id: String,
    pub method: String,
    pub site: Option<String>,
    pub age_bucket: Option<String>,
    /// Foreground class -> Dice.
    pub dice: BTreeMap<String, f64>,
}

impl EvalRecord {
    pub fn mean_dice(&self) -> f64 {
        self.dice.values().sum::<f64>() / self.dice.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub volume_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Sorted by `(volume_id, method)`.
    pub records: Vec<EvalRecord>,
    pub exclusions: Vec<Exclusion>,
}

impl Default for EvalReport {
    fn default() -> Self {
        Self { schema_version: EVAL_SCHEMA_VERSION, records: Vec::new(), exclusions: Vec::new() }
    }
}

/// One line of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    /// `all`, `site` or `age`.
    pub group_by: String,
    pub group: String,
    pub class: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single record).
    pub std: f64,
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    /// Builds a report from `(volume_id, prediction, ground truth)` triples.
    /// Background is excluded from the per-class Dice.
    pub fn from_pairs(method: &str, pairs: &[(String, LabelMap, LabelMap)], scheme: &ClassScheme, meta: Option<&Metadata>) -> Result<Self> {
        let mut records = pairs
            .iter()
            .map(|(id, pred, gt)| {
                let d = dice_coefficient(pred, gt, scheme, false)?;
                let m = meta.and_then(|m| m.rows.get(id));
                Ok(EvalRecord {
                    volume_id: id.clone(),
                    method: method.to_string(),
                    site: m.map(|m| m.site.clone()),
                    age_bucket: m.and_then(|m| age_bucket(m.age_months)).map(String::from),
                    dice: d.per_class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.sort_by(|a, b| (&a.volume_id, &a.method).cmp(&(&b.volume_id, &b.method)));
        if let Some(w) = records.windows(2).find(|w| w[0].volume_id == w[1].volume_id) {
            return Err(Error::Contract(format!("volume `{}` appears twice for method `{method}`", w[0].volume_id)));
        }
        Ok(Self { records, ..Self::default() })
    }

    /// Mean and std of Dice per `(method, group, class)` for the groups `all`,
    /// `site` and `age`. Records without a site or age bucket only enter `all`.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            let keys = [Some(("all", "all".to_string())), r.site.clone().map(|s| ("site", s)), r.age_bucket.clone().map(|a| ("age", a))];
            for (by, g) in keys.into_iter().flatten() {
                for (class, &d) in &r.dice {
                    groups.entry((r.method.clone(), by.to_string(), g.clone(), class.clone())).or_default().push(d);
                }
            }
        }
        groups
            .into_iter()
            .map(|((method, group_by, group, class), xs)| {
                let (mean, std) = mean_std(&xs);
                AggregateRow { method, group_by, group, class, n: xs.len(), mean, std }
            })
            .collect()
    }

    pub fn records_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn aggregate_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.aggregate() {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `records.jsonl`, `aggregate.csv` and `report.json` (records plus exclusions).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("records.jsonl"), &self.records_jsonl()?)?;
        write_atomic(&dir.join("aggregate.csv"), &self.aggregate_csv()?)?;
        let full = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join("report.json"), &full)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::fsutil::read(path)?;
        let r: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if r.schema_version != EVAL_SCHEMA_VERSION {
            return Err(Error::Format(format!("{}: report schema {} is not {EVAL_SCHEMA_VERSION}", path.display(), r.schema_version)));
        }
        Ok(r)
    }
}

/// Pairs `pred_dir/<id>.nii[.gz]` with `gt_dir/<id>.nii[.gz]` and scores them.
/// IDs present on only one side are listed as exclusions.
pub fn evaluate_set(pred_dir: &Path, gt_dir: &Path, method: &str, scheme: &ClassScheme, meta: Option<&Metadata>) -> Result<EvalReport> {
    let preds: BTreeMap<String, _> = list_nifti(pred_dir)?.into_iter().collect();
    let gts: BTreeMap<String, _> = list_nifti(gt_dir)?.into_iter().collect();
    let mut exclusions = Vec::new();
    for id in gts.keys().filter(|id| !preds.contains_key(*id)) {
        exclusions.push(Exclusion { volume_id: id.clone(), reason: "no prediction".into() });
    }
    for id in preds.keys().filter(|id| !gts.contains_key(*id)) {
        exclusions.push(Exclusion { volume_id: id.clone(), reason: "no ground truth".into() });
    }
    exclusions.sort_by(|a, b| a.volume_id.cmp(&b.volume_id));
    for e in &exclusions {
        log::warn!("excluding `{}`: {}", e.volume_id, e.reason);
    }
    let ids: Vec<&String> = gts.keys().filter(|id| preds.contains_key(*id)).collect();
    let pairs = ids
        .par_iter()
        .map(|id| Ok(((*id).clone(), load_labels(&preds[*id], scheme)?, load_labels(&gts[*id], scheme)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport::from_pairs(method, &pairs, scheme, meta)?;
    report.exclusions = exclusions;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discordance {
    pub volume_id: String,
    /// Population variance of the per-method mean Dice.
    pub variance: f64,
    pub methods: usize,
}

/// Volumes whose method-level mean Dice varies most across methods, highest
/// first, ties broken by volume ID. Volumes scored by fewer than two methods
/// are skipped.
pub fn rank_discordant(reports: &[EvalReport], k: usize) -> Result<Vec<Discordance>> {
    let mut by_volume: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in reports.iter().flat_map(|r| &r.records) {
        if by_volume.entry(&r.volume_id).or_default().insert(&r.method, r.mean_dice()).is_some() {
            return Err(Error::Contract(format!("volume `{}` has two records for method `{}`", r.volume_id, r.method)));
        }
    }
    let mut out: Vec<Discordance> = by_volume
        .into_iter()
        .filter_map(|(id, methods)| {
            if methods.len() < 2 {
                log::warn!("volume `{id}` is scored by {} method(s); skipped", methods.len());
                return None;
            }
            let xs: Vec<f64> = methods.values().copied().collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            Some(Discordance { volume_id: id.to_string(), variance, methods: xs.len() })
        })
        .collect();
    out.sort_by(|a, b| b.variance.total_cmp(&a.variance).then_with(|| a.volume_id.cmp(&b.volume_id)));
    if k > out.len() {
        log::warn!("requested {k} discordant volumes, only {} available", out.len());
    }
    out.truncate(k);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub alpha: f64,
    pub n: usize,
    pub mean_dice: f64,
    pub dice_per_class: BTreeMap<String, f64>,
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// For every volume x alpha x seed: simulate motion, segment, and score against
/// the clean labels. One row per alpha, in the given order. The motion seed
/// for volume `i` and seed `s` is `s ^ (i << 32)`.
pub fn robustness_sweep(state: &NetworkState, volumes: &[Sample], scheme: &ClassScheme, alphas: &[f64], seeds: &[u64]) -> Result<Vec<RobustnessRow>> {
    if alphas.is_empty() {
        return Err(Error::Config("robustness sweep needs at least one alpha".into()));
    }
    if seeds.is_empty() || volumes.is_empty() {
        return Err(Error::Config("robustness sweep needs at least one seed and one volume".into()));
    }
    for &a in alphas {
        MotionSpec::new(a, 0).validate()?;
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let jobs: Vec<(usize, u64)> = (0..volumes.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
        let scores = jobs
            .iter()
            .map(|&(i, s)| {
                let spec = MotionSpec::new(alpha, s ^ ((i as u64) << 32));
                let moved = simulate_motion(&volumes[i].volume, &spec)?;
                let pred = infer_volume(state, &moved, scheme)?;
                dice_coefficient(&pred, &volumes[i].labels, scheme, false)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut per_class: BTreeMap<String, f64> = BTreeMap::new();
        for d in &scores {
            for (k, v) in &d.per_class {
                *per_class.entry(k.clone()).or_default() += v;
            }
        }
        let n = scores.len();
        per_class.values_mut().for_each(|v| *v /= n as f64);
        let mean_dice = scores.iter().map(|d| d.mean).sum::<f64>() / n as f64;
        rows.push(RobustnessRow { alpha, n, mean_dice, dice_per_class: per_class });
    }
    Ok(rows)
}

/// Writes a sweep as CSV: `alpha,n,mean_dice,<class>...`.
pub fn robustness_csv(rows: &[RobustnessRow]) -> Result<Vec<u8>> {
    let classes: BTreeSet<&String> = rows.iter().flat_map(|r| r.dice_per_class.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["alpha".to_string(), "n".into(), "mean_dice".into()];
    header.extend(classes.iter().map(|c| c.to_string()));
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.alpha.to_string(), r.n.to_string(), r.mean_dice.to_string()];
        rec.extend(classes.iter().map(|c| r.dice_per_class.get(*c).map_or(String::new(), |d| d.to_string())));
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{volume_tensor, Net, NetworkConfig, SegmentationOutput, Tensor};
    use crate::phantom::{generate, PhantomSpec};
    use crate::volume_io::save_labels;
    use ndarray::{Array3, Array4};
    use proptest::prelude::*;

    fn labels(seed: u64) -> LabelMap {
        generate(&PhantomSpec { size: 8, ..PhantomSpec::default() }, &ClassScheme::skullstripped4(), seed).1
    }

    #[test]
    fn argmax_ties_and_one_hot() {
        let uniform = SegmentationOutput { probs: Array4::from_elem((2, 2, 2, 4), 0.25) };
        assert!(uniform.argmax().iter().all(|&c| c == 0));
        let l = labels(1);
        let oh = crate::volume_io::one_hot(&l).unwrap();
        assert_eq!(SegmentationOutput { probs: oh }.argmax(), l.data);
    }

    #[test]
    fn argmax_matches_scan_on_network_output() {
        let cfg = NetworkConfig {
            input_shape: [4; 3],
            num_classes: 4,
            level0_entry_filters: 8,
            level0_block_filters: 8,
            level1_block_filters: 8,
            level0_inner_reduction: 2,
            blocks_per_stage: 1,
            groupnorm_groups: 4,
            ..NetworkConfig::default()
        };
        let state = NetworkState::build(cfg).unwrap();
        let v = Volume::with_identity_geometry(Array3::from_shape_fn((4, 4, 4), |(i, j, k)| ((i * 7 + j * 3 + k) % 5) as f32 / 4.0));
        let probs: Tensor<f32> = Net::new(&state).infer(&volume_tensor(&v));
        let got = infer_volume(&state, &v, &ClassScheme::skullstripped4()).unwrap().data;
        for ((i, j, k), &g) in got.indexed_iter() {
            let at = |c: usize| probs.data[c * 64 + i * 16 + j * 4 + k];
            let mut best = 0;
            for c in 1..4 {
                if at(c) > at(best) {
                    best = c;
                }
            }
            assert_eq!(g as usize, best);
        }
        assert!(matches!(infer_volume(&state, &v, &ClassScheme::raw7()), Err(Error::ClassMismatch { .. })));
    }

    #[test]
    fn buckets() {
        assert_eq!(age_bucket(0.0), Some("0-3"));
        assert_eq!(age_bucket(3.0), Some("3-6"));
        assert_eq!(age_bucket(11.9), Some("9-12"));
        assert_eq!(age_bucket(24.0), Some("12-24"));
        assert_eq!(age_bucket(30.0), None);
    }

    #[test]
    fn identical_predictions_and_exclusions() {
        let dir = tempfile::tempdir().unwrap();
        let scheme = ClassScheme::skullstripped4();
        for i in 0..10u64 {
            let l = labels(i);
            save_labels(&l, dir.path().join("gt").join(format!("v{i}.nii.gz"))).unwrap();
            if i != 4 {
                save_labels(&l, dir.path().join("pred").join(format!("v{i}.nii.gz"))).unwrap();
            }
        }
        let meta = Metadata::from_reader("volume_id,site,age_months\nv0,a,1.5\nv1,b,7\n".as_bytes()).unwrap();
        let r = evaluate_set(&dir.path().join("pred"), &dir.path().join("gt"), "ours", &scheme, Some(&meta)).unwrap();
        assert_eq!(r.records.len(), 9);
        assert_eq!(r.exclusions, vec![Exclusion { volume_id: "v4".into(), reason: "no prediction".into() }]);
        assert_eq!(r.records[1].age_bucket.as_deref(), Some("6-9"));
        for row in r.aggregate() {
            assert_eq!((row.mean, row.std), (1.0, 0.0));
        }
        r.write_dir(&dir.path().join("out")).unwrap();
        assert_eq!(EvalReport::load(&dir.path().join("out/report.json")).unwrap(), r);
        let lines = std::fs::read_to_string(dir.path().join("out/records.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 9);
    }

    fn record(id: &str, method: &str, site: &str, d: [f64; 3]) -> EvalRecord {
        let dice = ["csf", "gray_matter", "white_matter"].iter().zip(d).map(|(k, v)| (k.to_string(), v)).collect();
        EvalRecord { volume_id: id.into(), method: method.into(), site: Some(site.into()), age_bucket: None, dice }
    }

    #[test]
    fn aggregate_matches_group_by_recomputation() {
        let recs = vec![
            record("a", "m", "s1", [0.9, 0.8, 0.7]),
            record("b", "m", "s1", [0.7, 0.6, 0.5]),
            record("c", "m", "s2", [0.5, 0.9, 0.1]),
        ];
        let report = EvalReport { records: recs.clone(), ..EvalReport::default() };
        let agg = report.aggregate();
        let find = |by: &str, g: &str, c: &str| agg.iter().find(|r| r.group_by == by && r.group == g && r.class == c).unwrap().clone();
        let s1_gm = find("site", "s1", "gray_matter");
        assert!((s1_gm.mean - 0.7).abs() < 1e-12);
        assert!((s1_gm.std - (0.02f64).sqrt()).abs() < 1e-12);
        let all_wm = find("all", "all", "white_matter");
        assert_eq!(all_wm.n, 3);
        assert!((all_wm.mean - (0.7 + 0.5 + 0.1) / 3.0).abs() < 1e-12);
        assert_eq!(find("site", "s2", "csf").std, 0.0);
    }

    #[test]
    fn discordance_hand_computed() {
        // Method means per volume: v1 (0.9, 0.5, 0.7), v2 all 0.5, v3 (1.0, 0.4, 0.4), v4 (0.8, 0.8, 0.5), v5 all 0.25.
        let means = [("v1", [0.9, 0.5, 0.7]), ("v2", [0.5; 3]), ("v3", [1.0, 0.4, 0.4]), ("v4", [0.8, 0.8, 0.5]), ("v5", [0.25; 3])];
        let reports: Vec<EvalReport> = (0..3)
            .map(|m| EvalReport {
                records: means.iter().map(|(id, ms)| record(id, &format!("m{m}"), "s", [ms[m]; 3])).collect(),
                ..EvalReport::default()
            })
            .collect();
        let top = rank_discordant(&reports, 3).unwrap();
        let ids: Vec<&str> = top.iter().map(|d| d.volume_id.as_str()).collect();
        assert_eq!(ids, vec!["v3", "v1", "v4"]);
        assert!((top[0].variance - 0.08).abs() < 1e-12);
        assert!((top[1].variance - 0.08 / 3.0).abs() < 1e-12);
        let mut rev = reports.clone();
        rev.reverse();
        assert_eq!(rank_discordant(&rev, 3).unwrap(), top);
        let all = rank_discordant(&reports, DEFAULT_DISCORDANT_K).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(&all[3..].iter().map(|d| d.volume_id.as_str()).collect::<Vec<_>>(), &["v2", "v5"]);
    }

    #[test]
    fn sweep_shape_and_errors() {
        let cfg = NetworkConfig {
            input_shape: [8; 3],
            num_classes: 4,
            level0_entry_filters: 8,
            level0_block_filters: 8,
            level1_block_filters: 8,
            level0_inner_reduction: 2,
            blocks_per_stage: 1,
            groupnorm_groups: 4,
            ..NetworkConfig::default()
        };
        let state = NetworkState::build(cfg).unwrap();
        let scheme = ClassScheme::skullstripped4();
        let (volume, labels) = generate(&PhantomSpec { size: 8, ..PhantomSpec::default() }, &scheme, 3);
        let vols = vec![Sample { id: "p".into(), volume, labels }];
        assert!(matches!(robustness_sweep(&state, &vols, &scheme, &[], &[0]), Err(Error::Config(_))));
        let rows = robustness_sweep(&state, &vols, &scheme, &[0.0, 1.0, 2.0], &[0, 1]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows, robustness_sweep(&state, &vols, &scheme, &[0.0, 1.0, 2.0], &[0, 1]).unwrap());
        let text = String::from_utf8(robustness_csv(&rows).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        // Ranks with ties: y = (1, 2.5, 2.5, 4).
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.5, 0.5, 0.9]);
        assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn report_is_order_invariant(perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
            let scheme = ClassScheme::skullstripped4();
            let pairs: Vec<(String, LabelMap, LabelMap)> = (0..5).map(|i| (format!("v{i}"), labels(i), labels(i + 7))).collect();
            let shuffled: Vec<_> = perm.iter().map(|&i| pairs[i].clone()).collect();
            let a = EvalReport::from_pairs("m", &pairs, &scheme, None).unwrap();
            let b = EvalReport::from_pairs("m", &shuffled, &scheme, None).unwrap();
            prop_assert_eq!(a.aggregate(), b.aggregate());
            prop_assert_eq!(a, b);
        }
    }
}
