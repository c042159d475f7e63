//! Acceptance suite. Prints one `[PASS]`/`[FAIL] AC-n` line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use lodseg_core::augment::{apply_plan, sample_plan, AugmentationSpec};
use lodseg_core::evaluator::{extract_surface, infer_volume, robustness_sweep, spearman};
use lodseg_core::losses::{dice_coefficient, soft_dice_cm};
use lodseg_core::manifest::Manifest;
use lodseg_core::motion::{simulate_motion, MotionSpec};
use lodseg_core::nn::{eval_loss, loss_and_grads, onehot_cm, param_count, save_checkpoint, volume_tensor, Adam, Level};
use lodseg_core::phantom::{generate, PhantomSpec};
use lodseg_core::trainer::{run_pipeline, run_pipeline_raw, run_stage_from, DataSource, Dataset, PipelineConfig, PipelineKind, PlateauScheduler, Sample, Stage, TrainConfig};
use lodseg_core::volume_io::{apply_affine, conform, conform_labels, Affine, BACKGROUND};
use lodseg_core::{ClassScheme, Interp, LabelMap, NetworkConfig, NetworkState, Volume};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PARAMETER_TARGET: usize = 337_719;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ac1() -> Check {
    let cfg = NetworkConfig::default();
    let n = param_count(&cfg);
    let state = NetworkState::build(cfg).map_err(|e| e.to_string())?;
    ensure(state.param_count() == n, "built state disagrees with the static count")?;
    ensure((100_000..=1_000_000).contains(&n), format!("{n} outside 1e5..1e6"))?;
    let l0 = state.level_param_count(Level::L0);
    let l1 = state.level_param_count(Level::L1);
    Ok(format!("{n} trainable parameters (level 0 {l0}, level 1 {l1}); target {PARAMETER_TARGET}, ratio {:.3}", n as f64 / PARAMETER_TARGET as f64))
}

/// Brute-force Dice by explicit set membership.
fn dice_oracle(p: &[u16], g: &[u16], k: u16) -> f64 {
    let ps: BTreeSet<usize> = (0..p.len()).filter(|&i| p[i] == k).collect();
    let gs: BTreeSet<usize> = (0..g.len()).filter(|&i| g[i] == k).collect();
    if ps.is_empty() && gs.is_empty() {
        return 1.0;
    }
    2.0 * ps.intersection(&gs).count() as f64 / (ps.len() + gs.len()) as f64
}

fn ac2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pairs = 0;
    for scheme in [ClassScheme::skullstripped4(), ClassScheme::raw7()] {
        let c = scheme.num_classes() as u16;
        for _ in 0..500 {
            // Sparse classes so empty-class cases occur too.
            let hi = rng.gen_range(1..=c);
            let mut draw = || Array3::from_shape_fn((4, 4, 4), |_| rng.gen_range(0..hi));
            let p = LabelMap::new(draw(), Affine::identity(), scheme.clone()).unwrap();
            let g = LabelMap::new(draw(), Affine::identity(), scheme.clone()).unwrap();
            let got = dice_coefficient(&p, &g, &scheme, true).map_err(|e| e.to_string())?;
            let (pv, gv) = (p.data.iter().copied().collect::<Vec<_>>(), g.data.iter().copied().collect::<Vec<_>>());
            for (k, name) in scheme.names().iter().enumerate() {
                let want = dice_oracle(&pv, &gv, k as u16);
                ensure(got.per_class[name] == want, format!("class {name}: {} != {want}", got.per_class[name]))?;
            }
            pairs += 1;
        }
    }
    Ok(format!("{pairs} random pairs match exactly"))
}

fn ac3() -> Check {
    let (c, n, h) = (3usize, 64usize, 1e-6);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = vec![0.0f64; c * n];
        for v in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..c {
                probs[k * n + v] = raw[k] / s;
            }
        }
        let mut target = vec![0.0f64; c * n];
        for v in 0..n {
            target[rng.gen_range(0..c) * n + v] = 1.0;
        }
        let include_bg = seed % 2 == 0;
        let (_, grad) = soft_dice_cm(&probs, &target, c, include_bg);
        for i in 0..c * n {
            let mut up = probs.clone();
            up[i] += h;
            let mut dn = probs.clone();
            dn[i] -= h;
            let fd = (soft_dice_cm(&up, &target, c, include_bg).0 - soft_dice_cm(&dn, &target, c, include_bg).0) / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs());
            if scale > 1e-9 {
                worst = worst.max((grad[i] - fd).abs() / scale);
            } else {
                worst = worst.max((grad[i] - fd).abs());
            }
        }
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.2e}"))?;
    Ok(format!("max relative error {worst:.2e} over 20 instances"))
}

fn phantom_set(scheme: &ClassScheme, size: usize, seed: u64, count: usize) -> Dataset {
    Dataset::phantoms(&PhantomSpec { size, ..PhantomSpec::default() }, scheme, seed, count)
}

fn ac4(dir: &Path) -> Check {
    let scheme = ClassScheme::raw7();
    let mut state = NetworkState::build(NetworkConfig::desk(32, 7)).map_err(|e| e.to_string())?;
    let prior = dir.join("prior.ckpt");
    save_checkpoint(&state, &prior).map_err(|e| e.to_string())?;
    state.set_frozen([Level::L0]);
    let before = state.clone();
    let cfg = TrainConfig {
        epochs: 10,
        augmentation: AugmentationSpec::disabled(),
        checkpoint_in: Some(prior),
        ..TrainConfig::for_stage(Stage::InfantUpper)
    };
    let train = phantom_set(&scheme, 32, 1, 1);
    let val = phantom_set(&scheme, 32, 500, 1);
    let res = run_stage_from(&cfg, &mut state, &train, &val).map_err(|e| e.to_string())?;
    let mut changed_l1 = 0;
    for (name, p) in &before.params {
        for after in [&state, &res.state] {
            let q = &after.params[name];
            match p.level {
                Level::L0 => ensure(
                    p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits()),
                    format!("level-0 parameter {name} changed"),
                )?,
                Level::L1 if p.data != q.data => changed_l1 += 1,
                _ => {}
            }
        }
    }
    ensure(changed_l1 > 0, "no level-1 parameter changed")?;
    Ok(format!("level 0 bitwise unchanged after 10 steps; {changed_l1} level-1 tensor comparisons differ"))
}

fn ac5() -> Check {
    let patience = TrainConfig::default().plateau_patience;
    let mut s = PlateauScheduler::new(5e-4, 0.25, patience, 1e-4);
    // The first epoch sets the reference; the next `patience` epochs are the plateau.
    ensure(!s.observe(0.5), "reduced on the reference epoch")?;
    for e in 1..patience {
        ensure(!s.observe(0.5), format!("reduced early after {e} stale epochs"))?;
        ensure(s.lr() == 5e-4, "lr moved early")?;
    }
    ensure(s.observe(0.5), format!("no reduction after {patience} stale epochs"))?;
    ensure((s.lr() - 1.25e-4).abs() < 1e-18, format!("lr {} != 1.25e-4", s.lr()))?;
    Ok(format!("lr 5e-4 -> {} after {patience} plateau epochs", s.lr()))
}

/// Overfits one phantom at 32³, C=4; shared by AC-6 and AC-11.
fn overfit() -> (NetworkState, Sample, f64) {
    let scheme = ClassScheme::skullstripped4();
    let (volume, labels) = generate(&PhantomSpec::default(), &scheme, 1);
    let mut state = NetworkState::build(NetworkConfig::desk(32, 4)).expect("valid config");
    let x = volume_tensor::<f32>(&volume);
    let t = onehot_cm(&labels.data, 4);
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let (_, g) = loss_and_grads(&state, &x, &t, true, &mut rng);
        adam.step(&mut state, &g, 5e-4);
    }
    let (loss, _) = eval_loss(&state, &x, &t, true);
    (state, Sample { id: "overfit".into(), volume, labels }, loss)
}

fn ac6(state: &NetworkState, s: &Sample, loss: f64) -> Check {
    let scheme = ClassScheme::skullstripped4();
    let pred = infer_volume(state, &s.volume, &scheme).map_err(|e| e.to_string())?;
    let d = dice_coefficient(&pred, &s.labels, &scheme, false).map_err(|e| e.to_string())?;
    ensure(d.mean > 0.95, format!("foreground mean Dice {:.4}", d.mean))?;
    Ok(format!("foreground mean Dice {:.4} after 200 steps (loss {loss:.4})", d.mean))
}

fn ac7() -> Check {
    let spec = AugmentationSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 10_000;
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    let mut non_empty = 0;
    let mut with_inhomogeneity = 0;
    for _ in 0..trials {
        let plan = sample_plan(&spec, &mut rng);
        if !plan.is_empty() {
            non_empty += 1;
        }
        for s in &plan.steps {
            *counts.entry(s.name()).or_default() += 1;
            if s.name() == "inhomogeneity" {
                with_inhomogeneity += 1;
            }
        }
    }
    let rate = |name: &str| counts.get(name).copied().unwrap_or(0) as f64 / trials as f64;
    let mut worst = String::new();
    for r in &spec.geometric {
        let f = rate(r.transform.name());
        ensure((f - 0.30).abs() <= 0.02, format!("{} at {f:.4}", r.transform.name()))?;
    }
    for r in spec.noise.iter().chain(&spec.artefacts).filter(|r| r.prob < 1.0) {
        let f = rate(r.transform.name());
        ensure((f - 0.10).abs() <= 0.01, format!("{} at {f:.4}", r.transform.name()))?;
        worst = format!("{worst} {}={f:.3}", r.transform.name());
    }
    ensure(with_inhomogeneity == non_empty, format!("inhomogeneity in {with_inhomogeneity}/{non_empty} non-empty plans"))?;
    Ok(format!(
        "translation={:.3} rotation={:.3} grid_distortion={:.3};{worst}; inhomogeneity {with_inhomogeneity}/{non_empty}",
        rate("translation"),
        rate("rotation"),
        rate("grid_distortion")
    ))
}

fn ac8() -> Check {
    // Head-shaped masks (every tissue class) from 64³ phantoms.
    let scheme = ClassScheme::new([BACKGROUND, "object"]).unwrap();
    let spec = AugmentationSpec { apply_probability: 1.0, noise: vec![], artefacts: vec![], ..AugmentationSpec::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 1.0;
    let mut applied = 0;
    for seed in 0..50 {
        let (_, pl) = generate(&PhantomSpec { size: 64, ..PhantomSpec::default() }, &ClassScheme::raw7(), 1000 + seed);
        let mask = pl.data.mapv(|x| u16::from(x != 0));
        let v = Volume::with_identity_geometry(mask.mapv(f32::from));
        let l = LabelMap::new(mask, v.affine, scheme.clone()).unwrap();
        let mut plan = sample_plan(&spec, &mut rng);
        while plan.is_empty() {
            plan = sample_plan(&spec, &mut rng);
        }
        applied += plan.steps.len();
        // Route 1 transforms the mask image and thresholds it; route 2 transforms the label map.
        let (tv, tl) = apply_plan(&v, Some(&l), &plan).map_err(|e| e.to_string())?;
        let tl = tl.expect("labels requested");
        let thresholded = LabelMap::new(tv.data.mapv(|x| u16::from(x > 0.5)), tv.affine, scheme.clone()).unwrap();
        ensure(tl.value_set().iter().all(|x| l.value_set().contains(x)), "label value set grew")?;
        let d = dice_coefficient(&thresholded, &tl, &scheme, false).map_err(|e| e.to_string())?;
        worst = worst.min(d.mean);
    }
    ensure(worst > 0.98, format!("worst pairing Dice {worst:.4}"))?;
    Ok(format!("worst pairing Dice {worst:.4} over 50 phantoms ({applied} geometric steps)"))
}

fn mse(a: &Volume, b: &Volume) -> f64 {
    a.data.iter().zip(b.data.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data.len() as f64
}

fn ac9() -> Check {
    let scheme = ClassScheme::raw7();
    let (v, _) = generate(&PhantomSpec::default(), &scheme, 9);
    let same = simulate_motion(&v, &MotionSpec::new(0.0, 3)).map_err(|e| e.to_string())?;
    let diff = v.data.iter().zip(same.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure(diff <= 1e-5, format!("alpha=0 max abs diff {diff:e}"))?;
    let mut means = Vec::new();
    for alpha in [0.5, 1.0, 2.0] {
        let mut total = 0.0;
        for seed in 0..20 {
            total += mse(&simulate_motion(&v, &MotionSpec::new(alpha, seed)).map_err(|e| e.to_string())?, &v);
        }
        means.push(total / 20.0);
    }
    ensure(means.windows(2).all(|w| w[0] < w[1]), format!("MSE not increasing: {means:?}"))?;
    Ok(format!("alpha=0 diff {diff:e}; mean MSE {:.3e} < {:.3e} < {:.3e}", means[0], means[1], means[2]))
}

fn ac10() -> Check {
    // Voxel axes (i, j, k) -> world (-2j, 1.5k, 2i) plus an offset: permuted,
    // one axis flipped, anisotropic.
    let mut a = Affine::zeros();
    a[(0, 1)] = -2.0;
    a[(1, 2)] = 1.5;
    a[(2, 0)] = 2.0;
    a[(0, 3)] = 10.0;
    a[(1, 3)] = -5.0;
    a[(2, 3)] = -8.0;
    a[(3, 3)] = 1.0;
    let shape = (10, 12, 14);
    let scheme = ClassScheme::raw7();
    let markers: [([usize; 3], u16); 3] = [([2, 3, 4], 1), ([7, 2, 10], 2), ([5, 9, 1], 3)];
    let mut lab = Array3::<u16>::zeros(shape);
    let mut img = Array3::from_shape_fn(shape, |(i, j, k)| (i + 2 * j + 3 * k) as f32 / 60.0);
    for (p, m) in markers {
        lab[p] = m;
        img[p] = 2.0;
    }
    let l = LabelMap::new(lab, a, scheme.clone()).unwrap();
    let v = Volume::new(img, a).unwrap();
    let grid = [40; 3];
    let cl = conform_labels(&l, 1.0, grid).map_err(|e| e.to_string())?;
    for r in 0..3 {
        for c in 0..3 {
            let want = if r == c { 1.0 } else { 0.0 };
            ensure((cl.affine[(r, c)] - want).abs() < 1e-12, format!("output affine not RAS+ 1 mm: {}", cl.affine))?;
        }
    }
    let mut worst: f64 = 0.0;
    for (p, m) in markers {
        let want = apply_affine(&a, p.map(|x| x as f64));
        let pts: Vec<[f64; 3]> = cl.data.indexed_iter().filter(|(_, &x)| x == m).map(|((i, j, k), _)| apply_affine(&cl.affine, [i as f64, j as f64, k as f64])).collect();
        ensure(!pts.is_empty(), format!("marker {m} lost"))?;
        let centroid: [f64; 3] = std::array::from_fn(|ax| pts.iter().map(|q| q[ax]).sum::<f64>() / pts.len() as f64);
        let err = (0..3).map(|ax| (centroid[ax] - want[ax]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(err);
    }
    ensure(worst <= 1.0, format!("marker world error {worst:.3} mm"))?;
    let again = conform_labels(&cl, 1.0, grid).map_err(|e| e.to_string())?;
    ensure(again.data == cl.data && again.affine == cl.affine, "nearest conform not idempotent")?;
    let cv = conform(&v, 1.0, grid, Interp::Linear).map_err(|e| e.to_string())?;
    let cv2 = conform(&cv, 1.0, grid, Interp::Linear).map_err(|e| e.to_string())?;
    let dl = cv.data.iter().zip(cv2.data.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    ensure(dl <= 1e-6, format!("linear conform drift {dl:e}"))?;
    let cn = conform(&v, 1.0, grid, Interp::Nearest).map_err(|e| e.to_string())?;
    ensure(conform(&cn, 1.0, grid, Interp::Nearest).map_err(|e| e.to_string())?.data == cn.data, "nearest volume conform not idempotent")?;
    Ok(format!("marker world error <= {worst:.3} mm; linear re-conform drift {dl:e}"))
}

fn ac11(state: &NetworkState, s: &Sample) -> Check {
    let scheme = ClassScheme::skullstripped4();
    let plain = dice_coefficient(&infer_volume(state, &s.volume, &scheme).map_err(|e| e.to_string())?, &s.labels, &scheme, false)
        .map_err(|e| e.to_string())?
        .mean;
    let alphas = [0.0, 0.5, 1.0, 2.0, 3.0];
    let rows = robustness_sweep(state, std::slice::from_ref(s), &scheme, &alphas, &[0, 1, 2]).map_err(|e| e.to_string())?;
    ensure((rows[0].mean_dice - plain).abs() <= 1e-5, format!("alpha=0 Dice {} != plain {plain}", rows[0].mean_dice))?;
    let dice: Vec<f64> = rows.iter().map(|r| r.mean_dice).collect();
    let rho = spearman(&alphas, &dice);
    ensure(rho <= 0.0, format!("Spearman {rho} > 0 for {dice:?}"))?;
    let trend = dice.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join(" ");
    Ok(format!("plain {plain:.4}; Dice over alpha {trend}; rho {rho:.3}"))
}

fn ac12() -> Check {
    let scheme = ClassScheme::raw7();
    let n = 32;
    let r = 10.0;
    let wm = scheme.index_of("white_matter").unwrap() as u16;
    let sphere = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
        let d2 = [i, j, k].iter().map(|&x| (x as f64 - 15.5).powi(2)).sum::<f64>();
        if d2 <= r * r {
            wm
        } else {
            0
        }
    });
    let l = LabelMap::new(sphere, Affine::identity(), scheme.clone()).unwrap();
    let mesh = extract_surface(&l, "white_matter", 10).map_err(|e| e.to_string())?;
    let want = 4.0 * std::f64::consts::PI * r * r;
    let rel = (mesh.area() - want).abs() / want;
    ensure(rel < 0.05, format!("sphere area {:.1} vs {want:.1} ({:.2}%)", mesh.area(), 100.0 * rel))?;
    ensure(mesh.is_watertight(), "sphere mesh not watertight")?;
    let mut solids = 0;
    for seed in 0..5 {
        let (_, pl) = generate(&PhantomSpec::default(), &scheme, 100 + seed);
        for class in ["outer_gm", "inner_gm", "white_matter"] {
            let m = extract_surface(&pl, class, 10).map_err(|e| e.to_string())?;
            ensure(!m.is_empty() && m.is_watertight(), format!("phantom {seed} {class} mesh not watertight"))?;
            solids += 1;
        }
    }
    Ok(format!("sphere area error {:.2}%; {solids} phantom surfaces watertight", 100.0 * rel))
}

fn ac13(dir: &Path) -> Check {
    let phantoms = |seed, count| Some(DataSource::Phantom { count, seed, spec: PhantomSpec::default() });
    let stage = |stage, name: &str, seed| TrainConfig {
        stage,
        epochs: 2,
        augmentation: AugmentationSpec { seed: 5, ..AugmentationSpec::default() },
        network: NetworkConfig::desk(32, 7),
        checkpoint_out: Some(dir.join(format!("{name}.ckpt"))),
        train: phantoms(seed, 2),
        val: phantoms(900 + seed, 1),
        seed: 13,
        ..TrainConfig::for_stage(stage)
    };
    let stages = vec![stage(Stage::AdultPrior, "adult", 10), stage(Stage::InfantUpper, "infant", 20)];
    let e = |e: lodseg_core::Error| e.to_string();
    let full = run_pipeline_raw(&stages, false).map_err(e)?;
    let reference = full.final_val_loss();
    ensure(reference.is_finite(), "non-finite final val loss")?;

    let infant = dir.join("infant.ckpt");
    std::fs::remove_file(&infant).map_err(|x| x.to_string())?;
    let resumed = run_pipeline_raw(&stages, true).map_err(e)?;
    ensure(resumed.stages[0].skipped && !resumed.stages[1].skipped, "stage 1 not resumed from its checkpoint")?;
    ensure(resumed.final_val_loss().to_bits() == reference.to_bits(), format!("resumed {} != {reference}", resumed.final_val_loss()))?;

    let manifest = Manifest::new("train", &PipelineConfig { kind: PipelineKind::Raw, stages: stages.clone() }).map_err(e)?;
    let written = manifest.write_beside(&infant).map_err(e)?;
    let job: PipelineConfig = Manifest::load(&written).map_err(e)?.job_as().map_err(e)?;
    let replay = run_pipeline(&job, false).map_err(e)?;
    ensure(replay.final_val_loss().to_bits() == reference.to_bits(), format!("replay {} != {reference}", replay.final_val_loss()))?;
    ensure(replay.state.params == full.state.params, "replayed parameters differ")?;
    Ok(format!("final val loss {reference:.6} reproduced bit-identically by resume and manifest replay"))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("[PASS] AC-{n} ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] AC-{n} ({secs:.1}s) {why}");
            }
        }
    };
    let dir = tempfile::tempdir().expect("temp dir");
    report(1, &mut ac1);
    report(2, &mut ac2);
    report(3, &mut ac3);
    report(4, &mut || ac4(dir.path()));
    report(5, &mut ac5);
    let mut trained = None;
    report(6, &mut || {
        trained = catch_unwind(overfit).ok();
        trained.as_ref().map_or(Err("overfit run panicked".into()), |(st, s, loss)| ac6(st, s, *loss))
    });
    report(7, &mut ac7);
    report(8, &mut ac8);
    report(9, &mut ac9);
    report(10, &mut ac10);
    report(11, &mut || trained.as_ref().map_or(Err("overfit run panicked".into()), |(st, s, _)| ac11(st, s)));
    report(12, &mut ac12);
    report(13, &mut || ac13(dir.path()));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
