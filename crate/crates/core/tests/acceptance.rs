//! Acceptance criteria, one line per criterion:
//! `cargo test -p ctseg --test acceptance`.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctseg::eval::{iou, score, weighted_iou, DoseMatrix};
use ctseg::experiment::{acquire, build_cohort, cross_validate, dose_ablation, ExperimentConfig};
use ctseg::filters::{fill_holes_3d, mode_fuse, Tiebreak};
use ctseg::io::encode_volume;
use ctseg::phantom::{disk_slice, generate, jittered_spec, PhantomSpec};
use ctseg::pipeline::{ensemble, ensemble_rule, run_full, train_all, StageId};
use ctseg::segmodel::{Batch, Hyper, SoftmaxModel, N_FEATURES};
use ctseg::tomo::{fbp_reconstruct, forward_project, normalize_value, subsample_dose, AcquisitionConfig, DoseLevel, FbpFilter};
use ctseg::volume::{ClassId, Dims, LabelVolume, Volume};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rmse(a: &[f32], b: &[f32]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn fbp_oracle() -> Outcome {
    let (n, radius, mu) = (128usize, 32.0, 1.0f32);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t = Instant::now();
    let (truth, recon) = pool.install(|| {
        let truth = disk_slice(n, radius, mu);
        let vol = Volume::new(Dims::new(n, n, 1), 1.0, truth.clone()).unwrap();
        let sino = forward_project(&vol, &AcquisitionConfig::with_projections(180)).unwrap();
        let recon = fbp_reconstruct(&sino, vol.dims(), FbpFilter::RamLak).unwrap();
        (truth, recon)
    });
    let secs = t.elapsed().as_secs_f64();
    let c = (n - 1) as f64 / 2.0;
    let (mut err, mut count) = (0.0, 0usize);
    for y in 0..n {
        for x in 0..n {
            if (x as f64 - c).hypot(y as f64 - c) <= radius {
                let i = x + n * y;
                err += (recon.data()[i] as f64 - truth[i] as f64).powi(2);
                count += 1;
            }
        }
    }
    let rel = (err / count as f64).sqrt() / mu as f64;
    check(
        rel < 0.05 && secs < 10.0,
        format!("inside-disk RMSE {:.2}% of mu (limit 5%), {secs:.2} s single-threaded (limit 10 s)", 100.0 * rel),
    )
}

/// 64^3 phantoms scanned with 90 projections (2 degree step) so that D3 keeps
/// 30 angles; all stages 40 epochs at learning rate 1e-2.
fn dose_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        phantom: PhantomSpec::with_dims(Dims::cube(64)),
        acquisition: AcquisitionConfig::with_projections(90),
        seed: 11,
        ..Default::default()
    };
    cfg.set_epochs(40);
    for s in &mut cfg.stages {
        s.hyper.learning_rate = 1e-2;
    }
    cfg.validate().unwrap();
    cfg
}

fn dose_matrix_run() -> (DoseMatrix, [f64; 3], f64) {
    let cfg = dose_config();
    let t = Instant::now();
    let phantom = generate(&jittered_spec(&cfg.phantom, 0)).unwrap();
    let sino = forward_project(&phantom.attenuation, &cfg.acquisition).unwrap();
    let rmses = DoseLevel::ALL.map(|d| {
        let rec = fbp_reconstruct(&subsample_dose(&sino, d), phantom.attenuation.dims(), cfg.reconstruction_filter).unwrap();
        rmse(rec.data(), phantom.attenuation.data())
    });
    let cohort = build_cohort(&cfg).unwrap();
    let matrix = dose_ablation(&cfg, &cohort).unwrap();
    (matrix, rmses, t.elapsed().as_secs_f64())
}

fn dose_trend(matrix: &DoseMatrix, rmses: &[f64; 3]) -> Outcome {
    let rmse_up = rmses[0] < rmses[1] && rmses[1] < rmses[2];
    let (d1, d3) = (matrix.mean(0, 0), matrix.mean(2, 2));
    check(
        rmse_up && d3 <= d1,
        format!(
            "RMSE D1 {:.4} < D2 {:.4} < D3 {:.4}: {rmse_up}; weighted IoU D3->D3 {:.3} <= D1->D1 {:.3}",
            rmses[0], rmses[1], rmses[2], d3, d1
        ),
    )
}

fn mixed_dose(matrix: &DoseMatrix) -> Outcome {
    let mixed = matrix.row_min(3);
    let singles: Vec<f64> = (0..3).map(|r| matrix.row_min(r)).collect();
    let ok = singles.iter().all(|&s| mixed >= s - 0.02);
    check(
        ok,
        format!(
            "min over test doses: D1+D2 {:.3} vs D1 {:.3}, D2 {:.3}, D3 {:.3} (tolerance 0.02)",
            mixed, singles[0], singles[1], singles[2]
        ),
    )
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let classes = [ClassId::Background, ClassId::Atrium, ClassId::Ventricle];
    let hyper = Hyper {
        l2: 1e-2,
        ..Default::default()
    };
    let mut model = SoftmaxModel::new(&classes, N_FEATURES, hyper).unwrap();
    for w in &mut model.weights {
        *w = rng.random_range(-1.0..1.0);
    }
    let mut batch = Batch::default();
    for i in 0..5 {
        let x: Vec<f64> = (0..N_FEATURES).map(|_| rng.random_range(-2.0..2.0)).collect();
        batch.push(&x, i % 3, rng.random_range(0.5..2.0));
    }
    let (_, grad) = model.loss_and_grad(&batch);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.weights.len() {
        let mut p = model.clone();
        p.weights[i] += h;
        let mut m = model.clone();
        m.weights[i] -= h;
        let num = (p.loss_and_grad(&batch).0 - m.loss_and_grad(&batch).0) / (2.0 * h);
        let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 1.0,
        format!("{} parameters, max relative error {worst:.2e} (limit 1e-4), {secs:.3} s", model.weights.len()),
    )
}

fn fusion_oracle() -> Outcome {
    let t = Instant::now();
    let n = ClassId::COUNT;
    let dims = Dims::new(n * n * n, 1, 1);
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                a.push(ClassId::ALL[i]);
                b.push(ClassId::ALL[j]);
                c.push(ClassId::ALL[k]);
            }
        }
    }
    let vol = |d: Vec<ClassId>| Volume::new(dims, 1.0, d).unwrap();
    let fused = mode_fuse(&vol(a.clone()), &vol(b.clone()), &vol(c.clone()), Tiebreak::A).unwrap();
    let mut bad = 0;
    for idx in 0..dims.len() {
        let mut counts = [0; ClassId::COUNT];
        for v in [a[idx], b[idx], c[idx]] {
            counts[v as usize] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let want = if max >= 2 {
            ClassId::ALL[counts.iter().position(|&x| x == max).unwrap()]
        } else {
            a[idx]
        };
        if fused.data()[idx] != want {
            bad += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(bad == 0 && secs < 1.0, format!("{} triples, {bad} mismatches, {secs:.4} s", dims.len()))
}

fn ensemble_table() -> Outcome {
    // highest priority first
    let priority = [ClassId::Atrium, ClassId::Bulbus, ClassId::Compacta, ClassId::Lacunary, ClassId::Ventricle, ClassId::Background];
    let mut bad = Vec::new();
    let mut total = 0;
    let dims = Dims::new(16, 1, 1);
    let (mut s1v, mut lv, mut cv, mut want_v) = (vec![], vec![], vec![], vec![]);
    for s1 in StageId::Regions.classes() {
        for lac in [false, true] {
            for comp in [false, true] {
                total += 1;
                let mut candidates = vec![s1];
                if s1 != ClassId::Background {
                    if lac {
                        candidates.push(ClassId::Lacunary);
                    }
                    if comp {
                        candidates.push(ClassId::Compacta);
                    }
                }
                let want = *priority.iter().find(|p| candidates.contains(p)).unwrap();
                if ensemble_rule(s1, lac, comp) != want {
                    bad.push(format!("({s1}, {lac}, {comp})"));
                }
                s1v.push(s1);
                lv.push(if lac { ClassId::Lacunary } else { ClassId::Ventricle });
                cv.push(if comp { ClassId::Compacta } else { ClassId::Ventricle });
                want_v.push(want);
            }
        }
    }
    let vol = |d: Vec<ClassId>| Volume::new(dims, 1.0, d).unwrap();
    let volume_ok = ensemble(&vol(s1v), &vol(lv), &vol(cv)).unwrap().data() == &want_v[..];
    check(
        bad.is_empty() && total == 16 && volume_ok,
        format!("{total} combinations, mismatches: {bad:?}, volume path agrees: {volume_ok}"),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = Dims::cube(16);
    let mut worst: f64 = 0.0;
    for pair in 0..100 {
        // vary class balance across pairs
        let bias = pair % 4;
        let mut draw = |agree: f64, gt: Option<&[ClassId]>| -> Vec<ClassId> {
            (0..dims.len())
                .map(|i| match gt {
                    Some(g) if rng.random_bool(agree) => g[i],
                    _ => {
                        let v: u8 = if bias > 0 && rng.random_bool(0.5) { bias as u8 } else { rng.random_range(0..6) };
                        ClassId::ALL[v as usize]
                    }
                })
                .collect()
        };
        let g = draw(0.0, None);
        let p = draw(0.6, Some(&g));
        let (pv, gv): (LabelVolume, LabelVolume) = (Volume::new(dims, 1.0, p.clone()).unwrap(), Volume::new(dims, 1.0, g.clone()).unwrap());
        let mut total_fg = 0usize;
        let mut weighted = 0.0;
        let mut per_class = Vec::new();
        for c in ClassId::ALL {
            let ps: HashSet<usize> = (0..p.len()).filter(|&i| p[i] == c).collect();
            let gs: HashSet<usize> = (0..g.len()).filter(|&i| g[i] == c).collect();
            let union = ps.union(&gs).count();
            let want = if union == 0 { 1.0 } else { ps.intersection(&gs).count() as f64 / union as f64 };
            worst = worst.max((iou(&pv, &gv, c).unwrap() - want).abs());
            if c != ClassId::Background {
                total_fg += gs.len();
                per_class.push((gs.len(), want));
            }
        }
        for (n, v) in per_class {
            weighted += n as f64 / total_fg as f64 * v;
        }
        worst = worst.max((weighted_iou(&pv, &gv, false).unwrap() - weighted).abs());
    }
    // 15 atrium voxels (IoU 0.8) and 5 bulbus voxels (IoU 0.4)
    let mut gt = vec![ClassId::Atrium; 15];
    gt.extend([ClassId::Bulbus; 5]);
    let mut pred = vec![ClassId::Atrium; 12];
    pred.extend([ClassId::Background; 3]);
    pred.extend([ClassId::Bulbus, ClassId::Bulbus, ClassId::Background, ClassId::Background, ClassId::Background]);
    let d = Dims::new(20, 1, 1);
    let hand = score(&Volume::new(d, 1.0, pred).unwrap(), &Volume::new(d, 1.0, gt).unwrap(), false).unwrap();
    let hand_err = (hand.weighted_iou - 0.7).abs();
    check(
        worst <= 1e-12 && hand_err <= 1e-12,
        format!("100 random 16^3 pairs, max deviation {worst:.1e}; hand example {:.12} (expected 0.7)", hand.weighted_iou),
    )
}

fn end_to_end_quality() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.doses = vec![DoseLevel::FULL];
    let t = Instant::now();
    let cohort = build_cohort(&cfg).unwrap();
    let report = cross_validate(&cfg, &cohort, DoseLevel::FULL).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let s = &report.summary;
    check(
        s.mean >= 0.80 && secs < 1800.0,
        format!(
            "default 128^3 cohort, 3-fold mean weighted IoU {:.3} +/- {:.3} (folds {:?}), {:.0} s on {} threads",
            s.mean,
            s.std,
            s.scores.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            secs,
            rayon::current_num_threads()
        ),
    )
}

fn postprocessing_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    for _ in 0..50 {
        let dims = Dims::new(rng.random_range(2..12), rng.random_range(2..12), rng.random_range(2..12));
        let p_bg = rng.random_range(0.2..0.8);
        let data = (0..dims.len())
            .map(|_| {
                if rng.random_bool(p_bg) {
                    ClassId::Background
                } else {
                    ClassId::ALL[rng.random_range(1..6)]
                }
            })
            .collect();
        let v = Volume::new(dims, 1.0, data).unwrap();
        let once = fill_holes_3d(&v);
        let twice = fill_holes_3d(&once);
        let preserved = v
            .data()
            .iter()
            .zip(once.data())
            .all(|(a, b)| *a == ClassId::Background || a == b);
        if once != twice || !preserved {
            failures += 1;
        }
    }
    let (lo, hi) = (-0.25, 1.25);
    let bounds = normalize_value(lo, lo, hi) == 0
        && normalize_value(hi, lo, hi) == 65535
        && normalize_value(lo - 1.0, lo, hi) == 0
        && normalize_value(hi + 1.0, lo, hi) == 65535;
    check(
        failures == 0 && bounds,
        format!("fill_holes_3d failures on 50 random volumes: {failures}; normalize lo->0, hi->65535: {bounds}"),
    )
}

fn determinism() -> Outcome {
    let mut cfg = dose_config();
    cfg.phantom = PhantomSpec::with_dims(Dims::cube(40));
    cfg.acquisition = AcquisitionConfig::default();
    cfg.doses = vec![DoseLevel::HALF];
    cfg.set_epochs(8);
    let run = || {
        let members: Vec<_> = (0..3)
            .map(|i| acquire(&generate(&jittered_spec(&cfg.phantom, i)).unwrap(), &cfg).unwrap())
            .collect();
        let d = DoseLevel::HALF;
        let pairs = [(members[0].at(d).unwrap(), &members[0].labels), (members[1].at(d).unwrap(), &members[1].labels)];
        let models = train_all(&cfg.pipeline(), &pairs, cfg.seed).unwrap();
        let (seg, trace) = run_full(&cfg.pipeline(), models.segmenters(), members[2].at(d).unwrap(), false).unwrap();
        let (side, payload) = encode_volume(&seg);
        let report = serde_json::to_string(&(score(&seg, &members[2].labels, false).unwrap(), trace)).unwrap();
        let cv = serde_json::to_string(&cross_validate(&cfg, &members, d).unwrap()).unwrap();
        (side, payload, report, cv)
    };
    let a = run();
    let b = run();
    check(
        a == b,
        format!(
            "segmentation {} bytes, report {} bytes, cross-validation report {} bytes: identical = {}",
            a.1.len(),
            a.2.len(),
            a.3.len(),
            a == b
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let guard = |f: &dyn Fn() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        })
    };
    let mut record = |n: usize, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} [{tag}] {name}: {detail}");
        results.push((n, name, outcome));
    };

    record(1, "FBP disk oracle", guard(&fbp_oracle));
    let dose = catch_unwind(dose_matrix_run);
    match &dose {
        Ok((m, r, secs)) => {
            println!("dose matrix ({secs:.0} s):\n{}", m.to_table());
            record(2, "dose trend", guard(&|| dose_trend(m, r)));
            record(3, "mixed-dose stability", guard(&|| mixed_dose(m)));
        }
        Err(_) => {
            record(2, "dose trend", Err("dose matrix run panicked".into()));
            record(3, "mixed-dose stability", Err("dose matrix run panicked".into()));
        }
    }
    record(4, "softmax gradient check", guard(&gradient_check));
    record(5, "mode fusion oracle", guard(&fusion_oracle));
    record(6, "ensemble rule table", guard(&ensemble_table));
    record(7, "IoU metric oracle", guard(&metric_oracle));
    record(8, "end-to-end quality", guard(&end_to_end_quality));
    record(9, "post-processing invariants", guard(&postprocessing_invariants));
    record(10, "determinism", guard(&determinism));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
