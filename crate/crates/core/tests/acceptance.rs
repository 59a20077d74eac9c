//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use anomaly_bench::component::{evaluate_components, score_image, size_bin_counts, size_stratified, summarize};
use anomaly_bench::connectivity::extract_components;
use anomaly_bench::model::default_tau_grid;
use anomaly_bench::pixel::{evaluate_pixels, pool};
use anomaly_bench::report::{component_scores_at, evaluate, EvalOptions, ImageMeta, Predictions, Submission};
use anomaly_bench::synth::{generate_scene, oracle_component, oracle_pixel, Scene, SceneSpec};
use anomaly_bench::{validate_pair, BinaryMask, Label, LabelMap, ScoreMode, ScoredImage, Track, TrackConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Small scene with parameters drawn from the seed.
fn small_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let spec = SceneSpec {
        width: 16,
        height: 16,
        component_count: rng.random_range(1..=3),
        min_extent: 1,
        max_extent: 6,
        void_fraction: if rng.random_bool(0.5) { 0.125 } else { 0.0 },
        hit_probability: 0.8,
        noise: [0.0, 0.2, 0.6][rng.random_range(0..3)],
        blur_radius: rng.random_range(0..=1),
        false_alarm_rate: 1.0,
        seed,
    };
    generate_scene(&spec).expect("16x16 scenes with at most three small components fit")
}

fn scene_of(spec: &SceneSpec, seed: u64) -> Scene {
    generate_scene(&SceneSpec { seed, ..spec.clone() }).expect("scene spec is satisfiable")
}

fn submission(images: Vec<ScoredImage>) -> Submission {
    Submission {
        dataset: "synthetic".into(),
        method: "fake".into(),
        images: (0..images.len())
            .map(|i| ImageMeta {
                id: format!("img{i}"),
                tags: vec![],
            })
            .collect(),
        predictions: Predictions::Scores(images),
    }
}

fn obstacle() -> TrackConfig {
    TrackConfig::for_track(Track::Obstacle)
}

fn pixel_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    for seed in 0..500 {
        let scene = small_scene(seed);
        let mut img = scene.scored();
        if seed % 2 == 1 {
            // coarse scores to force ties
            let (l, s) = img.into_parts();
            img = validate_pair(l, s.map(|x| (x * 8.0).round() / 8.0)).unwrap();
        }
        let (got, _) = evaluate_pixels([&img], ScoreMode::Exact).map_err(|e| format!("seed {seed}: {e}"))?;
        let want = oracle_pixel(std::slice::from_ref(&img)).map_err(|e| e.to_string())?;
        ensure(
            close(got.auprc, want.auprc, 1e-12)
                && close(got.fpr95, want.fpr95, 1e-12)
                && close(got.f1_star, want.f1_star, 1e-12)
                && close(got.delta_star, want.delta_star, 1e-12),
            || format!("seed {seed}: {got:?} vs oracle {want:?}"),
        )?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("500 scenes agree to 1e-12 in {:.2?}", elapsed))
}

fn random_mask(labels: &LabelMap, rng: &mut ChaCha8Rng) -> BinaryMask {
    let p = rng.random_range(0.1..0.6);
    let bits = (0..labels.len()).map(|_| rng.random_bool(p)).collect();
    BinaryMask::new(labels.width(), labels.height(), bits).unwrap()
}

fn component_oracle_equivalence() -> Outcome {
    let taus = default_tau_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    for seed in 0..500 {
        let scene = small_scene(10_000 + seed);
        masks.push(random_mask(&scene.labels, &mut rng));
        labels.push(scene.labels);
    }
    let mut gt_sets = Vec::new();
    let mut pred_sets = Vec::new();
    for (i, (l, m)) in labels.iter().zip(&masks).enumerate() {
        let gt = extract_components(&l.anomaly_mask());
        let pred = extract_components(m);
        let got = score_image(0, &gt, &pred);
        let want = oracle_component(&[(l, m)], &taus);
        let siou: Vec<f64> = got.per_gt.iter().map(|g| g.siou).collect();
        let ppv: Vec<f64> = got.per_pred.iter().map(|p| p.ppv).collect();
        ensure(siou == want.siou && ppv == want.ppv, || {
            format!("scene {i}: sIoU/PPV differ")
        })?;
        let report = summarize(&got, &taus).map_err(|e| e.to_string())?;
        ensure(report.per_tau == want.report.per_tau, || {
            format!("scene {i}: per-tau counts differ")
        })?;
        ensure(close(report.f1_bar, want.report.f1_bar, 1e-12), || {
            format!("scene {i}: F1bar differs")
        })?;
        gt_sets.push(gt);
        pred_sets.push(pred);
    }
    let pairs: Vec<(&LabelMap, &BinaryMask)> = labels.iter().zip(&masks).collect();
    let want = oracle_component(&pairs, &taus).report;
    let (got, _) = evaluate_components(&gt_sets, &pred_sets, &obstacle()).map_err(|e| e.to_string())?;
    ensure(got.per_tau == want.per_tau, || "pooled per-tau counts differ".into())?;
    ensure(
        close(got.f1_bar, want.f1_bar, 1e-12)
            && close(got.mean_siou, want.mean_siou, 1e-12)
            && close(got.mean_ppv, want.mean_ppv, 1e-12),
        || format!("pooled ratios differ: {got:?} vs {want:?}"),
    )?;
    Ok(format!(
        "500 scenes, {} gt components, exact agreement",
        got.gt_components
    ))
}

fn siou_semantics() -> Outcome {
    let (w, h) = (200, 10);
    let strip = BinaryMask::new(w, h, vec![true; w * h]).unwrap();
    let build = |second: bool| {
        let labels = (0..w * h)
            .map(|p| match p % w {
                0..=98 => Label::Anomaly,
                101..=199 if second => Label::Anomaly,
                _ => Label::NotAnomaly,
            })
            .collect();
        LabelMap::new(w, h, labels).unwrap()
    };
    let pred = extract_components(&strip);

    let two = build(true);
    let gt = extract_components(&two.anomaly_mask());
    ensure(gt.len() == 2, || format!("{} targets", gt.len()))?;
    let scores = score_image(0, &gt, &pred);
    for g in &scores.per_gt {
        ensure(g.size == 990, || format!("target size {}", g.size))?;
        ensure(close(g.iou, 0.495, 1e-15), || format!("IoU {}", g.iou))?;
        ensure(g.siou == 990.0 / 1010.0, || format!("sIoU {}", g.siou))?;
    }
    let oracle = oracle_component(&[(&two, &strip)], &default_tau_grid());
    ensure(oracle.siou == vec![990.0 / 1010.0; 2], || "oracle disagrees".into())?;

    let one = build(false);
    let gt = extract_components(&one.anomaly_mask());
    let single = score_image(0, &gt, &pred);
    let g = &single.per_gt[0];
    ensure(g.siou == g.iou && g.iou == 0.495, || {
        format!("single target sIoU {} IoU {}", g.siou, g.iou)
    })?;
    Ok(format!(
        "two targets: IoU 0.495, sIoU {:.4}; single target: sIoU = IoU = 0.495",
        990.0 / 1010.0
    ))
}

fn cubic(x: f32) -> f32 {
    let x = x as f64;
    (x * x * x + x) as f32
}

fn rank_invariance() -> Outcome {
    let spec = SceneSpec::default();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let scene = scene_of(&spec, 20_000 + seed);
        let a = scene.scored();
        let b = validate_pair(scene.labels.clone(), scene.scores.map(cubic)).unwrap();
        let ra = evaluate(&submission(vec![a]), &obstacle(), &EvalOptions::default()).map_err(|e| e.to_string())?;
        let rb = evaluate(&submission(vec![b]), &obstacle(), &EvalOptions::default()).map_err(|e| e.to_string())?;
        let (pa, pb) = (ra.pixel.unwrap(), rb.pixel.unwrap());
        for (x, y) in [
            (pa.auprc, pb.auprc),
            (pa.fpr95, pb.fpr95),
            (pa.f1_star, pb.f1_star),
            (ra.component.f1_bar, rb.component.f1_bar),
        ] {
            worst = worst.max((x - y).abs());
        }
        ensure(worst <= 1e-12, || format!("seed {seed}: difference {worst:e}"))?;
        ensure(close(pb.delta_star, cubic(pa.delta_star as f32) as f64, 0.0), || {
            format!("seed {seed}: delta* not transformed")
        })?;
    }
    Ok(format!("100 scenes, max difference {worst:e}"))
}

fn check_monotone(report: &anomaly_bench::component::ComponentReport) -> Result<(), String> {
    for w in report.per_tau.windows(2) {
        ensure(w[0].tp >= w[1].tp, || format!("TP rises at tau {}", w[1].tau))?;
        ensure(w[0].fp <= w[1].fp, || format!("FP falls at tau {}", w[1].tau))?;
        ensure(w[0].f1 >= w[1].f1, || format!("F1 rises at tau {}", w[1].tau))?;
    }
    ensure(
        report.per_tau.iter().all(|t| t.tp + t.fn_ == report.gt_components),
        || "TP+FN not constant".into(),
    )
}

fn monotonicity() -> Outcome {
    let taus = default_tau_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for seed in 0..500 {
        let scene = small_scene(30_000 + seed);
        let gt = extract_components(&scene.labels.anomaly_mask());
        let pred = extract_components(&random_mask(&scene.labels, &mut rng));
        let report = summarize(&score_image(0, &gt, &pred), &taus).map_err(|e| e.to_string())?;
        check_monotone(&report).map_err(|e| format!("random-mask scene {seed}: {e}"))?;
        checked += 1;
    }
    let spec = SceneSpec::default();
    for seed in 0..100 {
        let r = evaluate(
            &submission(vec![scene_of(&spec, 31_000 + seed).scored()]),
            &obstacle(),
            &EvalOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        check_monotone(&r.component).map_err(|e| format!("pipeline scene {seed}: {e}"))?;
        checked += 1;
    }
    Ok(format!("{checked} scenes over 11 thresholds"))
}

fn perfect_detector() -> Outcome {
    let spec = SceneSpec {
        width: 128,
        height: 96,
        component_count: 4,
        min_extent: 10,
        max_extent: 30,
        void_fraction: 0.1,
        hit_probability: 1.0,
        noise: 0.0,
        blur_radius: 0,
        false_alarm_rate: 0.0,
        seed: 0,
    };
    let images = (0..10).map(|s| scene_of(&spec, 40_000 + s).scored()).collect();
    let r = evaluate(&submission(images), &obstacle(), &EvalOptions::default()).map_err(|e| e.to_string())?;
    let p = r.pixel.unwrap();
    let c = &r.component;
    ensure(p.auprc == 1.0 && p.fpr95 == 0.0 && p.f1_star == 1.0, || {
        format!("pixel {p:?}")
    })?;
    ensure(c.mean_siou == 1.0 && c.mean_ppv == 1.0 && c.f1_bar == 1.0, || {
        format!("component {c:?}")
    })?;
    ensure(c.per_tau.iter().all(|t| t.fp == 0 && t.fn_ == 0), || {
        "nonzero FP/FN".into()
    })?;
    Ok(format!("{} components, all metrics perfect", c.gt_components))
}

fn constant_detector() -> Outcome {
    let spec = SceneSpec {
        void_fraction: 0.15,
        ..SceneSpec::default()
    };
    let images: Vec<ScoredImage> = (0..20)
        .map(|s| {
            let scene = scene_of(&spec, 50_000 + s);
            validate_pair(scene.labels, scene.scores.map(|_| 0.5)).unwrap()
        })
        .collect();
    let prevalence = pool(&images).map_err(|e| e.to_string())?.prevalence();
    let (p, _) = evaluate_pixels(&images, ScoreMode::Exact).map_err(|e| e.to_string())?;
    ensure(close(p.auprc, prevalence, 1e-12), || {
        format!("AuPRC {} vs prevalence {prevalence}", p.auprc)
    })?;
    ensure(p.fpr95 == 1.0, || format!("FPR95 {}", p.fpr95))?;
    Ok(format!("AuPRC = prevalence = {prevalence:.6}, FPR95 = 1"))
}

fn filtering_semantics() -> Outcome {
    let spec = SceneSpec {
        width: 256,
        height: 192,
        component_count: 4,
        min_extent: 15,
        max_extent: 60,
        noise: 0.9,
        blur_radius: 1,
        false_alarm_rate: 4.0,
        ..SceneSpec::default()
    };
    let filtered_cfg = TrackConfig::for_track(Track::Anomaly);
    let mut raw_cfg = filtered_cfg.clone();
    raw_cfg.filtering = false;
    let mut small_removed = 0u64;
    for seed in 0..20 {
        let img = scene_of(&spec, 60_000 + seed).scored();
        let report = evaluate(&submission(vec![img.clone()]), &filtered_cfg, &EvalOptions::default())
            .map_err(|e| e.to_string())?;
        let delta = report.pixel.unwrap().delta_star;
        let kept = component_scores_at(&[&img], delta, &filtered_cfg);
        ensure(kept.per_pred.iter().all(|p| p.size >= 500), || {
            format!("seed {seed}: predicted component below 500 px")
        })?;
        ensure(kept.per_pred.len() as u64 == report.component.pred_components, || {
            format!("seed {seed}: report disagrees with mask")
        })?;
        let raw = component_scores_at(&[&img], delta, &raw_cfg);
        let raw_report = summarize(&raw, &raw_cfg.tau_grid).map_err(|e| e.to_string())?;
        ensure(raw_report.pred_components >= report.component.pred_components, || {
            format!("seed {seed}: fewer components without filtering")
        })?;
        for (f, r) in report.component.per_tau.iter().zip(&raw_report.per_tau) {
            ensure(f.fp <= r.fp, || {
                format!("seed {seed}: FP({}) {} > {}", f.tau, f.fp, r.fp)
            })?;
        }
        small_removed += raw_report.pred_components - report.component.pred_components;
    }
    ensure(small_removed > 0, || "no small components to filter".into())?;
    Ok(format!(
        "20 scenes, {small_removed} small components filtered, FP never lower unfiltered"
    ))
}

fn binned_fidelity() -> Outcome {
    let spec = SceneSpec {
        width: 128,
        height: 96,
        component_count: 4,
        min_extent: 5,
        max_extent: 30,
        void_fraction: 0.1,
        ..SceneSpec::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let img = scene_of(&spec, 70_000 + seed).scored();
        let (exact, _) = evaluate_pixels([&img], ScoreMode::Exact).map_err(|e| e.to_string())?;
        let (binned, _) = evaluate_pixels([&img], ScoreMode::Binned(4096)).map_err(|e| e.to_string())?;
        worst = worst.max((exact.auprc - binned.auprc).abs());
    }
    ensure(worst <= 1e-3, || format!("max AuPRC difference {worst:e}"))?;
    Ok(format!("50 scenes of 12288 px, max AuPRC difference {worst:e}"))
}

/// Mean sIoU per size bin of one 388-component dataset.
fn blur_limited_bins(seed: u64) -> Result<Vec<f64>, String> {
    let spec = SceneSpec {
        width: 128,
        height: 128,
        component_count: 4,
        min_extent: 2,
        max_extent: 40,
        hit_probability: 1.0,
        noise: 0.1,
        blur_radius: 2,
        false_alarm_rate: 0.0,
        ..SceneSpec::default()
    };
    let images: Vec<ScoredImage> = (0..97).map(|i| scene_of(&spec, seed * 1000 + i).scored()).collect();
    let mut config = obstacle();
    config.filtering = false;
    let (pixel, _) = evaluate_pixels(&images, ScoreMode::Exact).map_err(|e| e.to_string())?;
    let refs: Vec<&ScoredImage> = images.iter().collect();
    let scores = component_scores_at(&refs, pixel.delta_star, &config);
    ensure(scores.per_gt.len() == 388, || {
        format!("{} components", scores.per_gt.len())
    })?;
    let bins = size_stratified(&scores, 8).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = bins.iter().map(|b| b.count).collect();
    ensure(counts == [66, 46, 46, 46, 46, 46, 46, 46], || {
        format!("bin counts {counts:?}")
    })?;
    Ok(bins.iter().map(|b| b.mean_siou).collect())
}

fn size_stratification() -> Outcome {
    let counts = size_bin_counts(388, 8).map_err(|e| e.to_string())?;
    ensure(counts == [66, 46, 46, 46, 46, 46, 46, 46], || {
        format!("split {counts:?}")
    })?;
    let mut monotone = 0;
    for seed in 0..20 {
        let means = blur_limited_bins(80 + seed)?;
        if means.windows(2).all(|w| w[0] <= w[1]) {
            monotone += 1;
        }
    }
    ensure(monotone * 2 > 20, || {
        format!("non-decreasing in only {monotone} of 20 seeds")
    })?;
    Ok(format!(
        "388 -> 66 + 7x46; mean sIoU non-decreasing in {monotone} of 20 seeds"
    ))
}

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn throughput() -> Outcome {
    let spec = SceneSpec {
        width: 2048,
        height: 1024,
        component_count: 6,
        min_extent: 20,
        max_extent: 200,
        void_fraction: 0.1,
        noise: 0.3,
        blur_radius: 2,
        false_alarm_rate: 3.0,
        ..SceneSpec::default()
    };
    let generated = Instant::now();
    let images: Vec<ScoredImage> = (0..100)
        .map(|s| {
            let scene = scene_of(&spec, 90_000 + s);
            validate_pair(scene.labels, scene.scores).unwrap()
        })
        .collect();
    let generation = generated.elapsed();
    let start = Instant::now();
    let report = evaluate(&submission(images), &obstacle(), &EvalOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let rss = peak_rss_bytes();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("evaluation took {elapsed:?}")
    })?;
    if let Some(rss) = rss {
        ensure(rss < 4 << 30, || format!("peak RSS {} MiB", rss >> 20))?;
    }
    Ok(format!(
        "100 x 2048x1024 evaluated in {:.2?} ({} threads, generation {:.2?}), peak RSS {}, {} components",
        elapsed,
        rayon::current_num_threads(),
        generation,
        rss.map(|b| format!("{} MiB", b >> 20))
            .unwrap_or_else(|| "unknown".into()),
        report.component.gt_components
    ))
}

fn main() {
    let criteria: [(&str, Criterion); 11] = [
        ("pixel metrics match the brute-force oracle", pixel_oracle_equivalence),
        (
            "component metrics match the set-arithmetic oracle",
            component_oracle_equivalence,
        ),
        ("sIoU forgives a prediction spanning two targets", siou_semantics),
        ("metrics are invariant under x^3 + x", rank_invariance),
        ("per-threshold counts are monotone", monotonicity),
        ("perfect detector scores perfectly", perfect_detector),
        ("constant detector scores the prevalence", constant_detector),
        ("size filter semantics", filtering_semantics),
        ("binned AuPRC tracks exact AuPRC", binned_fidelity),
        ("size stratification", size_stratification),
        ("throughput on full-resolution images", throughput),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("SKIP 12 published dataset statistics: the public datasets are not available offline");
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
