//! Synthetic scenes with a tunable fake detector, and naive reference
//! implementations of every metric for self-checks.
//!
//! The oracles are deliberately slow: they rebuild components with a
//! breadth-first flood fill, materialise pixel sets and re-tally the
//! confusion matrix from scratch at every threshold.

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::component::{f1_at, ComponentReport, TauCounts};
use crate::error::{Error, Result};
use crate::model::{BinaryMask, Label, LabelMap, ScoreMap, ScoredImage};

const PLACEMENT_ATTEMPTS: usize = 1000;
/// Score floor of the background before noise.
const BASE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub component_count: usize,
    /// Side lengths of components and false-alarm blobs, inclusive.
    pub min_extent: usize,
    pub max_extent: usize,
    /// Share of rows covered by void bands at the top and bottom.
    pub void_fraction: f64,
    /// Chance that the detector responds to a component at all.
    pub hit_probability: f64,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    /// Box-blur radius applied to the detector response.
    pub blur_radius: usize,
    /// Expected number of false-alarm blobs per scene.
    pub false_alarm_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            component_count: 3,
            min_extent: 3,
            max_extent: 12,
            void_fraction: 0.0,
            hit_probability: 0.8,
            noise: 0.3,
            blur_radius: 1,
            false_alarm_rate: 1.0,
            seed: 0,
        }
    }
}

/// What the generator placed, for cross-checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub component_sizes: Vec<usize>,
    pub hit: Vec<bool>,
    pub anomaly_pixels: usize,
    pub void_pixels: usize,
    pub false_alarms: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub labels: LabelMap,
    pub scores: ScoreMap,
    pub truth: SceneTruth,
}

impl Scene {
    pub fn scored(&self) -> ScoredImage {
        crate::model::validate_pair(self.labels.clone(), self.scores.clone()).expect("generated scenes are consistent")
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    row: usize,
    col: usize,
    rows: usize,
    cols: usize,
}

impl Rect {
    /// Overlap of `self` grown by `margin` with `other`.
    fn near(&self, other: &Rect, margin: usize) -> bool {
        let r0 = self.row.saturating_sub(margin);
        let c0 = self.col.saturating_sub(margin);
        let r1 = self.row + self.rows + margin;
        let c1 = self.col + self.cols + margin;
        r0 < other.row + other.rows && other.row < r1 && c0 < other.col + other.cols && other.col < c1
    }
}

fn random_rect(rng: &mut ChaCha8Rng, spec: &SceneSpec, top: usize, bottom: usize) -> Option<Rect> {
    let avail_rows = bottom - top;
    let hi_r = spec.max_extent.min(avail_rows);
    let hi_c = spec.max_extent.min(spec.width);
    let lo = spec.min_extent.max(1);
    if lo > hi_r || lo > hi_c {
        return None;
    }
    let rows = rng.random_range(lo..=hi_r);
    let cols = rng.random_range(lo..=hi_c);
    Some(Rect {
        row: rng.random_range(top..=bottom - rows),
        col: rng.random_range(0..=spec.width - cols),
        rows,
        cols,
    })
}

/// Pixels of the shape inscribed in `rect`.
fn shape_pixels(rect: &Rect, ellipse: bool, width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rect.rows * rect.cols);
    let (ry, rx) = (rect.rows as f64 / 2.0, rect.cols as f64 / 2.0);
    for r in 0..rect.rows {
        for c in 0..rect.cols {
            let inside = !ellipse || {
                let dy = (r as f64 + 0.5 - ry) / ry;
                let dx = (c as f64 + 0.5 - rx) / rx;
                dy * dy + dx * dx <= 1.0
            };
            if inside {
                out.push((rect.row + r) * width + rect.col + c);
            }
        }
    }
    out
}

/// Separable box blur with windows clipped at the border.
fn box_blur(field: &mut [f64], width: usize, height: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let mut line = Vec::new();
    let mut prefix = Vec::new();
    let blur_line = |line: &mut Vec<f64>, prefix: &mut Vec<f64>| {
        prefix.clear();
        prefix.push(0.0);
        let mut acc = 0.0;
        for &v in line.iter() {
            acc += v;
            prefix.push(acc);
        }
        let n = line.len();
        for (i, v) in line.iter_mut().enumerate() {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(n);
            *v = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    };
    for r in 0..height {
        line.clear();
        line.extend_from_slice(&field[r * width..(r + 1) * width]);
        blur_line(&mut line, &mut prefix);
        field[r * width..(r + 1) * width].copy_from_slice(&line);
    }
    for c in 0..width {
        line.clear();
        line.extend((0..height).map(|r| field[r * width + c]));
        blur_line(&mut line, &mut prefix);
        for (r, &v) in line.iter().enumerate() {
            field[r * width + c] = v;
        }
    }
}

/// Rounds onto the 16-bit grid so scenes survive a 16-bit PNG round trip.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0) as f32
}

/// Generates one labelled scene with detector scores. Deterministic in the
/// spec, including its seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let (width, height) = (spec.width, spec.height);
    if width == 0 || height == 0 {
        return Err(Error::UnsatisfiableSpec("empty image".into()));
    }
    if spec.min_extent > spec.max_extent {
        return Err(Error::UnsatisfiableSpec("min_extent > max_extent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let void_rows = ((spec.void_fraction.clamp(0.0, 1.0) * height as f64).round() as usize).min(height);
    let top = void_rows / 2;
    let bottom = height - (void_rows - top);
    if spec.component_count > 0 && top >= bottom {
        return Err(Error::UnsatisfiableSpec("void bands cover the image".into()));
    }

    let mut labels = vec![Label::NotAnomaly; width * height];
    let (head, rest) = labels.split_at_mut(top * width);
    let tail = &mut rest[(bottom - top) * width..];
    head.iter_mut().chain(tail).for_each(|l| *l = Label::Void);

    let mut placed: Vec<Rect> = Vec::new();
    let mut components: Vec<Vec<usize>> = Vec::new();
    for k in 0..spec.component_count {
        let mut found = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let Some(rect) = random_rect(&mut rng, spec, top, bottom) else {
                break;
            };
            if placed.iter().all(|p| !rect.near(p, 1)) {
                found = Some(rect);
                break;
            }
        }
        let rect = found.ok_or_else(|| {
            Error::UnsatisfiableSpec(format!("no room for component {} of {}", k + 1, spec.component_count))
        })?;
        let ellipse = rng.random_bool(0.5);
        let pixels = shape_pixels(&rect, ellipse, width);
        for &p in &pixels {
            labels[p] = Label::Anomaly;
        }
        placed.push(rect);
        components.push(pixels);
    }

    let hit: Vec<bool> = components
        .iter()
        .map(|_| rng.random_bool(spec.hit_probability.clamp(0.0, 1.0)))
        .collect();

    let mut signal = vec![0.0f64; width * height];
    for (pixels, &h) in components.iter().zip(&hit) {
        if h {
            for &p in pixels {
                signal[p] = 1.0;
            }
        }
    }

    let rate = spec.false_alarm_rate.max(0.0);
    let blobs = rate.floor() as usize + usize::from(rng.random_bool(rate.fract()));
    let mut false_alarms = 0;
    let margin = spec.blur_radius + 1;
    for _ in 0..blobs {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let Some(rect) = random_rect(&mut rng, spec, 0, height) else {
                break;
            };
            if placed.iter().all(|p| !rect.near(p, margin)) {
                let amplitude = rng.random_range(0.5..=1.0);
                for p in shape_pixels(&rect, false, width) {
                    signal[p] = signal[p].max(amplitude);
                }
                false_alarms += 1;
                break;
            }
        }
    }

    box_blur(&mut signal, width, height, spec.blur_radius);
    let scale = 1.0 + BASE_LEVEL + spec.noise.max(0.0);
    let mut scores: Vec<f32> = signal
        .iter()
        .map(|&s| {
            let u: f64 = rng.random();
            quantize((BASE_LEVEL + s + spec.noise.max(0.0) * u) / scale)
        })
        .collect();
    // a missed component is confidently normal
    for (pixels, &h) in components.iter().zip(&hit) {
        if !h {
            for &p in pixels {
                scores[p] = 0.0;
            }
        }
    }

    let truth = SceneTruth {
        component_sizes: components.iter().map(Vec::len).collect(),
        hit,
        anomaly_pixels: components.iter().map(Vec::len).sum(),
        void_pixels: void_rows * width,
        false_alarms,
    };
    Ok(Scene {
        labels: LabelMap::new(width, height, labels)?,
        scores: ScoreMap::new(width, height, scores)?,
        truth,
    })
}

/// Pixel metrics recomputed by brute force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OraclePixel {
    pub auprc: f64,
    pub fpr95: f64,
    pub f1_star: f64,
    pub delta_star: f64,
}

/// Brute-force pixel metrics over the pooled non-void pixels of `images`.
/// Quadratic in the pixel count.
pub fn oracle_pixel(images: &[ScoredImage]) -> Result<OraclePixel> {
    let mut pixels: Vec<(f64, bool)> = Vec::new();
    for img in images {
        for (&l, &s) in img.labels().labels().iter().zip(img.scores().scores()) {
            if l != Label::Void {
                pixels.push((s as f64, l == Label::Anomaly));
            }
        }
    }
    let positives = pixels.iter().filter(|p| p.1).count();
    let negatives = pixels.len() - positives;
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    if negatives == 0 {
        return Err(Error::NoNegatives);
    }
    let mut thresholds: Vec<f64> = pixels.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup_by(|a, b| a == b);

    let mut auprc = 0.0;
    let mut prev_recall = 0.0;
    let mut fpr95 = None;
    // best F1 kept as the exact fraction tp / (tp + fp + positives)
    let mut best: Option<(u64, u64, f64, f64)> = None;
    for &delta in &thresholds {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for &(s, anomaly) in &pixels {
            match (s >= delta, anomaly) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / (tp + fn_) as f64;
        auprc += precision * (recall - prev_recall);
        prev_recall = recall;
        if fpr95.is_none() && recall >= 0.95 {
            fpr95 = Some(fp as f64 / (fp + tn) as f64);
        }
        if precision + recall > 0.0 {
            let den = tp + fp + positives as u64;
            let better = match best {
                None => true,
                Some((btp, bden, _, _)) => (tp as u128) * (bden as u128) > (btp as u128) * (den as u128),
            };
            if better {
                let f1 = 2.0 * precision * recall / (precision + recall);
                best = Some((tp, den, f1, delta));
            }
        }
    }
    let (_, _, f1_star, delta_star) = best.expect("some threshold admits every positive");
    Ok(OraclePixel {
        auprc,
        fpr95: fpr95.unwrap_or(1.0),
        f1_star,
        delta_star,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    Four,
    Eight,
}

/// Components of `mask` by breadth-first flood fill, ordered by their first
/// pixel in raster order.
pub fn flood_fill_components(
    width: usize,
    height: usize,
    mask: &[bool],
    neighborhood: Neighborhood,
) -> Vec<BTreeSet<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.insert(p);
            let (r, c) = ((p / width) as isize, (p % width) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    if (dr, dc) == (0, 0) || (neighborhood == Neighborhood::Four && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let q = nr as usize * width + nc as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Literal set-arithmetic evaluation of the component metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComponents {
    pub siou: Vec<f64>,
    pub iou: Vec<f64>,
    pub ppv: Vec<f64>,
    pub report: ComponentReport,
}

/// Per-image sIoU, IoU and PPV values from explicit pixel sets.
fn oracle_image(labels: &LabelMap, mask: &BinaryMask) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = (labels.width(), labels.height());
    let gt_mask: Vec<bool> = labels.labels().iter().map(|l| l.is_anomaly()).collect();
    let gt = flood_fill_components(w, h, &gt_mask, Neighborhood::Eight);
    let pred = flood_fill_components(w, h, mask.as_slice(), Neighborhood::Eight);

    let mut siou = Vec::new();
    let mut iou = Vec::new();
    for (i, k) in gt.iter().enumerate() {
        let k: HashSet<usize> = k.iter().copied().collect();
        let k_hat: HashSet<usize> = pred
            .iter()
            .filter(|p| p.iter().any(|z| k.contains(z)))
            .flatten()
            .copied()
            .collect();
        let adjust: HashSet<usize> = gt
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, c)| c.iter().copied())
            .collect();
        let inter = k.intersection(&k_hat).count();
        let union: HashSet<usize> = k.union(&k_hat).copied().collect();
        let adjusted = union.difference(&adjust).count();
        if inter == 0 {
            siou.push(0.0);
            iou.push(0.0);
        } else {
            siou.push(inter as f64 / adjusted as f64);
            iou.push(inter as f64 / union.len() as f64);
        }
    }

    let ppv = pred
        .iter()
        .map(|p| {
            let covering: HashSet<usize> = gt
                .iter()
                .filter(|k| k.iter().any(|z| p.contains(z)))
                .flatten()
                .copied()
                .collect();
            p.iter().filter(|z| covering.contains(z)).count() as f64 / p.len() as f64
        })
        .collect();
    (siou, iou, ppv)
}

/// Component metrics over `(labels, predicted mask)` pairs by set
/// arithmetic, summed over images.
pub fn oracle_component(images: &[(&LabelMap, &BinaryMask)], tau_grid: &[f64]) -> OracleComponents {
    let mut siou = Vec::new();
    let mut iou = Vec::new();
    let mut ppv = Vec::new();
    for (labels, mask) in images {
        let (s, i, p) = oracle_image(labels, mask);
        siou.extend(s);
        iou.extend(i);
        ppv.extend(p);
    }
    let per_tau: Vec<TauCounts> = tau_grid
        .iter()
        .map(|&tau| {
            let tp = siou.iter().filter(|&&s| s > tau).count() as u64;
            let fn_ = siou.len() as u64 - tp;
            let fp = ppv.iter().filter(|&&p| p <= tau).count() as u64;
            TauCounts {
                tau,
                tp,
                fn_,
                fp,
                f1: f1_at(tp, fn_, fp),
            }
        })
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let report = ComponentReport {
        gt_components: siou.len() as u64,
        pred_components: ppv.len() as u64,
        mean_siou: mean(&siou),
        mean_ppv: mean(&ppv),
        no_predictions: ppv.is_empty(),
        f1_bar: per_tau.iter().map(|t| t.f1).sum::<f64>() / per_tau.len().max(1) as f64,
        per_tau,
    };
    OracleComponents { siou, iou, ppv, report }
}
