//! Component-level metrics.
//!
//! Each ground-truth component `k` is scored with the adjusted IoU
//!
//! ```text
//! sIoU(k) = |k ∩ P(k)| / |(k ∪ P(k)) \ A(k)|
//! ```
//!
//! where `P(k)` is the union of predicted components touching `k` and `A(k)`
//! the pixels of all other ground-truth components. Each predicted component
//! is scored with its PPV, the share of its pixels on ground-truth anomaly.
//! A target is a TP when `sIoU > tau`; a prediction is an FP when
//! `PPV <= tau`.
//!
//! Everything is computed from integer pixel counts; the only division is the
//! final ratio.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectivity::ComponentSet;
use crate::error::{Error, Result};
use crate::model::{ratio, TrackConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtScore {
    pub image: usize,
    pub component: usize,
    pub size: usize,
    pub siou: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredScore {
    pub image: usize,
    pub component: usize,
    pub size: usize,
    pub ppv: f64,
}

/// Per-component scores across a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComponentScores {
    pub per_gt: Vec<GtScore>,
    pub per_pred: Vec<PredScore>,
}

impl ComponentScores {
    pub fn extend(&mut self, other: ComponentScores) {
        self.per_gt.extend(other.per_gt);
        self.per_pred.extend(other.per_pred);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauCounts {
    pub tau: f64,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub gt_components: u64,
    pub pred_components: u64,
    pub mean_siou: f64,
    /// 0 when there are no predicted components; see `no_predictions`.
    pub mean_ppv: f64,
    pub no_predictions: bool,
    pub per_tau: Vec<TauCounts>,
    pub f1_bar: f64,
}

fn check_same_image(gt: &ComponentSet, pred: &ComponentSet) {
    assert!(
        gt.width() == pred.width() && gt.height() == pred.height(),
        "ground-truth and predicted components come from differently sized images"
    );
}

/// Adjusted IoU of ground-truth component `k`.
pub fn siou(k: usize, gt: &ComponentSet, pred: &ComponentSet) -> f64 {
    check_same_image(gt, pred);
    let mut touching: Vec<usize> = Vec::new();
    let mut inter = 0u64;
    for &p in gt.pixels(k) {
        if let Some(q) = pred.component_at(p) {
            inter += 1;
            touching.push(q);
        }
    }
    if inter == 0 {
        return 0.0;
    }
    touching.sort_unstable();
    touching.dedup();
    let mut union_pred = 0u64;
    let mut pred_on_other_gt = 0u64;
    for &q in &touching {
        union_pred += pred.components()[q].size as u64;
        pred_on_other_gt += pred
            .pixels(q)
            .iter()
            .filter(|&&p| matches!(gt.component_at(p), Some(g) if g != k))
            .count() as u64;
    }
    let size = gt.components()[k].size as u64;
    ratio(inter, size + union_pred - inter - pred_on_other_gt)
}

/// Positive predictive value of predicted component `k_hat`.
pub fn ppv(k_hat: usize, pred: &ComponentSet, gt: &ComponentSet) -> f64 {
    check_same_image(gt, pred);
    let on_gt = pred
        .pixels(k_hat)
        .iter()
        .filter(|&&p| gt.component_at(p).is_some())
        .count() as u64;
    ratio(on_gt, pred.components()[k_hat].size as u64)
}

/// Scores every component of one image from a single pass over the
/// predicted pixels.
pub fn score_image(image: usize, gt: &ComponentSet, pred: &ComponentSet) -> ComponentScores {
    check_same_image(gt, pred);
    let n_gt = gt.len();
    // per ground-truth component: |k ∩ P(k)|, |P(k)|, |P(k) ∩ other gt|
    let mut inter = vec![0u64; n_gt];
    let mut union_pred = vec![0u64; n_gt];
    let mut pred_on_other = vec![0u64; n_gt];
    let mut per_pred = Vec::with_capacity(pred.len());

    let mut overlaps: Vec<usize> = Vec::new();
    for c in pred.components() {
        overlaps.clear();
        overlaps.extend(pred.pixels(c.id).iter().filter_map(|&p| gt.component_at(p)));
        let on_gt = overlaps.len() as u64;
        per_pred.push(PredScore {
            image,
            component: c.id,
            size: c.size,
            ppv: ratio(on_gt, c.size as u64),
        });
        overlaps.sort_unstable();
        for run in overlaps.chunk_by(|a, b| a == b) {
            let g = run[0];
            let shared = run.len() as u64;
            inter[g] += shared;
            union_pred[g] += c.size as u64;
            pred_on_other[g] += on_gt - shared;
        }
    }

    let per_gt = gt
        .components()
        .iter()
        .map(|k| {
            let size = k.size as u64;
            let i = inter[k.id];
            let plain_union = size + union_pred[k.id] - i;
            GtScore {
                image,
                component: k.id,
                size: k.size,
                siou: ratio(i, plain_union - pred_on_other[k.id]),
                iou: ratio(i, plain_union),
            }
        })
        .collect();
    ComponentScores { per_gt, per_pred }
}

/// `(tp, fn, fp)` of one image at quality threshold `tau`.
pub fn classify(gt: &ComponentSet, pred: &ComponentSet, tau: f64) -> (u64, u64, u64) {
    count_at(&score_image(0, gt, pred), tau)
}

fn count_at(scores: &ComponentScores, tau: f64) -> (u64, u64, u64) {
    let tp = scores.per_gt.iter().filter(|g| g.siou > tau).count() as u64;
    let fn_ = scores.per_gt.len() as u64 - tp;
    let fp = scores.per_pred.iter().filter(|p| p.ppv <= tau).count() as u64;
    (tp, fn_, fp)
}

/// Component-wise F1; 0 when there is nothing to count.
pub fn f1_at(tp: u64, fn_: u64, fp: u64) -> f64 {
    ratio(2 * tp, 2 * tp + fn_ + fp)
}

/// Dataset summary over the tau grid.
pub fn summarize(scores: &ComponentScores, tau_grid: &[f64]) -> Result<ComponentReport> {
    if scores.per_gt.is_empty() {
        return Err(Error::NoGroundTruthComponents);
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| {
        if n == 0 {
            0.0
        } else {
            xs.sum::<f64>() / n as f64
        }
    };
    let mean_siou = mean(&mut scores.per_gt.iter().map(|g| g.siou), scores.per_gt.len());
    let mean_ppv = mean(&mut scores.per_pred.iter().map(|p| p.ppv), scores.per_pred.len());
    let per_tau: Vec<TauCounts> = tau_grid
        .iter()
        .map(|&tau| {
            let (tp, fn_, fp) = count_at(scores, tau);
            TauCounts {
                tau,
                tp,
                fn_,
                fp,
                f1: f1_at(tp, fn_, fp),
            }
        })
        .collect();
    let f1_bar = per_tau.iter().map(|t| t.f1).sum::<f64>() / per_tau.len().max(1) as f64;
    Ok(ComponentReport {
        gt_components: scores.per_gt.len() as u64,
        pred_components: scores.per_pred.len() as u64,
        mean_siou,
        mean_ppv,
        no_predictions: scores.per_pred.is_empty(),
        per_tau,
        f1_bar,
    })
}

/// Scores and summarises a dataset given one ground-truth and one predicted
/// component set per image.
pub fn evaluate_components(
    gt_sets: &[ComponentSet],
    pred_sets: &[ComponentSet],
    config: &TrackConfig,
) -> Result<(ComponentReport, ComponentScores)> {
    if gt_sets.len() != pred_sets.len() {
        return Err(Error::InvalidConfig(format!(
            "{} ground-truth sets but {} predicted sets",
            gt_sets.len(),
            pred_sets.len()
        )));
    }
    let per_image: Vec<ComponentScores> = gt_sets
        .par_iter()
        .zip(pred_sets)
        .enumerate()
        .map(|(i, (gt, pred))| score_image(i, gt, pred))
        .collect();
    let mut scores = ComponentScores::default();
    for s in per_image {
        scores.extend(s);
    }
    let report = summarize(&scores, &config.tau_grid)?;
    Ok((report, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBin {
    pub count: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub mean_siou: f64,
    /// Share of components with no detected pixel (FN at tau = 0).
    pub fn_ratio: f64,
}

/// Bin sizes for `n` components in `bins` equal-count intervals, smallest
/// sizes first. Every bin but the first holds `w` components and the first
/// absorbs the rest, with `w = min(ceil(n / (bins + 1/2)), floor(n / bins))`.
pub fn size_bin_counts(n: usize, bins: usize) -> Result<Vec<usize>> {
    if bins == 0 || n < bins {
        return Err(Error::TooFewComponents { found: n, bins });
    }
    let w = (2 * n).div_ceil(2 * bins + 1).min(n / bins);
    let mut counts = vec![w; bins];
    counts[0] = n - (bins - 1) * w;
    Ok(counts)
}

/// Ground-truth components sorted by size and split into equal-count bins.
pub fn size_stratified(scores: &ComponentScores, bins: usize) -> Result<Vec<SizeBin>> {
    let counts = size_bin_counts(scores.per_gt.len(), bins)?;
    let mut sorted: Vec<&GtScore> = scores.per_gt.iter().collect();
    sorted.sort_by_key(|g| (g.size, g.image, g.component));
    let mut out = Vec::with_capacity(bins);
    let mut rest = sorted.as_slice();
    for count in counts {
        let (bin, tail) = rest.split_at(count);
        rest = tail;
        out.push(SizeBin {
            count,
            min_size: bin[0].size,
            max_size: bin[count - 1].size,
            mean_siou: bin.iter().map(|g| g.siou).sum::<f64>() / count as f64,
            fn_ratio: ratio(bin.iter().filter(|g| g.siou == 0.0).count() as u64, count as u64),
        });
    }
    Ok(out)
}
