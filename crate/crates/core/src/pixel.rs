//! Dataset-level pixel metrics: AuPRC, FPR at 95% TPR and the optimal
//! pixel-wise F1 with its threshold.
//!
//! Scores of all non-void pixels are pooled across the dataset and swept once
//! in descending order. Every swept threshold `delta` predicts the pixels with
//! `score >= delta`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ratio, Label, PixelTally, ScoreMode, ScoredImage};

/// Non-void scores of a dataset split by ground-truth class.
#[derive(Debug, Clone, Default)]
pub struct PooledScores {
    pub positives: Vec<f32>,
    pub negatives: Vec<f32>,
}

impl PooledScores {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prevalence(&self) -> f64 {
        ratio(self.positives.len() as u64, self.len() as u64)
    }
}

fn class_counts(image: &ScoredImage) -> (usize, usize) {
    image.labels().labels().iter().fold((0, 0), |(p, n), l| match l {
        Label::Anomaly => (p + 1, n),
        Label::NotAnomaly => (p, n + 1),
        Label::Void => (p, n),
    })
}

fn fill(image: &ScoredImage, pos: &mut [f32], neg: &mut [f32]) {
    let (mut i, mut j) = (0, 0);
    for (&label, &s) in image.labels().labels().iter().zip(image.scores().scores()) {
        // folds -0.0 into 0.0 so both sort as one threshold
        let s = s + 0.0;
        match label {
            Label::Anomaly => {
                pos[i] = s;
                i += 1;
            }
            Label::NotAnomaly => {
                neg[j] = s;
                j += 1;
            }
            Label::Void => {}
        }
    }
}

/// Pools every non-void pixel of every image. Image order only affects the
/// layout of the buffers, never a metric.
pub fn pool<'a>(images: impl IntoIterator<Item = &'a ScoredImage>) -> Result<PooledScores> {
    let images: Vec<&ScoredImage> = images.into_iter().collect();
    let counts: Vec<(usize, usize)> = images.par_iter().map(|i| class_counts(i)).collect();
    let total_pos: usize = counts.iter().map(|c| c.0).sum();
    let total_neg: usize = counts.iter().map(|c| c.1).sum();
    if total_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut positives = vec![0f32; total_pos];
    let mut negatives = vec![0f32; total_neg];

    let mut jobs = Vec::with_capacity(images.len());
    let (mut pos_rest, mut neg_rest) = (positives.as_mut_slice(), negatives.as_mut_slice());
    for (image, &(p, n)) in images.iter().zip(&counts) {
        let (pos_head, pos_tail) = std::mem::take(&mut pos_rest).split_at_mut(p);
        let (neg_head, neg_tail) = std::mem::take(&mut neg_rest).split_at_mut(n);
        jobs.push((image, pos_head, neg_head));
        pos_rest = pos_tail;
        neg_rest = neg_tail;
    }
    jobs.into_par_iter().for_each(|(image, pos, neg)| fill(image, pos, neg));

    Ok(PooledScores { positives, negatives })
}

/// Precision and rates at one swept threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Cumulative confusion counts over a descending threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    thresholds: Vec<f64>,
    tp: Vec<u64>,
    fp: Vec<u64>,
    positives: u64,
    negatives: u64,
}

impl PrCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn positives(&self) -> u64 {
        self.positives
    }

    pub fn negatives(&self) -> u64 {
        self.negatives
    }

    pub fn tally(&self, i: usize) -> PixelTally {
        PixelTally {
            tp: self.tp[i],
            fp: self.fp[i],
            fn_: self.positives - self.tp[i],
            tn: self.negatives - self.fp[i],
        }
    }

    pub fn point(&self, i: usize) -> CurvePoint {
        let t = self.tally(i);
        CurvePoint {
            threshold: self.thresholds[i],
            precision: t.precision(),
            recall: t.recall(),
            fpr: t.fpr(),
            tpr: t.recall(),
        }
    }

    pub fn points(&self) -> impl Iterator<Item = CurvePoint> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    /// Number of pooled pixels predicted at threshold `i`.
    pub fn predicted(&self, i: usize) -> u64 {
        self.tp[i] + self.fp[i]
    }
}

/// Sweeps the pooled scores into a precision-recall curve.
pub fn pr_curve(pooled: PooledScores, mode: ScoreMode) -> Result<PrCurve> {
    if pooled.positives.is_empty() {
        return Err(Error::NoPositives);
    }
    if pooled.negatives.is_empty() {
        return Err(Error::NoNegatives);
    }
    match mode {
        ScoreMode::Exact => Ok(exact_curve(pooled)),
        ScoreMode::Binned(bins) => {
            if bins < 2 {
                return Err(Error::InvalidConfig(format!(
                    "binned mode needs at least 2 bins, got {bins}"
                )));
            }
            Ok(binned_curve(&pooled, bins))
        }
    }
}

fn exact_curve(pooled: PooledScores) -> PrCurve {
    let PooledScores {
        mut positives,
        mut negatives,
    } = pooled;
    radsort::sort(&mut positives);
    radsort::sort(&mut negatives);

    let positives_total = positives.len() as u64;
    let negatives_total = negatives.len() as u64;
    let (mut i, mut j) = (positives.len(), negatives.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut curve = PrCurve {
        thresholds: Vec::new(),
        tp: Vec::new(),
        fp: Vec::new(),
        positives: positives_total,
        negatives: negatives_total,
    };
    while i > 0 || j > 0 {
        let top = match (i, j) {
            (0, _) => negatives[j - 1],
            (_, 0) => positives[i - 1],
            _ => positives[i - 1].max(negatives[j - 1]),
        };
        while i > 0 && positives[i - 1] == top {
            i -= 1;
            tp += 1;
        }
        while j > 0 && negatives[j - 1] == top {
            j -= 1;
            fp += 1;
        }
        curve.thresholds.push(top as f64);
        curve.tp.push(tp);
        curve.fp.push(fp);
    }
    curve
}

/// Lower bin edges for `bins` equal-width bins over `[min, max]`.
pub(crate) fn bin_edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
    (0..bins)
        .map(|i| min + (max - min) * (i as f64 / bins as f64))
        .collect()
}

/// Largest bin whose lower edge is `<= s`, so `s >= edges[k]` iff the pixel
/// lands in a bin `>= k`.
fn bin_of(edges: &[f64], min: f64, max: f64, s: f64) -> usize {
    let n = edges.len();
    if max <= min {
        return 0;
    }
    let mut k = (((s - min) / (max - min)) * n as f64).floor() as isize;
    k = k.clamp(0, n as isize - 1);
    let mut k = k as usize;
    while k + 1 < n && edges[k + 1] <= s {
        k += 1;
    }
    while k > 0 && edges[k] > s {
        k -= 1;
    }
    k
}

fn binned_curve(pooled: &PooledScores, bins: usize) -> PrCurve {
    let (min, max) = pooled
        .positives
        .iter()
        .chain(&pooled.negatives)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s as f64), hi.max(s as f64))
        });
    let edges = bin_edges(min, max, bins);
    let histogram = |scores: &[f32]| {
        scores
            .par_chunks(1 << 16)
            .map(|chunk| {
                let mut h = vec![0u64; bins];
                for &s in chunk {
                    h[bin_of(&edges, min, max, s as f64)] += 1;
                }
                h
            })
            .reduce(
                || vec![0u64; bins],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    a
                },
            )
    };
    let pos_hist = histogram(&pooled.positives);
    let neg_hist = histogram(&pooled.negatives);

    let mut curve = PrCurve {
        thresholds: Vec::new(),
        tp: Vec::new(),
        fp: Vec::new(),
        positives: pooled.positives.len() as u64,
        negatives: pooled.negatives.len() as u64,
    };
    let (mut tp, mut fp) = (0, 0);
    for k in (0..bins).rev() {
        if pos_hist[k] == 0 && neg_hist[k] == 0 {
            continue;
        }
        tp += pos_hist[k];
        fp += neg_hist[k];
        curve.thresholds.push(edges[k]);
        curve.tp.push(tp);
        curve.fp.push(fp);
    }
    curve
}

/// Step-wise area under the precision-recall curve:
/// sum of `precision_i * (recall_i - recall_{i-1})`, with `recall_0 = 0`.
pub fn auprc(curve: &PrCurve) -> f64 {
    let mut area = 0.0;
    let mut prev_tp = 0;
    for i in 0..curve.len() {
        let tp = curve.tp[i];
        if tp > prev_tp {
            let precision = ratio(tp, curve.predicted(i));
            area += precision * ratio(tp - prev_tp, curve.positives);
        }
        prev_tp = tp;
    }
    area
}

/// FPR at the largest threshold whose TPR reaches `target`.
pub fn fpr_at_tpr(curve: &PrCurve, target: f64) -> f64 {
    for i in 0..curve.len() {
        if ratio(curve.tp[i], curve.positives) >= target {
            return ratio(curve.fp[i], curve.negatives);
        }
    }
    1.0
}

/// Threshold maximising pixel-wise F1, skipping thresholds with no true
/// positive (precision + recall = 0). Ties go to the larger threshold.
/// Returns `(index, f1)`.
fn best_f1_index(curve: &PrCurve) -> Option<(usize, f64)> {
    let positives = curve.positives as u128;
    let mut best: Option<(usize, u128, u128)> = None;
    for i in 0..curve.len() {
        let tp = curve.tp[i] as u128;
        if tp == 0 {
            continue;
        }
        // F1 = 2tp / (tp + fp + positives); compared as exact fractions
        let den = tp + curve.fp[i] as u128 + positives;
        let better = match best {
            None => true,
            Some((_, btp, bden)) => tp * bden > btp * den,
        };
        if better {
            best = Some((i, tp, den));
        }
    }
    best.map(|(i, tp, den)| (i, (2 * tp) as f64 / den as f64))
}

/// `(delta_star, f1_star)`.
pub fn optimal_f1_threshold(curve: &PrCurve) -> (f64, f64) {
    best_f1_index(curve)
        .map(|(i, f1)| (curve.thresholds[i], f1))
        .expect("a curve with positives always has a threshold with a true positive")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelReport {
    pub auprc: f64,
    pub fpr95: f64,
    pub f1_star: f64,
    pub delta_star: f64,
}

pub fn pixel_report(curve: &PrCurve) -> PixelReport {
    let (delta_star, f1_star) = optimal_f1_threshold(curve);
    PixelReport {
        auprc: auprc(curve),
        fpr95: fpr_at_tpr(curve, 0.95),
        f1_star,
        delta_star,
    }
}

/// Pools, sweeps and summarises in one go.
pub fn evaluate_pixels<'a>(
    images: impl IntoIterator<Item = &'a ScoredImage>,
    mode: ScoreMode,
) -> Result<(PixelReport, PrCurve)> {
    let curve = pr_curve(pool(images)?, mode)?;
    Ok((pixel_report(&curve), curve))
}

/// Thresholds at evenly spaced quantiles of the pooled score distribution,
/// read off the curve's cumulative counts. Returned in descending order,
/// without duplicates.
pub fn quantile_thresholds(curve: &PrCurve, count: usize) -> Vec<f64> {
    let total = (curve.positives + curve.negatives) as f64;
    let mut out: Vec<f64> = Vec::with_capacity(count);
    let mut i = 0;
    for q in 1..=count {
        let want = total * q as f64 / count as f64;
        while i + 1 < curve.len() && (curve.predicted(i) as f64) < want {
            i += 1;
        }
        let t = curve.thresholds[i];
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}
