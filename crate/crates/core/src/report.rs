//! Full benchmark runs and the leaderboard record they produce.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::{score_image, size_stratified, summarize, ComponentReport, ComponentScores, SizeBin};
use crate::connectivity::{extract_components, extract_from_slice};
use crate::error::{Error, Result};
use crate::mask::{predicted_components, MaskBundle};
use crate::model::{BinaryMask, LabelMap, ScoreMode, ScoredImage, Track, TrackConfig};
use crate::pixel::{pixel_report, pool, pr_curve, quantile_thresholds, PixelReport, PrCurve};

pub const SCHEMA_VERSION: u32 = 1;
pub const SIZE_BINS: usize = 8;
pub const DEFAULT_SWEEP_POINTS: usize = 50;

/// Tag bucket for images without a tag of the requested kind.
pub const UNTAGGED: &str = "untagged";
/// Tag bucket for images carrying several values of the requested kind.
pub const MIXED: &str = "mixed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub track: Track,
    pub min_size: usize,
    pub filtering: bool,
    pub clip_void: bool,
    pub score_mode: ScoreMode,
    pub tau_grid: Vec<f64>,
}

impl From<&TrackConfig> for ReportConfig {
    fn from(c: &TrackConfig) -> Self {
        Self {
            track: c.track,
            min_size: c.min_component_size,
            filtering: c.filtering,
            clip_void: c.clip_void,
            score_mode: c.score_mode,
            tau_grid: c.tau_grid.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub images: usize,
    pub pixel: Option<PixelReport>,
    pub component: ComponentReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: f64,
    pub f1_bar: f64,
    pub is_delta_star: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub dataset: String,
    pub method: String,
    pub config: ReportConfig,
    /// Absent when masks were submitted instead of scores.
    pub pixel: Option<PixelReport>,
    pub component: ComponentReport,
    pub void_pixels_cleared: u64,
    pub subsets: BTreeMap<String, SubsetReport>,
    pub size_bins: Vec<SizeBin>,
    pub delta_sweep: Vec<SweepPoint>,
}

/// Per-image metadata used for subset splits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImageMeta {
    pub id: String,
    pub tags: Vec<String>,
}

impl ImageMeta {
    /// Values of tags written `kind:value`.
    fn values_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.tags
            .iter()
            .filter_map(move |t| t.strip_prefix(kind)?.strip_prefix(':'))
    }

    fn bucket(&self, kind: &str) -> String {
        let mut values: Vec<&str> = self.values_of(kind).collect();
        values.sort_unstable();
        values.dedup();
        match values.as_slice() {
            [] => UNTAGGED.to_string(),
            [one] => one.to_string(),
            _ => MIXED.to_string(),
        }
    }
}

pub enum Predictions {
    Scores(Vec<ScoredImage>),
    Masks { labels: Vec<LabelMap>, bundle: MaskBundle },
}

impl Predictions {
    fn len(&self) -> usize {
        match self {
            Predictions::Scores(s) => s.len(),
            Predictions::Masks { labels, .. } => labels.len(),
        }
    }
}

pub struct Submission {
    pub dataset: String,
    pub method: String,
    /// One entry per image, aligned with the predictions.
    pub images: Vec<ImageMeta>,
    pub predictions: Predictions,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum SweepGrid {
    #[default]
    None,
    /// Evenly spaced quantiles of the pooled scores.
    Quantiles(usize),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    /// Tag kind to split subsets by (`scene` for `scene:*` tags).
    pub group_by: Option<String>,
    pub sweep: SweepGrid,
}

/// Component scores of every image at threshold `delta`.
pub fn component_scores_at(images: &[&ScoredImage], delta: f64, config: &TrackConfig) -> ComponentScores {
    let per_image: Vec<ComponentScores> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let gt = extract_components(&img.labels().anomaly_mask());
            let pred = predicted_components(img, delta, config);
            score_image(i, &gt, &pred)
        })
        .collect();
    merge(per_image)
}

fn merge(parts: Vec<ComponentScores>) -> ComponentScores {
    let mut all = ComponentScores::default();
    for p in parts {
        all.extend(p);
    }
    all
}

fn mask_scores(labels: &[&LabelMap], masks: &[&BinaryMask]) -> ComponentScores {
    let per_image: Vec<ComponentScores> = labels
        .par_iter()
        .zip(masks.par_iter())
        .enumerate()
        .map(|(i, (l, m))| {
            let gt = extract_components(&l.anomaly_mask());
            let pred = extract_from_slice(m.width(), m.height(), m.as_slice());
            score_image(i, &gt, &pred)
        })
        .collect();
    merge(per_image)
}

struct Core {
    pixel: Option<PixelReport>,
    curve: Option<PrCurve>,
    component: ComponentReport,
    scores: ComponentScores,
}

fn evaluate_score_subset(images: &[&ScoredImage], config: &TrackConfig) -> Result<Core> {
    let curve = pr_curve(pool(images.iter().copied())?, config.score_mode)?;
    let pixel = pixel_report(&curve);
    let scores = component_scores_at(images, pixel.delta_star, config);
    let component = summarize(&scores, &config.tau_grid)?;
    Ok(Core {
        pixel: Some(pixel),
        curve: Some(curve),
        component,
        scores,
    })
}

fn evaluate_mask_subset(labels: &[&LabelMap], masks: &[&BinaryMask], config: &TrackConfig) -> Result<Core> {
    let scores = mask_scores(labels, masks);
    let component = summarize(&scores, &config.tau_grid)?;
    Ok(Core {
        pixel: None,
        curve: None,
        component,
        scores,
    })
}

fn evaluate_indices(predictions: &Predictions, indices: &[usize], config: &TrackConfig) -> Result<Core> {
    match predictions {
        Predictions::Scores(images) => {
            let subset: Vec<&ScoredImage> = indices.iter().map(|&i| &images[i]).collect();
            evaluate_score_subset(&subset, config)
        }
        Predictions::Masks { labels, bundle } => {
            let l: Vec<&LabelMap> = indices.iter().map(|&i| &labels[i]).collect();
            let m: Vec<&BinaryMask> = indices.iter().map(|&i| &bundle.masks[i]).collect();
            evaluate_mask_subset(&l, &m, config)
        }
    }
}

/// F̄1 of the default pipeline at each threshold in `grid`.
pub fn delta_sweep(
    images: &[&ScoredImage],
    config: &TrackConfig,
    grid: &[f64],
    delta_star: Option<f64>,
) -> Result<Vec<SweepPoint>> {
    let mut deltas: Vec<(f64, bool)> = grid.iter().map(|&d| (d, false)).collect();
    if let Some(star) = delta_star {
        match deltas.iter_mut().find(|(d, _)| *d == star) {
            Some(point) => point.1 = true,
            None => deltas.push((star, true)),
        }
    }
    deltas.sort_by(|a, b| a.0.total_cmp(&b.0));
    deltas.dedup_by(|a, b| a.0 == b.0);
    deltas
        .into_iter()
        .map(|(delta, is_delta_star)| {
            let scores = component_scores_at(images, delta, config);
            let report = summarize(&scores, &config.tau_grid)?;
            Ok(SweepPoint {
                delta,
                f1_bar: report.f1_bar,
                is_delta_star,
            })
        })
        .collect()
}

fn subset_indices(images: &[ImageMeta], kind: &str) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, meta) in images.iter().enumerate() {
        out.entry(meta.bucket(kind)).or_default().push(i);
    }
    out
}

/// Per-tag reports, each an independent benchmark run with its own pooling
/// and threshold. Subsets without anomalies are skipped with a warning.
pub fn evaluate_subsets(
    submission: &Submission,
    config: &TrackConfig,
    kind: &str,
) -> Result<BTreeMap<String, SubsetReport>> {
    let mut out = BTreeMap::new();
    for (name, indices) in subset_indices(&submission.images, kind) {
        match evaluate_indices(&submission.predictions, &indices, config) {
            Ok(core) => {
                out.insert(
                    name,
                    SubsetReport {
                        images: indices.len(),
                        pixel: core.pixel,
                        component: core.component,
                    },
                );
            }
            Err(e @ (Error::NoPositives | Error::NoNegatives | Error::NoGroundTruthComponents)) => {
                log::warn!("skipping subset `{name}`: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Runs the whole benchmark on one submission.
pub fn evaluate(submission: &Submission, config: &TrackConfig, options: &EvalOptions) -> Result<BenchmarkReport> {
    config.validate()?;
    if submission.images.len() != submission.predictions.len() {
        return Err(Error::InvalidConfig(format!(
            "{} image entries for {} predictions",
            submission.images.len(),
            submission.predictions.len()
        )));
    }
    let all: Vec<usize> = (0..submission.images.len()).collect();
    let core = evaluate_indices(&submission.predictions, &all, config)?;

    let size_bins = match size_stratified(&core.scores, SIZE_BINS) {
        Ok(bins) => bins,
        Err(Error::TooFewComponents { found, .. }) => {
            log::info!("only {found} ground-truth components, size bins omitted");
            Vec::new()
        }
        Err(e) => return Err(e),
    };

    let delta_sweep = match (&submission.predictions, &options.sweep, &core.curve) {
        (Predictions::Scores(images), grid, Some(curve)) if *grid != SweepGrid::None => {
            let grid = match grid {
                SweepGrid::Quantiles(n) => quantile_thresholds(curve, *n),
                SweepGrid::Explicit(g) => g.clone(),
                SweepGrid::None => unreachable!(),
            };
            let refs: Vec<&ScoredImage> = images.iter().collect();
            delta_sweep(&refs, config, &grid, core.pixel.map(|p| p.delta_star))?
        }
        _ => Vec::new(),
    };

    let subsets = match &options.group_by {
        Some(kind) => evaluate_subsets(submission, config, kind)?,
        None => BTreeMap::new(),
    };

    let void_pixels_cleared = match &submission.predictions {
        Predictions::Masks { bundle, .. } => bundle.void_pixels_cleared,
        Predictions::Scores(_) => 0,
    };

    Ok(BenchmarkReport {
        schema_version: SCHEMA_VERSION,
        dataset: submission.dataset.clone(),
        method: submission.method.clone(),
        config: config.into(),
        pixel: core.pixel,
        component: core.component,
        void_pixels_cleared,
        subsets,
        size_bins,
        delta_sweep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            other => Err(Error::InvalidConfig(format!("unknown format `{other}`"))),
        }
    }
}

/// Percentage with two decimals, halves rounded up.
fn pct(x: f64) -> String {
    format!("{:.2}", (x * 10_000.0).round() / 100.0)
}

const TABLE_TAUS: [f64; 3] = [0.25, 0.50, 0.75];

/// Column titles of the leaderboard table, in order.
pub fn table_header() -> Vec<String> {
    let mut cols: Vec<String> = ["Dataset", "Method", "AuPRC", "FPR95", "F1*", "sIoU", "PPV"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for tau in TABLE_TAUS {
        for metric in ["FN", "FP", "F1"] {
            cols.push(format!("{metric}@{tau:.2}"));
        }
    }
    cols.push("F1bar".to_string());
    cols
}

fn table_row(report: &BenchmarkReport) -> Vec<String> {
    let dash = || "-".to_string();
    let mut row = vec![report.dataset.clone(), report.method.clone()];
    match &report.pixel {
        Some(p) => row.extend([pct(p.auprc), pct(p.fpr95), pct(p.f1_star)]),
        None => row.extend([dash(), dash(), dash()]),
    }
    let c = &report.component;
    row.push(pct(c.mean_siou));
    row.push(if c.no_predictions { dash() } else { pct(c.mean_ppv) });
    for tau in TABLE_TAUS {
        match c.per_tau.iter().find(|t| (t.tau - tau).abs() < 1e-9) {
            Some(t) => row.extend([t.fn_.to_string(), t.fp.to_string(), pct(t.f1)]),
            None => row.extend([dash(), dash(), dash()]),
        }
    }
    row.push(pct(c.f1_bar));
    row
}

fn render_table(report: &BenchmarkReport) -> String {
    let header = table_header();
    let row = table_row(report);
    let widths: Vec<usize> = header
        .iter()
        .zip(&row)
        .map(|(h, r)| h.chars().count().max(r.chars().count()))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < 2 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "{cell:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    format!("{}\n{}\n", line(&header), line(&row))
}

fn render_csv(report: &BenchmarkReport) -> Result<Vec<u8>> {
    let mut header: Vec<String> = [
        "dataset",
        "method",
        "auprc",
        "fpr95",
        "f1_star",
        "delta_star",
        "mean_siou",
        "mean_ppv",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let c = &report.component;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut row = vec![
        report.dataset.clone(),
        report.method.clone(),
        opt(report.pixel.map(|p| p.auprc)),
        opt(report.pixel.map(|p| p.fpr95)),
        opt(report.pixel.map(|p| p.f1_star)),
        opt(report.pixel.map(|p| p.delta_star)),
        c.mean_siou.to_string(),
        c.mean_ppv.to_string(),
    ];
    for t in &c.per_tau {
        for (name, value) in [
            ("tp", t.tp.to_string()),
            ("fn", t.fn_.to_string()),
            ("fp", t.fp.to_string()),
            ("f1", t.f1.to_string()),
        ] {
            header.push(format!("{name}_{}", t.tau));
            row.push(value);
        }
    }
    header.push("f1_bar".into());
    row.push(c.f1_bar.to_string());
    write_csv(&[header, row])
}

pub(crate) fn write_csv(rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)
            .map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))
}

/// Serialises a report. Output is a pure function of the report.
pub fn emit(report: &BenchmarkReport, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serialises");
            out.push(b'\n');
            Ok(out)
        }
        Format::Table => Ok(render_table(report).into_bytes()),
        Format::Csv => render_csv(report),
    }
}

/// The sweep as CSV with columns `delta,f1_bar,is_delta_star`.
pub fn emit_sweep_csv(points: &[SweepPoint]) -> Result<Vec<u8>> {
    let mut rows = vec![vec![
        "delta".to_string(),
        "f1_bar".to_string(),
        "is_delta_star".to_string(),
    ]];
    rows.extend(
        points
            .iter()
            .map(|p| vec![p.delta.to_string(), p.f1_bar.to_string(), p.is_delta_star.to_string()]),
    );
    write_csv(&rows)
}

pub fn parse_report(json: &[u8]) -> Result<BenchmarkReport> {
    serde_json::from_slice(json).map_err(|e| Error::InvalidConfig(format!("report: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_pair, Label, ScoreMap};

    fn meta(tags: &[&str]) -> ImageMeta {
        ImageMeta {
            id: "x".into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn buckets() {
        assert_eq!(meta(&[]).bucket("scene"), UNTAGGED);
        assert_eq!(meta(&["scene:snow", "category:animal"]).bucket("scene"), "snow");
        assert_eq!(meta(&["category:animal", "category:vehicle"]).bucket("category"), MIXED);
        assert_eq!(
            meta(&["category:animal", "category:animal"]).bucket("category"),
            "animal"
        );
        assert_eq!(meta(&["scenery:x"]).bucket("scene"), UNTAGGED);
    }

    #[test]
    fn percentages_round_half_up() {
        assert_eq!(pct(0.123449), "12.34");
        assert_eq!(pct(0.12345), "12.35");
        assert_eq!(pct(1.0), "100.00");
        assert_eq!(pct(0.0), "0.00");
    }

    #[test]
    fn header_order() {
        let h = table_header();
        assert_eq!(
            h,
            vec![
                "Dataset", "Method", "AuPRC", "FPR95", "F1*", "sIoU", "PPV", "FN@0.25", "FP@0.25", "F1@0.25",
                "FN@0.50", "FP@0.50", "F1@0.50", "FN@0.75", "FP@0.75", "F1@0.75", "F1bar"
            ]
        );
    }

    #[test]
    fn sweep_marks_delta_star() {
        let labels = LabelMap::new(3, 1, vec![Label::Anomaly, Label::NotAnomaly, Label::NotAnomaly]).unwrap();
        let img = validate_pair(labels, ScoreMap::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        let mut config = TrackConfig::for_track(Track::Obstacle);
        config.filtering = false;
        let pts = delta_sweep(&[&img], &config, &[0.0, 0.5, 2.0], Some(1.0)).unwrap();
        let deltas: Vec<f64> = pts.iter().map(|p| p.delta).collect();
        assert_eq!(deltas, vec![0.0, 0.5, 1.0, 2.0]);
        assert!(pts[2].is_delta_star);
        assert_eq!(pts[1].f1_bar, 1.0);
        assert_eq!(pts[3].f1_bar, 0.0);
    }
}
