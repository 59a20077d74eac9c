//! Shared data types: the three-class ground truth, score maps, binary
//! predictions and the per-track evaluation configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth class of a single pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Label {
    NotAnomaly = 0,
    Anomaly = 1,
    Void = 2,
}

impl Label {
    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }

    pub fn is_void(self) -> bool {
        self == Label::Void
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig(format!(
            "image dimensions must be positive, got {width}x{height}"
        )));
    }
    match width.checked_mul(height) {
        Some(n) if n == len => Ok(()),
        _ => Err(Error::InvalidConfig(format!(
            "{width}x{height} grid needs {} cells, got {len}",
            width.saturating_mul(height)
        ))),
    }
}

/// Per-pixel ground truth for one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelMap")]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

#[derive(Deserialize)]
struct RawLabelMap {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl TryFrom<RawLabelMap> for LabelMap {
    type Error = Error;

    fn try_from(raw: RawLabelMap) -> Result<Self> {
        LabelMap::new(raw.width, raw.height, raw.labels)
    }
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        check_dims(width, height, labels.len())?;
        Ok(Self { width, height, labels })
    }

    /// Builds a map where every pixel carries `label`.
    pub fn filled(width: usize, height: usize, label: Label) -> Result<Self> {
        Self::new(width, height, vec![label; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.width + col]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Boolean grid of the anomaly pixels.
    pub fn anomaly_mask(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            mask: self.labels.iter().map(|l| l.is_anomaly()).collect(),
        }
    }

    pub fn same_shape(&self, width: usize, height: usize) -> Result<()> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected_width: self.width,
                expected_height: self.height,
                found_width: width,
                found_height: height,
            })
        }
    }
}

/// Per-pixel anomaly scores for one image, row-major. Higher means more
/// anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    scores: Vec<f32>,
}

impl ScoreMap {
    /// Checks the grid shape only; finiteness is checked by [`validate_pair`].
    pub fn new(width: usize, height: usize, scores: Vec<f32>) -> Result<Self> {
        check_dims(width, height, scores.len())?;
        Ok(Self { width, height, scores })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    /// Index of the first NaN or infinite score, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.scores.iter().position(|s| !s.is_finite())
    }

    /// Applies `f` to every score.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> ScoreMap {
        ScoreMap {
            width: self.width,
            height: self.height,
            scores: self.scores.iter().map(|&s| f(s)).collect(),
        }
    }
}

/// Predicted anomaly decision per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        check_dims(width, height, mask.len())?;
        Ok(Self { width, height, mask })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub(crate) fn into_vec(self) -> Vec<bool> {
        self.mask
    }
}

/// A label map paired with a score map of the same shape and only finite
/// scores. Only obtainable through [`validate_pair`].
#[derive(Debug, Clone)]
pub struct ScoredImage {
    labels: LabelMap,
    scores: ScoreMap,
}

impl ScoredImage {
    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn scores(&self) -> &ScoreMap {
        &self.scores
    }

    pub fn into_parts(self) -> (LabelMap, ScoreMap) {
        (self.labels, self.scores)
    }
}

pub fn validate_pair(labels: LabelMap, scores: ScoreMap) -> Result<ScoredImage> {
    labels.same_shape(scores.width(), scores.height())?;
    if let Some(index) = scores.first_non_finite() {
        return Err(Error::NonFiniteScore { index });
    }
    Ok(ScoredImage { labels, scores })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Anomaly,
    Obstacle,
}

impl Track {
    /// Predicted components below this size are discarded by default.
    pub fn default_min_component_size(self) -> usize {
        match self {
            Track::Anomaly => 500,
            Track::Obstacle => 50,
        }
    }
}

pub const DEFAULT_BIN_COUNT: usize = 4096;

/// How the pooled scores are swept into a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "bins")]
pub enum ScoreMode {
    /// Every distinct score is a threshold.
    Exact,
    /// Scores are min-max normalised into this many equal-width bins.
    Binned(usize),
}

/// The default quality-threshold grid {0.25, 0.30, ..., 0.75}.
pub fn default_tau_grid() -> Vec<f64> {
    (25..=75).step_by(5).map(|p| p as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackConfig {
    pub track: Track,
    pub min_component_size: usize,
    /// When false, predicted components are kept regardless of size.
    pub filtering: bool,
    /// Clear predictions on void pixels before component extraction.
    pub clip_void: bool,
    pub tau_grid: Vec<f64>,
    pub score_mode: ScoreMode,
}

impl TrackConfig {
    pub fn for_track(track: Track) -> Self {
        Self {
            track,
            min_component_size: track.default_min_component_size(),
            filtering: true,
            clip_void: true,
            tau_grid: default_tau_grid(),
            score_mode: ScoreMode::Exact,
        }
    }

    /// Size threshold actually applied to predicted components.
    pub fn effective_min_size(&self) -> usize {
        if self.filtering {
            self.min_component_size
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_grid.is_empty() {
            return Err(Error::InvalidConfig("tau grid is empty".into()));
        }
        if let Some(t) = self
            .tau_grid
            .iter()
            .find(|t| !(t.is_finite() && (0.0..1.0).contains(*t)))
        {
            return Err(Error::InvalidConfig(format!("tau {t} outside [0, 1)")));
        }
        if self.tau_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("tau grid must be strictly increasing".into()));
        }
        if let ScoreMode::Binned(n) = self.score_mode {
            if n < 2 {
                return Err(Error::InvalidConfig(format!(
                    "binned mode needs at least 2 bins, got {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Pixel confusion counts at one threshold, void excluded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelTally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PixelTally {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
}

pub(crate) fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
