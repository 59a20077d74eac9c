//! Evaluation engine for pixel-wise anomaly and obstacle segmentation.
//!
//! Ground truth has three classes (anomaly, not anomaly, void). Predictions
//! come either as per-pixel scores, from which a default segmentation is
//! derived, or as ready-made binary masks. The engine reports
//!
//! * pixel level: AuPRC, FPR at 95% TPR, the best pixel-wise F1 and its
//!   threshold, over all non-void pixels of the dataset;
//! * component level: adjusted component IoU (sIoU) per ground-truth
//!   component, PPV per predicted component, TP/FN/FP and F1 over a grid of
//!   quality thresholds, and their average F̄1;
//! * size-stratified and tag-subset breakdowns, and a threshold sweep.

pub mod component;
pub mod connectivity;
pub mod error;
pub mod io;
pub mod mask;
pub mod model;
pub mod pixel;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    validate_pair, BinaryMask, Label, LabelMap, PixelTally, ScoreMap, ScoreMode, ScoredImage, Track, TrackConfig,
};
