//! Turning score maps into binary segmentations, or taking submitted masks
//! as they are.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::connectivity::{extract_from_slice, filter_by_size, ComponentSet};
use crate::error::{Error, Result};
use crate::model::{BinaryMask, LabelMap, ScoreMap, ScoredImage, TrackConfig};

/// One predicted mask per image plus how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBundle {
    pub masks: Vec<BinaryMask>,
    /// `None` for submitted masks.
    pub delta_used: Option<f64>,
    pub filtered: bool,
    pub min_size_used: usize,
    /// Predicted pixels removed because they lay on void ground truth.
    pub void_pixels_cleared: u64,
}

/// Pixels with `score >= delta`, excluding void when `clip_void` is set.
pub fn threshold_mask(labels: &LabelMap, scores: &ScoreMap, delta: f64, clip_void: bool) -> Vec<bool> {
    labels
        .labels()
        .iter()
        .zip(scores.scores())
        .map(|(l, &s)| s as f64 >= delta && !(clip_void && l.is_void()))
        .collect()
}

/// Predicted components of one image at threshold `delta`, after the size
/// filter configured in `config`.
pub fn predicted_components(image: &ScoredImage, delta: f64, config: &TrackConfig) -> ComponentSet {
    let labels = image.labels();
    let raw = threshold_mask(labels, image.scores(), delta, config.clip_void);
    let set = extract_from_slice(labels.width(), labels.height(), &raw);
    filter_by_size(&set, config.effective_min_size())
}

pub fn mask_from_components(set: &ComponentSet) -> BinaryMask {
    let mut mask = vec![false; set.width() * set.height()];
    for c in set.components() {
        for &p in set.pixels(c.id) {
            mask[p] = true;
        }
    }
    BinaryMask::new(set.width(), set.height(), mask).expect("component set has valid dimensions")
}

/// Default segmentation: global threshold then minimum-size filtering.
pub fn generate_masks<'a>(
    images: impl IntoIterator<Item = &'a ScoredImage>,
    delta: f64,
    config: &TrackConfig,
) -> MaskBundle {
    let images: Vec<&ScoredImage> = images.into_iter().collect();
    let masks = images
        .par_iter()
        .map(|image| mask_from_components(&predicted_components(image, delta, config)))
        .collect();
    MaskBundle {
        masks,
        delta_used: Some(delta),
        filtered: config.filtering,
        min_size_used: config.effective_min_size(),
        void_pixels_cleared: 0,
    }
}

/// Accepts competitor masks verbatim, apart from clearing predictions on
/// void pixels when `clip_void` is set. `images` gives the manifest order.
pub fn masks_from_external(
    images: &[(&str, &LabelMap)],
    mut submitted: BTreeMap<String, BinaryMask>,
    clip_void: bool,
) -> Result<MaskBundle> {
    if let Some(unknown) = submitted.keys().find(|id| !images.iter().any(|(known, _)| known == id)) {
        return Err(Error::UnknownImage(unknown.clone()));
    }
    let mut masks = Vec::with_capacity(images.len());
    let mut cleared = 0u64;
    for &(id, labels) in images {
        let mask = submitted.remove(id).ok_or_else(|| Error::MissingInput {
            kind: "mask",
            id: id.to_string(),
        })?;
        labels.same_shape(mask.width(), mask.height())?;
        if !clip_void {
            masks.push(mask);
            continue;
        }
        let (width, height) = (mask.width(), mask.height());
        let mut bits = mask.into_vec();
        let mut here = 0u64;
        for (bit, label) in bits.iter_mut().zip(labels.labels()) {
            if *bit && label.is_void() {
                *bit = false;
                here += 1;
            }
        }
        if here > 0 {
            log::warn!("{id}: cleared {here} predicted pixels on void ground truth");
        }
        cleared += here;
        masks.push(BinaryMask::new(width, height, bits)?);
    }
    Ok(MaskBundle {
        masks,
        delta_used: None,
        filtered: false,
        min_size_used: 0,
        void_pixels_cleared: cleared,
    })
}
