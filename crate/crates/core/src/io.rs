//! Dataset manifests and the on-disk formats for labels, scores and masks.
//!
//! * labels: 8-bit grayscale PNG, `0` not anomaly, `1` anomaly, `255` void
//!   (or any mapping given in the manifest's `label_encoding`);
//! * scores: `<id>.f32` raw little-endian floats with a `<id>.hdr` text
//!   header `width height`, or a 16-bit grayscale PNG mapped onto `[0, 1]`;
//! * masks: 8-bit grayscale PNG, `0` not predicted, anything else predicted.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectivity::extract_components;
use crate::error::{Error, Result};
use crate::model::{BinaryMask, Label, LabelMap, ScoreMap, Track};

/// Pixel value to class mapping for label PNGs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelEncoding(pub BTreeMap<u8, Label>);

impl Default for LabelEncoding {
    fn default() -> Self {
        Self(BTreeMap::from([
            (0, Label::NotAnomaly),
            (1, Label::Anomaly),
            (255, Label::Void),
        ]))
    }
}

impl LabelEncoding {
    fn lookup_table(&self) -> [Option<Label>; 256] {
        let mut table = [None; 256];
        for (&v, &l) in &self.0 {
            table[v as usize] = Some(l);
        }
        table
    }

    /// First pixel value assigned to `label`.
    fn value_of(&self, label: Label) -> Option<u8> {
        self.0.iter().find(|(_, &l)| l == label).map(|(&v, _)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Label PNG, relative to the manifest's directory.
    pub label: PathBuf,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl ImageEntry {
    /// Values of the tags of kind `kind`, i.e. tags written `kind:value`.
    pub fn tag_values<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.tags
            .iter()
            .filter_map(move |t| t.strip_prefix(kind).and_then(|rest| rest.strip_prefix(':')))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub track: Track,
    pub images: Vec<ImageEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_encoding: Option<LabelEncoding>,
}

impl DatasetManifest {
    pub fn parse(json: &str) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(json).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate image id `{}`", img.id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::Manifest(format!("image `{}` has zero size", img.id)));
            }
        }
        Ok(())
    }

    pub fn encoding(&self) -> LabelEncoding {
        self.label_encoding.clone().unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = DatasetManifest::parse(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, root })
    }

    pub fn label_path(&self, entry: &ImageEntry) -> PathBuf {
        self.root.join(&entry.label)
    }

    /// Loads and checks the label map of one entry against its declared size.
    pub fn load_labels(&self, entry: &ImageEntry) -> Result<LabelMap> {
        let labels = load_label_map_with(self.label_path(entry), &self.manifest.encoding())?;
        if labels.width() != entry.width || labels.height() != entry.height {
            return Err(Error::DimensionMismatch {
                expected_width: entry.width,
                expected_height: entry.height,
                found_width: labels.width(),
                found_height: labels.height(),
            });
        }
        Ok(labels)
    }

    /// All label maps, in manifest order.
    pub fn load_all_labels(&self) -> Result<Vec<LabelMap>> {
        self.manifest.images.par_iter().map(|e| self.load_labels(e)).collect()
    }
}

fn open_png(path: &Path) -> Result<png::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let reader = decoder
        .read_info()
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    if reader.info().interlaced {
        return Err(Error::UnsupportedFormat(format!("{}: interlaced PNG", path.display())));
    }
    Ok(reader)
}

fn expect_format(path: &Path, reader: &png::Reader<BufReader<File>>, depth: png::BitDepth) -> Result<(usize, usize)> {
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != depth {
        return Err(Error::UnsupportedFormat(format!(
            "{}: expected {}-bit grayscale, found {:?} at {:?}",
            path.display(),
            depth as u8,
            info.color_type,
            info.bit_depth
        )));
    }
    Ok((info.width as usize, info.height as usize))
}

/// Streams an 8-bit grayscale PNG row by row into `f(row, col, value)`.
fn read_gray8(path: &Path, mut f: impl FnMut(usize, usize, u8) -> Result<()>) -> Result<(usize, usize)> {
    let mut reader = open_png(path)?;
    let (width, height) = expect_format(path, &reader, png::BitDepth::Eight)?;
    let mut row = 0;
    while let Some(r) = reader
        .next_row()
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?
    {
        for (col, &v) in r.data()[..width].iter().enumerate() {
            f(row, col, v)?;
        }
        row += 1;
    }
    Ok((width, height))
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    load_label_map_with(path, &LabelEncoding::default())
}

pub fn load_label_map_with(path: impl AsRef<Path>, encoding: &LabelEncoding) -> Result<LabelMap> {
    let path = path.as_ref();
    let table = encoding.lookup_table();
    let mut labels = Vec::new();
    let (width, height) = read_gray8(path, |row, col, v| {
        let label = table[v as usize].ok_or(Error::BadEncoding {
            value: v as u16,
            row,
            col,
        })?;
        labels.push(label);
        Ok(())
    })?;
    LabelMap::new(width, height, labels)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let mut mask = Vec::new();
    let (width, height) = read_gray8(path, |_, _, v| {
        mask.push(v >= 1);
        Ok(())
    })?;
    BinaryMask::new(width, height, mask)
}

fn sidecar_header(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

fn read_header(path: &Path) -> Result<(usize, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut parts = text.split_whitespace().map(str::parse::<usize>);
    match (parts.next(), parts.next(), parts.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(Error::UnsupportedFormat(format!(
            "{}: header must be `width height`",
            path.display()
        ))),
    }
}

/// Loads a score map from a raw `.f32` file (with its `.hdr` sidecar) or a
/// 16-bit grayscale PNG.
pub fn load_score_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    let path = path.as_ref();
    let map = match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => load_raw_scores(path)?,
        Some("png") => load_png_scores(path)?,
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: scores must be .f32 or .png",
                path.display()
            )))
        }
    };
    if let Some(index) = map.first_non_finite() {
        return Err(Error::NonFiniteScore { index });
    }
    Ok(map)
}

fn load_raw_scores(path: &Path) -> Result<ScoreMap> {
    let (width, height) = read_header(&sidecar_header(path))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = width * height * 4;
    if bytes.len() != expected {
        return Err(Error::HeaderMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let scores = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ScoreMap::new(width, height, scores)
}

fn load_png_scores(path: &Path) -> Result<ScoreMap> {
    let mut reader = open_png(path)?;
    let (width, height) = expect_format(path, &reader, png::BitDepth::Sixteen)?;
    let mut scores = Vec::with_capacity(width * height);
    while let Some(r) = reader
        .next_row()
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?
    {
        scores.extend(
            r.data()[..2 * width]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / u16::MAX as f32),
        );
    }
    ScoreMap::new(width, height, scores)
}

/// Score file for image `id` in `dir`: `<id>.f32` preferred over `<id>.png`.
pub fn find_score_file(dir: &Path, id: &str) -> Option<PathBuf> {
    ["f32", "png"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads every `<id>.png` in `dir` as a submitted mask.
pub fn load_submitted_masks(dir: &Path) -> Result<BTreeMap<String, BinaryMask>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        out.insert(id.to_string(), load_mask(&path)?);
    }
    Ok(out)
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn write_label_map(path: impl AsRef<Path>, labels: &LabelMap, encoding: &LabelEncoding) -> Result<()> {
    let path = path.as_ref();
    let mut values = [0u8; 3];
    for label in [Label::NotAnomaly, Label::Anomaly, Label::Void] {
        values[label as usize] = encoding
            .value_of(label)
            .ok_or_else(|| Error::InvalidConfig(format!("label encoding has no value for {label:?}")))?;
    }
    let data: Vec<u8> = labels.labels().iter().map(|&l| values[l as usize]).collect();
    write_png(path, labels.width(), labels.height(), png::BitDepth::Eight, &data)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask.as_slice().iter().map(|&m| m as u8 * 255).collect();
    write_png(path.as_ref(), mask.width(), mask.height(), png::BitDepth::Eight, &data)
}

/// Writes `<path>` as raw little-endian f32 and `<path>.hdr` alongside.
pub fn write_raw_scores(path: impl AsRef<Path>, scores: &ScoreMap) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in scores.scores() {
        out.write_all(&s.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    let header = sidecar_header(path);
    std::fs::write(&header, format!("{} {}\n", scores.width(), scores.height())).map_err(|e| Error::io(&header, e))
}

/// Writes scores as a 16-bit PNG; values are clamped to `[0, 1]`.
pub fn write_png_scores(path: impl AsRef<Path>, scores: &ScoreMap) -> Result<()> {
    let data: Vec<u8> = scores
        .scores()
        .iter()
        .flat_map(|&s| (((s.clamp(0.0, 1.0) as f64) * u16::MAX as f64).round() as u16).to_be_bytes())
        .collect();
    write_png(
        path.as_ref(),
        scores.width(),
        scores.height(),
        png::BitDepth::Sixteen,
        &data,
    )
}

/// Dataset properties: class pixel fractions and ground-truth component
/// sizes relative to image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub image_count: usize,
    pub anomaly_pixel_fraction: f64,
    pub not_anomaly_pixel_fraction: f64,
    pub gt_component_count: usize,
    pub mean_relative_size: f64,
    /// Population standard deviation.
    pub std_relative_size: f64,
}

pub fn stats_from_labels(labels: &[LabelMap]) -> DatasetStats {
    let per_image: Vec<(u64, u64, u64, Vec<f64>)> = labels
        .par_iter()
        .map(|l| {
            let total = l.len() as u64;
            let anomaly = l.count(Label::Anomaly) as u64;
            let not_anomaly = l.count(Label::NotAnomaly) as u64;
            let rel = extract_components(&l.anomaly_mask())
                .components()
                .iter()
                .map(|c| c.size as f64 / total as f64)
                .collect();
            (total, anomaly, not_anomaly, rel)
        })
        .collect();
    let total: u64 = per_image.iter().map(|p| p.0).sum();
    let anomaly: u64 = per_image.iter().map(|p| p.1).sum();
    let not_anomaly: u64 = per_image.iter().map(|p| p.2).sum();
    let rel: Vec<f64> = per_image.into_iter().flat_map(|p| p.3).collect();
    let n = rel.len();
    let (mean, std) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = rel.iter().sum::<f64>() / n as f64;
        let var = rel.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    DatasetStats {
        image_count: labels.len(),
        anomaly_pixel_fraction: anomaly as f64 / total.max(1) as f64,
        not_anomaly_pixel_fraction: not_anomaly as f64 / total.max(1) as f64,
        gt_component_count: n,
        mean_relative_size: mean,
        std_relative_size: std,
    }
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    Ok(stats_from_labels(&dataset.load_all_labels()?))
}
