//! Dataset manifests, sample blobs and per-sample transforms.
//!
//! On disk a dataset is one `manifest.json` plus, per sample, a raw image
//! blob (`C·H·W` little-endian `f32`, band-major then row-major), a mask
//! blob (`H·W` bytes, class id or 255 for ignore) and a JSON sidecar with
//! bands, extent, location, acquisition time and region. Paths in the
//! manifest are relative to the manifest's directory.

pub mod splits;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::SampleMetadata;
use crate::tensor::kernels::reflect_index;

pub const IGNORE_INDEX: u8 = 255;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid sample '{id}': {reason}")]
    Sample { id: String, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("unknown band '{0}'")]
    UnknownBand(String),
    #[error("no statistics for band '{0}'")]
    MissingStats(String),
    #[error("cannot pad {from:?} to {to:?}: {reason}")]
    Pad { from: (usize, usize), to: (usize, usize), reason: String },
    #[error("split construction failed: {0}")]
    Split(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub(crate) fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DataError + '_ {
    move |source| DataError::Json { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ghos,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Ghos];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ghos => "ghos",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| DataError::Manifest(format!("unknown split '{s}'")))
    }
}

/// `sample_id → split`, ordered by id for stable serialization.
pub type SplitMap = BTreeMap<String, Split>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandStats {
    pub band: String,
    pub mean: f64,
    pub std: f64,
}

/// Per-sample JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSidecar {
    pub sample_id: String,
    pub bands: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub lat: f64,
    pub lon: f64,
    pub day_of_year: f64,
    pub year: i32,
    pub region: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub sidecar: String,
    pub region: String,
    pub lat: f64,
    pub lon: f64,
    /// Classes present in the mask; drives balanced sampling.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub bands: Vec<String>,
    pub stats: Vec<BandStats>,
    pub samples: Vec<ManifestEntry>,
    pub splits: SplitMap,
}

impl DatasetManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self, DataError> {
        let m: Self = serde_json::from_slice(bytes).map_err(json_err(Path::new(MANIFEST_FILE)))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |s: String| Err(DataError::Manifest(s));
        if self.num_classes < 2 || self.num_classes > IGNORE_INDEX as usize {
            return bad(format!("num_classes {} outside [2, 255)", self.num_classes));
        }
        if self.class_names.len() != self.num_classes {
            return bad(format!("{} class names for {} classes", self.class_names.len(), self.num_classes));
        }
        let bands: BTreeSet<_> = self.bands.iter().collect();
        if bands.len() != self.bands.len() || bands.is_empty() {
            return bad("band list empty or has duplicates".into());
        }
        for s in &self.stats {
            if !bands.contains(&s.band) {
                return bad(format!("statistics for unknown band '{}'", s.band));
            }
            if !(s.std > 0.0) || !s.std.is_finite() || !s.mean.is_finite() {
                return bad(format!("band '{}' needs finite mean and std > 0", s.band));
            }
        }
        let mut ids = BTreeSet::new();
        for e in &self.samples {
            if !ids.insert(e.id.as_str()) {
                return bad(format!("duplicate sample id '{}'", e.id));
            }
            if let Some(&l) = e.labels.iter().find(|&&l| l >= self.num_classes) {
                return bad(format!("sample '{}' lists class {l}", e.id));
            }
            for p in [&e.image, &e.mask, &e.sidecar] {
                if Path::new(p).is_absolute() || p.split(['/', '\\']).any(|c| c == "..") {
                    return bad(format!("sample '{}' path '{p}' must stay inside the dataset root", e.id));
                }
            }
        }
        if let Some(id) = self.splits.keys().find(|id| !ids.contains(id.as_str())) {
            return bad(format!("split map names unknown sample '{id}'"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), DataError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_slice(&bytes).map_err(json_err(path))?;
        m.validate()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &m.samples {
            for p in [&e.image, &e.mask, &e.sidecar] {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(DataError::Manifest(format!("missing file {}", full.display())));
                }
            }
        }
        Ok((m, root))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn stats_for(&self, band: &str) -> Result<&BandStats, DataError> {
        self.stats.iter().find(|s| s.band == band).ok_or_else(|| DataError::MissingStats(band.to_string()))
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.samples.iter().find(|e| e.id == id)
    }

    /// Entries of one split in manifest order.
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.samples.iter().filter(|e| self.splits.get(&e.id) == Some(&split)).collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.splits.values().any(|&s| s == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub bands: Vec<String>,
    pub height: usize,
    pub width: usize,
    /// `C·H·W`, band-major.
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub meta: SampleMetadata,
    pub region: String,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        let bad = |reason: String| Err(DataError::Sample { id: self.id.clone(), reason });
        let hw = self.height.checked_mul(self.width).unwrap_or(usize::MAX);
        if self.bands.is_empty() || self.height == 0 || self.width == 0 {
            return bad("empty band list or extent".into());
        }
        if Some(self.image.len()) != hw.checked_mul(self.bands.len()) {
            return bad(format!("image has {} values for {}x{}x{}", self.image.len(), self.bands.len(), self.height, self.width));
        }
        if self.mask.len() != hw {
            return bad(format!("mask has {} values for {}x{}", self.mask.len(), self.height, self.width));
        }
        if let Some(&c) = self.mask.iter().find(|&&c| c != IGNORE_INDEX && c as usize >= num_classes) {
            return bad(format!("mask class {c} not below {num_classes}"));
        }
        Ok(())
    }

    pub fn band_plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.image[c * hw..(c + 1) * hw]
    }

    pub fn sidecar(&self) -> SampleSidecar {
        SampleSidecar {
            sample_id: self.id.clone(),
            bands: self.bands.clone(),
            height: self.height,
            width: self.width,
            lat: self.meta.lat,
            lon: self.meta.lon,
            day_of_year: self.meta.day_of_year,
            year: self.meta.year,
            region: self.region.clone(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.mask.iter().filter(|&&c| c != IGNORE_INDEX).map(|&c| c as usize).collect();
        set.into_iter().collect()
    }
}

pub fn encode_image(image: &[f32]) -> Vec<u8> {
    image.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_image(bytes: &[u8]) -> Result<Vec<f32>, DataError> {
    if bytes.len() % 4 != 0 {
        return Err(DataError::Sample { id: "<blob>".into(), reason: format!("{} bytes is not a whole number of f32", bytes.len()) });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Assembles a sample from its three stored parts, validating sizes.
pub fn decode_sample(sidecar: &[u8], image: &[u8], mask: &[u8], num_classes: usize) -> Result<Sample, DataError> {
    let sc: SampleSidecar = serde_json::from_slice(sidecar).map_err(json_err(Path::new("sidecar")))?;
    let expected = sc
        .height
        .checked_mul(sc.width)
        .and_then(|hw| hw.checked_mul(sc.bands.len()))
        .and_then(|n| n.checked_mul(4));
    if expected != Some(image.len()) {
        return Err(DataError::Sample {
            id: sc.sample_id,
            reason: format!("image blob has {} bytes for {}x{}x{} f32", image.len(), sc.bands.len(), sc.height, sc.width),
        });
    }
    let s = Sample {
        id: sc.sample_id,
        bands: sc.bands,
        height: sc.height,
        width: sc.width,
        image: decode_image(image)?,
        mask: mask.to_vec(),
        meta: SampleMetadata { lat: sc.lat, lon: sc.lon, day_of_year: sc.day_of_year, year: sc.year },
        region: sc.region,
    };
    s.validate(num_classes)?;
    s.meta.features().map_err(|e| DataError::Sample { id: s.id.clone(), reason: e.to_string() })?;
    Ok(s)
}

pub fn load_sample(root: &Path, entry: &ManifestEntry, num_classes: usize) -> Result<Sample, DataError> {
    let read = |p: &str| {
        let full = root.join(p);
        fs::read(&full).map_err(io_err(&full))
    };
    let s = decode_sample(&read(&entry.sidecar)?, &read(&entry.image)?, &read(&entry.mask)?, num_classes)?;
    if s.id != entry.id {
        return Err(DataError::Sample { id: entry.id.clone(), reason: format!("sidecar names '{}'", s.id) });
    }
    Ok(s)
}

/// Writes the three sample files under `root/dir` and returns the entry.
pub fn write_sample(root: &Path, dir: &str, sample: &Sample) -> Result<ManifestEntry, DataError> {
    let d = root.join(dir);
    fs::create_dir_all(&d).map_err(io_err(&d))?;
    let rel = |ext: &str| format!("{dir}/{}.{ext}", sample.id);
    let entry = ManifestEntry {
        id: sample.id.clone(),
        image: rel("img"),
        mask: rel("mask"),
        sidecar: rel("json"),
        region: sample.region.clone(),
        lat: sample.meta.lat,
        lon: sample.meta.lon,
        labels: sample.labels(),
    };
    let write = |p: &str, bytes: &[u8]| {
        let full = root.join(p);
        fs::write(&full, bytes).map_err(io_err(&full))
    };
    write(&entry.image, &encode_image(&sample.image))?;
    write(&entry.mask, &sample.mask)?;
    let sc = serde_json::to_string_pretty(&sample.sidecar()).map_err(json_err(Path::new(&entry.sidecar)))?;
    write(&entry.sidecar, sc.as_bytes())?;
    Ok(entry)
}

/// `(x − mean) / std` per band.
pub fn normalize(sample: &Sample, stats: &[BandStats]) -> Result<Sample, DataError> {
    transform_bands(sample, stats, |x, s| ((x as f64 - s.mean) / s.std) as f32)
}

pub fn denormalize(sample: &Sample, stats: &[BandStats]) -> Result<Sample, DataError> {
    transform_bands(sample, stats, |x, s| (x as f64 * s.std + s.mean) as f32)
}

fn transform_bands(sample: &Sample, stats: &[BandStats], f: impl Fn(f32, &BandStats) -> f32) -> Result<Sample, DataError> {
    let hw = sample.height * sample.width;
    let mut out = sample.clone();
    for (c, band) in sample.bands.iter().enumerate() {
        let s = stats.iter().find(|s| &s.band == band).ok_or_else(|| DataError::MissingStats(band.clone()))?;
        for v in &mut out.image[c * hw..(c + 1) * hw] {
            *v = f(*v, s);
        }
    }
    Ok(out)
}

/// Keeps the listed bands, in the sample's original order.
pub fn subset_bands(sample: &Sample, keep: &[String]) -> Result<Sample, DataError> {
    if let Some(k) = keep.iter().find(|k| !sample.bands.contains(k)) {
        return Err(DataError::UnknownBand(k.clone()));
    }
    let hw = sample.height * sample.width;
    let mut out = sample.clone();
    out.bands.clear();
    out.image.clear();
    for (c, b) in sample.bands.iter().enumerate() {
        if keep.contains(b) {
            out.bands.push(b.clone());
            out.image.extend_from_slice(&sample.image[c * hw..(c + 1) * hw]);
        }
    }
    Ok(out)
}

/// Fills bands of `full` missing from a normalized sample with zeros (their
/// normalized mean), in the order of `full`.
pub fn impute_missing(sample: &Sample, full: &[String]) -> Result<Sample, DataError> {
    if let Some(b) = sample.bands.iter().find(|b| !full.contains(b)) {
        return Err(DataError::UnknownBand(b.clone()));
    }
    let hw = sample.height * sample.width;
    let mut out = sample.clone();
    out.bands = full.to_vec();
    out.image = Vec::with_capacity(full.len() * hw);
    for b in full {
        match sample.bands.iter().position(|x| x == b) {
            Some(c) => out.image.extend_from_slice(sample.band_plane(c)),
            None => out.image.extend(std::iter::repeat_n(0.0, hw)),
        }
    }
    Ok(out)
}

/// Reflect-pads image and mask to `target`; padded mask pixels are ignored.
/// The extra rows and columns are split evenly, the odd one going to the
/// bottom or right.
pub fn reflect_pad_to(sample: &Sample, target: (usize, usize)) -> Result<Sample, DataError> {
    let (h, w) = (sample.height, sample.width);
    let (th, tw) = target;
    let err = |reason: &str| DataError::Pad { from: (h, w), to: target, reason: reason.into() };
    if th < h || tw < w {
        return Err(err("target smaller than the sample"));
    }
    let (top, left) = ((th - h) / 2, (tw - w) / 2);
    if (th - h - top) >= h.max(1) || (tw - w - left) >= w.max(1) {
        return Err(err("reflection needs padding smaller than the extent"));
    }
    if (th, tw) == (h, w) {
        return Ok(sample.clone());
    }
    let mut image = Vec::with_capacity(sample.bands.len() * th * tw);
    for c in 0..sample.bands.len() {
        let plane = sample.band_plane(c);
        for y in 0..th {
            let sy = reflect_index(y as isize - top as isize, h);
            for x in 0..tw {
                image.push(plane[sy * w + reflect_index(x as isize - left as isize, w)]);
            }
        }
    }
    let mut mask = vec![IGNORE_INDEX; th * tw];
    for y in 0..h {
        let row = (y + top) * tw + left;
        mask[row..row + w].copy_from_slice(&sample.mask[y * w..(y + 1) * w]);
    }
    Ok(Sample { image, mask, height: th, width: tw, ..sample.clone() })
}

/// Per-band mean and population standard deviation over samples.
pub fn compute_stats<'a>(samples: impl IntoIterator<Item = &'a Sample>, bands: &[String]) -> Result<Vec<BandStats>, DataError> {
    let mut sum = vec![0.0f64; bands.len()];
    let mut sq = vec![0.0f64; bands.len()];
    let mut count = vec![0usize; bands.len()];
    for s in samples {
        for (c, b) in s.bands.iter().enumerate() {
            let Some(i) = bands.iter().position(|x| x == b) else { continue };
            for &v in s.band_plane(c) {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
            count[i] += s.height * s.width;
        }
    }
    bands
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if count[i] == 0 {
                return Err(DataError::MissingStats(b.clone()));
            }
            let n = count[i] as f64;
            let mean = sum[i] / n;
            let var = (sq[i] / n - mean * mean).max(0.0);
            let std = var.sqrt();
            if !(std > 0.0) {
                return Err(DataError::Manifest(format!("band '{b}' is constant over the statistics set")));
            }
            Ok(BandStats { band: b.clone(), mean, std })
        })
        .collect()
}

/// Image batch `[B, C, H, W]` and flattened masks. All samples must share
/// bands and extent.
pub fn stack(samples: &[&Sample]) -> Result<(crate::tensor::Tensor<f32>, Vec<u8>), DataError> {
    let first = samples.first().ok_or_else(|| DataError::Manifest("empty batch".into()))?;
    let mut image = Vec::with_capacity(samples.len() * first.image.len());
    let mut mask = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.bands != first.bands || (s.height, s.width) != (first.height, first.width) {
            return Err(DataError::Sample { id: s.id.clone(), reason: "batch members differ in bands or extent".into() });
        }
        image.extend_from_slice(&s.image);
        mask.extend_from_slice(&s.mask);
    }
    let shape = [samples.len(), first.bands.len(), first.height, first.width];
    let t = crate::tensor::Tensor::new(&shape, image).map_err(|e| DataError::Sample { id: first.id.clone(), reason: e.to_string() })?;
    Ok((t, mask))
}
