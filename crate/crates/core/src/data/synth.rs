//! Synthetic multispectral segmentation data.
//!
//! Each class has a base spectral signature; every region perturbs all of
//! its signatures by a shared regional offset, and the hold-out region's
//! offset is pushed further out by `ghos_offset`. Within a region samples
//! lie on a west–east transect along which the spectra drift linearly, and
//! the transect is cut into train, val and test stretches in that order.
//! Class layouts are argmax maps of smooth random fields, so masks come in
//! large blobs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::splits::PoolEntry;
use super::{compute_stats, io_err, write_sample, DataError, DatasetManifest, Sample, Split, SplitMap};
use crate::backbone::SampleMetadata;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub regions: Vec<String>,
    pub ghos_region: String,
    pub samples_per_region: usize,
    pub bands: Vec<String>,
    /// `(height, width)`.
    pub extent: (usize, usize),
    pub num_classes: usize,
    pub noise: f64,
    /// Scale of the per-region signature offsets.
    pub region_shift: f64,
    /// Extra offset magnitude of the hold-out region.
    pub ghos_offset: f64,
    /// Spectral drift from one end of a transect to the other.
    pub drift: f64,
    /// Train/val/test cut points along the transect.
    pub transect_cuts: (f64, f64),
    pub blobs_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            regions: vec!["north".into(), "south".into(), "island".into()],
            ghos_region: "island".into(),
            samples_per_region: 20,
            bands: crate::backbone::PRITHVI_BANDS.iter().map(|s| s.to_string()).collect(),
            extent: (64, 64),
            num_classes: 2,
            noise: 0.3,
            region_shift: 0.2,
            ghos_offset: 1.0,
            drift: 0.6,
            transect_cuts: (0.6, 0.8),
            blobs_per_class: 3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |s: &str| Err(DataError::Manifest(s.to_string()));
        if self.regions.len() < 2 {
            return bad("at least two regions are needed so one can be held out");
        }
        if !self.regions.contains(&self.ghos_region) {
            return bad("ghos_region must be one of the regions");
        }
        if self.samples_per_region == 0 || self.bands.is_empty() || self.extent.0 == 0 || self.extent.1 == 0 {
            return bad("samples, bands and extent must be non-empty");
        }
        if self.num_classes < 2 || self.num_classes >= 255 {
            return bad("num_classes must lie in [2, 255)");
        }
        let (a, b) = self.transect_cuts;
        if !(0.0 < a && a < b && b < 1.0) {
            return bad("transect cuts must satisfy 0 < train_end < val_end < 1");
        }
        for v in [self.noise, self.region_shift, self.ghos_offset, self.drift] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad("noise, shifts and drift must be finite and non-negative");
            }
        }
        Ok(())
    }
}

/// The generative parameters drawn from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    /// `[class][band]`.
    pub base: Vec<Vec<f64>>,
    /// `[region][band]`.
    pub region_offset: Vec<Vec<f64>>,
    /// `[region][class]` additive bias of the layout fields.
    pub class_bias: Vec<Vec<f64>>,
    /// Unit drift direction `[band]`.
    pub drift_dir: Vec<f64>,
    pub drift: f64,
}

impl World {
    /// Noise-free spectrum of `class` in `region` at transect position `t`.
    pub fn class_mean(&self, region: usize, class: usize, t: f64) -> Vec<f64> {
        self.base[class]
            .iter()
            .zip(&self.region_offset[region])
            .zip(&self.drift_dir)
            .map(|((b, o), u)| b + o + self.drift * t * u)
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

pub fn draw_world(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> World {
    let c = cfg.bands.len();
    let base = (0..cfg.num_classes).map(|_| (0..c).map(|_| normal(rng)).collect()).collect();
    let region_offset = cfg
        .regions
        .iter()
        .map(|r| {
            let mut o: Vec<f64> = (0..c).map(|_| cfg.region_shift * normal(rng)).collect();
            if *r == cfg.ghos_region {
                for (x, u) in o.iter_mut().zip(unit_vector(rng, c)) {
                    *x += cfg.ghos_offset * u;
                }
            }
            o
        })
        .collect();
    let class_bias = cfg
        .regions
        .iter()
        .map(|_| (0..cfg.num_classes).map(|_| rng.random_range(-0.3..0.3)).collect())
        .collect();
    World { base, region_offset, class_bias, drift_dir: unit_vector(rng, c), drift: cfg.drift }
}

fn layout(cfg: &SyntheticConfig, bias: &[f64], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = cfg.extent;
    let sigma = (h.min(w) as f64 / 5.0).max(1.0);
    let blobs: Vec<Vec<(f64, f64, f64)>> = (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.blobs_per_class.max(1))
                .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(0.5..1.5)))
                .collect()
        })
        .collect();
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = (f64::NEG_INFINITY, 0u8);
            for (k, bl) in blobs.iter().enumerate() {
                let v: f64 = bias[k]
                    + bl.iter()
                        .map(|&(cy, cx, a)| {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            a * (-d2 / (2.0 * sigma * sigma)).exp()
                        })
                        .sum::<f64>();
                if v > best.0 {
                    best = (v, k as u8);
                }
            }
            mask.push(best.1);
        }
    }
    mask
}

/// Region centres far apart from one another.
fn region_centre(i: usize) -> (f64, f64) {
    (-30.0 + 17.0 * i as f64 % 75.0, -150.0 + 47.0 * i as f64 % 300.0)
}

/// Transect span in degrees of longitude.
pub const TRANSECT_DEGREES: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub world: World,
    pub samples: Vec<Sample>,
    /// Transect position per sample, aligned with `samples`.
    pub positions: Vec<f64>,
    pub splits: SplitMap,
    pub class_names: Vec<String>,
}

impl GeneratedDataset {
    pub fn split_samples(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| self.splits.get(&s.id) == Some(&split)).collect()
    }

    pub fn region_index(&self, cfg: &SyntheticConfig, sample: &Sample) -> usize {
        cfg.regions.iter().position(|r| *r == sample.region).expect("generated region")
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<GeneratedDataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = draw_world(cfg, &mut rng);
    let (h, w) = cfg.extent;
    let n = cfg.samples_per_region;
    let mut samples = Vec::with_capacity(n * cfg.regions.len());
    let mut positions = Vec::with_capacity(samples.capacity());
    let mut splits = SplitMap::new();
    for (ri, region) in cfg.regions.iter().enumerate() {
        let (clat, clon) = region_centre(ri);
        for j in 0..n {
            let t = if n == 1 { 0.0 } else { j as f64 / (n - 1) as f64 };
            let mask = layout(cfg, &world.class_bias[ri], &mut rng);
            let means: Vec<Vec<f64>> = (0..cfg.num_classes).map(|k| world.class_mean(ri, k, t)).collect();
            let mut image = Vec::with_capacity(cfg.bands.len() * h * w);
            for c in 0..cfg.bands.len() {
                for &k in &mask {
                    image.push((means[k as usize][c] + cfg.noise * normal(&mut rng)) as f32);
                }
            }
            let id = format!("{region}-{j:04}");
            let split = if *region == cfg.ghos_region {
                Split::Ghos
            } else if t < cfg.transect_cuts.0 {
                Split::Train
            } else if t < cfg.transect_cuts.1 {
                Split::Val
            } else {
                Split::Test
            };
            splits.insert(id.clone(), split);
            samples.push(Sample {
                id,
                bands: cfg.bands.clone(),
                height: h,
                width: w,
                image,
                mask,
                meta: SampleMetadata {
                    lat: clat + 0.05 * (j % 3) as f64,
                    lon: clon + TRANSECT_DEGREES * t,
                    day_of_year: (1 + (j * 37) % 365) as f64,
                    year: 2018 + (j % 5) as i32,
                },
                region: region.clone(),
            });
            positions.push(t);
        }
    }
    let class_names = (0..cfg.num_classes).map(|k| format!("class_{k}")).collect();
    Ok(GeneratedDataset { world, samples, positions, splits, class_names })
}

/// Writes a generated dataset to `dir` with statistics from its train
/// split and returns the manifest.
pub fn write_dataset(dir: &Path, cfg: &SyntheticConfig, data: &GeneratedDataset) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stats = compute_stats(data.split_samples(Split::Train), &cfg.bands)?;
    let entries = data.samples.iter().map(|s| write_sample(dir, "samples", s)).collect::<Result<Vec<_>, _>>()?;
    let manifest = DatasetManifest {
        num_classes: cfg.num_classes,
        class_names: data.class_names.clone(),
        bands: cfg.bands.clone(),
        stats,
        samples: entries,
        splits: data.splits.clone(),
    };
    manifest.validate()?;
    manifest.save(&dir.join(super::MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn generate_to_dir(dir: &Path, cfg: &SyntheticConfig) -> Result<(DatasetManifest, GeneratedDataset), DataError> {
    let data = generate(cfg)?;
    let m = write_dataset(dir, cfg, &data)?;
    Ok((m, data))
}

/// A label-only pool for exercising the class-balanced builder: each sample
/// carries one to three classes drawn with a skewed frequency profile.
pub fn synthetic_label_pool(num_classes: usize, regions: &[String], per_region: usize, seed: u64) -> Vec<PoolEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..num_classes).map(|k| 1.0 / (1.0 + k as f64)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::new();
    for (ri, region) in regions.iter().enumerate() {
        let (clat, clon) = region_centre(ri);
        for j in 0..per_region {
            let mut labels = Vec::new();
            for _ in 0..rng.random_range(1..=3) {
                let mut u = rng.random_range(0.0..total);
                let mut k = 0;
                while k + 1 < num_classes && u >= weights[k] {
                    u -= weights[k];
                    k += 1;
                }
                if !labels.contains(&k) {
                    labels.push(k);
                }
            }
            labels.sort();
            out.push(PoolEntry {
                id: format!("{region}-{j:05}"),
                region: region.clone(),
                labels,
                lat: clat + rng.random_range(-1.0..1.0),
                lon: clon + rng.random_range(-1.0..1.0),
            });
        }
    }
    out
}

/// Geolocated points scattered in a few tight groups, for spatial splits.
pub fn synthetic_geo_pool(groups: usize, per_group: usize, seed: u64) -> Vec<PoolEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for g in 0..groups {
        let (clat, clon) = (rng.random_range(-50.0..50.0), rng.random_range(-170.0..170.0));
        for j in 0..per_group {
            out.push(PoolEntry {
                id: format!("g{g:03}-{j:03}"),
                region: format!("g{g}"),
                labels: vec![0],
                lat: clat + rng.random_range(-0.2..0.2),
                lon: clon + rng.random_range(-0.2..0.2),
            });
        }
    }
    out
}
