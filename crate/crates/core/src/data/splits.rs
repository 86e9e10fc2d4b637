//! Split construction: class-balanced quota sampling and buffered spatial
//! splits, with audits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Split, SplitMap};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// What the split builders need to know about a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub region: String,
    pub labels: Vec<usize>,
    pub lat: f64,
    pub lon: f64,
}

impl From<&super::ManifestEntry> for PoolEntry {
    fn from(e: &super::ManifestEntry) -> Self {
        Self { id: e.id.clone(), region: e.region.clone(), labels: e.labels.clone(), lat: e.lat, lon: e.lon }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quotas {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub ghos: usize,
}

impl Default for Quotas {
    fn default() -> Self {
        Self { train: 250, val: 50, test: 50, ghos: 50 }
    }
}

impl Quotas {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::Ghos => self.ghos,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class: usize,
    pub split: Split,
    pub wanted: usize,
    pub got: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedReport {
    /// `counts[split][class]`: samples in the split carrying the class.
    pub counts: BTreeMap<Split, Vec<usize>>,
    pub shortfalls: Vec<Shortfall>,
    pub unassigned: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedSplits {
    pub splits: SplitMap,
    pub report: BalancedReport,
}

/// Quota sampling per class.
///
/// Classes are visited in ascending frequency (ties by id); for each class
/// the train, val and test quotas are filled in turn from a seeded shuffle
/// of the unassigned candidates. A sample carries all of its labels, so it
/// is only drawn if none of its classes would exceed the quota. GHOS is
/// drawn the same way, only from `excluded_regions`, which never feed the
/// other splits.
pub fn build_class_balanced_splits(
    pool: &[PoolEntry],
    num_classes: usize,
    quotas: &Quotas,
    excluded_regions: &[String],
    seed: u64,
) -> Result<BalancedSplits, DataError> {
    let mut ids = BTreeSet::new();
    for e in pool {
        if !ids.insert(e.id.as_str()) {
            return Err(DataError::Split(format!("duplicate sample id '{}'", e.id)));
        }
        if let Some(&l) = e.labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Split(format!("sample '{}' has label {l} >= {num_classes}", e.id)));
        }
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool[a].id.cmp(&pool[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let is_excluded = |e: &PoolEntry| excluded_regions.contains(&e.region);
    let mut assigned: Vec<Option<Split>> = vec![None; pool.len()];
    let mut counts: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    let mut shortfalls = Vec::new();

    let class_order = |from_excluded: bool| {
        let mut freq = vec![0usize; num_classes];
        for e in pool.iter().filter(|e| is_excluded(e) == from_excluded) {
            for &l in &e.labels {
                freq[l] += 1;
            }
        }
        let mut classes: Vec<usize> = (0..num_classes).collect();
        classes.sort_by_key(|&c| (freq[c], c));
        classes
    };

    let phases: [(bool, &[Split]); 2] = [(false, &[Split::Train, Split::Val, Split::Test]), (true, &[Split::Ghos])];
    for (from_excluded, splits) in phases {
        if from_excluded && excluded_regions.is_empty() {
            continue;
        }
        for class in class_order(from_excluded) {
            for &split in splits {
                let quota = quotas.get(split);
                let count = counts.entry(split).or_insert_with(|| vec![0; num_classes]);
                for &i in &order {
                    if count[class] >= quota {
                        break;
                    }
                    let e = &pool[i];
                    if assigned[i].is_some() || is_excluded(e) != from_excluded || !e.labels.contains(&class) {
                        continue;
                    }
                    if e.labels.iter().any(|&l| count[l] >= quota) {
                        continue;
                    }
                    assigned[i] = Some(split);
                    for &l in &e.labels {
                        count[l] += 1;
                    }
                }
            }
        }
        for &split in splits {
            let quota = quotas.get(split);
            let count = counts.entry(split).or_insert_with(|| vec![0; num_classes]);
            for (class, &got) in count.iter().enumerate() {
                if got < quota {
                    shortfalls.push(Shortfall { class, split, wanted: quota, got });
                }
            }
        }
    }
    let mut splits = SplitMap::new();
    let mut unassigned = Vec::new();
    for (e, a) in pool.iter().zip(&assigned) {
        match a {
            Some(s) => {
                splits.insert(e.id.clone(), *s);
            }
            None => unassigned.push(e.id.clone()),
        }
    }
    unassigned.sort();
    Ok(BalancedSplits { splits, report: BalancedReport { counts, shortfalls, unassigned } })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferedSplits {
    pub splits: SplitMap,
    /// Cluster index per sample id.
    pub clusters: BTreeMap<String, usize>,
    pub num_clusters: usize,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clusters: samples closer than `buffer_km` share one.
pub fn cluster(pool: &[PoolEntry], buffer_km: f64) -> Vec<usize> {
    let n = pool.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if haversine_km(pool[i].lat, pool[i].lon, pool[j].lat, pool[j].lon) < buffer_km {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // relabel roots densely in first-occurrence order
    let mut label = BTreeMap::new();
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            let next = label.len();
            *label.entry(r).or_insert(next)
        })
        .collect()
}

/// Assigns whole clusters to train/val/test.
///
/// Clusters are shuffled with the seed, then stably sorted by size
/// (largest first); each goes to the split with the largest remaining
/// deficit `ratio·n − assigned`, ties to the earlier split.
pub fn build_buffered_spatial_splits(
    pool: &[PoolEntry],
    buffer_km: f64,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<BufferedSplits, DataError> {
    if !(buffer_km >= 0.0) {
        return Err(DataError::Split(format!("buffer {buffer_km} km must be non-negative")));
    }
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|x| !(*x >= 0.0)) || !(r.iter().sum::<f64>() > 0.0) {
        return Err(DataError::Split("split ratios must be non-negative with a positive sum".into()));
    }
    for e in pool {
        if !(-90.0..=90.0).contains(&e.lat) || !(-180.0..=180.0).contains(&e.lon) {
            return Err(DataError::Split(format!("sample '{}' has invalid centroid ({}, {})", e.id, e.lat, e.lon)));
        }
    }
    let total: f64 = r.iter().sum();
    let labels = cluster(pool, buffer_km);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if pool.len() > 1 && k == 1 {
        return Err(DataError::Split(format!(
            "all {} samples form one cluster at {buffer_km} km buffer; no split is possible",
            pool.len()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let mut order: Vec<usize> = (0..k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by_key(|&c| std::cmp::Reverse(members[c].len()));

    let n = pool.len() as f64;
    let targets: Vec<f64> = r.iter().map(|x| x / total * n).collect();
    let mut filled = [0usize; 3];
    let names = [Split::Train, Split::Val, Split::Test];
    let mut splits = SplitMap::new();
    for c in order {
        let mut best = 0;
        for s in 1..3 {
            if targets[s] - filled[s] as f64 > targets[best] - filled[best] as f64 {
                best = s;
            }
        }
        filled[best] += members[c].len();
        for &i in &members[c] {
            splits.insert(pool[i].id.clone(), names[best]);
        }
    }
    let clusters = pool.iter().zip(&labels).map(|(e, &c)| (e.id.clone(), c)).collect();
    Ok(BufferedSplits { splits, clusters, num_clusters: k })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: Split,
    pub b: Split,
    pub min_km: Option<f64>,
    pub sample_a: Option<String>,
    pub sample_b: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    pub counts: BTreeMap<Split, usize>,
    pub pairs: Vec<PairDistance>,
    pub unassigned: Vec<String>,
    pub unknown: Vec<String>,
}

impl SplitAudit {
    /// Smallest distance between any two samples in different splits.
    pub fn min_cross_split_km(&self) -> Option<f64> {
        self.pairs.iter().filter_map(|p| p.min_km).min_by(|a, b| a.total_cmp(b))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split_a,split_b,min_km,sample_a,sample_b\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.a,
                p.b,
                p.min_km.map(|d| format!("{d:.6}")).unwrap_or_default(),
                p.sample_a.as_deref().unwrap_or(""),
                p.sample_b.as_deref().unwrap_or("")
            ));
        }
        for (s, n) in &self.counts {
            out.push_str(&format!("{s},count,{n},,\n"));
        }
        out
    }
}

/// Exhaustive pairwise audit of a split map against pool centroids.
pub fn audit_splits(pool: &[PoolEntry], splits: &SplitMap) -> SplitAudit {
    let mut by_split: BTreeMap<Split, Vec<&PoolEntry>> = BTreeMap::new();
    let mut unassigned = Vec::new();
    for e in pool {
        match splits.get(&e.id) {
            Some(s) => by_split.entry(*s).or_default().push(e),
            None => unassigned.push(e.id.clone()),
        }
    }
    let known: BTreeSet<&str> = pool.iter().map(|e| e.id.as_str()).collect();
    let unknown = splits.keys().filter(|id| !known.contains(id.as_str())).cloned().collect();
    let present: Vec<Split> = by_split.keys().copied().collect();
    let mut pairs = Vec::new();
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            let mut best: Option<(f64, &str, &str)> = None;
            for x in &by_split[&a] {
                for y in &by_split[&b] {
                    let d = haversine_km(x.lat, x.lon, y.lat, y.lon);
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, &x.id, &y.id));
                    }
                }
            }
            pairs.push(PairDistance {
                a,
                b,
                min_km: best.map(|b| b.0),
                sample_a: best.map(|b| b.1.to_string()),
                sample_b: best.map(|b| b.2.to_string()),
            });
        }
    }
    SplitAudit { counts: by_split.iter().map(|(s, v)| (*s, v.len())).collect(), pairs, unassigned, unknown }
}

/// Parses a split-map JSON object `{ "id": "train", ... }`.
pub fn parse_split_map(bytes: &[u8]) -> Result<SplitMap, DataError> {
    serde_json::from_slice(bytes).map_err(|e| DataError::Split(format!("malformed split map: {e}")))
}

pub fn split_map_json(splits: &SplitMap) -> String {
    serde_json::to_string_pretty(splits).expect("string keys") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, lat: f64, lon: f64) -> PoolEntry {
        PoolEntry { id: id.into(), region: "r".into(), labels: vec![0], lat, lon }
    }

    #[test]
    fn haversine_known_values() {
        assert_eq!(haversine_km(10.0, 20.0, 10.0, 20.0), 0.0);
        // one degree of latitude
        let d = haversine_km(0.0, 0.0, 1.0, 0.0);
        assert!((d - EARTH_RADIUS_KM * std::f64::consts::PI / 180.0).abs() < 1e-9);
    }

    #[test]
    fn isolated_samples_split_six_two_two() {
        let pool: Vec<_> = (0..10).map(|i| entry(&format!("s{i}"), 0.0, i as f64)).collect();
        for seed in 0..5 {
            let s = build_buffered_spatial_splits(&pool, 5.0, &SplitRatios::default(), seed).unwrap();
            let count = |x| s.splits.values().filter(|&&v| v == x).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
        }
    }

    #[test]
    fn one_cluster_rejected() {
        let pool: Vec<_> = (0..4).map(|i| entry(&format!("s{i}"), 0.0, i as f64 * 0.01)).collect();
        assert!(build_buffered_spatial_splits(&pool, 5.0, &SplitRatios::default(), 0).is_err());
    }

    #[test]
    fn chained_neighbours_share_a_cluster() {
        // 0.03° of longitude at the equator is about 3.3 km
        let pool: Vec<_> = (0..5).map(|i| entry(&format!("s{i}"), 0.0, i as f64 * 0.03)).collect();
        assert!(cluster(&pool, 5.0).iter().all(|&c| c == 0));
    }
}
