//! Learning-rate search and multi-seed replicates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, PreparedData, RunConfig, RunResult, TrainError};
use crate::data::Split;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSearchConfig {
    pub trials: usize,
    pub low: f64,
    pub high: f64,
    pub epochs: usize,
}

impl Default for LrSearchConfig {
    fn default() -> Self {
        Self { trials: 16, low: 1e-5, high: 1e-2, epochs: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrTrial {
    pub index: usize,
    pub lr: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSearchResult {
    pub best_lr: f64,
    pub best_index: usize,
    pub trials: Vec<LrTrial>,
}

/// Candidate rates drawn log-uniformly from `[low, high]`.
pub fn sample_learning_rates(search: &LrSearchConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a2b_3c4d);
    let (lo, hi) = (search.low.ln(), search.high.ln());
    (0..search.trials).map(|_| rng.random_range(lo..=hi).exp()).collect()
}

/// Index of the highest score; ties go to the earliest.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Short training budget per candidate; picks the best validation mIoU.
pub fn lr_search(cfg: &RunConfig, data: &PreparedData, search: &LrSearchConfig) -> Result<LrSearchResult, TrainError> {
    if search.trials == 0 || search.epochs == 0 || !(search.low > 0.0 && search.low <= search.high) {
        return Err(TrainError::Config("search needs trials, epochs and 0 < low <= high".into()));
    }
    let lrs = sample_learning_rates(search, cfg.seed);
    let trials = lrs
        .par_iter()
        .enumerate()
        .map(|(index, &lr)| {
            let mut c = cfg.clone();
            c.lr = lr;
            c.max_epochs = search.epochs;
            let out = train(&c, data)?;
            Ok(LrTrial { index, lr, val_miou: out.result.best_val_miou })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let scores: Vec<f64> = trials.iter().map(|t| t.val_miou).collect();
    let best_index = argmax_first(&scores).expect("at least one trial");
    Ok(LrSearchResult { best_lr: trials[best_index].lr, best_index, trials })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Unbiased sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

/// Mean and unbiased standard deviation, summed in sorted order so the
/// result does not depend on input order.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let std = if n > 1 { (dev.iter().sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(MeanStd { mean, std, n })
}

/// Welch's t statistic for two independent samples.
pub fn welch_t(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean_std(a)?, mean_std(b)?);
    if ma.n < 2 || mb.n < 2 {
        return None;
    }
    let se = (ma.std * ma.std / ma.n as f64 + mb.std * mb.std / mb.n as f64).sqrt();
    if se == 0.0 {
        return Some(if ma.mean == mb.mean { 0.0 } else { f64::INFINITY.copysign(ma.mean - mb.mean) });
    }
    Some((ma.mean - mb.mean) / se)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub runs: Vec<RunResult>,
    pub aggregate: BTreeMap<String, MeanStd>,
}

impl ReplicateReport {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            for (split, m) in &r.metrics {
                columns.entry(format!("{split}_miou")).or_default().push(m.miou);
                columns.entry(format!("{split}_pixel_accuracy")).or_default().push(m.pixel_accuracy);
            }
            columns.entry("best_epoch".into()).or_default().push(r.best_epoch as f64);
        }
        let aggregate = columns.into_iter().filter_map(|(k, v)| mean_std(&v).map(|m| (k, m))).collect();
        Self { runs, aggregate }
    }

    pub fn miou(&self, split: Split) -> Option<MeanStd> {
        self.aggregate.get(&format!("{split}_miou")).copied()
    }

    /// `metric,mean,std,n` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std,n\n");
        for (k, m) in &self.aggregate {
            out.push_str(&format!("{k},{},{},{}\n", m.mean, m.std, m.n));
        }
        out
    }
}

/// One full run per seed, in parallel; results keep the seed order.
pub fn run_replicates(cfg: &RunConfig, data: &PreparedData, seeds: &[u64]) -> Result<ReplicateReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("no seeds given".into()));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            train(&c, data).map(|o| o.result)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReplicateReport::from_runs(runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        let m = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(m.mean, 5.0);
        assert!((m.std - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.5; 5]).unwrap().std, 0.0);
        assert!(mean_std(&[]).is_none());
    }

    #[test]
    fn argmax_ties_go_first() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn sampled_rates_stay_in_range() {
        let s = LrSearchConfig::default();
        let lrs = sample_learning_rates(&s, 7);
        assert_eq!(lrs.len(), 16);
        assert!(lrs.iter().all(|&l| (1e-5..=1e-2).contains(&l)));
        assert_eq!(lrs, sample_learning_rates(&s, 7));
    }

    #[test]
    fn welch_on_known_samples() {
        let t = welch_t(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t, 0.0);
        // means 2 and 5, variances 1 and 1, n = 3: t = -3 / sqrt(2/3)
        let t = welch_t(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((t + 3.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
