//! Embedding export, nearest-train distances and parameter/memory accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::SampleMetadata;
use crate::data::Split;
use crate::error::ModelError;
use crate::model::{ModelConfig, SegmentationModel};
use crate::nn::Forward;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("the train split has no embeddings")]
    EmptyTrain,
    #[error("embedding width {got} differs from {expected}")]
    Width { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub region: String,
    pub split: Split,
    pub vector: Vec<f32>,
}

/// `sample_id,region,e0,…` rows.
pub fn embeddings_csv(records: &[EmbeddingRecord]) -> Result<String, DiagnosticsError> {
    let d = records.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("sample_id,region");
    for i in 0..d {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');
    for r in records {
        if r.vector.len() != d {
            return Err(DiagnosticsError::Width { expected: d, got: r.vector.len() });
        }
        out.push_str(&format!("{},{}", r.sample_id, r.region));
        for v in &r.vector {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Per-sample distance to the nearest train embedding, input order.
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub per_split: BTreeMap<Split, DistanceStats>,
}

impl DistanceReport {
    pub fn mean(&self, split: Split) -> Option<f64> {
        self.per_split.get(&split).map(|s| s.mean)
    }

    /// `split,n,mean,std,min,max` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,n,mean,std,min,max\n");
        for (s, d) in &self.per_split {
            out.push_str(&format!("{s},{},{},{},{},{}\n", d.n, d.mean, d.std, d.min, d.max));
        }
        out
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Exhaustive minimum Euclidean distance from every non-train embedding to
/// the train embeddings, summarized per split.
pub fn distance_report(records: &[EmbeddingRecord]) -> Result<DistanceReport, DiagnosticsError> {
    let train: Vec<&[f32]> = records.iter().filter(|r| r.split == Split::Train).map(|r| r.vector.as_slice()).collect();
    let Some(first) = train.first() else {
        return Err(DiagnosticsError::EmptyTrain);
    };
    let d = first.len();
    if let Some(r) = records.iter().find(|r| r.vector.len() != d) {
        return Err(DiagnosticsError::Width { expected: d, got: r.vector.len() });
    }
    let mut groups: BTreeMap<Split, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split != Split::Train) {
        let nearest = train.iter().map(|t| euclidean(&r.vector, t)).fold(f64::INFINITY, f64::min);
        groups.entry(r.split).or_default().push(nearest);
    }
    let per_split = groups
        .into_iter()
        .map(|(s, distances)| {
            let n = distances.len();
            let mean = distances.iter().sum::<f64>() / n as f64;
            let var = if n > 1 { distances.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
            let max = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (s, DistanceStats { n, mean, std: var.sqrt(), min, max, distances })
        })
        .collect();
    Ok(DistanceReport { per_split })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub encoder_params: usize,
    pub peft_params: usize,
    /// PEFT parameters as a percentage of the encoder, two decimals.
    pub peft_percent_of_encoder: f64,
    pub decoder_params: usize,
    pub total_params: usize,
    pub trainable_params: usize,
    pub trainable_percent: f64,
    pub batch_size: usize,
    /// Forward activation elements for the whole batch.
    pub activation_elements: usize,
    /// Two Adam moments per trainable parameter.
    pub optimizer_state_elements: usize,
    /// Parameters, activations and optimizer state at four bytes each.
    pub estimated_bytes: usize,
}

/// Exact counts from a shape-only build; no weights are allocated.
pub fn parameter_memory_report(cfg: &ModelConfig, batch_size: usize) -> Result<MemoryReport, ModelError> {
    let mut store = ParamStore::meta();
    let model = SegmentationModel::build(cfg.clone(), &mut store)?;
    let (h, w) = cfg.backbone.image_size;
    let c = cfg.backbone.band_ids.len();
    let activations = {
        let mut f = Forward::new(&store, true);
        let x = f.input(Tensor::meta(&[batch_size, c, h, w]));
        let meta = cfg.backbone.metadata_enabled.then(|| vec![SampleMetadata { lat: 0.0, lon: 0.0, day_of_year: 1.0, year: 2020 }; batch_size]);
        model.forward(&mut f, x, &cfg.backbone.band_ids, meta.as_deref())?;
        f.graph.activation_elements()
    };
    let encoder = store.count(Some(ParamGroup::Encoder));
    let peft: usize = [ParamGroup::Lora, ParamGroup::Vpt, ParamGroup::Adapter].into_iter().map(|g| store.count(Some(g))).sum();
    let decoder = store.count(Some(ParamGroup::Neck)) + store.count(Some(ParamGroup::Decoder));
    let total = store.count(None);
    let trainable = store.count_trainable();
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { (a as f64 / b as f64 * 1e4).round() / 100.0 };
    Ok(MemoryReport {
        encoder_params: encoder,
        peft_params: peft,
        peft_percent_of_encoder: pct(peft, encoder),
        decoder_params: decoder,
        total_params: total,
        trainable_params: trainable,
        trainable_percent: pct(trainable, total),
        batch_size,
        activation_elements: activations,
        optimizer_state_elements: 2 * trainable,
        estimated_bytes: 4 * (total + activations + 2 * trainable),
    })
}
