//! Fine-tuning runs: data preparation, the training loop and evaluation.

pub mod experiments;
pub mod metrics;
pub mod optim;
pub mod schedule;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::SampleMetadata;
use crate::checkpoint::{self, CheckpointError};
use crate::data::synth::GeneratedDataset;
use crate::data::{self, BandStats, DataError, DatasetManifest, Sample, Split, IGNORE_INDEX};
use crate::error::ModelError;
use crate::model::{ModelConfig, SegmentationModel};
use crate::nn::Forward;
use crate::params::ParamStore;
use crate::peft::{count_parameters, ParameterReport};

use metrics::{argmax_classes, ConfusionMatrix, MetricError, SegmentationMetrics};
use optim::{AdamW, AdamWConfig};
use schedule::{EarlyStopping, PlateauConfig, ReduceOnPlateau};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("invalid run configuration: {0}")]
    Config(String),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau: PlateauConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Bands fed to the model; `None` means all backbone bands.
    pub input_bands: Option<Vec<String>>,
    /// Checkpoint whose tensors overwrite the fresh initialization.
    pub init_checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(model: ModelConfig, lr: f64, seed: u64) -> Self {
        Self {
            model,
            lr,
            batch_size: 8,
            max_epochs: 100,
            early_stop_patience: 15,
            plateau: PlateauConfig::default(),
            optimizer: AdamWConfig::default(),
            seed,
            input_bands: None,
            init_checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: &str| Err(TrainError::Config(s.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.early_stop_patience == 0 || self.plateau.patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        let o = self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("optimizer betas must lie in [0, 1), eps > 0, weight_decay >= 0");
        }
        if let Some(b) = &self.input_bands {
            if b.is_empty() {
                return bad("input_bands must not be empty");
            }
            if let Some(x) = b.iter().find(|x| !self.model.backbone.band_ids.contains(x)) {
                return Err(TrainError::Model(ModelError::UnknownBand(x.clone())));
            }
        }
        Ok(())
    }

    pub fn bands(&self) -> Vec<String> {
        self.input_bands.clone().unwrap_or_else(|| self.model.backbone.band_ids.clone())
    }
}

/// Normalized, band-subset and padded samples per split, ready for batching.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub num_classes: usize,
    pub bands: Vec<String>,
    pub splits: BTreeMap<Split, Vec<Sample>>,
}

impl PreparedData {
    /// `split_of` maps sample ids to splits; unassigned samples are dropped.
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a Sample>,
        split_of: &data::SplitMap,
        stats: &[BandStats],
        num_classes: usize,
        bands: &[String],
        extent: (usize, usize),
    ) -> Result<Self, DataError> {
        let mut splits: BTreeMap<Split, Vec<Sample>> = BTreeMap::new();
        for s in samples {
            let Some(&split) = split_of.get(&s.id) else { continue };
            s.validate(num_classes)?;
            let s = data::subset_bands(s, bands)?;
            // keep the requested order
            let s = reorder(&s, bands);
            let s = data::normalize(&s, stats)?;
            let s = data::reflect_pad_to(&s, extent)?;
            splits.entry(split).or_default().push(s);
        }
        Ok(Self { num_classes, bands: bands.to_vec(), splits })
    }

    pub fn from_manifest(manifest: &DatasetManifest, root: &std::path::Path, cfg: &RunConfig) -> Result<Self, DataError> {
        let samples = manifest
            .samples
            .iter()
            .filter(|e| manifest.splits.contains_key(&e.id))
            .map(|e| data::load_sample(root, e, manifest.num_classes))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_samples(
            &samples,
            &manifest.splits,
            &manifest.stats,
            manifest.num_classes,
            &cfg.bands(),
            cfg.model.backbone.image_size,
        )
    }

    /// In-memory synthetic data, normalized with train-split statistics.
    pub fn from_generated(gen: &GeneratedDataset, num_classes: usize, bands: &[String], extent: (usize, usize)) -> Result<Self, DataError> {
        let train = gen.split_samples(Split::Train);
        let all_bands = train.first().map(|s| s.bands.clone()).unwrap_or_default();
        let stats = data::compute_stats(train, &all_bands)?;
        Self::from_samples(&gen.samples, &gen.splits, &stats, num_classes, bands, extent)
    }

    pub fn split(&self, s: Split) -> &[Sample] {
        self.splits.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn reorder(s: &Sample, bands: &[String]) -> Sample {
    if s.bands == bands {
        return s.clone();
    }
    let mut out = s.clone();
    out.image.clear();
    for b in bands {
        let c = s.bands.iter().position(|x| x == b).expect("subset checked");
        out.image.extend_from_slice(s.band_plane(c));
    }
    out.bands = bands.to_vec();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub stopped_early: bool,
    pub metrics: BTreeMap<Split, SegmentationMetrics>,
    pub total_seconds: f64,
    pub params: ParameterReport,
}

impl RunResult {
    pub fn miou(&self, split: Split) -> Option<f64> {
        self.metrics.get(&split).map(|m| m.miou)
    }
}

/// Deterministic history table without timing.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_miou,lr\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr));
    }
    out
}

/// Full history table including wall-clock seconds per epoch.
pub fn history_csv_with_seconds(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_miou,lr,seconds\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{},{:.3}\n", r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr, r.seconds));
    }
    out
}

pub fn timing_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,seconds\n");
    for r in history {
        out.push_str(&format!("{},{:.3}\n", r.epoch, r.seconds));
    }
    out
}

pub struct TrainOutcome {
    pub model: SegmentationModel,
    pub store: ParamStore,
    pub result: RunResult,
}

/// Builds the model for a run, including any initial checkpoint.
pub fn build_model(cfg: &RunConfig) -> Result<(SegmentationModel, ParamStore), TrainError> {
    let mut store = ParamStore::new(cfg.seed);
    let model = SegmentationModel::build(cfg.model.clone(), &mut store)?;
    if let Some(p) = &cfg.init_checkpoint {
        checkpoint::load(&mut store, p)?;
    }
    Ok((model, store))
}

fn batch_meta(model: &SegmentationModel, batch: &[&Sample]) -> Option<Vec<SampleMetadata>> {
    model.cfg.backbone.metadata_enabled.then(|| batch.iter().map(|s| s.meta).collect())
}

/// Runs the protocol: AdamW, plateau schedule and early stopping on val
/// mIoU, best-val weights restored at the end.
pub fn train(cfg: &RunConfig, data: &PreparedData) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.model.decoder.num_classes != data.num_classes {
        return Err(TrainError::Config(format!(
            "decoder has {} classes, dataset {}",
            cfg.model.decoder.num_classes, data.num_classes
        )));
    }
    if data.bands != cfg.bands() {
        return Err(TrainError::Config(format!("run expects bands {:?}, data has {:?}", cfg.bands(), data.bands)));
    }
    let train_set = data.split(Split::Train);
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if data.split(Split::Val).is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let (model, mut store) = build_model(cfg)?;
    let bands = cfg.bands();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut sched = ReduceOnPlateau::new(cfg.lr, cfg.plateau);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, store.snapshot());
    let mut stopped_early = false;
    let start = Instant::now();

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_weight) = (0.0f64, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = data::stack(&batch)?;
            let valid = masks.iter().filter(|&&m| m != IGNORE_INDEX).count();
            let meta = batch_meta(&model, &batch);
            let (loss, grads, stats) = {
                let mut f = Forward::new(&store, true);
                let x = f.input(images);
                let logits = model.forward(&mut f, x, &bands, meta.as_deref())?;
                let loss = f.graph.cross_entropy(logits, &masks, IGNORE_INDEX)?;
                let value = f.graph.value(loss).item().expect("scalar") as f64;
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch: bi, loss: value });
                }
                let g = f.graph.backward(loss)?;
                (value, f.param_grads(&g), f.running_stat_updates())
            };
            opt.step(&mut store, &grads, lr);
            for (id, v) in stats {
                store.set_value(id, v).map_err(ModelError::from)?;
            }
            loss_sum += loss * valid as f64;
            loss_weight += valid;
        }
        let val = evaluate(&model, &store, data.split(Split::Val), &bands, cfg.batch_size)?;
        let train_loss = if loss_weight > 0 { loss_sum / loss_weight as f64 } else { 0.0 };
        sched.step(val.miou);
        let (improved, stop) = stopper.step(val.miou);
        if improved {
            best = (epoch, val.miou, store.snapshot());
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_miou: val.miou,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: train {train_loss:.4} val {:.4} miou {:.2} lr {lr:e}", val.loss, val.miou);
        if stop {
            stopped_early = true;
            break;
        }
    }
    store.restore(&best.2);
    let mut metrics = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test, Split::Ghos] {
        let set = data.split(split);
        if !set.is_empty() {
            metrics.insert(split, evaluate(&model, &store, set, &bands, cfg.batch_size)?);
        }
    }
    let result = RunResult {
        seed: cfg.seed,
        history,
        best_epoch: best.0,
        best_val_miou: best.1,
        stopped_early,
        metrics,
        total_seconds: start.elapsed().as_secs_f64(),
        params: count_parameters(&store),
    };
    Ok(TrainOutcome { model, store, result })
}

/// Confusion matrix, mIoU, pixel accuracy and mean loss over a split.
pub fn evaluate(
    model: &SegmentationModel,
    store: &ParamStore,
    samples: &[Sample],
    bands: &[String],
    batch_size: usize,
) -> Result<SegmentationMetrics, TrainError> {
    let k = model.cfg.decoder.num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let (mut loss_sum, mut weight) = (0.0f64, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = data::stack(&batch)?;
        if let Some(&c) = masks.iter().find(|&&m| m != IGNORE_INDEX && m as usize >= k) {
            return Err(TrainError::Config(format!("mask class {c} but the model predicts {k} classes")));
        }
        let meta = batch_meta(model, &batch);
        let mut f = Forward::new(store, false);
        let x = f.input(images);
        let logits = model.forward(&mut f, x, bands, meta.as_deref())?;
        let valid = masks.iter().filter(|&&m| m != IGNORE_INDEX).count();
        if valid > 0 {
            let loss = f.graph.cross_entropy(logits, &masks, IGNORE_INDEX)?;
            loss_sum += f.graph.value(loss).item().expect("scalar") as f64 * valid as f64;
            weight += valid;
        }
        let s = f.graph.shape(logits).to_vec();
        let pred = argmax_classes(f.graph.value(logits).data(), s[0], s[1], s[2] * s[3]);
        cm.add(&masks, &pred, IGNORE_INDEX)?;
    }
    let miou = cm.miou()?;
    Ok(SegmentationMetrics {
        miou,
        per_class_iou: cm.per_class_iou(),
        pixel_accuracy: cm.pixel_accuracy().unwrap_or(0.0),
        loss: if weight > 0 { loss_sum / weight as f64 } else { 0.0 },
        confusion: cm,
    })
}

/// Per-sample image embeddings (mean final-layer token).
pub fn embed_samples(
    model: &SegmentationModel,
    store: &ParamStore,
    samples: &[Sample],
    bands: &[String],
    batch_size: usize,
) -> Result<Vec<Vec<f32>>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = data::stack(&batch)?;
        let meta = batch_meta(model, &batch);
        let mut f = Forward::new(store, false);
        let x = f.input(images);
        let e = model.backbone.image_embedding(&mut f, x, bands, meta.as_deref())?;
        let d = f.graph.shape(e)[1];
        out.extend(f.graph.value(e).data().chunks(d).map(<[f32]>::to_vec));
    }
    Ok(out)
}
