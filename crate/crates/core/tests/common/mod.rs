//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod gradcat;

use geopeft::backbone::{BackboneConfig, PRITHVI_BANDS};
use geopeft::data::synth::{generate, GeneratedDataset, SyntheticConfig};
use geopeft::decoder::{DecoderConfig, DecoderKind};
use geopeft::model::{ModelConfig, PeftConfig};
use geopeft::peft::{FreezePolicy, VitAdapterConfig, VptConfig};
use geopeft::train::{PreparedData, RunConfig};

pub fn tiny_backbone(bands: &[&str]) -> BackboneConfig {
    BackboneConfig::new(64, 4, 4, 8, bands, (64, 64))
}

pub fn tiny_model(policy: FreezePolicy) -> ModelConfig {
    ModelConfig {
        backbone: tiny_backbone(&PRITHVI_BANDS),
        peft: match policy {
            FreezePolicy::Vpt => PeftConfig::Vpt(VptConfig { prompts_per_layer: 16 }),
            FreezePolicy::VitAdapter => PeftConfig::VitAdapter(VitAdapterConfig { widths: vec![16, 32, 64], ..Default::default() }),
            p => PeftConfig::for_policy(p),
        },
        policy,
        decoder: DecoderConfig::new(DecoderKind::Linear, 2),
    }
}

/// Learning rates that work for the tiny model on the synthetic data.
pub fn default_lr(policy: FreezePolicy) -> f64 {
    match policy {
        FreezePolicy::FullFineTune => 1e-3,
        _ => 3e-3,
    }
}

pub fn run_config(policy: FreezePolicy, seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::new(tiny_model(policy), default_lr(policy), seed);
    cfg.max_epochs = epochs;
    cfg
}

pub fn synthetic(seed: u64) -> (SyntheticConfig, GeneratedDataset) {
    let cfg = SyntheticConfig { seed, ..SyntheticConfig::default() };
    let gen = generate(&cfg).unwrap();
    (cfg, gen)
}

pub fn prepared(cfg: &SyntheticConfig, gen: &GeneratedDataset) -> PreparedData {
    PreparedData::from_generated(gen, cfg.num_classes, &cfg.bands, cfg.extent).unwrap()
}

pub const POLICIES: [FreezePolicy; 5] = [
    FreezePolicy::FullFineTune,
    FreezePolicy::LinearProbe,
    FreezePolicy::Lora,
    FreezePolicy::Vpt,
    FreezePolicy::VitAdapter,
];
