//! Backbone, optional attachment, neck and head assembled into one model.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, SampleMetadata, VitBackbone};
use crate::decoder::{AdapterNeck, Decoder, DecoderConfig, DecoderInput, Neck};
use crate::error::ModelError;
use crate::nn::Forward;
use crate::params::ParamStore;
use crate::peft::{
    apply_freeze_policy, attach_lora, attach_vit_adapter, attach_vpt, FreezePolicy, LoraConfig, VitAdapterConfig, VptConfig,
};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum PeftConfig {
    None,
    Lora(LoraConfig),
    Vpt(VptConfig),
    VitAdapter(VitAdapterConfig),
}

impl PeftConfig {
    /// The attachment that goes with a policy, with default settings.
    pub fn for_policy(policy: FreezePolicy) -> Self {
        match policy {
            FreezePolicy::Lora => PeftConfig::Lora(LoraConfig::default()),
            FreezePolicy::Vpt => PeftConfig::Vpt(VptConfig::default()),
            FreezePolicy::VitAdapter => PeftConfig::VitAdapter(VitAdapterConfig::default()),
            FreezePolicy::FullFineTune | FreezePolicy::LinearProbe => PeftConfig::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub peft: PeftConfig,
    pub policy: FreezePolicy,
    pub decoder: DecoderConfig,
}

pub struct SegmentationModel {
    pub cfg: ModelConfig,
    pub backbone: VitBackbone,
    pub neck: Option<Neck>,
    pub adapter_neck: Option<AdapterNeck>,
    pub decoder: Decoder,
}

impl SegmentationModel {
    /// Builds the model into `store` and applies the freeze policy.
    pub fn build(cfg: ModelConfig, store: &mut ParamStore) -> Result<Self, ModelError> {
        let mut backbone = VitBackbone::new(cfg.backbone.clone(), store)?;
        match &cfg.peft {
            PeftConfig::None => 0,
            PeftConfig::Lora(c) => attach_lora(&mut backbone, store, c)?,
            PeftConfig::Vpt(c) => attach_vpt(&mut backbone, store, c)?,
            PeftConfig::VitAdapter(c) => attach_vit_adapter(&mut backbone, store, c)?,
        };
        let d = cfg.backbone.embed_dim;
        let (neck, adapter_neck) = match (cfg.decoder.kind.needs_pyramid(), backbone.adapter.is_some()) {
            (false, _) => (None, None),
            (true, false) => (Some(Neck::new(store, d)?), None),
            (true, true) => (None, Some(AdapterNeck::new(store, d)?)),
        };
        let decoder = Decoder::new(store, cfg.decoder.clone(), d, cfg.backbone.patch_size)?;
        apply_freeze_policy(store, cfg.policy)?;
        Ok(Self { cfg, backbone, neck, adapter_neck, decoder })
    }

    pub fn bands(&self) -> &[String] {
        &self.cfg.backbone.band_ids
    }

    /// Logits `[B, K, H, W]` for `image: [B, C, H, W]`.
    pub fn forward(&self, f: &mut Forward, image: Var, bands: &[String], meta: Option<&[SampleMetadata]>) -> Result<Var, ModelError> {
        let s = f.graph.shape(image).to_vec();
        let extent = (s[2], s[3]);
        let out = self.backbone.forward_features(f, image, bands, meta)?;
        let pyramid = match (&self.neck, &self.adapter_neck, &out.adapter_pyramid) {
            (Some(n), _, _) => Some(n.forward(f, &out.maps)?),
            (None, Some(n), Some(levels)) => Some(n.forward(f, levels)?),
            _ => None,
        };
        let input = DecoderInput { final_map: out.last_map(), pyramid: pyramid.as_ref() };
        self.decoder.forward(f, input, extent)
    }
}
