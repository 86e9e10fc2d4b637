//! PEFT attachments, freeze policies and parameter accounting.

pub mod adapter;
pub mod lora;
pub mod vpt;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::params::{ParamGroup, ParamStore};

pub use adapter::{attach_vit_adapter, VitAdapter, VitAdapterConfig};
pub use lora::{attach_lora, merge_lora, LoraConfig, LoraTarget};
pub use vpt::{attach_vpt, VptConfig, VptPrompts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    FullFineTune,
    LinearProbe,
    Lora,
    Vpt,
    VitAdapter,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 5] = [
        FreezePolicy::FullFineTune,
        FreezePolicy::LinearProbe,
        FreezePolicy::Lora,
        FreezePolicy::Vpt,
        FreezePolicy::VitAdapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::FullFineTune => "full-fine-tune",
            FreezePolicy::LinearProbe => "linear-probe",
            FreezePolicy::Lora => "lora",
            FreezePolicy::Vpt => "vpt",
            FreezePolicy::VitAdapter => "vit-adapter",
        }
    }

    /// The attachment group this policy trains, if any.
    pub fn required_group(self) -> Option<ParamGroup> {
        match self {
            FreezePolicy::Lora => Some(ParamGroup::Lora),
            FreezePolicy::Vpt => Some(ParamGroup::Vpt),
            FreezePolicy::VitAdapter => Some(ParamGroup::Adapter),
            FreezePolicy::FullFineTune | FreezePolicy::LinearProbe => None,
        }
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Neck | ParamGroup::Decoder => true,
            _ if self == FreezePolicy::FullFineTune => true,
            g => self.required_group() == Some(g),
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePolicy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FreezePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .or(match s {
                "full" | "full-ft" => Some(FreezePolicy::FullFineTune),
                "linear" => Some(FreezePolicy::LinearProbe),
                _ => None,
            })
            .ok_or_else(|| ModelError::Config(format!("unknown freeze policy '{s}'")))
    }
}

/// Marks the store's trainable set. Policies that train an attachment
/// require it to be present.
pub fn apply_freeze_policy(store: &mut ParamStore, policy: FreezePolicy) -> Result<(), ModelError> {
    if let Some(g) = policy.required_group() {
        if !store.has_group(g) {
            return Err(ModelError::Attachment(format!("policy '{policy}' requires a {g} attachment")));
        }
    }
    store.set_trainable_groups(|g| policy.trains(g));
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub total: usize,
    pub trainable: usize,
    pub encoder: usize,
    pub encoder_trainable: usize,
    pub per_group: BTreeMap<ParamGroup, usize>,
    pub trainable_fraction: f64,
}

impl ParameterReport {
    /// Attachment parameters as a percentage of the encoder, two decimals.
    pub fn percent_of_encoder(&self, group: ParamGroup) -> f64 {
        let n = self.per_group.get(&group).copied().unwrap_or(0);
        round2(100.0 * n as f64 / self.encoder.max(1) as f64)
    }

    pub fn encoder_trainable_fraction(&self) -> f64 {
        self.encoder_trainable as f64 / self.encoder.max(1) as f64
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `12,345,678 → "12.3M"`.
pub fn millions(n: usize) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

pub fn count_parameters(store: &ParamStore) -> ParameterReport {
    let mut per_group = BTreeMap::new();
    let mut encoder_trainable = 0;
    for (_, p) in store.iter().filter(|(_, p)| !p.buffer) {
        *per_group.entry(p.group).or_insert(0) += p.value.numel();
        if p.group == ParamGroup::Encoder && p.trainable {
            encoder_trainable += p.value.numel();
        }
    }
    let total = store.count(None);
    let trainable = store.count_trainable();
    ParameterReport {
        total,
        trainable,
        encoder: per_group.get(&ParamGroup::Encoder).copied().unwrap_or(0),
        encoder_trainable,
        per_group,
        trainable_fraction: trainable as f64 / total.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, VitBackbone};

    fn meta_backbone(cfg: BackboneConfig) -> (VitBackbone, ParamStore) {
        let mut store = ParamStore::meta();
        let bb = VitBackbone::new(cfg, &mut store).unwrap();
        (bb, store)
    }

    #[test]
    fn lora_and_vpt_counts_match_closed_forms() {
        for (cfg, lora, vpt) in [
            (BackboneConfig::vit_b16(), 2_064_384, 921_600),
            (BackboneConfig::vit_l16(), 5_505_024, 2_457_600),
        ] {
            let (mut bb, mut store) = meta_backbone(cfg.clone());
            assert_eq!(attach_lora(&mut bb, &mut store, &LoraConfig::default()).unwrap(), lora);
            assert_eq!(lora::closed_form_count(cfg.embed_dim, cfg.mlp_hidden(), cfg.depth, &LoraConfig::default()), lora);
            assert_eq!(attach_vpt(&mut bb, &mut store, &VptConfig::default()).unwrap(), vpt);
        }
    }

    #[test]
    fn adapter_share_of_encoder() {
        let mut cfg = BackboneConfig::vit_b16();
        cfg.image_size = (240, 240);
        let (mut bb, mut store) = meta_backbone(cfg);
        assert!(attach_vit_adapter(&mut bb, &mut store, &VitAdapterConfig::default()).is_err());
        let (mut bb, mut store) = meta_backbone(BackboneConfig::vit_b16());
        let bad = VitAdapterConfig { widths: vec![64, 128], ..Default::default() };
        assert!(attach_vit_adapter(&mut bb, &mut store, &bad).is_err());
        for cfg in [BackboneConfig::vit_b16(), BackboneConfig::vit_l16()] {
            let (mut bb, mut store) = meta_backbone(cfg);
            let n = attach_vit_adapter(&mut bb, &mut store, &VitAdapterConfig::default()).unwrap();
            let share = n as f64 / store.count(Some(ParamGroup::Encoder)) as f64;
            assert!((0.05..=0.15).contains(&share), "{share}");
        }
    }

    #[test]
    fn policy_requires_attachment() {
        let (_, mut store) = meta_backbone(BackboneConfig::new(16, 4, 2, 8, &["a"], (32, 32)));
        assert!(apply_freeze_policy(&mut store, FreezePolicy::Lora).is_err());
        apply_freeze_policy(&mut store, FreezePolicy::FullFineTune).unwrap();
        let r = count_parameters(&store);
        assert_eq!(r.encoder_trainable_fraction(), 1.0);
        apply_freeze_policy(&mut store, FreezePolicy::LinearProbe).unwrap();
        assert_eq!(count_parameters(&store).trainable, 0);
    }
}
