//! Low-rank adaptation: `W + scaling · B·A` on selected linear maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::VitBackbone;
use crate::error::{config_err, ModelError};
use crate::nn::LoraWeights;
use crate::params::{Init, ParamGroup, ParamStore};
use crate::tensor::{kernels, Tensor};

pub const LORA_A_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraTarget {
    Query,
    Value,
    MlpFc1,
    MlpFc2,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Query, LoraTarget::Value, LoraTarget::MlpFc1, LoraTarget::MlpFc2];

    /// Name of the wrapped linear inside a block.
    pub fn linear_name(self) -> &'static str {
        match self {
            LoraTarget::Query => "attn.q",
            LoraTarget::Value => "attn.v",
            LoraTarget::MlpFc1 => "mlp.fc1",
            LoraTarget::MlpFc2 => "mlp.fc2",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Query => "query",
            LoraTarget::Value => "value",
            LoraTarget::MlpFc1 => "fc1",
            LoraTarget::MlpFc2 => "fc2",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoraTarget {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "query" | "q" => Ok(LoraTarget::Query),
            "value" | "v" => Ok(LoraTarget::Value),
            "fc1" | "mlp-fc1" => Ok(LoraTarget::MlpFc1),
            "fc2" | "mlp-fc2" => Ok(LoraTarget::MlpFc2),
            other => Err(ModelError::Attachment(format!("unknown LoRA target '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: Vec<LoraTarget>,
    pub scaling: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 16, targets: LoraTarget::ALL.to_vec(), scaling: 1.0 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(config_err("LoRA rank must be at least 1"));
        }
        if self.targets.is_empty() {
            return Err(config_err("LoRA needs at least one target"));
        }
        if !self.scaling.is_finite() {
            return Err(config_err("LoRA scaling must be finite"));
        }
        Ok(())
    }
}

/// Wraps every targeted linear of every block. Returns the number of
/// parameters added.
pub fn attach_lora(backbone: &mut VitBackbone, store: &mut ParamStore, cfg: &LoraConfig) -> Result<usize, ModelError> {
    cfg.validate()?;
    let before = store.count(Some(ParamGroup::Lora));
    let wanted: Vec<&str> = cfg.targets.iter().map(|t| t.linear_name()).collect();
    let mut wrapped = vec![0usize; wanted.len()];
    for (block, name, lin) in backbone.linears_mut() {
        let Some(slot) = wanted.iter().position(|w| *w == name) else { continue };
        if lin.lora.is_some() {
            return Err(ModelError::Attachment(format!("block {block} {name} already carries LoRA")));
        }
        let prefix = format!("lora.blocks.{block}.{name}");
        let a = store.add(format!("{prefix}.a"), &[cfg.rank, lin.in_features], ParamGroup::Lora, Init::Normal(LORA_A_STD))?;
        let b = store.add(format!("{prefix}.b"), &[lin.out_features, cfg.rank], ParamGroup::Lora, Init::Zeros)?;
        lin.lora = Some(LoraWeights { a, b, scaling: cfg.scaling });
        wrapped[slot] += 1;
    }
    if let Some(i) = wrapped.iter().position(|&n| n == 0) {
        return Err(ModelError::Attachment(format!("LoRA target {} not present in backbone", cfg.targets[i])));
    }
    Ok(store.count(Some(ParamGroup::Lora)) - before)
}

/// Folds every attached adapter into its base weight and detaches it.
///
/// The adapter tensors stay in the store with `B` zeroed and frozen, so a
/// second merge finds nothing to do. Returns the number of merged linears.
pub fn merge_lora(backbone: &mut VitBackbone, store: &mut ParamStore) -> Result<usize, ModelError> {
    let mut merged = 0;
    for (_, _, lin) in backbone.linears_mut() {
        let Some(l) = lin.lora.take() else { continue };
        merged += 1;
        if store.is_meta() {
            continue;
        }
        let (out_f, in_f) = (lin.out_features, lin.in_features);
        let a = store.value(l.a);
        let b = store.value(l.b);
        let r = a.shape()[0];
        let delta = kernels::gemm(out_f, r, in_f, b.data(), a.data(), false);
        let w = store.value(lin.weight);
        let new: Vec<f32> = w.data().iter().zip(&delta).map(|(&w, &d)| w + l.scaling * d).collect();
        let zero_b = Tensor::zeros(&[out_f, r]);
        store.set_value(lin.weight, Tensor::new(&[out_f, in_f], new)?)?;
        store.set_value(l.b, zero_b)?;
        store.set_trainable(l.a, false);
        store.set_trainable(l.b, false);
    }
    Ok(merged)
}

/// Closed-form LoRA parameter count for a standard block layout.
pub fn closed_form_count(embed_dim: usize, mlp_hidden: usize, depth: usize, cfg: &LoraConfig) -> usize {
    let per_layer: usize = cfg
        .targets
        .iter()
        .map(|t| match t {
            LoraTarget::Query | LoraTarget::Value => 2 * embed_dim * cfg.rank,
            LoraTarget::MlpFc1 | LoraTarget::MlpFc2 => cfg.rank * (embed_dim + mlp_hidden),
        })
        .sum();
    depth * per_layer
}
