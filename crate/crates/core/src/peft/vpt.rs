//! Deep visual prompt tuning: a fresh block of learnable tokens per layer.

use serde::{Deserialize, Serialize};

use crate::backbone::VitBackbone;
use crate::error::{config_err, ModelError};
use crate::nn::Forward;
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Var;

pub const VPT_INIT_BOUND: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VptConfig {
    pub prompts_per_layer: usize,
}

impl Default for VptConfig {
    fn default() -> Self {
        Self { prompts_per_layer: 100 }
    }
}

#[derive(Clone, Debug)]
pub struct VptPrompts {
    /// `[P, d]` per layer.
    pub prompts: Vec<ParamId>,
    pub per_layer: usize,
}

impl VptPrompts {
    /// Prompts of layer `layer` (0-based) broadcast to `[batch, P, d]`.
    pub fn layer_prompts(&self, f: &mut Forward, layer: usize, batch: usize) -> Result<Var, ModelError> {
        let p = f.param(self.prompts[layer]);
        let d = f.graph.shape(p)[1];
        let p = f.graph.reshape(p, &[1, self.per_layer, d])?;
        Ok(f.graph.broadcast_to(p, &[batch, self.per_layer, d])?)
    }
}

/// Adds `prompts_per_layer × d` prompts before every layer. Returns the
/// number of parameters added.
pub fn attach_vpt(backbone: &mut VitBackbone, store: &mut ParamStore, cfg: &VptConfig) -> Result<usize, ModelError> {
    if cfg.prompts_per_layer == 0 {
        return Err(config_err("prompts_per_layer must be positive"));
    }
    if backbone.vpt.is_some() {
        return Err(ModelError::Attachment("VPT already attached".into()));
    }
    let d = backbone.cfg.embed_dim;
    let prompts = (0..backbone.cfg.depth)
        .map(|l| {
            store.add(
                format!("vpt.prompts.{l}"),
                &[cfg.prompts_per_layer, d],
                ParamGroup::Vpt,
                Init::Uniform(VPT_INIT_BOUND),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    backbone.vpt = Some(VptPrompts { prompts, per_layer: cfg.prompts_per_layer });
    Ok(backbone.cfg.depth * cfg.prompts_per_layer * d)
}
