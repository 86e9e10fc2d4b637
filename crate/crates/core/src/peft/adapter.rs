//! Simplified ViT-Adapter.
//!
//! A convolutional stem produces a spatial prior at strides 8, 16 and 32.
//! Before selected transformer layers a cross-attention injector lets the
//! patch tokens attend to the prior; the residual is scaled by a
//! zero-initialized per-channel gain, so attachment leaves the token stream
//! untouched. After the last layer one extractor lets the prior attend to
//! the final tokens and returns a three-level pyramid.

use serde::{Deserialize, Serialize};

use crate::backbone::{Attention, VitBackbone};
use crate::error::{config_err, ModelError};
use crate::nn::{Conv2d, Forward, LayerNorm, Linear};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Var;

pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitAdapterConfig {
    /// Stem widths at strides 8, 16 and 32.
    pub widths: Vec<usize>,
    /// 1-based layers preceded by an injector; `None` means the tap layers.
    pub injection_layers: Option<Vec<usize>>,
    pub ffn_ratio: f64,
}

impl Default for VitAdapterConfig {
    fn default() -> Self {
        Self { widths: vec![64, 128, 256], injection_layers: None, ffn_ratio: 0.25 }
    }
}

#[derive(Clone, Debug)]
pub struct Injector {
    pub layer: usize,
    pub query_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub attn: Attention,
    pub gamma: ParamId,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub query_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Spatial prior of one forward pass.
#[derive(Clone, Debug)]
pub struct SpatialPrior {
    /// All three levels flattened and concatenated, `[B, T, d]`.
    pub tokens: Var,
    pub extents: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct VitAdapter {
    pub cfg: VitAdapterConfig,
    pub stem: Vec<Conv2d>,
    pub level_proj: Vec<Conv2d>,
    pub injectors: Vec<Injector>,
    pub extractor: Extractor,
    pub embed_dim: usize,
}

pub(crate) fn map_to_tokens(f: &mut Forward, m: Var) -> Result<Var, ModelError> {
    let s = f.graph.shape(m).to_vec();
    let t = f.graph.reshape(m, &[s[0], s[1], s[2] * s[3]])?;
    Ok(f.graph.permute(t, &[0, 2, 1])?)
}

pub(crate) fn tokens_to_map(f: &mut Forward, t: Var, h: usize, w: usize) -> Result<Var, ModelError> {
    let s = f.graph.shape(t).to_vec();
    let m = f.graph.permute(t, &[0, 2, 1])?;
    Ok(f.graph.reshape(m, &[s[0], s[2], h, w])?)
}

impl VitAdapter {
    fn new(store: &mut ParamStore, backbone: &VitBackbone, cfg: VitAdapterConfig) -> Result<Self, ModelError> {
        let bcfg = &backbone.cfg;
        let (d, g) = (bcfg.embed_dim, ParamGroup::Adapter);
        if cfg.widths.len() != 3 || cfg.widths.contains(&0) {
            return Err(config_err(format!("adapter needs three positive pyramid widths, got {:?}", cfg.widths)));
        }
        if !(cfg.ffn_ratio > 0.0) {
            return Err(config_err("adapter ffn_ratio must be positive"));
        }
        let (h, w) = bcfg.image_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(config_err(format!("adapter pyramid needs image extent divisible by 32, got {h}x{w}")));
        }
        let layers = cfg.injection_layers.clone().unwrap_or_else(|| bcfg.tap_layers.clone());
        if layers.is_empty()
            || layers.windows(2).any(|p| p[0] >= p[1])
            || layers.iter().any(|&l| l == 0 || l > bcfg.depth)
        {
            return Err(config_err(format!("injection layers {layers:?} must be increasing within [1, {}]", bcfg.depth)));
        }
        let c_in = bcfg.band_ids.len();
        let [w8, w16, w32] = [cfg.widths[0], cfg.widths[1], cfg.widths[2]];
        let stem_plan = [(c_in, w8), (w8, w8), (w8, w8), (w8, w16), (w16, w32)];
        let stem = stem_plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| Conv2d::new(store, &format!("adapter.spm.conv{i}"), ci, co, 3, 2, 1, true, g))
            .collect::<Result<Vec<_>, _>>()?;
        let level_proj = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("adapter.spm.proj{i}"), c, d, 1, 1, 0, true, g))
            .collect::<Result<Vec<_>, _>>()?;
        let injectors = layers
            .iter()
            .map(|&layer| {
                let name = format!("adapter.injectors.{layer}");
                Ok(Injector {
                    layer,
                    query_norm: LayerNorm::new(store, &format!("{name}.query_norm"), d, g)?,
                    feat_norm: LayerNorm::new(store, &format!("{name}.feat_norm"), d, g)?,
                    attn: Attention::new(store, &format!("{name}.attn"), d, bcfg.heads, g)?,
                    gamma: store.add(format!("{name}.gamma"), &[d], g, Init::Zeros)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let hidden = ((d as f64 * cfg.ffn_ratio).round() as usize).max(1);
        let extractor = Extractor {
            query_norm: LayerNorm::new(store, "adapter.extractor.query_norm", d, g)?,
            feat_norm: LayerNorm::new(store, "adapter.extractor.feat_norm", d, g)?,
            attn: Attention::new(store, "adapter.extractor.attn", d, bcfg.heads, g)?,
            ffn_norm: LayerNorm::new(store, "adapter.extractor.ffn_norm", d, g)?,
            fc1: Linear::new(store, "adapter.extractor.fc1", d, hidden, g)?,
            fc2: Linear::new(store, "adapter.extractor.fc2", hidden, d, g)?,
        };
        Ok(Self { cfg, stem, level_proj, injectors, extractor, embed_dim: d })
    }

    pub fn spatial_prior(&self, f: &mut Forward, image: Var) -> Result<SpatialPrior, ModelError> {
        let mut x = image;
        let mut levels = Vec::with_capacity(3);
        for (i, conv) in self.stem.iter().enumerate() {
            x = conv.forward(f, x)?;
            x = f.graph.relu(x);
            if i >= 2 {
                levels.push(x);
            }
        }
        let mut tokens = Vec::with_capacity(3);
        let mut extents = Vec::with_capacity(3);
        for (lvl, proj) in levels.into_iter().zip(&self.level_proj) {
            let m = proj.forward(f, lvl)?;
            let s = f.graph.shape(m);
            extents.push((s[2], s[3]));
            tokens.push(map_to_tokens(f, m)?);
        }
        let tokens = f.graph.concat(&tokens, 1)?;
        Ok(SpatialPrior { tokens, extents })
    }

    /// Applies the injector registered before `layer` (1-based), if any.
    pub fn inject(&self, f: &mut Forward, layer: usize, x: Var, prior: Var) -> Result<Var, ModelError> {
        let Some(inj) = self.injectors.iter().find(|i| i.layer == layer) else { return Ok(x) };
        let q = inj.query_norm.forward(f, x)?;
        let kv = inj.feat_norm.forward(f, prior)?;
        let a = inj.attn.forward(f, q, kv)?;
        let gamma = f.param(inj.gamma);
        let a = f.graph.mul(a, gamma)?;
        Ok(f.graph.add(x, a)?)
    }

    /// Pyramid `[B, d, H/s, W/s]` for `s` in 8, 16, 32.
    pub fn extract(&self, f: &mut Forward, prior: SpatialPrior, x: Var, grid: (usize, usize)) -> Result<Vec<Var>, ModelError> {
        let e = &self.extractor;
        let q = e.query_norm.forward(f, prior.tokens)?;
        let kv = e.feat_norm.forward(f, x)?;
        let a = e.attn.forward(f, q, kv)?;
        let mut c = f.graph.add(prior.tokens, a)?;
        let h = e.ffn_norm.forward(f, c)?;
        let h = e.fc1.forward(f, h)?;
        let h = f.graph.gelu(h);
        let h = e.fc2.forward(f, h)?;
        c = f.graph.add(c, h)?;

        let vit_map = tokens_to_map(f, x, grid.0, grid.1)?;
        let mut out = Vec::with_capacity(3);
        let mut start = 0;
        for &(lh, lw) in &prior.extents {
            let t = f.graph.slice(c, 1, start, lh * lw)?;
            start += lh * lw;
            let m = tokens_to_map(f, t, lh, lw)?;
            let v = f.graph.bilinear(vit_map, lh, lw)?;
            out.push(f.graph.add(m, v)?);
        }
        Ok(out)
    }
}

/// Attaches the adapter branch. Returns the number of parameters added.
pub fn attach_vit_adapter(backbone: &mut VitBackbone, store: &mut ParamStore, cfg: &VitAdapterConfig) -> Result<usize, ModelError> {
    if backbone.adapter.is_some() {
        return Err(ModelError::Attachment("ViT-Adapter already attached".into()));
    }
    let before = store.count(Some(ParamGroup::Adapter));
    let adapter = VitAdapter::new(store, backbone, cfg.clone())?;
    backbone.adapter = Some(adapter);
    Ok(store.count(Some(ParamGroup::Adapter)) - before)
}
