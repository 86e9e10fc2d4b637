//! Vision-Transformer encoder with band-adaptive patch embedding.
//!
//! The patch embedding keeps one `d × p × p` kernel slab per spectral band,
//! so any subset of the configured bands can be embedded by selecting the
//! matching slabs. With normalized inputs, leaving a band out is the same as
//! feeding its mean (zero). There is no class token; all taps are patch
//! tokens reshaped onto the patch grid.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, ModelError};
use crate::nn::{Forward, LayerNorm, Linear};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::peft::adapter::VitAdapter;
use crate::peft::vpt::VptPrompts;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: f64,
    pub band_ids: Vec<String>,
    /// `(height, width)` in pixels, both divisible by the patch size.
    pub image_size: (usize, usize),
    /// 1-based layer indices whose outputs feed the decoder.
    pub tap_layers: Vec<usize>,
    pub metadata_enabled: bool,
}

/// Sentinel-2 band names shared by the presets and the synthetic generator.
pub const PRITHVI_BANDS: [&str; 6] = ["B02", "B03", "B04", "B8A", "B11", "B12"];

impl BackboneConfig {
    pub fn new(embed_dim: usize, depth: usize, heads: usize, patch_size: usize, bands: &[&str], image_size: (usize, usize)) -> Self {
        Self {
            embed_dim,
            depth,
            heads,
            patch_size,
            mlp_ratio: 4.0,
            band_ids: bands.iter().map(|b| b.to_string()).collect(),
            image_size,
            tap_layers: default_taps(depth),
            metadata_enabled: false,
        }
    }

    /// ViT-B/16 at 224 px on the six HLS bands.
    pub fn vit_b16() -> Self {
        Self::new(768, 12, 12, 16, &PRITHVI_BANDS, (224, 224))
    }

    /// ViT-L/16 at 224 px on the six HLS bands.
    pub fn vit_l16() -> Self {
        Self::new(1024, 24, 16, 16, &PRITHVI_BANDS, (224, 224))
    }

    /// ViT-B/8 at 224 px on ten Sentinel-2 bands.
    pub fn vit_b8() -> Self {
        let bands = ["B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12"];
        Self::new(768, 12, 12, 8, &bands, (224, 224))
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 || self.patch_size == 0 {
            return Err(config_err("embed_dim, depth, heads and patch_size must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(config_err(format!("heads {} must divide embed_dim {}", self.heads, self.embed_dim)));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(config_err("mlp_ratio must be positive"));
        }
        if self.band_ids.is_empty() {
            return Err(config_err("at least one band is required"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.band_ids.iter().find(|b| !seen.insert(b.as_str())) {
            return Err(config_err(format!("duplicate band id '{dup}'")));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(config_err(format!("image size {h}x{w} not divisible by patch size {}", self.patch_size)));
        }
        if self.tap_layers.len() != 4 {
            return Err(config_err("exactly four tap layers are required"));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) || self.tap_layers[0] == 0 {
            return Err(config_err(format!("tap layers {:?} must be strictly increasing from 1", self.tap_layers)));
        }
        if *self.tap_layers.last().unwrap() != self.depth {
            return Err(config_err(format!("last tap layer must equal depth {}", self.depth)));
        }
        Ok(())
    }
}

/// `round(L · {¼, ½, ¾, 1})`.
pub fn default_taps(depth: usize) -> Vec<usize> {
    [0.25, 0.5, 0.75, 1.0].iter().map(|f| (depth as f64 * f).round() as usize).collect()
}

/// Geolocation and acquisition time of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub lat: f64,
    pub lon: f64,
    pub day_of_year: f64,
    pub year: i32,
}

pub const METADATA_FEATURES: usize = 7;

impl SampleMetadata {
    /// Sine–cosine features of latitude, longitude (period 360°) and day of
    /// year (period 365.25), followed by a linear year term.
    pub fn features(&self) -> Result<[f64; METADATA_FEATURES], ModelError> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(ModelError::Metadata(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(ModelError::Metadata(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        if !(0.0..=366.0).contains(&self.day_of_year) {
            return Err(ModelError::Metadata(format!("day of year {} outside [0, 366]", self.day_of_year)));
        }
        let tau = std::f64::consts::TAU;
        let lat = tau * self.lat / 360.0;
        let lon = tau * self.lon / 360.0;
        let doy = tau * self.day_of_year / 365.25;
        Ok([
            lat.sin(),
            lat.cos(),
            lon.sin(),
            lon.cos(),
            doy.sin(),
            doy.cos(),
            (self.year as f64 - 2000.0) / 25.0,
        ])
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub band_slabs: Vec<(String, ParamId)>,
    pub bias: ParamId,
    pub positions: ParamId,
}

impl PatchEmbedding {
    fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self, ModelError> {
        let (d, p) = (cfg.embed_dim, cfg.patch_size);
        let std = (1.0 / (cfg.band_ids.len() * p * p) as f64).sqrt();
        let band_slabs = cfg
            .band_ids
            .iter()
            .map(|b| {
                store
                    .add(format!("backbone.patch_embed.bands.{b}"), &[d, 1, p, p], ParamGroup::Encoder, Init::Normal(std))
                    .map(|id| (b.clone(), id))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            band_slabs,
            bias: store.add("backbone.patch_embed.bias", &[d], ParamGroup::Encoder, Init::Zeros)?,
            positions: store.add("backbone.pos_embed", &[cfg.num_patches(), d], ParamGroup::Encoder, Init::Normal(0.02))?,
        })
    }

    pub fn slab(&self, band: &str) -> Result<ParamId, ModelError> {
        self.band_slabs
            .iter()
            .find(|(b, _)| b == band)
            .map(|(_, id)| *id)
            .ok_or_else(|| ModelError::UnknownBand(band.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct MetadataEmbedding {
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, group: ParamGroup) -> Result<Self, ModelError> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, group)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, group)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, group)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, group)?,
            heads,
        })
    }

    fn split_heads(&self, f: &mut Forward, x: Var) -> Result<Var, ModelError> {
        let s = f.graph.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let x = f.graph.reshape(x, &[b, t, self.heads, dh])?;
        let x = f.graph.permute(x, &[0, 2, 1, 3])?;
        Ok(f.graph.reshape(x, &[b * self.heads, t, dh])?)
    }

    /// Multi-head attention of `queries: [B,Tq,d]` over `context: [B,Tk,d]`.
    pub fn forward(&self, f: &mut Forward, queries: Var, context: Var) -> Result<Var, ModelError> {
        let s = f.graph.shape(queries).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(f, queries)?;
        let k = self.k.forward(f, context)?;
        let v = self.v.forward(f, context)?;
        let q = self.split_heads(f, q)?;
        let k = self.split_heads(f, k)?;
        let v = self.split_heads(f, v)?;
        let scores = f.graph.matmul(q, k, true)?;
        let scores = f.graph.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = f.graph.softmax(scores)?;
        let out = f.graph.matmul(attn, v, false)?;
        let out = f.graph.reshape(out, &[b, self.heads, t, dh])?;
        let out = f.graph.permute(out, &[0, 2, 1, 3])?;
        let out = f.graph.reshape(out, &[b, t, d])?;
        Ok(self.proj.forward(f, out)?)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, i: usize, cfg: &BackboneConfig) -> Result<Self, ModelError> {
        let (d, g) = (cfg.embed_dim, ParamGroup::Encoder);
        let name = format!("backbone.blocks.{i}");
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.heads, g)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, cfg.mlp_hidden(), g)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_hidden(), d, g)?,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, ModelError> {
        let h = self.norm1.forward(f, x)?;
        let h = self.attn.forward(f, h, h)?;
        let x = f.graph.add(x, h)?;
        let h = self.norm2.forward(f, x)?;
        let h = self.fc1.forward(f, h)?;
        let h = f.graph.gelu(h);
        let h = self.fc2.forward(f, h)?;
        Ok(f.graph.add(x, h)?)
    }
}

/// Encoder outputs consumed by the neck and decoders.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Patch tokens `[B, N, d]` at each tap layer.
    pub tokens: Vec<Var>,
    /// The same taps as `[B, d, H/p, W/p]` maps.
    pub maps: Vec<Var>,
    /// Stride-8/16/32 maps from a ViT-Adapter, when attached.
    pub adapter_pyramid: Option<Vec<Var>>,
}

impl EncoderOutput {
    pub fn last_map(&self) -> Var {
        *self.maps.last().expect("four taps")
    }
}

pub struct VitBackbone {
    pub cfg: BackboneConfig,
    pub patch_embed: PatchEmbedding,
    pub metadata: Option<MetadataEmbedding>,
    pub blocks: Vec<Block>,
    pub vpt: Option<VptPrompts>,
    pub adapter: Option<VitAdapter>,
}

impl VitBackbone {
    pub fn new(cfg: BackboneConfig, store: &mut ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let patch_embed = PatchEmbedding::new(store, &cfg)?;
        let metadata = if cfg.metadata_enabled {
            Some(MetadataEmbedding {
                proj: Linear::new(store, "backbone.metadata.proj", METADATA_FEATURES, cfg.embed_dim, ParamGroup::Encoder)?,
            })
        } else {
            None
        };
        let blocks = (0..cfg.depth).map(|i| Block::new(store, i, &cfg)).collect::<Result<_, _>>()?;
        Ok(Self { cfg, patch_embed, metadata, blocks, vpt: None, adapter: None })
    }

    fn check_bands(&self, bands: &[String]) -> Result<(), ModelError> {
        if bands.is_empty() {
            return Err(config_err("empty band list"));
        }
        let mut seen = std::collections::HashSet::new();
        for b in bands {
            if !self.cfg.band_ids.contains(b) {
                return Err(ModelError::UnknownBand(b.clone()));
            }
            if !seen.insert(b) {
                return Err(config_err(format!("band '{b}' given twice")));
            }
        }
        Ok(())
    }

    /// `image: [B, C, H, W]` with one channel per entry of `bands` →
    /// tokens `[B, N, d]`.
    pub fn embed_patches(&self, f: &mut Forward, image: Var, bands: &[String]) -> Result<Var, ModelError> {
        self.check_bands(bands)?;
        let s = f.graph.shape(image).to_vec();
        if s.len() != 4 || s[1] != bands.len() {
            return Err(ModelError::Extent {
                got: (s.get(2).copied().unwrap_or(0), s.get(3).copied().unwrap_or(0)),
                reason: format!("expected [B, {}, H, W], got {s:?}", bands.len()),
            });
        }
        let (h, w, p) = (s[2], s[3], self.cfg.patch_size);
        if h % p != 0 || w % p != 0 {
            return Err(ModelError::Extent { got: (h, w), reason: format!("not divisible by patch size {p}; pad first") });
        }
        if (h, w) != self.cfg.image_size {
            return Err(ModelError::Extent {
                got: (h, w),
                reason: format!("positional table is sized for {:?}", self.cfg.image_size),
            });
        }
        let slabs = bands
            .iter()
            .map(|b| self.patch_embed.slab(b).map(|id| f.param(id)))
            .collect::<Result<Vec<_>, _>>()?;
        let kernel = if slabs.len() == 1 { slabs[0] } else { f.graph.concat(&slabs, 1)? };
        let y = f.graph.conv2d(image, kernel, p, 0)?;
        let bias = f.param(self.patch_embed.bias);
        let y = f.graph.bias_add(y, bias, 1)?;
        let (b, d, n) = (s[0], self.cfg.embed_dim, (h / p) * (w / p));
        let y = f.graph.reshape(y, &[b, d, n])?;
        let y = f.graph.permute(y, &[0, 2, 1])?;
        let pos = f.param(self.patch_embed.positions);
        Ok(f.graph.add(y, pos)?)
    }

    /// Metadata vector `[d]` for one sample; all zeros when disabled.
    pub fn encode_metadata(&self, store: &ParamStore, meta: &SampleMetadata) -> Result<Vec<f32>, ModelError> {
        let feats = meta.features()?;
        let Some(m) = &self.metadata else {
            return Ok(vec![0.0; self.cfg.embed_dim]);
        };
        let mut f = Forward::new(store, false);
        let x = f.input(Tensor::new(&[1, METADATA_FEATURES], feats.iter().map(|&v| v as f32).collect())?);
        let y = m.proj.forward(&mut f, x)?;
        Ok(f.graph.value(y).to_vec())
    }

    fn metadata_tokens(&self, f: &mut Forward, meta: &[SampleMetadata]) -> Result<Option<Var>, ModelError> {
        let Some(m) = &self.metadata else { return Ok(None) };
        let mut feats = Vec::with_capacity(meta.len() * METADATA_FEATURES);
        for s in meta {
            feats.extend(s.features()?.iter().map(|&v| v as f32));
        }
        let x = f.input(Tensor::new(&[meta.len(), 1, METADATA_FEATURES], feats)?);
        Ok(Some(m.proj.forward(f, x)?))
    }

    /// Runs the transformer and returns the four tapped feature maps.
    ///
    /// `meta` must hold one entry per batch item when metadata embedding is
    /// enabled and is ignored otherwise.
    pub fn forward_features(
        &self,
        f: &mut Forward,
        image: Var,
        bands: &[String],
        meta: Option<&[SampleMetadata]>,
    ) -> Result<EncoderOutput, ModelError> {
        let mut x = self.embed_patches(f, image, bands)?;
        let batch = f.graph.shape(x)[0];
        if self.metadata.is_some() {
            let meta = meta.filter(|m| m.len() == batch).ok_or_else(|| {
                ModelError::Metadata(format!("metadata embedding enabled: need {batch} metadata records"))
            })?;
            if let Some(m) = self.metadata_tokens(f, meta)? {
                x = f.graph.add(x, m)?;
            }
        }
        let (gh, gw) = self.cfg.grid();
        let n = gh * gw;
        let mut spatial = match &self.adapter {
            Some(a) => Some(a.spatial_prior(f, image)?),
            None => None,
        };
        let mut tokens = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = i + 1;
            if let (Some(a), Some(sp)) = (&self.adapter, spatial.as_ref()) {
                x = a.inject(f, layer, x, sp.tokens)?;
            }
            x = match &self.vpt {
                Some(v) => {
                    let p = v.layer_prompts(f, i, batch)?;
                    let joined = f.graph.concat(&[p, x], 1)?;
                    let out = block.forward(f, joined)?;
                    f.graph.slice(out, 1, v.per_layer, n)?
                }
                None => block.forward(f, x)?,
            };
            if self.cfg.tap_layers.contains(&layer) {
                tokens.push(x);
            }
        }
        let adapter_pyramid = match (&self.adapter, spatial.take()) {
            (Some(a), Some(sp)) => Some(a.extract(f, sp, x, (gh, gw))?),
            _ => None,
        };
        let d = self.cfg.embed_dim;
        let maps = tokens
            .iter()
            .map(|&t| {
                let m = f.graph.permute(t, &[0, 2, 1])?;
                f.graph.reshape(m, &[batch, d, gh, gw])
            })
            .collect::<Result<_, _>>()?;
        Ok(EncoderOutput { tokens, maps, adapter_pyramid })
    }

    /// Mean of the final-layer patch tokens, `[B, d]`.
    pub fn image_embedding(&self, f: &mut Forward, image: Var, bands: &[String], meta: Option<&[SampleMetadata]>) -> Result<Var, ModelError> {
        let out = self.forward_features(f, image, bands, meta)?;
        let last = *out.tokens.last().expect("four taps");
        Ok(f.graph.mean_axis(last, 1)?)
    }

    /// The `q`, `k`, `v`, `proj`, `fc1`, `fc2` linears of every block.
    pub fn linears_mut(&mut self) -> impl Iterator<Item = (usize, &'static str, &mut Linear)> {
        self.blocks.iter_mut().enumerate().flat_map(|(i, b)| {
            [
                (i, "attn.q", &mut b.attn.q),
                (i, "attn.k", &mut b.attn.k),
                (i, "attn.v", &mut b.attn.v),
                (i, "attn.proj", &mut b.attn.proj),
                (i, "mlp.fc1", &mut b.fc1),
                (i, "mlp.fc2", &mut b.fc2),
            ]
        })
    }

    pub fn linears(&self) -> impl Iterator<Item = (usize, &'static str, &Linear)> {
        self.blocks.iter().enumerate().flat_map(|(i, b)| {
            [
                (i, "attn.q", &b.attn.q),
                (i, "attn.k", &b.attn.k),
                (i, "attn.v", &b.attn.v),
                (i, "attn.proj", &b.attn.proj),
                (i, "mlp.fc1", &b.fc1),
                (i, "mlp.fc2", &b.fc2),
            ]
        })
    }
}
