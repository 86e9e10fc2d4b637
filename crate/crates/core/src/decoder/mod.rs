//! Segmentation heads and the multi-scale neck.
//!
//! `linear` and `fcn` read the final tapped map only; `upernet` and `unet`
//! read the four-level pyramid. Every head returns logits `[B, K, H, W]` at
//! the input extent.

pub mod neck;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, ModelError};
use crate::nn::{Conv2d, ConvBnRelu, ConvTranspose2d, Forward, LayerNorm};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Var;

pub use neck::{pyramid_widths, AdapterNeck, FeaturePyramid, Neck};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Linear,
    Fcn,
    Upernet,
    Unet,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 4] = [DecoderKind::Linear, DecoderKind::Fcn, DecoderKind::Upernet, DecoderKind::Unet];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Linear => "linear",
            DecoderKind::Fcn => "fcn",
            DecoderKind::Upernet => "upernet",
            DecoderKind::Unet => "unet",
        }
    }

    pub fn needs_pyramid(self) -> bool {
        matches!(self, DecoderKind::Upernet | DecoderKind::Unet)
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err(format!("unknown decoder kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub num_classes: usize,
    pub fcn_width: usize,
    pub upernet_width: usize,
    pub unet_widths: Vec<usize>,
    pub ppm_scales: Vec<usize>,
}

impl DecoderConfig {
    pub fn new(kind: DecoderKind, num_classes: usize) -> Self {
        Self {
            kind,
            num_classes,
            fcn_width: 128,
            upernet_width: 256,
            unet_widths: vec![256, 128, 64, 32],
            ppm_scales: vec![1, 2, 3, 6],
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(config_err(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        match self.kind {
            DecoderKind::Fcn if !patch_size.is_power_of_two() || patch_size < 2 => {
                Err(config_err(format!("fcn needs a power-of-two patch size, got {patch_size}")))
            }
            DecoderKind::Fcn if self.fcn_width == 0 => Err(config_err("fcn_width must be positive")),
            DecoderKind::Upernet if self.upernet_width == 0 || self.ppm_scales.is_empty() || self.ppm_scales.contains(&0) => {
                Err(config_err("upernet needs a positive width and positive pooling scales"))
            }
            DecoderKind::Unet if self.unet_widths.len() != 4 || self.unet_widths.contains(&0) => {
                Err(config_err("unet needs four positive widths"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FcnBlock {
    pub up: ConvTranspose2d,
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct UperNetHead {
    pub ppm: Vec<(usize, ConvBnRelu)>,
    pub bottleneck: ConvBnRelu,
    pub lateral: Vec<ConvBnRelu>,
    pub fpn: Vec<ConvBnRelu>,
    pub fuse: ConvBnRelu,
    pub classifier: Conv2d,
}

#[derive(Clone, Debug)]
pub struct UNetHead {
    /// Two conv-BN-ReLU units per stage, deepest stage first.
    pub stages: Vec<(ConvBnRelu, ConvBnRelu)>,
    pub final_conv: ConvBnRelu,
    pub classifier: Conv2d,
}

#[derive(Clone, Debug)]
pub enum Head {
    Linear(ConvTranspose2d),
    Fcn { blocks: Vec<FcnBlock>, classifier: Conv2d },
    UperNet(Box<UperNetHead>),
    UNet(Box<UNetHead>),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub head: Head,
}

/// What a head may consume.
pub struct DecoderInput<'p> {
    pub final_map: Var,
    pub pyramid: Option<&'p FeaturePyramid>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, embed_dim: usize, patch_size: usize) -> Result<Self, ModelError> {
        cfg.validate(patch_size)?;
        let (g, k) = (ParamGroup::Decoder, cfg.num_classes);
        let head = match cfg.kind {
            DecoderKind::Linear => Head::Linear(ConvTranspose2d::new(store, "decoder.linear", embed_dim, k, patch_size, g)?),
            DecoderKind::Fcn => {
                let n = patch_size.trailing_zeros() as usize;
                let w = cfg.fcn_width;
                let blocks = (0..n)
                    .map(|i| {
                        let name = format!("decoder.fcn.{i}");
                        let cin = if i == 0 { embed_dim } else { w };
                        Ok(FcnBlock {
                            up: ConvTranspose2d::new(store, &format!("{name}.up"), cin, w, 2, g)?,
                            conv: Conv2d::new(store, &format!("{name}.conv"), w, w, 3, 1, 1, true, g)?,
                            norm: LayerNorm::new(store, &format!("{name}.norm"), w, g)?,
                        })
                    })
                    .collect::<Result<Vec<_>, ModelError>>()?;
                let classifier = Conv2d::new(store, "decoder.fcn.classifier", w, k, 1, 1, 0, true, g)?;
                Head::Fcn { blocks, classifier }
            }
            DecoderKind::Upernet => {
                let widths = pyramid_widths(embed_dim);
                let c = cfg.upernet_width;
                let ppm = cfg
                    .ppm_scales
                    .iter()
                    .map(|&s| Ok((s, ConvBnRelu::new(store, &format!("decoder.ppm.{s}"), widths[3], c, 1, g)?)))
                    .collect::<Result<Vec<_>, ModelError>>()?;
                let bottleneck =
                    ConvBnRelu::new(store, "decoder.ppm.bottleneck", widths[3] + c * cfg.ppm_scales.len(), c, 3, g)?;
                let lateral = (0..3)
                    .map(|i| ConvBnRelu::new(store, &format!("decoder.fpn.lateral.{i}"), widths[i], c, 1, g))
                    .collect::<Result<Vec<_>, _>>()?;
                let fpn = (0..3)
                    .map(|i| ConvBnRelu::new(store, &format!("decoder.fpn.out.{i}"), c, c, 3, g))
                    .collect::<Result<Vec<_>, _>>()?;
                let fuse = ConvBnRelu::new(store, "decoder.fpn.fuse", 4 * c, c, 3, g)?;
                let classifier = Conv2d::new(store, "decoder.classifier", c, k, 1, 1, 0, true, g)?;
                Head::UperNet(Box::new(UperNetHead { ppm, bottleneck, lateral, fpn, fuse, classifier }))
            }
            DecoderKind::Unet => {
                let widths = pyramid_widths(embed_dim);
                let u = &cfg.unet_widths;
                // stage i fuses the running map with pyramid level 2 - i
                let mut stages = Vec::with_capacity(3);
                let mut cin = widths[3];
                for i in 0..3 {
                    let skip = widths[2 - i];
                    let name = format!("decoder.unet.{i}");
                    stages.push((
                        ConvBnRelu::new(store, &format!("{name}.0"), cin + skip, u[i], 3, g)?,
                        ConvBnRelu::new(store, &format!("{name}.1"), u[i], u[i], 3, g)?,
                    ));
                    cin = u[i];
                }
                let final_conv = ConvBnRelu::new(store, "decoder.unet.final", cin, u[3], 3, g)?;
                let classifier = Conv2d::new(store, "decoder.classifier", u[3], k, 1, 1, 0, true, g)?;
                Head::UNet(Box::new(UNetHead { stages, final_conv, classifier }))
            }
        };
        Ok(Self { cfg, head })
    }

    /// Logits `[B, K, height, width]`.
    pub fn forward(&self, f: &mut Forward, input: DecoderInput, extent: (usize, usize)) -> Result<Var, ModelError> {
        let (h, w) = extent;
        let pyramid = || {
            input
                .pyramid
                .ok_or_else(|| config_err(format!("{} decoder needs a feature pyramid", self.cfg.kind)))
        };
        let logits = match &self.head {
            Head::Linear(convt) => convt.forward(f, input.final_map)?,
            Head::Fcn { blocks, classifier } => {
                let mut x = input.final_map;
                for b in blocks {
                    x = b.up.forward(f, x)?;
                    x = b.conv.forward(f, x)?;
                    x = b.norm.forward_channels(f, x)?;
                    x = f.graph.gelu(x);
                }
                classifier.forward(f, x)?
            }
            Head::UperNet(u) => {
                let p = pyramid()?;
                let y = upernet_forward(f, u, &p.maps)?;
                resize(f, y, h, w)?
            }
            Head::UNet(u) => {
                let p = pyramid()?;
                let mut x = p.maps[3];
                for (i, (c0, c1)) in u.stages.iter().enumerate() {
                    let skip = p.maps[2 - i];
                    let s = f.graph.shape(skip).to_vec();
                    let up = resize(f, x, s[2], s[3])?;
                    let cat = f.graph.concat(&[up, skip], 1)?;
                    x = c0.forward(f, cat)?;
                    x = c1.forward(f, x)?;
                }
                let x = resize(f, x, h, w)?;
                let x = u.final_conv.forward(f, x)?;
                u.classifier.forward(f, x)?
            }
        };
        let s = f.graph.shape(logits).to_vec();
        if (s[2], s[3]) != extent {
            return Err(ModelError::Extent {
                got: (s[2], s[3]),
                reason: format!("decoder output does not match input extent {h}x{w}"),
            });
        }
        Ok(logits)
    }
}

fn resize(f: &mut Forward, x: Var, h: usize, w: usize) -> Result<Var, ModelError> {
    let s = f.graph.shape(x);
    if (s[2], s[3]) == (h, w) {
        return Ok(x);
    }
    Ok(f.graph.bilinear(x, h, w)?)
}

fn upernet_forward(f: &mut Forward, u: &UperNetHead, maps: &[Var]) -> Result<Var, ModelError> {
    let top = maps[3];
    let s = f.graph.shape(top).to_vec();
    let (th, tw) = (s[2], s[3]);
    let mut branches = vec![top];
    for (scale, unit) in &u.ppm {
        // pooling scales larger than the map degrade to the map itself
        let (ph, pw) = ((*scale).min(th), (*scale).min(tw));
        let pooled = f.graph.adaptive_avg_pool2d(top, ph, pw)?;
        let y = unit.forward(f, pooled)?;
        branches.push(resize(f, y, th, tw)?);
    }
    let cat = f.graph.concat(&branches, 1)?;
    let mut lvl = vec![u.bottleneck.forward(f, cat)?];
    // top-down pathway, coarse to fine
    for i in (0..3).rev() {
        let lat = u.lateral[i].forward(f, maps[i])?;
        let s = f.graph.shape(lat).to_vec();
        let prev = *lvl.last().unwrap();
        let up = resize(f, prev, s[2], s[3])?;
        lvl.push(f.graph.add(lat, up)?);
    }
    // lvl = [top, level2, level1, level0]
    let finest = lvl[3];
    let s = f.graph.shape(finest).to_vec();
    let mut outs = Vec::with_capacity(4);
    for (j, &m) in lvl[1..].iter().enumerate() {
        let i = 2 - j;
        let y = u.fpn[i].forward(f, m)?;
        outs.push(resize(f, y, s[2], s[3])?);
    }
    outs.push(resize(f, lvl[0], s[2], s[3])?);
    let cat = f.graph.concat(&outs, 1)?;
    let y = u.fuse.forward(f, cat)?;
    Ok(u.classifier.forward(f, y)?)
}

/// Exact parameter count of a head for the given encoder width and patch
/// size, computed on a shape-only store.
pub fn estimate_decoder_params(cfg: &DecoderConfig, embed_dim: usize, patch_size: usize) -> Result<usize, ModelError> {
    let mut store = ParamStore::meta();
    Decoder::new(&mut store, cfg.clone(), embed_dim, patch_size)?;
    Ok(store.count(Some(ParamGroup::Decoder)))
}
