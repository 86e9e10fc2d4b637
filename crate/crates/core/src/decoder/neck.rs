//! Learned resampling from single-scale ViT maps to a four-level pyramid.

use crate::error::ModelError;
use crate::nn::{Conv2d, ConvTranspose2d, Forward};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{TensorError, Var};

/// Four maps at scales 4×, 2×, 1× and ½× of the patch grid.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub maps: Vec<Var>,
}

/// Channel widths of the pyramid levels for embedding width `d`.
pub fn pyramid_widths(embed_dim: usize) -> [usize; 4] {
    [(embed_dim / 4).max(1), (embed_dim / 2).max(1), embed_dim, embed_dim]
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub up4_a: ConvTranspose2d,
    pub up4_b: ConvTranspose2d,
    pub up2: ConvTranspose2d,
    pub down: Conv2d,
}

impl Neck {
    pub fn new(store: &mut ParamStore, embed_dim: usize) -> Result<Self, ModelError> {
        let [w0, w1, _, _] = pyramid_widths(embed_dim);
        let (d, g) = (embed_dim, ParamGroup::Neck);
        Ok(Self {
            up4_a: ConvTranspose2d::new(store, "neck.up4.0", d, w1, 2, g)?,
            up4_b: ConvTranspose2d::new(store, "neck.up4.1", w1, w0, 2, g)?,
            up2: ConvTranspose2d::new(store, "neck.up2", d, w1, 2, g)?,
            down: Conv2d::new(store, "neck.down", d, d, 3, 2, 1, true, g)?,
        })
    }

    /// Takes the four tapped maps `[B, d, h, w]`.
    pub fn forward(&self, f: &mut Forward, taps: &[Var]) -> Result<FeaturePyramid, ModelError> {
        if taps.len() != 4 {
            return Err(TensorError::Arity { op: "neck", expected: 4, got: taps.len() }.into());
        }
        let s0 = f.graph.shape(taps[0]).to_vec();
        for &t in &taps[1..] {
            let s = f.graph.shape(t).to_vec();
            if s != s0 {
                return Err(crate::tensor::mismatch("neck", &[&s0, &s], "tapped maps must share one extent").into());
            }
        }
        let m1 = self.up4_a.forward(f, taps[0])?;
        let m1 = f.graph.gelu(m1);
        let m1 = self.up4_b.forward(f, m1)?;
        let m2 = self.up2.forward(f, taps[1])?;
        let m4 = self.down.forward(f, taps[3])?;
        Ok(FeaturePyramid { maps: vec![m1, m2, taps[2], m4] })
    }
}

/// Maps the adapter's stride-8/16/32 pyramid onto the same four-level
/// layout as [`Neck`].
#[derive(Clone, Debug)]
pub struct AdapterNeck {
    pub up: ConvTranspose2d,
    pub lateral: Conv2d,
}

impl AdapterNeck {
    pub fn new(store: &mut ParamStore, embed_dim: usize) -> Result<Self, ModelError> {
        let [w0, w1, _, _] = pyramid_widths(embed_dim);
        let g = ParamGroup::Neck;
        Ok(Self {
            up: ConvTranspose2d::new(store, "neck.adapter.up", embed_dim, w0, 2, g)?,
            lateral: Conv2d::new(store, "neck.adapter.lateral", embed_dim, w1, 1, 1, 0, true, g)?,
        })
    }

    pub fn forward(&self, f: &mut Forward, levels: &[Var]) -> Result<FeaturePyramid, ModelError> {
        if levels.len() != 3 {
            return Err(TensorError::Arity { op: "adapter_neck", expected: 3, got: levels.len() }.into());
        }
        let m1 = self.up.forward(f, levels[0])?;
        let m2 = self.lateral.forward(f, levels[0])?;
        Ok(FeaturePyramid { maps: vec![m1, m2, levels[1], levels[2]] })
    }
}
