//! Layer building blocks and the forward-pass context.

use std::collections::HashMap;

use crate::params::{Init, ParamError, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Gradients, Graph, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// One forward pass over a parameter store.
///
/// Trainable parameters enter the graph as gradient-requiring leaves;
/// frozen ones enter as constants and never reach the tape.
pub struct Forward<'a> {
    pub graph: Graph<f32>,
    store: &'a ParamStore,
    leaves: HashMap<ParamId, Var>,
    pub training: bool,
    bn_batches: Vec<(BatchNorm2d, Var)>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            leaves: HashMap::new(),
            training,
            bn_batches: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), p.trainable && self.training);
        self.leaves.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor<f32>) -> Var {
        self.graph.constant(t)
    }

    /// Gradients for every trainable parameter used in this pass.
    pub fn param_grads(&self, grads: &Gradients<f32>) -> Vec<(ParamId, Tensor<f32>)> {
        let mut out: Vec<_> = self
            .leaves
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Running-statistic updates `(param, new value)` from training-mode
    /// batch norms in this pass.
    pub fn running_stat_updates(&self) -> Vec<(ParamId, Tensor<f32>)> {
        let mut out = Vec::new();
        for (bn, v) in &self.bn_batches {
            let Some((mean, var)) = self.graph.batch_stats(*v) else { continue };
            let s = self.graph.shape(*v);
            let count: usize = s[0] * s[2..].iter().product::<usize>();
            let unbias = if count > 1 { count as f32 / (count as f32 - 1.0) } else { 1.0 };
            let m = BN_MOMENTUM;
            let rm = self.store.value(bn.running_mean).data();
            let rv = self.store.value(bn.running_var).data();
            let new_m: Vec<f32> = rm.iter().zip(&mean).map(|(&r, &b)| (1.0 - m) * r + m * b).collect();
            let new_v: Vec<f32> = rv.iter().zip(&var).map(|(&r, &b)| (1.0 - m) * r + m * b * unbias).collect();
            let c = new_m.len();
            out.push((bn.running_mean, Tensor::new(&[c], new_m).expect("channel count")));
            out.push((bn.running_var, Tensor::new(&[c], new_v).expect("channel count")));
        }
        out
    }
}

/// Low-rank update `scaling · B·A` riding on a frozen linear map.
#[derive(Clone, Copy, Debug)]
pub struct LoraWeights {
    pub a: ParamId,
    pub b: ParamId,
    pub scaling: f32,
}

/// `y = x·Wᵀ + b`, with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
    pub lora: Option<LoraWeights>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, group: ParamGroup) -> Result<Self, ParamError> {
        Self::with_init(store, name, in_features, out_features, group, Init::Normal(0.02))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        group: ParamGroup,
        init: Init,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), &[out_features, in_features], group, init)?,
            bias: Some(store.add(format!("{name}.bias"), &[out_features], group, Init::Zeros)?),
            in_features,
            out_features,
            lora: None,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let w = f.param(self.weight);
        let mut y = f.graph.matmul(x, w, true)?;
        if let Some(b) = self.bias {
            let b = f.param(b);
            let axis = f.graph.shape(y).len() - 1;
            y = f.graph.bias_add(y, b, axis)?;
        }
        if let Some(l) = self.lora {
            let a = f.param(l.a);
            let b = f.param(l.b);
            let h = f.graph.matmul(x, a, true)?;
            let mut d = f.graph.matmul(h, b, true)?;
            if l.scaling != 1.0 {
                d = f.graph.scale(d, l.scaling as f64);
            }
            y = f.graph.add(y, d)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Result<Self, ParamError> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), &[dim], group, Init::Ones)?,
            beta: store.add(format!("{name}.bias"), &[dim], group, Init::Zeros)?,
        })
    }

    /// Normalizes the last axis.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        f.graph.layer_norm(x, g, b, LN_EPS)
    }

    /// Normalizes the channel axis of an `[N,C,H,W]` map.
    pub fn forward_channels(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let nhwc = f.graph.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(f, nhwc)?;
        f.graph.permute(y, &[0, 3, 1, 2])
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Result<Self, ParamError> {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], group, Init::Normal(std))?,
            bias: if bias { Some(store.add(format!("{name}.bias"), &[out_ch], group, Init::Zeros)?) } else { None },
            stride,
            padding,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let w = f.param(self.weight);
        let y = f.graph.conv2d(x, w, self.stride, self.padding)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.graph.bias_add(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Kernel equal to stride: each input pixel paints one output block.
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, stride: usize, group: ParamGroup) -> Result<Self, ParamError> {
        let std = (1.0 / in_ch as f64).sqrt();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), &[in_ch, out_ch, stride, stride], group, Init::Normal(std))?,
            bias: store.add(format!("{name}.bias"), &[out_ch], group, Init::Zeros)?,
            stride,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let w = f.param(self.weight);
        let y = f.graph.conv_transpose2d(x, w, self.stride, 0)?;
        let b = f.param(self.bias);
        f.graph.bias_add(y, b, 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Result<Self, ParamError> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), &[channels], group, Init::Ones)?,
            beta: store.add(format!("{name}.bias"), &[channels], group, Init::Zeros)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), &[channels], group, Init::Zeros)?,
            running_var: store.add_buffer(format!("{name}.running_var"), &[channels], group, Init::Ones)?,
        })
    }

    /// Batch statistics while training, running statistics otherwise.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        if f.training {
            let y = f.graph.batch_norm(x, g, b, BN_EPS)?;
            f.bn_batches.push((*self, y));
            return Ok(y);
        }
        let c = f.graph.shape(x)[1];
        let rm = f.store.value(self.running_mean);
        let rv = f.store.value(self.running_var);
        let (neg_mean, inv_std) = if rm.is_meta() {
            (Tensor::meta(&[c]), Tensor::meta(&[c, 1, 1]))
        } else {
            (
                Tensor::new(&[c], rm.data().iter().map(|v| -v).collect()).expect("channels"),
                Tensor::new(&[c, 1, 1], rv.data().iter().map(|v| 1.0 / (v + BN_EPS as f32).sqrt()).collect())
                    .expect("channels"),
            )
        };
        let neg_mean = f.graph.constant(neg_mean);
        let inv_std = f.graph.constant(inv_std);
        let centered = f.graph.bias_add(x, neg_mean, 1)?;
        let normed = f.graph.mul(centered, inv_std)?;
        let g3 = f.graph.reshape(g, &[c, 1, 1])?;
        let scaled = f.graph.mul(normed, g3)?;
        f.graph.bias_add(scaled, b, 1)
    }
}

/// `conv3×3 → BN → ReLU`, the unit used by the hierarchical decoders.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, group: ParamGroup) -> Result<Self, ParamError> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, 1, kernel / 2, false, group)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch, group)?,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(f.graph.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::new(0);
        let lin = Linear::new(&mut store, "l", 3, 2, ParamGroup::Encoder).unwrap();
        store.set_trainable(lin.weight, false);
        let mut f = Forward::new(&store, true);
        let x = f.input(Tensor::ones(&[4, 3]));
        let y = lin.forward(&mut f, x).unwrap();
        let s = f.graph.sum(y);
        let grads = f.graph.backward(s).unwrap();
        let pg = f.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, lin.bias.unwrap());
        assert_eq!(pg[0].1.data(), &[4.0, 4.0]);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm2d::new(&mut store, "bn", 2, ParamGroup::Decoder).unwrap();
        store.set_value(bn.running_mean, Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        store.set_value(bn.running_var, Tensor::new(&[2], vec![4.0, 1.0]).unwrap()).unwrap();
        let mut f = Forward::new(&store, false);
        let x = f.input(Tensor::new(&[1, 2, 1, 1], vec![3.0, 0.0]).unwrap());
        let y = bn.forward(&mut f, x).unwrap();
        let d = f.graph.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-5);
        assert!((d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm2d::new(&mut store, "bn", 1, ParamGroup::Decoder).unwrap();
        let mut f = Forward::new(&store, true);
        let x = f.input(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut f, x).unwrap();
        let ups = f.running_stat_updates();
        assert_eq!(ups.len(), 2);
        assert!((ups[0].1.data()[0] - 0.2).abs() < 1e-6);
        // unbiased batch variance 2.0
        assert!((ups[1].1.data()[0] - (0.9 + 0.2)).abs() < 1e-5);
    }
}
