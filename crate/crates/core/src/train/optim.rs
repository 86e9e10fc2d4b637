//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u32,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, state: HashMap::new() }
    }

    /// Optimizer-state elements held so far (two moments per parameter).
    pub fn state_elements(&self) -> usize {
        self.state.values().map(|s| s.m.len() + s.v.len()).sum()
    }

    /// One update of every parameter that received a gradient. Frozen
    /// parameters are skipped even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor<f32>)], lr: f64) {
        let c = self.cfg;
        for (id, g) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            let p = store.value(*id);
            let n = p.numel();
            let st = self.state.entry(*id).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], steps: 0 });
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            let step_size = (lr / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let decay = (1.0 - lr * c.weight_decay) as f32;
            let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
            let mut out = p.to_vec();
            for (i, (w, &gi)) in out.iter_mut().zip(g.data()).enumerate() {
                *w *= decay;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let denom = st.v[i].sqrt() / bc2_sqrt + eps;
                *w -= step_size * st.m[i] / denom;
            }
            let shape = p.shape().to_vec();
            store.set_value(*id, Tensor::new(&shape, out).expect("same shape")).expect("same shape");
        }
    }
}
