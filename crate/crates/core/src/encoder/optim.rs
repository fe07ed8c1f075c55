//! AdamW with decoupled weight decay and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use super::params::{Group, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub first_moment: Params,
    pub second_moment: Params,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &Params) -> Self {
        Self { first_moment: params.zeros_like(), second_moment: params.zeros_like(), step: 0 }
    }
}

pub fn global_norm(grad: &Params, trainable: impl Fn(Group) -> bool) -> f64 {
    let sq: f64 =
        grad.tensors().iter().filter(|(m, _)| trainable(m.group)).flat_map(|(_, t)| t.iter()).map(|g| g * g).sum();
    libm::sqrt(sq)
}

impl AdamW {
    /// One update of every tensor whose group passes `trainable`. Frozen
    /// tensors are left bit-for-bit untouched, moments included.
    pub fn step(&self, params: &mut Params, state: &mut AdamWState, grad: &Params, trainable: impl Fn(Group) -> bool) {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = global_norm(grad, &trainable);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let grads = grad.tensors();
        let firsts = state.first_moment.tensors_mut();
        let seconds = state.second_moment.tensors_mut();
        for ((((meta, p), (_, g)), (_, m)), (_, v)) in
            params.tensors_mut().into_iter().zip(grads).zip(firsts).zip(seconds)
        {
            if !trainable(meta.group) {
                continue;
            }
            let decay = if meta.decay { self.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * (mhat / (libm::sqrt(vhat) + self.eps) + decay * p[i]);
            }
        }
    }
}
