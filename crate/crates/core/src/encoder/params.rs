use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EncoderConfig;

/// `y = x W + b` with `W` stored row-major as fan_in × fan_out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { fan_in, fan_out, weight: vec![0.0; fan_in * fan_out], bias: vec![0.0; fan_out] }
    }

    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = libm::sqrt(1.0 / fan_in as f64);
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in &mut layer.weight {
            *w = normal.sample(rng);
        }
        layer
    }

    /// `out (rows × fan_out) = x (rows × fan_in) W + b`.
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.fan_out);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        crate::linalg::matmul_acc(x, &self.weight, &mut out, rows, self.fan_in, self.fan_out);
        out
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear) -> Vec<f64> {
        self.backward_params(x, dy, rows, grad);
        let mut dx = vec![0.0; rows * self.fan_in];
        crate::linalg::matmul_a_bt_acc(dy, &self.weight, &mut dx, rows, self.fan_out, self.fan_in);
        dx
    }

    pub fn backward_params(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear) {
        crate::linalg::matmul_at_b_acc(x, dy, &mut grad.weight, rows, self.fan_in, self.fan_out);
        for r in 0..rows {
            for (b, d) in grad.bias.iter_mut().zip(&dy[r * self.fan_out..(r + 1) * self.fan_out]) {
                *b += d;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: vec![1.0; dim], beta: vec![0.0; dim] }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { gamma: vec![0.0; dim], beta: vec![0.0; dim] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Every trainable tensor of the encoder `f`, the classifier head `g` and the
/// masked-token head used by the keyword loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub token_embedding: Vec<f64>,
    pub position_embedding: Vec<f64>,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub classifier_hidden: Linear,
    pub classifier_out: Linear,
    pub token_head: Linear,
}

/// Which optimizer group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Classifier,
    TokenHead,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub group: Group,
    /// Weight decay applies to matrices only.
    pub decay: bool,
}

impl Params {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let emb = Normal::new(0.0, 0.02).expect("finite std");
        let token_embedding = (0..cfg.vocab_size * d).map(|_| emb.sample(rng)).collect();
        let position_embedding = (0..cfg.max_len * d).map(|_| emb.sample(rng)).collect();
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                ln_attn: LayerNorm::new(d),
                query: Linear::init(d, d, rng),
                key: Linear::init(d, d, rng),
                value: Linear::init(d, d, rng),
                attn_out: Linear::init(d, d, rng),
                ln_ffn: LayerNorm::new(d),
                ffn_in: Linear::init(d, cfg.mlp_dim, rng),
                ffn_out: Linear::init(cfg.mlp_dim, d, rng),
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            blocks,
            ln_final: LayerNorm::new(d),
            classifier_hidden: Linear::init(d, cfg.classifier_dim, rng),
            classifier_out: Linear::init(cfg.classifier_dim, cfg.num_classes, rng),
            token_head: Linear::init(d, cfg.vocab_size, rng),
        }
    }

    /// Same shapes, all zeros (gradient and moment buffers).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// All tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(TensorMeta, &Vec<f64>)> {
        let mut out = Vec::new();
        let meta = |name: String, group, decay| TensorMeta { name, group, decay };
        out.push((meta("token_embedding".into(), Group::Encoder, true), &self.token_embedding));
        out.push((meta("position_embedding".into(), Group::Encoder, true), &self.position_embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((meta(format!("blocks.{i}.ln_attn.gamma"), Group::Encoder, false), &b.ln_attn.gamma));
            out.push((meta(format!("blocks.{i}.ln_attn.beta"), Group::Encoder, false), &b.ln_attn.beta));
            for (name, l) in [("query", &b.query), ("key", &b.key), ("value", &b.value), ("attn_out", &b.attn_out)] {
                out.push((meta(format!("blocks.{i}.{name}.weight"), Group::Encoder, true), &l.weight));
                out.push((meta(format!("blocks.{i}.{name}.bias"), Group::Encoder, false), &l.bias));
            }
            out.push((meta(format!("blocks.{i}.ln_ffn.gamma"), Group::Encoder, false), &b.ln_ffn.gamma));
            out.push((meta(format!("blocks.{i}.ln_ffn.beta"), Group::Encoder, false), &b.ln_ffn.beta));
            for (name, l) in [("ffn_in", &b.ffn_in), ("ffn_out", &b.ffn_out)] {
                out.push((meta(format!("blocks.{i}.{name}.weight"), Group::Encoder, true), &l.weight));
                out.push((meta(format!("blocks.{i}.{name}.bias"), Group::Encoder, false), &l.bias));
            }
        }
        out.push((meta("ln_final.gamma".into(), Group::Encoder, false), &self.ln_final.gamma));
        out.push((meta("ln_final.beta".into(), Group::Encoder, false), &self.ln_final.beta));
        for (name, l, group) in [
            ("classifier_hidden", &self.classifier_hidden, Group::Classifier),
            ("classifier_out", &self.classifier_out, Group::Classifier),
            ("token_head", &self.token_head, Group::TokenHead),
        ] {
            out.push((meta(format!("{name}.weight"), group, true), &l.weight));
            out.push((meta(format!("{name}.bias"), group, false), &l.bias));
        }
        out
    }

    /// Mutable view in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(TensorMeta, &mut Vec<f64>)> {
        let metas: Vec<TensorMeta> = self.tensors().into_iter().map(|(m, _)| m).collect();
        let mut refs: Vec<&mut Vec<f64>> = Vec::with_capacity(metas.len());
        refs.push(&mut self.token_embedding);
        refs.push(&mut self.position_embedding);
        for b in &mut self.blocks {
            refs.push(&mut b.ln_attn.gamma);
            refs.push(&mut b.ln_attn.beta);
            for l in [&mut b.query, &mut b.key, &mut b.value, &mut b.attn_out] {
                refs.push(&mut l.weight);
                refs.push(&mut l.bias);
            }
            refs.push(&mut b.ln_ffn.gamma);
            refs.push(&mut b.ln_ffn.beta);
            for l in [&mut b.ffn_in, &mut b.ffn_out] {
                refs.push(&mut l.weight);
                refs.push(&mut l.bias);
            }
        }
        refs.push(&mut self.ln_final.gamma);
        refs.push(&mut self.ln_final.beta);
        for l in [&mut self.classifier_hidden, &mut self.classifier_out, &mut self.token_head] {
            refs.push(&mut l.weight);
            refs.push(&mut l.bias);
        }
        metas.into_iter().zip(refs).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Flat read of scalar `index` in canonical order.
    pub fn get(&self, index: usize) -> f64 {
        let mut i = index;
        for (_, t) in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let mut i = index;
        for (_, t) in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub(crate) fn zeros_for(cfg: &EncoderConfig) -> Self {
        let d = cfg.model_dim;
        Self {
            token_embedding: vec![0.0; cfg.vocab_size * d],
            position_embedding: vec![0.0; cfg.max_len * d],
            blocks: (0..cfg.depth)
                .map(|_| Block {
                    ln_attn: LayerNorm::zeros(d),
                    query: Linear::zeros(d, d),
                    key: Linear::zeros(d, d),
                    value: Linear::zeros(d, d),
                    attn_out: Linear::zeros(d, d),
                    ln_ffn: LayerNorm::zeros(d),
                    ffn_in: Linear::zeros(d, cfg.mlp_dim),
                    ffn_out: Linear::zeros(cfg.mlp_dim, d),
                })
                .collect(),
            ln_final: LayerNorm::zeros(d),
            classifier_hidden: Linear::zeros(d, cfg.classifier_dim),
            classifier_out: Linear::zeros(cfg.classifier_dim, cfg.num_classes),
            token_head: Linear::zeros(d, cfg.vocab_size),
        }
    }
}
