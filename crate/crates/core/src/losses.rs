//! Cross-entropy, masked-keyword prediction, pseudo-OOD regularization and
//! their weighted sum.
//!
//! Each loss returns its value together with the gradient with respect to
//! its direct inputs (logits or embeddings). Propagating those through the
//! model is done in [`crate::encoder::train`].

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TokenId, TokenSequence};
use crate::encoder::{ModelError, ModelState};
use crate::keywords::KeywordMasked;
use crate::linalg::{log_sum_exp, softmax};

/// Smoothing inside the pair distance, `sqrt(|Δ|² + δ)`, so the gradient
/// exists when a pseudo-OOD sample equals its source.
pub const DISTANCE_SMOOTHING: f64 = 1e-12;
const SMOOTHING_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("batch has {clean} inputs but {pseudo} pseudo-OOD counterparts")]
    BatchMismatch { clean: usize, pseudo: usize },
    #[error("loss weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("non-finite {term} loss")]
    NonFinite { term: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub skl: f64,
    pub por: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { skl: 0.1, por: 1.0 }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights { skl: 0.0, por: 0.0 };

    pub fn validate(&self) -> Result<(), LossError> {
        if [self.skl, self.por].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(LossError::InvalidWeights)
        }
    }
}

/// The candidate grid for the regularization weight: 1e-5 … 1e2 by decades.
pub fn por_weight_grid() -> Vec<f64> {
    (-5..=2).map(|e| libm::pow(10.0, e as f64)).collect()
}

/// Per-step values of every objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub skl: f64,
    pub por: f64,
    pub total: f64,
}

/// `-log softmax(logits)[target]` and its gradient.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

/// Mean cross-entropy over a batch; gradients already carry the 1/B factor.
pub fn ce_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let n = logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        if y >= l.len() {
            return Err(LossError::LabelOutOfRange { label: y, num_classes: l.len() });
        }
        let (loss, mut g) = cross_entropy(l, y);
        total += loss;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Mean cross-entropy of the token head over every masked keyword position
/// in a batch. No targets means a loss of exactly 0.
pub fn masked_token_loss(token_logits: &[Vec<f64>], targets: &[TokenId]) -> (f64, Vec<Vec<f64>>) {
    if targets.is_empty() {
        return (0.0, Vec::new());
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for (l, &t) in token_logits.iter().zip(targets) {
        let (loss, mut g) = cross_entropy(l, t as usize);
        total += loss;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    (total / n, grads)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PorOptions {
    /// Ceiling on each pair distance; pairs above it stop contributing gradient.
    pub distance_cap: Option<f64>,
    /// Treat the pseudo-OOD embedding as a constant target.
    pub stop_gradient_pseudo: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PorTerm {
    pub value: f64,
    pub d_clean: Vec<Vec<f64>>,
    pub d_pseudo: Vec<Vec<f64>>,
    /// Mean unsmoothed pair distance, for logging.
    pub mean_distance: f64,
}

/// Negative mean Euclidean distance between paired embeddings.
pub fn por_from_embeddings(clean: &[Vec<f64>], pseudo: &[Vec<f64>], opts: &PorOptions) -> Result<PorTerm, LossError> {
    if clean.len() != pseudo.len() {
        return Err(LossError::BatchMismatch { clean: clean.len(), pseudo: pseudo.len() });
    }
    let n = clean.len().max(1) as f64;
    let mut value = 0.0;
    let mut mean_distance = 0.0;
    let mut d_clean = Vec::with_capacity(clean.len());
    let mut d_pseudo = Vec::with_capacity(clean.len());
    for (a, b) in clean.iter().zip(pseudo) {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let sq: f64 = diff.iter().map(|v| v * v).sum();
        mean_distance += libm::sqrt(sq) / n;
        let dist = libm::sqrt(sq + DISTANCE_SMOOTHING);
        let capped = matches!(opts.distance_cap, Some(cap) if dist > cap);
        // subtracting sqrt(δ) keeps identical pairs at exactly zero
        value -= (opts.distance_cap.map_or(dist, |cap| dist.min(cap)) - SMOOTHING_FLOOR) / n;
        let coeff = if capped { 0.0 } else { -1.0 / (n * dist) };
        let gc: Vec<f64> = diff.iter().map(|v| coeff * v).collect();
        let gp = if opts.stop_gradient_pseudo { vec![0.0; diff.len()] } else { gc.iter().map(|v| -v).collect() };
        d_clean.push(gc);
        d_pseudo.push(gp);
    }
    Ok(PorTerm { value, d_clean, d_pseudo, mean_distance })
}

/// `CE + λ_skl·SKL + λ_por·POR`.
pub fn total_loss(weights: &LossWeights, ce: f64, skl: f64, por: f64) -> Result<f64, LossError> {
    weights.validate()?;
    for (term, v) in [("ce", ce), ("skl", skl), ("por", por)] {
        if !v.is_finite() {
            return Err(LossError::NonFinite { term });
        }
    }
    Ok(ce + weights.skl * skl + weights.por * por)
}

/// Eval-mode masked-keyword loss of `state` on keyword-masked inputs.
pub fn skl_loss(state: &ModelState, batch: &[KeywordMasked]) -> Result<f64, LossError> {
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for km in batch {
        let ids = state.content(&km.input)?;
        let cache =
            crate::encoder::forward_sequence::<rand_chacha::ChaCha8Rng>(&state.config, &state.params, ids, None, None);
        for (&pos, &target) in km.positions.iter().zip(&km.targets) {
            logits.push(crate::encoder::train::token_logits(state, &cache, pos));
            targets.push(target);
        }
    }
    Ok(masked_token_loss(&logits, &targets).0)
}

/// Eval-mode pseudo-OOD regularization value of `state` on paired inputs.
pub fn por_loss(state: &ModelState, clean: &[TokenSequence], pseudo: &[TokenSequence]) -> Result<f64, LossError> {
    if clean.len() != pseudo.len() {
        return Err(LossError::BatchMismatch { clean: clean.len(), pseudo: pseudo.len() });
    }
    let a = state.embed(clean)?;
    let b = state.embed(pseudo)?;
    Ok(por_from_embeddings(&a, &b, &PorOptions::default())?.value)
}
