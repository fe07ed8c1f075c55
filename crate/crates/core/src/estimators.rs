//! Confidence estimators. Each maps an input to a scalar where higher means
//! more in-distribution.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TokenSequence;
use crate::encoder::{backward_sequence, classifier_backward, forward_sequence, ModelError, ModelState, Params};
use crate::linalg::{argmax, euclidean_distance, softmax};
use crate::mahalanobis::{MahalanobisError, MahalanobisParams};
use crate::seed::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mahalanobis(#[from] MahalanobisError),
    #[error("estimator {0} has no fitted state")]
    NotFitted(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Maxprob,
    Entropy,
    Dropout,
    Odin,
    EmbedDistance,
    GradientEmbed,
    Mahalanobis,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Maxprob,
        EstimatorKind::Entropy,
        EstimatorKind::Dropout,
        EstimatorKind::Odin,
        EstimatorKind::EmbedDistance,
        EstimatorKind::GradientEmbed,
        EstimatorKind::Mahalanobis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Maxprob => "maxprob",
            EstimatorKind::Entropy => "entropy",
            EstimatorKind::Dropout => "dropout",
            EstimatorKind::Odin => "odin",
            EstimatorKind::EmbedDistance => "embed_distance",
            EstimatorKind::GradientEmbed => "gradient_embed",
            EstimatorKind::Mahalanobis => "mahalanobis",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub odin_temperature: f64,
    /// Embedding-space sign perturbation; 0 disables it.
    pub odin_epsilon: f64,
    pub dropout_passes: usize,
    /// Density features: `None` is f(x), `Some(l)` the CLS state after block l.
    pub feature_layer: Option<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { odin_temperature: 1000.0, odin_epsilon: 0.0, dropout_passes: 10, feature_layer: None }
    }
}

/// `max_c softmax(logits)_c`.
pub fn maxprob(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}

/// Negative entropy `Σ p log p`.
pub fn entropy_score(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().filter(|&p| p > 0.0).map(|p| p * libm::log(p)).sum()
}

/// `max_c softmax(logits / T)_c`.
pub fn temperature_maxprob(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    maxprob(&scaled)
}

/// Negative distance to the nearest class centroid.
pub fn embed_distance_score(centroids: &[Vec<f64>], embedding: &[f64]) -> f64 {
    -centroids.iter().map(|c| euclidean_distance(c, embedding)).fold(f64::INFINITY, f64::min)
}

pub fn class_centroids(features: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Vec<Vec<f64>> {
    let dim = features.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (x, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(x) {
            *s += v;
        }
    }
    sums.into_iter().zip(counts).map(|(s, n)| s.into_iter().map(|v| v / n.max(1) as f64).collect()).collect()
}

/// Monte Carlo dropout: max over classes of the mean softmax across
/// `passes` stochastic forward passes seeded by `seed`.
pub fn dropout_score(state: &ModelState, x: &TokenSequence, passes: usize, seed: u64) -> Result<f64, ModelError> {
    let ids = state.content(x)?;
    let mut rng = stream_rng(seed, 0);
    let mut mean = vec![0.0; state.config.num_classes];
    for _ in 0..passes.max(1) {
        let cache = forward_sequence(&state.config, &state.params, ids, Some(&mut rng), None);
        for (m, p) in mean.iter_mut().zip(softmax(&cache.logits)) {
            *m += p;
        }
    }
    let n = passes.max(1) as f64;
    Ok(mean.into_iter().map(|m| m / n).fold(0.0, f64::max))
}

/// Temperature-scaled maxprob, optionally after nudging the input
/// embeddings by `epsilon · sign(∇ log softmax(logits/T)_ŷ)`.
pub fn odin_score(state: &ModelState, x: &TokenSequence, temperature: f64, epsilon: f64) -> Result<f64, ModelError> {
    let ids = state.content(x)?;
    let cache = forward_sequence::<rand_chacha::ChaCha8Rng>(&state.config, &state.params, ids, None, None);
    if epsilon == 0.0 {
        return Ok(temperature_maxprob(&cache.logits, temperature));
    }
    let scaled: Vec<f64> = cache.logits.iter().map(|l| l / temperature).collect();
    let p = softmax(&scaled);
    let y = argmax(&p);
    let dlogits: Vec<f64> = p.iter().enumerate().map(|(c, &pc)| ((c == y) as u8 as f64 - pc) / temperature).collect();
    let mut scratch = Params::zeros_for(&state.config);
    let zeros = vec![0.0; cache.len * state.config.model_dim];
    let dx = backward_sequence(&state.config, &state.params, &cache, &zeros, Some(&dlogits), &mut scratch);
    let delta: Vec<f64> = dx
        .iter()
        .map(|g| {
            if *g > 0.0 {
                epsilon
            } else if *g < 0.0 {
                -epsilon
            } else {
                0.0
            }
        })
        .collect();
    let perturbed = forward_sequence::<rand_chacha::ChaCha8Rng>(&state.config, &state.params, ids, None, Some(&delta));
    Ok(temperature_maxprob(&perturbed.logits, temperature))
}

/// Gradient of the cross-entropy at the model's own prediction with respect
/// to the CLS embedding.
pub fn gradient_feature(state: &ModelState, x: &TokenSequence) -> Result<Vec<f64>, ModelError> {
    let ids = state.content(x)?;
    let cache = forward_sequence::<rand_chacha::ChaCha8Rng>(&state.config, &state.params, ids, None, None);
    let mut dlogits = softmax(&cache.logits);
    let y = argmax(&cache.logits);
    dlogits[y] -= 1.0;
    let mut scratch = Params::zeros_for(&state.config);
    Ok(classifier_backward(&state.config, &state.params, &cache, &dlogits, &mut scratch))
}

pub fn gradient_embed_score(
    state: &ModelState,
    gradient_params: &MahalanobisParams,
    x: &TokenSequence,
) -> Result<f64, EstimatorError> {
    Ok(gradient_params.score(&gradient_feature(state, x)?)?)
}

pub fn mahalanobis_score_estimator(params: &MahalanobisParams, feature: &[f64]) -> Result<f64, EstimatorError> {
    Ok(params.score(feature)?)
}

/// Fitted state for the estimators that need it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedEstimators {
    pub config: EstimatorConfig,
    pub centroids: Option<Vec<Vec<f64>>>,
    pub mahalanobis: Option<MahalanobisParams>,
    pub gradient: Option<MahalanobisParams>,
}

impl FittedEstimators {
    pub fn unfitted(config: EstimatorConfig) -> Self {
        Self { config, centroids: None, mahalanobis: None, gradient: None }
    }

    /// Fits whatever `roster` needs on labeled IND training inputs.
    /// `mahalanobis` may be supplied to reuse an existing fit.
    pub fn fit(
        state: &ModelState,
        train: &[TokenSequence],
        labels: &[usize],
        roster: &[EstimatorKind],
        config: EstimatorConfig,
        mahalanobis: Option<MahalanobisParams>,
    ) -> Result<Self, EstimatorError> {
        let mut fitted = Self::unfitted(config);
        let c = state.config.num_classes;
        let needs = |k| roster.contains(&k);
        if needs(EstimatorKind::EmbedDistance) || (needs(EstimatorKind::Mahalanobis) && mahalanobis.is_none()) {
            let outputs = state.forward(train)?;
            if needs(EstimatorKind::EmbedDistance) {
                let emb: Vec<Vec<f64>> = outputs.iter().map(|o| o.cls_embedding.clone()).collect();
                fitted.centroids = Some(class_centroids(&emb, labels, c));
            }
            if needs(EstimatorKind::Mahalanobis) && mahalanobis.is_none() {
                let feats: Vec<Vec<f64>> = outputs.iter().map(|o| o.feature(config.feature_layer).to_vec()).collect();
                fitted.mahalanobis = Some(MahalanobisParams::fit(&feats, labels, c)?);
            }
        }
        if needs(EstimatorKind::Mahalanobis) && mahalanobis.is_some() {
            fitted.mahalanobis = mahalanobis;
        }
        if needs(EstimatorKind::GradientEmbed) {
            let grads: Vec<Vec<f64>> = train.iter().map(|x| gradient_feature(state, x)).collect::<Result<_, _>>()?;
            fitted.gradient = Some(MahalanobisParams::fit(&grads, labels, c)?);
        }
        Ok(fitted)
    }

    /// Scores every input with one estimator. `seed` drives MC dropout; input
    /// `i` uses stream `i` of it.
    pub fn score_all(
        &self,
        state: &ModelState,
        kind: EstimatorKind,
        inputs: &[TokenSequence],
        seed: u64,
    ) -> Result<Vec<f64>, EstimatorError> {
        let cfg = &self.config;
        match kind {
            EstimatorKind::Maxprob
            | EstimatorKind::Entropy
            | EstimatorKind::EmbedDistance
            | EstimatorKind::Mahalanobis => {
                let outputs = state.forward(inputs)?;
                outputs
                    .iter()
                    .map(|o| match kind {
                        EstimatorKind::Maxprob => Ok(maxprob(&o.logits)),
                        EstimatorKind::Entropy => Ok(entropy_score(&o.logits)),
                        EstimatorKind::EmbedDistance => {
                            let c = self.centroids.as_ref().ok_or(EstimatorError::NotFitted("embed_distance"))?;
                            Ok(embed_distance_score(c, &o.cls_embedding))
                        }
                        _ => {
                            let m = self.mahalanobis.as_ref().ok_or(EstimatorError::NotFitted("mahalanobis"))?;
                            mahalanobis_score_estimator(m, o.feature(cfg.feature_layer))
                        }
                    })
                    .collect()
            }
            EstimatorKind::Dropout => inputs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    Ok(dropout_score(state, x, cfg.dropout_passes, crate::seed::derive_indexed(seed, i as u64))?)
                })
                .collect(),
            EstimatorKind::Odin => {
                inputs.iter().map(|x| Ok(odin_score(state, x, cfg.odin_temperature, cfg.odin_epsilon)?)).collect()
            }
            EstimatorKind::GradientEmbed => {
                let g = self.gradient.as_ref().ok_or(EstimatorError::NotFitted("gradient_embed"))?;
                inputs.iter().map(|x| gradient_embed_score(state, g, x)).collect()
            }
        }
    }
}
