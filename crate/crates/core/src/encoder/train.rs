//! One optimization step on the composite objective.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{backward_sequence, forward_sequence, AdamW, Group, ModelError, ModelState, Params, SequenceCache};
use crate::data::TokenSequence;
use crate::keywords::KeywordMasked;
use crate::losses::{
    ce_loss, masked_token_loss, por_from_embeddings, LossComponents, LossError, LossWeights, PorOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss weights need {0} inputs that the batch does not carry")]
    MissingInput(&'static str),
    #[error("non-finite gradient")]
    NonFiniteGradient,
}

/// Which terms to optimize and how.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub weights: LossWeights,
    pub por: PorOptions,
}

impl LossSpec {
    pub fn cross_entropy_only() -> Self {
        Self { weights: LossWeights::ZERO, por: PorOptions::default() }
    }
}

/// Clean inputs with labels, plus the optional pseudo-OOD and
/// keyword-masked counterparts (index-aligned with `inputs`).
#[derive(Clone, Copy, Debug)]
pub struct TrainBatch<'a> {
    pub inputs: &'a [TokenSequence],
    pub labels: &'a [usize],
    pub pseudo: Option<&'a [TokenSequence]>,
    pub keyword_masked: Option<&'a [KeywordMasked]>,
}

impl<'a> TrainBatch<'a> {
    pub fn plain(inputs: &'a [TokenSequence], labels: &'a [usize]) -> Self {
        Self { inputs, labels, pseudo: None, keyword_masked: None }
    }
}

/// Token-head logits at one position of a forwarded sequence.
pub(crate) fn token_logits(state: &ModelState, cache: &SequenceCache, position: usize) -> Vec<f64> {
    let d = state.config.model_dim;
    state.params.token_head.apply(&cache.hidden[position * d..(position + 1) * d], 1)
}

fn run<R: Rng + ?Sized>(
    state: &ModelState,
    seq: &TokenSequence,
    rng: Option<&mut R>,
) -> Result<SequenceCache, ModelError> {
    let ids = state.content(seq)?;
    Ok(forward_sequence(&state.config, &state.params, ids, rng, None))
}

/// Loss components and the full parameter gradient of
/// `CE + λ_skl·SKL + λ_por·POR`. Dropout is active iff `rng` is given.
/// Terms whose inputs are present are always evaluated; only terms with a
/// positive weight are differentiated.
pub fn loss_and_gradients<R: Rng + ?Sized>(
    state: &ModelState,
    batch: &TrainBatch<'_>,
    spec: &LossSpec,
    mut rng: Option<&mut R>,
) -> Result<(LossComponents, Params), TrainError> {
    spec.weights.validate()?;
    let w = spec.weights;
    if w.skl > 0.0 && batch.keyword_masked.is_none() {
        return Err(TrainError::MissingInput("keyword-masked"));
    }
    if w.por > 0.0 && batch.pseudo.is_none() {
        return Err(TrainError::MissingInput("pseudo-OOD"));
    }
    let cfg = &state.config;
    let d = cfg.model_dim;
    let mut grad = Params::zeros_for(cfg);

    let clean: Vec<SequenceCache> =
        batch.inputs.iter().map(|s| run(state, s, rng.as_deref_mut())).collect::<Result<_, _>>()?;
    let logits: Vec<Vec<f64>> = clean.iter().map(|c| c.logits.clone()).collect();
    let (ce, dlogits) = ce_loss(&logits, batch.labels)?;
    let mut d_clean_hidden: Vec<Vec<f64>> = clean.iter().map(|c| vec![0.0; c.len * d]).collect();

    let mut skl = 0.0;
    if let Some(masked) = batch.keyword_masked {
        let caches: Vec<SequenceCache> =
            masked.iter().map(|km| run(state, &km.input, rng.as_deref_mut())).collect::<Result<_, _>>()?;
        let mut token_l = Vec::new();
        let mut targets = Vec::new();
        for (km, cache) in masked.iter().zip(&caches) {
            for (&pos, &t) in km.positions.iter().zip(&km.targets) {
                token_l.push(token_logits(state, cache, pos));
                targets.push(t);
            }
        }
        let (value, dtok) = masked_token_loss(&token_l, &targets);
        skl = value;
        if w.skl > 0.0 && !targets.is_empty() {
            let mut k = 0;
            for (km, cache) in masked.iter().zip(&caches) {
                if km.positions.is_empty() {
                    continue;
                }
                let mut dh = vec![0.0; cache.len * d];
                for &pos in &km.positions {
                    let dl: Vec<f64> = dtok[k].iter().map(|g| g * w.skl).collect();
                    let row = &cache.hidden[pos * d..(pos + 1) * d];
                    let dx = state.params.token_head.backward(row, &dl, 1, &mut grad.token_head);
                    for (a, b) in dh[pos * d..(pos + 1) * d].iter_mut().zip(&dx) {
                        *a += b;
                    }
                    k += 1;
                }
                backward_sequence(cfg, &state.params, cache, &dh, None, &mut grad);
            }
        }
    }

    let mut por = 0.0;
    if let Some(pseudo) = batch.pseudo {
        if pseudo.len() != batch.inputs.len() {
            return Err(LossError::BatchMismatch { clean: batch.inputs.len(), pseudo: pseudo.len() }.into());
        }
        let caches: Vec<SequenceCache> =
            pseudo.iter().map(|s| run(state, s, rng.as_deref_mut())).collect::<Result<_, _>>()?;
        let a: Vec<Vec<f64>> = clean.iter().map(|c| c.cls(d).to_vec()).collect();
        let b: Vec<Vec<f64>> = caches.iter().map(|c| c.cls(d).to_vec()).collect();
        let term = por_from_embeddings(&a, &b, &spec.por)?;
        por = term.value;
        if w.por > 0.0 {
            for (dh, g) in d_clean_hidden.iter_mut().zip(&term.d_clean) {
                for (x, y) in dh[..d].iter_mut().zip(g) {
                    *x += w.por * y;
                }
            }
            if !spec.por.stop_gradient_pseudo {
                for (cache, g) in caches.iter().zip(&term.d_pseudo) {
                    let mut dh = vec![0.0; cache.len * d];
                    for (x, y) in dh[..d].iter_mut().zip(g) {
                        *x = w.por * y;
                    }
                    backward_sequence(cfg, &state.params, cache, &dh, None, &mut grad);
                }
            }
        }
    }

    for ((cache, dh), dl) in clean.iter().zip(&d_clean_hidden).zip(&dlogits) {
        backward_sequence(cfg, &state.params, cache, dh, Some(dl), &mut grad);
    }

    let total = crate::losses::total_loss(&w, ce, skl, por)?;
    Ok((LossComponents { ce, skl, por, total }, grad))
}

/// Forward with dropout, backward, and one AdamW update. The masked-token
/// head only trains when its loss carries weight. Nothing is modified when
/// any term or gradient is non-finite.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut ModelState,
    batch: &TrainBatch<'_>,
    spec: &LossSpec,
    optimizer: &AdamW,
    rng: &mut R,
) -> Result<LossComponents, TrainError> {
    let (components, grad) = loss_and_gradients(state, batch, spec, Some(rng))?;
    if !grad.all_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    let head = spec.weights.skl > 0.0;
    optimizer.step(&mut state.params, &mut state.optimizer, &grad, |g| g != Group::TokenHead || head);
    Ok(components)
}
