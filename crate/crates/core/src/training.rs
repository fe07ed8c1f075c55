//! Epoch loops: cross-entropy base training with best-validation selection,
//! and post-hoc fine-tuning on the composite objective with pseudo-OOD
//! samples redrawn every batch.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TokenSequence;
use crate::encoder::train::{train_step, LossSpec, TrainBatch, TrainError};
use crate::encoder::{AdamW, ModelError, ModelState};
use crate::keywords::{context_mask, keyword_mask, KeywordError, KeywordMasked, KeywordSet, MaskingConfig};
use crate::linalg::{argmax, euclidean_distance};
use crate::losses::LossComponents;
use crate::seed::{derive_indexed, derive_seed, rng_from_seed, stream_rng, Stage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("step {step}: {source}")]
    Step { step: u64, source: TrainError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Keyword(#[from] KeywordError),
    #[error("training set is empty")]
    EmptyTrainingSet,
}

/// A labeled IND input.
pub type Labeled = (TokenSequence, usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
}

impl Default for BaseTrainingConfig {
    fn default() -> Self {
        Self { epochs: 25, batch_size: 32, optimizer: AdamW::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseOutcome {
    /// Highest validation accuracy (earliest epoch on ties); the initial
    /// state when no epoch ran.
    pub best: ModelState,
    pub best_epoch: Option<usize>,
    pub curve: Vec<EpochRecord>,
}

pub fn accuracy(state: &ModelState, data: &[Labeled]) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<TokenSequence> = data.iter().map(|(x, _)| x.clone()).collect();
    let outputs = state.forward(&inputs)?;
    let hits = outputs.iter().zip(data).filter(|(o, (_, y))| argmax(&o.logits) == *y).count();
    Ok(hits as f64 / data.len() as f64)
}

fn split_batch(data: &[Labeled], idx: &[usize]) -> (Vec<TokenSequence>, Vec<usize>) {
    idx.iter().map(|&i| data[i].clone()).unzip()
}

/// Cross-entropy training. Dropout and shuffling draw from seeds derived
/// from `master_seed`.
pub fn train_base(
    initial: ModelState,
    train: &[Labeled],
    val: &[Labeled],
    cfg: &BaseTrainingConfig,
    master_seed: u64,
) -> Result<BaseOutcome, TrainingError> {
    if train.is_empty() {
        return Err(TrainingError::EmptyTrainingSet);
    }
    let mut state = initial;
    let mut best = state.clone();
    let mut best_epoch = None;
    let mut best_val = f64::NEG_INFINITY;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut dropout = rng_from_seed(derive_seed(master_seed, Stage::BaseDropout));
    let shuffle_seed = derive_seed(master_seed, Stage::BaseShuffle);
    let spec = LossSpec::cross_entropy_only();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_indexed(shuffle_seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (inputs, labels) = split_batch(train, chunk);
            let step = state.optimizer.step + 1;
            let c = train_step(&mut state, &TrainBatch::plain(&inputs, &labels), &spec, &cfg.optimizer, &mut dropout)
                .map_err(|source| TrainingError::Step { step, source })?;
            loss_sum += c.ce;
            batches += 1;
        }
        let train_accuracy = accuracy(&state, train)?;
        let val_accuracy = if val.is_empty() { train_accuracy } else { accuracy(&state, val)? };
        curve.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            train_accuracy,
            val_accuracy,
        });
        if val_accuracy > best_val {
            best_val = val_accuracy;
            best = state.clone();
            best_epoch = Some(epoch + 1);
        }
    }
    Ok(BaseOutcome { best, best_epoch, curve })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostHocConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub loss: LossSpec,
    pub masking: MaskingConfig,
    /// Start fine-tuning with fresh optimizer moments.
    pub reset_optimizer: bool,
}

impl Default for PostHocConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            optimizer: AdamW::default(),
            loss: LossSpec::default(),
            masking: MaskingConfig::default(),
            reset_optimizer: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub components: LossComponents,
    /// Mean unsmoothed distance between clean and pseudo-OOD embeddings in
    /// this batch, train mode.
    pub pair_distance: f64,
}

/// Pseudo-OOD counterpart of training example `index` in `epoch`.
pub fn pseudo_sample(
    x: &TokenSequence,
    keywords: &KeywordSet,
    masking: &MaskingConfig,
    epoch: usize,
    index: usize,
) -> TokenSequence {
    let mut rng = stream_rng(derive_indexed(masking.seed, epoch as u64), index as u64);
    context_mask(x, keywords, masking, &mut rng)
}

/// Post-hoc fine-tuning. The masked-token head is redrawn when its loss
/// carries weight; with zero weights and zero learning rate the returned
/// parameters equal the input ones.
pub fn fine_tune(
    initial: ModelState,
    train: &[Labeled],
    keywords: &KeywordSet,
    cfg: &PostHocConfig,
    master_seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<ModelState, TrainingError> {
    if train.is_empty() {
        return Err(TrainingError::EmptyTrainingSet);
    }
    cfg.masking.validate()?;
    let mut state = initial;
    if cfg.loss.weights.skl > 0.0 {
        state.reset_token_head(derive_seed(master_seed, Stage::TokenHeadInit));
    }
    if cfg.reset_optimizer {
        state.reset_optimizer();
    }
    let mut dropout = rng_from_seed(derive_seed(master_seed, Stage::PostHocDropout));
    let shuffle_seed = derive_seed(master_seed, Stage::PostHocShuffle);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_indexed(shuffle_seed, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (inputs, labels) = split_batch(train, chunk);
            let pseudo: Vec<TokenSequence> =
                chunk.iter().map(|&i| pseudo_sample(&train[i].0, keywords, &cfg.masking, epoch, i)).collect();
            let masked: Vec<KeywordMasked> = inputs.iter().map(|x| keyword_mask(x, keywords)).collect();
            let batch =
                TrainBatch { inputs: &inputs, labels: &labels, pseudo: Some(&pseudo), keyword_masked: Some(&masked) };
            let step = state.optimizer.step + 1;
            let components = train_step(&mut state, &batch, &cfg.loss, &cfg.optimizer, &mut dropout)
                .map_err(|source| TrainingError::Step { step, source })?;
            let pair_distance = -components.por;
            on_step(&StepRecord { step, components, pair_distance });
        }
    }
    Ok(state)
}

/// Mean eval-mode distance ‖f(x) − f(x̃)‖ over `inputs`, with pseudo-OOD
/// samples drawn as in epoch `epoch` of fine-tuning.
pub fn mean_pair_distance(
    state: &ModelState,
    inputs: &[TokenSequence],
    keywords: &KeywordSet,
    masking: &MaskingConfig,
    epoch: usize,
) -> Result<f64, ModelError> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let pseudo: Vec<TokenSequence> =
        inputs.iter().enumerate().map(|(i, x)| pseudo_sample(x, keywords, masking, epoch, i)).collect();
    let a = state.embed(inputs)?;
    let b = state.embed(&pseudo)?;
    Ok(a.iter().zip(&b).map(|(u, v)| euclidean_distance(u, v)).sum::<f64>() / inputs.len() as f64)
}
