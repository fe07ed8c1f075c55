//! Bidirectional self-attention encoder `f` with a two-layer classifier head
//! `g` and a masked-token head, all trained by hand-written reverse mode.
//!
//! Architecture: learned token and absolute position embeddings, `depth`
//! pre-norm blocks (multi-head attention, GELU feed-forward), a final layer
//! norm whose CLS row is the sentence embedding `f(x)`, and a tanh MLP
//! classifier on top of it.

mod forward;
pub mod optim;
pub mod params;
pub mod train;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TokenId, TokenSequence};
use crate::seed::rng_from_seed;
pub(crate) use forward::{backward_sequence, classifier_backward, forward_sequence, SequenceCache};
pub use optim::{AdamW, AdamWState};
pub use params::{Group, Linear, Params};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("encoder config: {0}")]
    InvalidConfig(&'static str),
    #[error("token id {id} does not index the embedding table of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("empty sequence")]
    EmptySequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    /// Hidden width of the two-layer classifier head.
    pub classifier_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 2,
            model_dim: 64,
            mlp_dim: 128,
            classifier_dim: 64,
            max_len: 32,
            vocab_size: 256,
            dropout: 0.1,
            num_classes: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        use ModelError::InvalidConfig;
        if self.depth == 0 || self.heads == 0 || self.model_dim == 0 || self.mlp_dim == 0 || self.classifier_dim == 0 {
            return Err(InvalidConfig("depth, heads and widths must be positive"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(InvalidConfig("model_dim must be divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(InvalidConfig("dropout must lie in [0, 1)"));
        }
        if self.max_len == 0 || self.vocab_size <= crate::data::RESERVED as usize || self.num_classes < 2 {
            return Err(InvalidConfig("max_len, vocab_size and num_classes are too small"));
        }
        Ok(())
    }
}

/// Which queries the received-attention vector averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionQuery {
    /// Attention paid by the CLS query.
    #[default]
    Cls,
    /// Mean over all non-PAD queries.
    AllQuery,
}

/// Per-input bundle produced by [`ModelState::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `f(x)`, the final hidden state at the CLS position.
    pub cls_embedding: Vec<f64>,
    /// `g(f(x))`.
    pub logits: Vec<f64>,
    /// Final layer, one row per head: attention from the CLS query over all
    /// positions (PAD positions hold 0).
    pub attention: Vec<Vec<f64>>,
    /// Final layer, one row per head: attention averaged over non-PAD queries.
    pub attention_all_query: Vec<Vec<f64>>,
    /// CLS residual stream after each block (intermediate-layer features).
    pub layer_cls: Vec<Vec<f64>>,
}

impl EncoderOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        crate::linalg::softmax(&self.logits)
    }

    /// Feature vector for density scoring: `None` selects `f(x)`, `Some(l)`
    /// the CLS residual after block `l`.
    pub fn feature(&self, layer: Option<usize>) -> &[f64] {
        match layer {
            None => &self.cls_embedding,
            Some(l) => &self.layer_cls[l],
        }
    }
}

/// Per-position attention `a_i`: the mean over final-layer heads of the
/// selected attention rows. PAD positions are 0.
pub fn attention_received(out: &EncoderOutput, query: AttentionQuery) -> Vec<f64> {
    let rows = match query {
        AttentionQuery::Cls => &out.attention,
        AttentionQuery::AllQuery => &out.attention_all_query,
    };
    let len = rows.first().map_or(0, Vec::len);
    let mut a = vec![0.0; len];
    for row in rows {
        for (ai, r) in a.iter_mut().zip(row) {
            *ai += r;
        }
    }
    let heads = rows.len() as f64;
    a.iter_mut().for_each(|v| *v /= heads);
    a
}

/// Parameters plus optimizer moments: the unit saved in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub params: Params,
    pub optimizer: AdamWState,
}

impl ModelState {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let params = Params::init(&config, &mut rng);
        let optimizer = AdamWState::new(&params);
        Ok(Self { config, params, optimizer })
    }

    /// Re-draws the masked-token head and leaves everything else intact.
    pub fn reset_token_head(&mut self, seed: u64) {
        let mut rng = rng_from_seed(seed);
        self.params.token_head = Linear::init(self.config.model_dim, self.config.vocab_size, &mut rng);
    }

    /// Clears optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamWState::new(&self.params);
    }

    pub(crate) fn content<'s>(&self, seq: &'s TokenSequence) -> Result<&'s [TokenId], ModelError> {
        let ids = seq.content();
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong { len: seq.len(), max_len: self.config.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        Ok(ids)
    }

    /// Eval-mode forward pass: deterministic, no dropout.
    pub fn forward(&self, batch: &[TokenSequence]) -> Result<Vec<EncoderOutput>, ModelError> {
        batch.iter().map(|s| self.forward_one::<rand_chacha::ChaCha8Rng>(s, None)).collect()
    }

    /// Train-mode forward pass: dropout active, masks drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        batch: &[TokenSequence],
        rng: &mut R,
    ) -> Result<Vec<EncoderOutput>, ModelError> {
        batch.iter().map(|s| self.forward_one(s, Some(&mut *rng))).collect()
    }

    fn forward_one<R: Rng + ?Sized>(
        &self,
        seq: &TokenSequence,
        rng: Option<&mut R>,
    ) -> Result<EncoderOutput, ModelError> {
        let ids = self.content(seq)?;
        let cache = forward_sequence(&self.config, &self.params, ids, rng, None);
        Ok(self.output(&cache, seq.len()))
    }

    pub(crate) fn output(&self, cache: &SequenceCache, padded_len: usize) -> EncoderOutput {
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let t = cache.len;
        let attn = cache.final_attention();
        let mut attention = Vec::with_capacity(heads);
        let mut all_query = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut row = vec![0.0; padded_len];
            row[..t].copy_from_slice(&attn[h * t * t..h * t * t + t]);
            attention.push(row);
            let mut mean = vec![0.0; padded_len];
            for i in 0..t {
                for (m, a) in mean.iter_mut().zip(&attn[(h * t + i) * t..(h * t + i + 1) * t]) {
                    *m += a;
                }
            }
            mean.iter_mut().for_each(|m| *m /= t as f64);
            all_query.push(mean);
        }
        EncoderOutput {
            cls_embedding: cache.cls(d).to_vec(),
            logits: cache.logits.clone(),
            attention,
            attention_all_query: all_query,
            layer_cls: cache.layer_cls.clone(),
        }
    }

    /// `f(x)` for each sequence, eval mode.
    pub fn embed(&self, batch: &[TokenSequence]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(self.forward(batch)?.into_iter().map(|o| o.cls_embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Vocabulary, CLS, PAD};
    use crate::seed::rng_from_seed;

    fn small() -> ModelState {
        ModelState::new(EncoderConfig {
            depth: 2,
            heads: 2,
            model_dim: 8,
            mlp_dim: 12,
            classifier_dim: 6,
            max_len: 10,
            vocab_size: 20,
            dropout: 0.1,
            num_classes: 3,
            seed: 11,
        })
        .unwrap()
    }

    fn seq(ids: &[TokenId]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), &Vocabulary::new(20).unwrap()).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig { model_dim: 10, heads: 3, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { dropout: 1.0, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = small();
        let batch = [seq(&[CLS, 4, 5, 6]), seq(&[CLS, 9, PAD])];
        assert_eq!(m.forward(&batch).unwrap(), m.forward(&batch).unwrap());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = small();
        let out = &m.forward(&[seq(&[CLS])]).unwrap()[0];
        for row in &out.attention {
            assert_eq!(row, &vec![1.0]);
        }
    }

    #[test]
    fn batching_does_not_change_embeddings() {
        let m = small();
        let a = seq(&[CLS, 4, 5, 6, PAD, PAD]);
        let b = seq(&[CLS, 7, 3]);
        let joint = m.embed(&[a.clone(), b.clone()]).unwrap();
        let solo = [m.embed(&[a]).unwrap().remove(0), m.embed(&[b]).unwrap().remove(0)];
        for (x, y) in joint.iter().zip(&solo) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn padding_receives_no_attention_and_rows_are_stochastic() {
        let m = small();
        let out = &m.forward(&[seq(&[CLS, 4, 5, PAD, PAD])]).unwrap()[0];
        for rows in [&out.attention, &out.attention_all_query] {
            for row in rows {
                assert_eq!(row.len(), 5);
                assert_eq!(&row[3..], &[0.0, 0.0]);
                assert!(row.iter().all(|&a| a >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
        let p = out.probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let a = attention_received(out, AttentionQuery::Cls);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn received_attention_averages_heads() {
        let out = EncoderOutput {
            cls_embedding: vec![],
            logits: vec![],
            attention: vec![vec![0.2, 0.5, 0.3]],
            attention_all_query: vec![vec![1.0, 0.0, 0.0]],
            layer_cls: vec![],
        };
        assert_eq!(attention_received(&out, AttentionQuery::Cls), vec![0.2, 0.5, 0.3]);
        let two = EncoderOutput { attention: vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.1, 0.5]], ..out };
        let a = attention_received(&two, AttentionQuery::Cls);
        for (x, y) in a.iter().zip([0.3, 0.3, 0.4]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_vocabulary_ids() {
        let m = small();
        let wide = TokenSequence::new(vec![CLS, 25], &Vocabulary::new(30).unwrap()).unwrap();
        assert_eq!(m.forward(&[wide]), Err(ModelError::TokenOutOfRange { id: 25, vocab_size: 20 }));
        let long = TokenSequence::new(vec![CLS; 11], &Vocabulary::new(20).unwrap()).unwrap();
        assert!(matches!(m.forward(&[long]), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn train_mode_uses_dropout() {
        let m = small();
        let batch = [seq(&[CLS, 4, 5, 6, 7, 8])];
        let eval = m.forward(&batch).unwrap();
        let a = m.forward_train(&batch, &mut rng_from_seed(1)).unwrap();
        let b = m.forward_train(&batch, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, eval);
    }

    #[test]
    fn zero_dropout_train_mode_equals_eval() {
        let mut m = small();
        m.config.dropout = 0.0;
        let batch = [seq(&[CLS, 4, 5, 6])];
        assert_eq!(m.forward(&batch).unwrap(), m.forward_train(&batch, &mut rng_from_seed(3)).unwrap());
    }
}
