//! Keyword importance, top-M selection, and the two masking transforms:
//! context masking (pseudo-OOD synthesis) and keyword masking (inputs for
//! the masked-keyword loss).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TokenId, TokenSequence, Vocabulary, MASK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeywordError {
    #[error("{examples} examples but {attentions} attention rows and {weights} weights")]
    CountMismatch { examples: usize, attentions: usize, weights: usize },
    #[error("example {index}: attention has {attention} entries for a sequence of length {len}")]
    Misaligned { index: usize, attention: usize, len: usize },
    #[error("requested {requested} keywords but only {available} tokens were scored")]
    TooFewTokens { requested: usize, available: usize },
    #[error("masking probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordCriterion {
    /// Attention weighted by each example's normalized Mahalanobis score.
    #[default]
    #[serde(alias = "maha")]
    MahaWeighted,
    /// Plain average attention (every example weighs 1).
    #[serde(alias = "baseline")]
    BaselineUnweighted,
}

impl KeywordCriterion {
    pub fn as_str(self) -> &'static str {
        match self {
            KeywordCriterion::MahaWeighted => "maha_weighted",
            KeywordCriterion::BaselineUnweighted => "baseline_unweighted",
        }
    }
}

/// Running per-token sums for the importance score. Mergeable, so the
/// corpus can be reduced in any batch split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportanceAccumulator {
    sums: BTreeMap<TokenId, (f64, u64)>,
}

impl ImportanceAccumulator {
    /// Adds every non-reserved occurrence in `seq`, each contributing its
    /// attention times the example weight.
    pub fn add(&mut self, seq: &TokenSequence, attention: &[f64], weight: f64) {
        for (&id, &a) in seq.content().iter().zip(attention) {
            if Vocabulary::is_reserved(id) {
                continue;
            }
            let entry = self.sums.entry(id).or_insert((0.0, 0));
            entry.0 += a * weight;
            entry.1 += 1;
        }
    }

    pub fn merge(&mut self, other: &ImportanceAccumulator) {
        for (&id, &(s, n)) in &other.sums {
            let entry = self.sums.entry(id).or_insert((0.0, 0));
            entry.0 += s;
            entry.1 += n;
        }
    }

    /// `I(v) = sum_v / n_v` for every token seen at least once.
    pub fn finish(&self) -> BTreeMap<TokenId, f64> {
        self.sums.iter().map(|(&id, &(s, n))| (id, s / n as f64)).collect()
    }
}

/// Token importance over a corpus.
///
/// `attentions[k]` holds `a_i` for every position of `examples[k]`;
/// `normalized_scores[k]` is that example's min–max normalized Mahalanobis
/// score, replaced by 1 under the baseline criterion.
pub fn token_importance(
    examples: &[&TokenSequence],
    attentions: &[Vec<f64>],
    normalized_scores: &[f64],
    criterion: KeywordCriterion,
) -> Result<BTreeMap<TokenId, f64>, KeywordError> {
    if examples.len() != attentions.len()
        || (criterion == KeywordCriterion::MahaWeighted && examples.len() != normalized_scores.len())
    {
        return Err(KeywordError::CountMismatch {
            examples: examples.len(),
            attentions: attentions.len(),
            weights: normalized_scores.len(),
        });
    }
    let mut acc = ImportanceAccumulator::default();
    for (index, (seq, attention)) in examples.iter().zip(attentions).enumerate() {
        if attention.len() != seq.len() {
            return Err(KeywordError::Misaligned { index, attention: attention.len(), len: seq.len() });
        }
        let weight = match criterion {
            KeywordCriterion::MahaWeighted => normalized_scores[index],
            KeywordCriterion::BaselineUnweighted => 1.0,
        };
        acc.add(seq, attention, weight);
    }
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawKeywordSet")]
pub struct KeywordSet {
    /// Selected ids, highest importance first.
    pub ranked: Vec<TokenId>,
    /// Importance of every scored token.
    pub importance: BTreeMap<TokenId, f64>,
    pub criterion: KeywordCriterion,
    #[serde(skip)]
    members: BTreeSet<TokenId>,
}

impl KeywordSet {
    pub fn new(ranked: Vec<TokenId>, importance: BTreeMap<TokenId, f64>, criterion: KeywordCriterion) -> Self {
        let members = ranked.iter().copied().collect();
        Self { ranked, importance, criterion, members }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), BTreeMap::new(), KeywordCriterion::default())
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.members.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

#[derive(Deserialize)]
struct RawKeywordSet {
    ranked: Vec<TokenId>,
    importance: BTreeMap<TokenId, f64>,
    criterion: KeywordCriterion,
}

impl From<RawKeywordSet> for KeywordSet {
    fn from(raw: RawKeywordSet) -> Self {
        KeywordSet::new(raw.ranked, raw.importance, raw.criterion)
    }
}

/// Keeps the `m` most important tokens, breaking ties toward lower ids.
pub fn select_keywords(
    importance: &BTreeMap<TokenId, f64>,
    m: usize,
    criterion: KeywordCriterion,
) -> Result<KeywordSet, KeywordError> {
    let mut scored: Vec<(TokenId, f64)> =
        importance.iter().filter(|(id, _)| !Vocabulary::is_reserved(**id)).map(|(&id, &v)| (id, v)).collect();
    if m > scored.len() {
        return Err(KeywordError::TooFewTokens { requested: m, available: scored.len() });
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ranked = scored.into_iter().take(m).map(|(id, _)| id).collect();
    Ok(KeywordSet::new(ranked, importance.clone(), criterion))
}

/// Default keyword budget: 10% of the observed vocabulary, at least one.
pub fn default_top_m(observed_vocabulary: usize) -> usize {
    ((observed_vocabulary as f64 * 0.1 + 0.5) as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub p_mask: f64,
    pub mask_token: TokenId,
    /// Keywords are never context-masked.
    pub protect_keywords: bool,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { p_mask: 0.9, mask_token: MASK, protect_keywords: true, seed: 0 }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), KeywordError> {
        if (0.0..=1.0).contains(&self.p_mask) {
            Ok(())
        } else {
            Err(KeywordError::InvalidProbability(self.p_mask))
        }
    }
}

/// Pseudo-OOD sample: each eligible position independently becomes MASK
/// with probability `p_mask`. Reserved ids are never eligible; keywords are
/// eligible only when `protect_keywords` is off.
pub fn context_mask<R: Rng + ?Sized>(
    x: &TokenSequence,
    keywords: &KeywordSet,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> TokenSequence {
    let ids = x
        .ids()
        .iter()
        .map(|&id| {
            let eligible = !Vocabulary::is_reserved(id) && !(cfg.protect_keywords && keywords.contains(id));
            if eligible && rng.gen::<f64>() < cfg.p_mask {
                cfg.mask_token
            } else {
                id
            }
        })
        .collect();
    TokenSequence::from_trusted(ids)
}

/// Input for the masked-keyword loss: every keyword occurrence replaced by
/// MASK, with the positions and original ids to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordMasked {
    pub input: TokenSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<TokenId>,
}

pub fn keyword_mask(x: &TokenSequence, keywords: &KeywordSet) -> KeywordMasked {
    let mut ids = x.ids().to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, id) in ids.iter_mut().enumerate() {
        if keywords.contains(*id) {
            positions.push(i);
            targets.push(*id);
            *id = MASK;
        }
    }
    KeywordMasked { input: TokenSequence::from_trusted(ids), positions, targets }
}
