//! Token sequences, labeled examples and the seeded synthetic intent corpus.

use alloc::vec::Vec;
use core::cell::Cell;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const CLS: TokenId = 2;
/// Number of reserved ids at the front of every vocabulary.
pub const RESERVED: TokenId = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("vocabulary size {0} leaves no room beyond the reserved ids")]
    VocabularyTooSmall(u32),
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("token sequence must start with CLS, found {0}")]
    MissingCls(TokenId),
    #[error("PAD at position {0} is followed by a non-PAD token")]
    InteriorPad(usize),
    #[error("token id {id} at position {position} is outside the vocabulary of size {size}")]
    TokenOutOfRange { id: TokenId, position: usize, size: u32 },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("OOD example must be in the test split without a label")]
    OodOutsideTest,
    #[error("in-distribution example needs a label")]
    MissingLabel,
    #[error("label {label} is not below num_classes {num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("synthetic config: {0}")]
    InvalidConfig(&'static str),
}

/// Token id space. PAD, MASK and CLS occupy ids 0, 1, 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self, DataError> {
        if size <= RESERVED {
            return Err(DataError::VocabularyTooSmall(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.size
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < RESERVED
    }
}

/// A model input: CLS first, PAD only as a trailing run.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self, DataError> {
        let first = *ids.first().ok_or(DataError::EmptySequence)?;
        if first != CLS {
            return Err(DataError::MissingCls(first));
        }
        let mut pad_at = None;
        for (position, &id) in ids.iter().enumerate() {
            if !vocab.contains(id) {
                return Err(DataError::TokenOutOfRange { id, position, size: vocab.size() });
            }
            match (id == PAD, pad_at) {
                (true, None) => pad_at = Some(position),
                (false, Some(p)) => return Err(DataError::InteriorPad(p)),
                _ => {}
            }
        }
        Ok(Self { ids })
    }

    /// Prepends CLS unless the ids already start with it.
    pub fn with_cls(mut ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self, DataError> {
        if ids.first() != Some(&CLS) {
            ids.insert(0, CLS);
        }
        Self::new(ids, vocab)
    }

    /// Caller guarantees the invariants (used by masking, which only swaps
    /// non-reserved ids for MASK).
    pub(crate) fn from_trusted(ids: Vec<TokenId>) -> Self {
        debug_assert_eq!(ids.first(), Some(&CLS));
        Self { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Length including any trailing PAD.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length without the trailing PAD run.
    pub fn content_len(&self) -> usize {
        self.ids.iter().position(|&id| id == PAD).unwrap_or(self.ids.len())
    }

    pub fn content(&self) -> &[TokenId] {
        &self.ids[..self.content_len()]
    }

    pub fn max_id(&self) -> TokenId {
        self.ids.iter().copied().max().unwrap_or(CLS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: TokenSequence,
    pub label: Option<usize>,
    pub is_ood: bool,
    pub split: Split,
}

impl LabeledExample {
    pub fn new(
        tokens: TokenSequence,
        label: Option<usize>,
        is_ood: bool,
        split: Split,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if is_ood {
            if split != Split::Test || label.is_some() {
                return Err(DataError::OodOutsideTest);
            }
        } else {
            match label {
                None => return Err(DataError::MissingLabel),
                Some(label) if label >= num_classes => return Err(DataError::LabelOutOfRange { label, num_classes }),
                _ => {}
            }
        }
        Ok(Self { tokens, label, is_ood, split })
    }
}

/// A labeled corpus with a read guard on its OOD examples. Training code only
/// reaches IND train/val examples; every OOD example handed out by
/// [`Dataset::test`] is counted.
#[derive(Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub num_classes: usize,
    examples: Vec<LabeledExample>,
    ood_reads: Cell<usize>,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            vocab: self.vocab,
            num_classes: self.num_classes,
            examples: self.examples.clone(),
            ood_reads: Cell::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.num_classes == other.num_classes && self.examples == other.examples
    }
}

impl Dataset {
    pub fn new(vocab: Vocabulary, num_classes: usize, examples: Vec<LabeledExample>) -> Self {
        Self { vocab, num_classes, examples, ood_reads: Cell::new(0) }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Longest sequence in the corpus.
    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(1)
    }

    /// In-distribution examples of the train split.
    pub fn train(&self) -> Vec<&LabeledExample> {
        self.ind_split(Split::Train)
    }

    pub fn val(&self) -> Vec<&LabeledExample> {
        self.ind_split(Split::Val)
    }

    fn ind_split(&self, split: Split) -> Vec<&LabeledExample> {
        self.examples.iter().filter(|e| e.split == split && !e.is_ood).collect()
    }

    /// The full test split, IND and OOD. Counts OOD reads.
    pub fn test(&self) -> Vec<&LabeledExample> {
        let test: Vec<_> = self.examples.iter().filter(|e| e.split == Split::Test).collect();
        let ood = test.iter().filter(|e| e.is_ood).count();
        self.ood_reads.set(self.ood_reads.get() + ood);
        test
    }

    /// Number of OOD examples handed out so far.
    pub fn ood_reads(&self) -> usize {
        self.ood_reads.get()
    }

    /// Every example, in order, for serialization. Counts OOD reads.
    pub fn all(&self) -> &[LabeledExample] {
        let ood = self.examples.iter().filter(|e| e.is_ood).count();
        self.ood_reads.set(self.ood_reads.get() + ood);
        &self.examples
    }

    /// Distinct non-reserved token ids among IND train examples.
    pub fn observed_train_vocabulary(&self) -> usize {
        let mut seen = alloc::collections::BTreeSet::new();
        for e in self.train() {
            seen.extend(e.tokens.content().iter().copied().filter(|&t| !Vocabulary::is_reserved(t)));
        }
        seen.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    /// OOD sentences carry keywords of classes never seen in training.
    HeldoutClass,
    /// OOD sentences use a vocabulary region no IND sentence touches.
    DisjointVocab,
}

/// Synthetic corpus layout. Ids are laid out as
/// `[reserved | class keyword pools (IND then held-out) | context pool | OOD region]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Extra keyword pools used only by OOD sentences in `heldout_class` mode.
    pub heldout_classes: usize,
    pub vocab_size: u32,
    pub keywords_per_class: usize,
    pub context_pool_size: usize,
    /// Sentence length range, CLS excluded.
    pub min_len: usize,
    pub max_len: usize,
    /// Keyword tokens per sentence, at least one.
    pub min_keywords: usize,
    pub max_keywords: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_ind_size: usize,
    pub test_ood_size: usize,
    pub ood_mode: OodMode,
    /// Leading context ids OOD sentences may share in `disjoint_vocab` mode.
    pub shared_context: usize,
    /// Chance that an OOD sentence also carries one IND keyword.
    pub ood_ind_keyword_prob: f64,
    /// Chance that an IND sentence carries one keyword of another IND class.
    pub ind_cross_keyword_prob: f64,
    /// In `heldout_class` mode, chance that each context token of an OOD
    /// sentence comes from the OOD region instead of the shared pool.
    pub ood_novel_context_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            heldout_classes: 2,
            vocab_size: 256,
            keywords_per_class: 8,
            context_pool_size: 120,
            min_len: 6,
            max_len: 14,
            min_keywords: 1,
            max_keywords: 3,
            train_size: 800,
            val_size: 200,
            test_ind_size: 300,
            test_ood_size: 300,
            ood_mode: OodMode::HeldoutClass,
            shared_context: 0,
            ood_ind_keyword_prob: 0.0,
            ind_cross_keyword_prob: 0.0,
            ood_novel_context_prob: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn keyword_base(&self, pool: usize) -> TokenId {
        RESERVED + (pool * self.keywords_per_class) as TokenId
    }

    fn pool_count(&self) -> usize {
        match self.ood_mode {
            OodMode::HeldoutClass => self.num_classes + self.heldout_classes,
            OodMode::DisjointVocab => self.num_classes,
        }
    }

    fn context_base(&self) -> TokenId {
        self.keyword_base(self.pool_count())
    }

    fn ood_region(&self) -> (TokenId, TokenId) {
        (self.context_base() + self.context_pool_size as TokenId, self.vocab_size)
    }

    /// Keyword ids of IND class `c`.
    pub fn class_keywords(&self, class: usize) -> core::ops::Range<TokenId> {
        let base = self.keyword_base(class);
        base..base + self.keywords_per_class as TokenId
    }

    pub fn context_ids(&self) -> core::ops::Range<TokenId> {
        let base = self.context_base();
        base..base + self.context_pool_size as TokenId
    }

    pub fn validate(&self) -> Result<(), DataError> {
        use DataError::InvalidConfig;
        if self.num_classes < 2 {
            return Err(InvalidConfig("num_classes must be at least 2"));
        }
        if self.keywords_per_class == 0 || self.context_pool_size == 0 {
            return Err(InvalidConfig("keyword and context pools must be non-empty"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(InvalidConfig("sentence length range must satisfy 1 <= min_len <= max_len"));
        }
        if self.min_keywords == 0 || self.min_keywords > self.max_keywords || self.min_keywords > self.min_len {
            return Err(InvalidConfig(
                "keyword count range must satisfy 1 <= min_keywords <= max_keywords and min_keywords <= min_len",
            ));
        }
        for p in [self.ood_ind_keyword_prob, self.ind_cross_keyword_prob, self.ood_novel_context_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(InvalidConfig("probabilities must lie in [0, 1]"));
            }
        }
        let ind_budget =
            self.keywords_per_class as u64 * self.num_classes as u64 + self.context_pool_size as u64 + RESERVED as u64;
        if ind_budget > self.vocab_size as u64 {
            return Err(InvalidConfig(
                "keywords_per_class * num_classes + context_pool_size + reserved ids exceeds vocab_size",
            ));
        }
        let used = self.ood_region().0 as u64;
        match self.ood_mode {
            OodMode::HeldoutClass => {
                if self.heldout_classes == 0 {
                    return Err(InvalidConfig("heldout_class mode needs heldout_classes >= 1"));
                }
                if used > self.vocab_size as u64 {
                    return Err(InvalidConfig("held-out keyword pools do not fit in vocab_size"));
                }
                if self.ood_novel_context_prob > 0.0 && used >= self.vocab_size as u64 {
                    return Err(InvalidConfig("ood_novel_context_prob needs ids left over for the OOD region"));
                }
            }
            OodMode::DisjointVocab => {
                if used >= self.vocab_size as u64 {
                    return Err(InvalidConfig("disjoint_vocab mode needs ids left over for the OOD region"));
                }
                if self.shared_context > self.context_pool_size {
                    return Err(InvalidConfig("shared_context exceeds context_pool_size"));
                }
            }
        }
        Ok(())
    }

    /// Total sequence length bound including CLS.
    pub fn sequence_len_bound(&self) -> usize {
        self.max_len + 1 + usize::from(self.ind_cross_keyword_prob > 0.0 || self.ood_ind_keyword_prob > 0.0)
    }
}

/// Draws a seeded synthetic corpus: train, val and test IND sentences
/// followed by the test OOD sentences.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg.vocab_size)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.train_size + cfg.val_size + cfg.test_ind_size + cfg.test_ood_size);

    let context = cfg.context_ids();
    for (split, count) in [(Split::Train, cfg.train_size), (Split::Val, cfg.val_size), (Split::Test, cfg.test_ind_size)]
    {
        for _ in 0..count {
            let class = rng.gen_range(0..cfg.num_classes);
            let mut ids = sentence(cfg, &mut rng, cfg.class_keywords(class), context.clone());
            if rng.gen_bool(cfg.ind_cross_keyword_prob) {
                let other = (class + rng.gen_range(1..cfg.num_classes)) % cfg.num_classes;
                let extra = rng.gen_range(cfg.class_keywords(other));
                insert_random(&mut ids, &mut rng, extra);
            }
            let tokens = finish(ids, &vocab)?;
            examples.push(LabeledExample::new(tokens, Some(class), false, split, cfg.num_classes)?);
        }
    }

    for _ in 0..cfg.test_ood_size {
        let ids = match cfg.ood_mode {
            OodMode::HeldoutClass => {
                let pool = cfg.num_classes + rng.gen_range(0..cfg.heldout_classes);
                let base = cfg.keyword_base(pool);
                let keywords = base..base + cfg.keywords_per_class as TokenId;
                let mut ids = sentence(cfg, &mut rng, keywords, context.clone());
                if cfg.ood_novel_context_prob > 0.0 {
                    let (lo, hi) = cfg.ood_region();
                    for id in ids.iter_mut().filter(|id| context.contains(id)) {
                        if rng.gen_bool(cfg.ood_novel_context_prob) {
                            *id = rng.gen_range(lo..hi);
                        }
                    }
                }
                if rng.gen_bool(cfg.ood_ind_keyword_prob) {
                    let class = rng.gen_range(0..cfg.num_classes);
                    let extra = rng.gen_range(cfg.class_keywords(class));
                    insert_random(&mut ids, &mut rng, extra);
                }
                ids
            }
            OodMode::DisjointVocab => {
                let (lo, hi) = cfg.ood_region();
                let ctx = if cfg.shared_context > 0 {
                    context.start..context.start + cfg.shared_context as TokenId
                } else {
                    lo..hi
                };
                sentence(cfg, &mut rng, lo..hi, ctx)
            }
        };
        let tokens = finish(ids, &vocab)?;
        examples.push(LabeledExample::new(tokens, None, true, Split::Test, cfg.num_classes)?);
    }

    Ok(Dataset::new(vocab, cfg.num_classes, examples))
}

fn insert_random<R: Rng + ?Sized>(ids: &mut Vec<TokenId>, rng: &mut R, token: TokenId) {
    let at = rng.gen_range(0..=ids.len());
    ids.insert(at, token);
}

fn sentence<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    rng: &mut R,
    keywords: core::ops::Range<TokenId>,
    context: core::ops::Range<TokenId>,
) -> Vec<TokenId> {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let n_keywords = rng.gen_range(cfg.min_keywords..=cfg.max_keywords.min(len));
    let mut ids: Vec<TokenId> = (0..len)
        .map(|i| if i < n_keywords { rng.gen_range(keywords.clone()) } else { rng.gen_range(context.clone()) })
        .collect();
    ids.shuffle(rng);
    ids
}

fn finish(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<TokenSequence, DataError> {
    TokenSequence::with_cls(ids, vocab)
}
