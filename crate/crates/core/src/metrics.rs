//! Rank-based OOD detection metrics. IND is the positive class and higher
//! scores mean "more in-distribution".

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("scored set has {ind} IND and {ood} OOD entries; both must be nonzero")]
    EmptyClass { ind: usize, ood: usize },
    #[error("score at index {0} is not finite")]
    NonFinite(usize),
    #[error("recall {0} is outside (0, 1]")]
    InvalidRecall(f64),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    /// `(score, is_ood)`
    pub entries: Vec<(f64, bool)>,
}

impl ScoredSet {
    pub fn new(entries: Vec<(f64, bool)>) -> Self {
        Self { entries }
    }

    pub fn from_parts(ind: &[f64], ood: &[f64]) -> Self {
        let entries = ind.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
        Self { entries }
    }

    fn split(&self) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
        if let Some(i) = self.entries.iter().position(|(s, _)| !s.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
        let ind: Vec<f64> = self.entries.iter().filter(|e| !e.1).map(|e| e.0).collect();
        let ood: Vec<f64> = self.entries.iter().filter(|e| e.1).map(|e| e.0).collect();
        if ind.is_empty() || ood.is_empty() {
            return Err(MetricsError::EmptyClass { ind: ind.len(), ood: ood.len() });
        }
        Ok((ind, ood))
    }
}

/// P(score of a random IND entry > score of a random OOD entry), ties
/// counted one half. Computed from mid-rank sums (Mann–Whitney U).
pub fn auroc(set: &ScoredSet) -> Result<f64, MetricsError> {
    let (ind, ood) = set.split()?;
    let mut all: Vec<(f64, bool)> = set.entries.clone();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of 2·rank over IND entries keeps every quantity an exact integer.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        let ind_in_group = all[i..=j].iter().filter(|e| !e.1).count() as u64;
        twice_rank_sum += twice_mid * ind_in_group;
        i = j + 1;
    }
    let n_ind = ind.len() as u64;
    let twice_u = twice_rank_sum - n_ind * (n_ind + 1);
    Ok(twice_u as f64 / (2.0 * n_ind as f64 * ood.len() as f64))
}

/// Smallest k with k/n ≥ recall.
fn required_count(n: usize, recall: f64) -> usize {
    (1..=n).find(|&k| k as f64 / n as f64 >= recall).unwrap_or(n)
}

/// Fraction of OOD entries accepted at the largest threshold τ that still
/// accepts (score ≥ τ) at least `recall` of the IND entries.
pub fn fpr_at_recall(set: &ScoredSet, recall: f64) -> Result<f64, MetricsError> {
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(MetricsError::InvalidRecall(recall));
    }
    let (mut ind, ood) = set.split()?;
    ind.sort_by(|a, b| b.total_cmp(a));
    let k = required_count(ind.len(), recall);
    let tau = ind[k - 1];
    let accepted = ood.iter().filter(|&&s| s >= tau).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// FPR at 90% IND recall.
pub fn fpr90(set: &ScoredSet) -> Result<f64, MetricsError> {
    fpr_at_recall(set, 0.9)
}
