//! File formats: JSONL corpora, JSON checkpoints and fitted parameters, and
//! the TSV/CSV/JSON run artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use poore_core::data::{Dataset, LabeledExample, Split, TokenId, TokenSequence, Vocabulary, RESERVED};
use poore_core::keywords::{KeywordCriterion, KeywordSet};
use poore_core::losses::LossComponents;
use poore_core::training::EpochRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, contents).map_err(Error::io(path))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    token_ids: Vec<TokenId>,
    label: Option<usize>,
    is_ood: bool,
    split: Split,
}

/// Loads a JSONL corpus. CLS is prepended where missing. Without explicit
/// sizes the vocabulary and class count are inferred from the largest id
/// and label seen.
pub fn load_jsonl(path: &Path, vocab_size: Option<u32>, num_classes: Option<usize>) -> Result<Dataset> {
    let text = read_file(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, r));
    }
    let max_id = records.iter().flat_map(|(_, r)| r.token_ids.iter().copied()).max().unwrap_or(0);
    let vocab = Vocabulary::new(vocab_size.unwrap_or((max_id + 1).max(RESERVED + 1)))?;
    let num_classes =
        num_classes.unwrap_or_else(|| records.iter().filter_map(|(_, r)| r.label).max().map_or(1, |m| m + 1));
    let mut examples = Vec::with_capacity(records.len());
    for (line, r) in records {
        let err = |e: poore_core::data::DataError| Error::Parse { path: path.into(), line, message: e.to_string() };
        let tokens = TokenSequence::with_cls(r.token_ids, &vocab).map_err(err)?;
        examples.push(LabeledExample::new(tokens, r.label, r.is_ood, r.split, num_classes).map_err(err)?);
    }
    Ok(Dataset::new(vocab, num_classes, examples))
}

/// One compact record per line, fields in schema order.
pub fn jsonl_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    for e in dataset.all() {
        let r = Record { token_ids: e.tokens.ids().to_vec(), label: e.label, is_ood: e.is_ood, split: e.split };
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &jsonl_string(dataset))
}

/// Writes any serializable value as JSON. Floats round-trip exactly.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s =
        serde_json::to_string(value).map_err(|e| Error::Artifact { path: path.into(), message: e.to_string() })?;
    s.push('\n');
    write_file(path, &s)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_file(path)?).map_err(|e| Error::Artifact { path: path.into(), message: e.to_string() })
}

/// Selected keywords in rank order: `token_id`, `importance`, `criterion`.
pub fn keywords_tsv(set: &KeywordSet) -> String {
    let mut out = String::from("token_id\timportance\tcriterion\n");
    for id in &set.ranked {
        let v = set.importance.get(id).copied().unwrap_or(0.0);
        writeln!(out, "{id}\t{v}\t{}", set.criterion.as_str()).unwrap();
    }
    out
}

pub fn load_keywords_tsv(path: &Path) -> Result<KeywordSet> {
    let text = read_file(path)?;
    let mut ranked = Vec::new();
    let mut importance = BTreeMap::new();
    let mut criterion = KeywordCriterion::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        let err = |m: &str| Error::Parse { path: path.into(), line: i + 1, message: m.to_string() };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err("expected 3 tab-separated columns"));
        }
        let id: TokenId = cols[0].parse().map_err(|_| err("bad token id"))?;
        let v: f64 = cols[1].parse().map_err(|_| err("bad importance"))?;
        criterion = match cols[2] {
            "maha_weighted" => KeywordCriterion::MahaWeighted,
            "baseline_unweighted" => KeywordCriterion::BaselineUnweighted,
            _ => return Err(err("unknown criterion")),
        };
        ranked.push(id);
        importance.insert(id, v);
    }
    Ok(KeywordSet::new(ranked, importance, criterion))
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_accuracy,val_accuracy\n");
    for r in curve {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy).unwrap();
    }
    out
}

pub fn loss_csv(steps: &[(u64, LossComponents)]) -> String {
    let mut out = String::from("step,ce,skl,por,total\n");
    for (step, c) in steps {
        writeln!(out, "{step},{},{},{},{}", c.ce, c.skl, c.por, c.total).unwrap();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub auroc: f64,
    pub fpr90: f64,
}

/// Estimator name to metrics; key order is fixed so the file is byte-stable.
pub type Report = BTreeMap<String, EstimatorMetrics>;

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// One score per (example, estimator): `example_id,is_ood,estimator,score`.
pub struct ScoreRow<'a> {
    pub example_id: usize,
    pub is_ood: bool,
    pub estimator: &'a str,
    pub score: f64,
}

pub fn scores_csv(rows: &[ScoreRow<'_>]) -> String {
    let mut out = String::from("example_id,is_ood,estimator,score\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.example_id, r.is_ood, r.estimator, r.score).unwrap();
    }
    out
}
