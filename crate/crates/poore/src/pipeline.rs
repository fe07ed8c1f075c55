//! Stage orchestration: base training, keyword selection and post-hoc
//! fine-tuning, then multi-estimator evaluation. Every stage writes its
//! artifacts under the run directory and can be rerun from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use poore_core::data::{generate_synthetic, Dataset, LabeledExample, TokenSequence};
use poore_core::encoder::{attention_received, EncoderConfig, ModelState};
use poore_core::estimators::{EstimatorKind, FittedEstimators};
use poore_core::keywords::{
    default_top_m, select_keywords, token_importance, KeywordCriterion, KeywordSet, MaskingConfig,
};
use poore_core::losses::LossComponents;
use poore_core::mahalanobis::MahalanobisParams;
use poore_core::metrics::{auroc, fpr90, ScoredSet};
use poore_core::seed::{derive_seed, Stage};
use poore_core::training::{fine_tune, mean_pair_distance, train_base, BaseOutcome, Labeled};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result, StageExt};
use crate::io::{self, EstimatorMetrics, Report, ScoreRow};
use crate::plot::histogram_svg;

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.toml")
    }
    pub fn base(&self) -> PathBuf {
        self.0.join("base")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.base().join("checkpoint.json")
    }
    pub fn poore(&self) -> PathBuf {
        self.0.join("poore")
    }
    pub fn poore_checkpoint(&self) -> PathBuf {
        self.poore().join("checkpoint.json")
    }
    pub fn keywords(&self) -> PathBuf {
        self.0.join("keywords")
    }
    pub fn eval(&self, stage: &str) -> PathBuf {
        self.0.join(format!("eval-{stage}"))
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => io::load_jsonl(p, cfg.data.vocab_size, cfg.data.num_classes),
        None => Ok(generate_synthetic(&cfg.data.synthetic)?),
    }
}

/// Encoder settings with data-dependent sizes filled in.
pub fn encoder_config(cfg: &ExperimentConfig, data: &Dataset) -> EncoderConfig {
    EncoderConfig {
        vocab_size: data.vocab.size() as usize,
        num_classes: data.num_classes,
        max_len: cfg.encoder.max_len.max(data.max_len()),
        seed: derive_seed(cfg.seed, Stage::Init),
        ..cfg.encoder.clone()
    }
}

pub fn masking_config(cfg: &ExperimentConfig) -> MaskingConfig {
    MaskingConfig { seed: derive_seed(cfg.seed, Stage::Masking), ..cfg.posthoc.masking }
}

fn labeled(examples: Vec<&LabeledExample>) -> Vec<Labeled> {
    examples.into_iter().filter_map(|e| e.label.map(|y| (e.tokens.clone(), y))).collect()
}

/// Panics if any OOD example was handed out. Called before every stage that
/// must not see outliers.
pub fn assert_no_ood_access(data: &Dataset, stage: &str) {
    assert_eq!(data.ood_reads(), 0, "{stage} read OOD examples");
}

pub fn run_base_training(cfg: &ExperimentConfig, data: &Dataset, run: &RunDir) -> Result<BaseOutcome> {
    let train = labeled(data.train());
    let val = labeled(data.val());
    let initial = ModelState::new(encoder_config(cfg, data)).stage("base")?;
    let outcome = train_base(initial, &train, &val, &cfg.base, cfg.seed).stage("base")?;
    assert_no_ood_access(data, "base training");
    io::save_json(&outcome.best, &run.base_checkpoint())?;
    io::write_file(&run.base().join("curve.csv"), &io::curve_csv(&outcome.curve))?;
    Ok(outcome)
}

/// Mahalanobis fit on the model's train features and the keyword set it
/// induces.
pub fn select_keyword_set(
    cfg: &ExperimentConfig,
    data: &Dataset,
    state: &ModelState,
) -> Result<(MahalanobisParams, KeywordSet)> {
    let train = labeled(data.train());
    let inputs: Vec<TokenSequence> = train.iter().map(|(x, _)| x.clone()).collect();
    let labels: Vec<usize> = train.iter().map(|(_, y)| *y).collect();
    let outputs = state.forward(&inputs).stage("keywords")?;
    let layer = cfg.eval.estimators.feature_layer;
    let features: Vec<Vec<f64>> = outputs.iter().map(|o| o.feature(layer).to_vec()).collect();
    let maha = MahalanobisParams::fit(&features, &labels, data.num_classes).stage("keywords")?;
    let weights: Vec<f64> =
        features.iter().map(|f| maha.normalized_score(f)).collect::<Result<_, _>>().stage("keywords")?;
    let attentions: Vec<Vec<f64>> =
        outputs.iter().map(|o| attention_received(o, cfg.keywords.attention_query)).collect();
    let refs: Vec<&TokenSequence> = inputs.iter().collect();
    let importance = token_importance(&refs, &attentions, &weights, cfg.keywords.criterion)?;
    let m = cfg.keywords.top_m.unwrap_or_else(|| default_top_m(data.observed_train_vocabulary()));
    let keywords = select_keywords(&importance, m, cfg.keywords.criterion)?;
    assert_no_ood_access(data, "keyword selection");
    Ok((maha, keywords))
}

pub fn run_keywords(cfg: &ExperimentConfig, data: &Dataset, state: &ModelState, run: &RunDir) -> Result<KeywordSet> {
    let (maha, keywords) = select_keyword_set(cfg, data, state)?;
    io::save_json(&maha, &run.keywords().join("maha.params"))?;
    io::write_file(&run.keywords().join("keywords.tsv"), &io::keywords_tsv(&keywords))?;
    Ok(keywords)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooreSummary {
    pub criterion: KeywordCriterion,
    pub keywords: usize,
    /// Mean eval-mode ‖f(x) − f(x̃)‖ over the train set, same x̃ before and after.
    pub pair_distance_before: f64,
    pub pair_distance_after: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct PooreOutcome {
    pub state: ModelState,
    pub keywords: KeywordSet,
    /// Fit used for keyword weighting, on the base model.
    pub keyword_mahalanobis: MahalanobisParams,
    /// Fit used at inference: refit on the fine-tuned model unless disabled.
    pub mahalanobis: MahalanobisParams,
    pub steps: Vec<(u64, LossComponents)>,
    pub summary: PooreSummary,
}

pub fn run_poore(cfg: &ExperimentConfig, data: &Dataset, base: &ModelState, run: &RunDir) -> Result<PooreOutcome> {
    let (keyword_mahalanobis, keywords) = select_keyword_set(cfg, data, base)?;
    let train = labeled(data.train());
    let inputs: Vec<TokenSequence> = train.iter().map(|(x, _)| x.clone()).collect();
    let posthoc = poore_core::training::PostHocConfig { masking: masking_config(cfg), ..cfg.posthoc };
    let before = mean_pair_distance(base, &inputs, &keywords, &posthoc.masking, 0).stage("poore")?;
    let mut steps = Vec::new();
    let state = fine_tune(base.clone(), &train, &keywords, &posthoc, cfg.seed, |r| steps.push((r.step, r.components)))
        .stage("poore")?;
    let after = mean_pair_distance(&state, &inputs, &keywords, &posthoc.masking, 0).stage("poore")?;
    let mahalanobis = if cfg.eval.refit_mahalanobis {
        let outputs = state.forward(&inputs).stage("poore")?;
        let layer = cfg.eval.estimators.feature_layer;
        let features: Vec<Vec<f64>> = outputs.iter().map(|o| o.feature(layer).to_vec()).collect();
        let labels: Vec<usize> = train.iter().map(|(_, y)| *y).collect();
        MahalanobisParams::fit(&features, &labels, data.num_classes).stage("poore")?
    } else {
        keyword_mahalanobis.clone()
    };
    assert_no_ood_access(data, "post-hoc fine-tuning");
    let summary = PooreSummary {
        criterion: keywords.criterion,
        keywords: keywords.len(),
        pair_distance_before: before,
        pair_distance_after: after,
        steps: steps.len(),
    };
    let dir = run.poore();
    io::save_json(&state, &run.poore_checkpoint())?;
    io::save_json(&mahalanobis, &dir.join("maha.params"))?;
    io::save_json(&keyword_mahalanobis, &dir.join("maha_keywords.params"))?;
    io::write_file(&dir.join("keywords.tsv"), &io::keywords_tsv(&keywords))?;
    io::write_file(&dir.join("loss.csv"), &io::loss_csv(&steps))?;
    io::write_file(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary).unwrap() + "\n"))?;
    Ok(PooreOutcome { state, keywords, keyword_mahalanobis, mahalanobis, steps, summary })
}

/// Scores the full test split with every estimator in the roster and writes
/// `report.json`, `scores.csv` and one SVG histogram per estimator.
pub fn run_eval(
    cfg: &ExperimentConfig,
    data: &Dataset,
    state: &ModelState,
    mahalanobis: Option<MahalanobisParams>,
    out: &Path,
) -> Result<Report> {
    let train = labeled(data.train());
    let inputs: Vec<TokenSequence> = train.iter().map(|(x, _)| x.clone()).collect();
    let labels: Vec<usize> = train.iter().map(|(_, y)| *y).collect();
    let roster = &cfg.eval.roster;
    let reads = data.ood_reads();
    let fitted = FittedEstimators::fit(state, &inputs, &labels, roster, cfg.eval.estimators, mahalanobis)?;
    assert_eq!(data.ood_reads(), reads, "estimator fitting read OOD examples");

    let test = data.test();
    if test.iter().all(|e| e.is_ood) || test.iter().all(|e| !e.is_ood) {
        return Err(Error::Config("test split needs both IND and OOD examples".into()));
    }
    let tokens: Vec<TokenSequence> = test.iter().map(|e| e.tokens.clone()).collect();
    let seed = derive_seed(cfg.seed, Stage::Estimators);
    let mut report = Report::new();
    let mut rows = Vec::new();
    let mut kinds = roster.clone();
    kinds.sort();
    kinds.dedup();
    for kind in kinds {
        let scores = fitted.score_all(state, kind, &tokens, seed)?;
        let set = ScoredSet::new(scores.iter().zip(&test).map(|(&s, e)| (s, e.is_ood)).collect());
        report.insert(kind.name().to_string(), EstimatorMetrics { auroc: auroc(&set)?, fpr90: fpr90(&set)? });
        let ind: Vec<f64> = set.entries.iter().filter(|e| !e.1).map(|e| e.0).collect();
        let ood: Vec<f64> = set.entries.iter().filter(|e| e.1).map(|e| e.0).collect();
        io::write_file(
            &out.join("histograms").join(format!("{}.svg", kind.name())),
            &histogram_svg(kind.name(), &ind, &ood, cfg.eval.bins),
        )?;
        rows.extend(scores.into_iter().zip(&test).enumerate().map(|(i, (score, e))| (i, e.is_ood, kind.name(), score)));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.cmp(b.2)));
    let rows: Vec<ScoreRow<'_>> = rows
        .into_iter()
        .map(|(example_id, is_ood, estimator, score)| ScoreRow { example_id, is_ood, estimator, score })
        .collect();
    io::write_file(&out.join("scores.csv"), &io::scores_csv(&rows))?;
    io::write_file(&out.join("report.json"), &io::report_json(&report))?;
    io::save_json(&fitted, &out.join("estimators.json"))?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub base: BaseOutcome,
    pub poore: PooreOutcome,
    pub base_report: Report,
    pub poore_report: Report,
}

/// Full protocol: base training, fine-tuning, and evaluation of both models.
pub fn run_all(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let run = RunDir(cfg.output_dir.clone());
    io::write_file(&run.config(), &cfg.to_toml())?;
    let data = load_dataset(cfg)?;
    let base = run_base_training(cfg, &data, &run)?;
    let poore = run_poore(cfg, &data, &base.best, &run)?;
    let base_report = run_eval(cfg, &data, &base.best, None, &run.eval("base"))?;
    let poore_report = run_eval(cfg, &data, &poore.state, Some(poore.mahalanobis.clone()), &run.eval("poore"))?;
    Ok(RunOutcome { base, poore, base_report, poore_report })
}

/// Runs fine-tuning and evaluation once per keyword criterion from a shared
/// base model and writes `ablation/comparison.tsv`.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<BTreeMap<&'static str, (PooreOutcome, Report)>> {
    let root = RunDir(cfg.output_dir.clone());
    io::write_file(&root.config(), &cfg.to_toml())?;
    let data = load_dataset(cfg)?;
    let base = run_base_training(cfg, &data, &root)?;
    // fine-tune every arm before any evaluation reads OOD data
    let mut arms = Vec::new();
    for (name, criterion) in
        [("maha", KeywordCriterion::MahaWeighted), ("baseline", KeywordCriterion::BaselineUnweighted)]
    {
        let mut c = cfg.clone();
        c.keywords.criterion = criterion;
        let run = RunDir(root.0.join("ablation").join(name));
        let poore = run_poore(&c, &data, &base.best, &run)?;
        arms.push((name, c, run, poore));
    }
    let mut results = BTreeMap::new();
    for (name, c, run, poore) in arms {
        let report = run_eval(&c, &data, &poore.state, Some(poore.mahalanobis.clone()), &run.eval("poore"))?;
        results.insert(name, (poore, report));
    }
    let reports: Vec<(String, Report)> = results.iter().map(|(n, (_, r))| (n.to_string(), r.clone())).collect();
    io::write_file(&root.0.join("ablation").join("comparison.tsv"), &comparison_table(&reports))?;
    Ok(results)
}

/// Tab-separated AUROC/FPR@90 table, one row per estimator, one column pair
/// per labeled report.
pub fn comparison_table(reports: &[(String, Report)]) -> String {
    let mut out = String::from("estimator");
    for (label, _) in reports {
        write!(out, "\t{label}.auroc\t{label}.fpr90").unwrap();
    }
    out.push('\n');
    let mut names: Vec<&String> = reports.iter().flat_map(|(_, r)| r.keys()).collect();
    names.sort();
    names.dedup();
    for name in names {
        out.push_str(name);
        for (_, r) in reports {
            match r.get(name) {
                Some(m) => write!(out, "\t{:.4}\t{:.4}", m.auroc, m.fpr90).unwrap(),
                None => out.push_str("\t-\t-"),
            }
        }
        out.push('\n');
    }
    out
}

/// Mean AUROC over the estimators of `kinds` present in `report`.
pub fn mean_auroc(report: &Report, kinds: &[EstimatorKind]) -> f64 {
    let v: Vec<f64> = kinds.iter().filter_map(|k| report.get(k.name())).map(|m| m.auroc).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
