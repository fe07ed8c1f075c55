use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use poore::config::ExperimentConfig;
use poore::io;
use poore::pipeline::{self, RunDir};
use poore::{Error, Result};
use poore_core::data::SynthConfig;
use poore_core::encoder::ModelState;
use poore_core::mahalanobis::MahalanobisParams;

/// Post-hoc pseudo-OOD regularization: train a classifier, fine-tune it
/// against masked pseudo-outliers, and evaluate OOD confidence estimators.
#[derive(Parser, Debug)]
#[command(name = "poore", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML). Every field has a default.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set posthoc.loss.weights.por=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Synthetic corpus config (TOML), replacing `data.synthetic`.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    /// JSONL corpus, replacing the synthetic generator.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Criterion {
    Maha,
    Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalStage {
    Base,
    Poore,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic corpus as JSONL.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output file; defaults to `<out>/data.jsonl`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Cross-entropy training; keeps the best validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Select keywords from the base checkpoint.
    Keywords {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        criterion: Option<Criterion>,
        #[arg(long)]
        top_m: Option<usize>,
    },
    /// Post-hoc fine-tuning of the base checkpoint.
    Poore {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        criterion: Option<Criterion>,
        #[arg(long)]
        top_m: Option<usize>,
    },
    /// Score the test split with every estimator in the roster.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "poore")]
        stage: EvalStage,
    },
    /// Train, fine-tune and evaluate both models in one go.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune and evaluate once per keyword criterion from one base model.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare report.json files from several run directories.
    Report {
        /// Run directories or report.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

fn load_config(common: &Common, criterion: Option<Criterion>, top_m: Option<usize>) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = &common.synth_config {
        let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
        let synth: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        // route through the override table so later --set flags still win
        let mut t = toml::Table::new();
        t.insert("synthetic".into(), toml::Value::try_from(synth).map_err(|e| Error::Config(e.to_string()))?);
        overrides.push(format!("data.synthetic={}", toml::Value::Table(t)["synthetic"]));
    }
    if let Some(p) = &common.data {
        overrides.push(format!("data.path={}", toml::Value::String(p.display().to_string())));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &common.out {
        overrides.push(format!("output_dir={}", toml::Value::String(o.display().to_string())));
    }
    if let Some(c) = criterion {
        overrides.push(format!(
            "keywords.criterion=\"{}\"",
            match c {
                Criterion::Maha => "maha",
                Criterion::Baseline => "baseline",
            }
        ));
    }
    if let Some(m) = top_m {
        overrides.push(format!("keywords.top_m={m}"));
    }
    overrides.extend(common.overrides.iter().cloned());
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn load_state(path: &Path) -> Result<ModelState> {
    io::load_json(path)
}

fn print_report(title: &str, report: &io::Report) {
    println!("{title}");
    print!("{}", pipeline::comparison_table(&[(title.to_string(), report.clone())]));
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, file } => {
            let cfg = load_config(&common, None, None)?;
            let data = pipeline::load_dataset(&cfg)?;
            let file = file.unwrap_or_else(|| cfg.output_dir.join("data.jsonl"));
            io::write_jsonl(&data, &file)?;
            println!("wrote {} examples to {}", data.len(), file.display());
        }
        Command::Train { common } => {
            let cfg = load_config(&common, None, None)?;
            let run = RunDir(cfg.output_dir.clone());
            io::write_file(&run.config(), &cfg.to_toml())?;
            let data = pipeline::load_dataset(&cfg)?;
            let out = pipeline::run_base_training(&cfg, &data, &run)?;
            if let Some(e) = out.best_epoch {
                let r = out.curve[e - 1];
                println!("best epoch {e}: train acc {:.4}, val acc {:.4}", r.train_accuracy, r.val_accuracy);
            }
            println!("checkpoint {}", run.base_checkpoint().display());
        }
        Command::Keywords { common, criterion, top_m } => {
            let cfg = load_config(&common, criterion, top_m)?;
            let run = RunDir(cfg.output_dir.clone());
            let data = pipeline::load_dataset(&cfg)?;
            let state = load_state(&run.base_checkpoint())?;
            let kw = pipeline::run_keywords(&cfg, &data, &state, &run)?;
            print!("{}", io::keywords_tsv(&kw));
        }
        Command::Poore { common, criterion, top_m } => {
            let cfg = load_config(&common, criterion, top_m)?;
            let run = RunDir(cfg.output_dir.clone());
            let data = pipeline::load_dataset(&cfg)?;
            let state = load_state(&run.base_checkpoint())?;
            let out = pipeline::run_poore(&cfg, &data, &state, &run)?;
            let s = &out.summary;
            println!(
                "{} keywords, {} steps, pair distance {:.4} -> {:.4}",
                s.keywords, s.steps, s.pair_distance_before, s.pair_distance_after
            );
        }
        Command::Eval { common, stage } => {
            let cfg = load_config(&common, None, None)?;
            let run = RunDir(cfg.output_dir.clone());
            let data = pipeline::load_dataset(&cfg)?;
            let (name, state, maha) = match stage {
                EvalStage::Base => ("base", load_state(&run.base_checkpoint())?, None),
                EvalStage::Poore => {
                    let maha: MahalanobisParams = io::load_json(&run.poore().join("maha.params"))?;
                    ("poore", load_state(&run.poore_checkpoint())?, Some(maha))
                }
            };
            let report = pipeline::run_eval(&cfg, &data, &state, maha, &run.eval(name))?;
            print_report(name, &report);
        }
        Command::Run { common } => {
            let cfg = load_config(&common, None, None)?;
            let out = pipeline::run_all(&cfg)?;
            let reports = [("base".to_string(), out.base_report), ("poore".to_string(), out.poore_report)];
            let table = pipeline::comparison_table(&reports);
            io::write_file(&cfg.output_dir.join("comparison.tsv"), &table)?;
            print!("{table}");
            let s = &out.poore.summary;
            println!("pair distance {:.4} -> {:.4}", s.pair_distance_before, s.pair_distance_after);
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common, None, None)?;
            let results = pipeline::run_ablation(&cfg)?;
            let reports: Vec<(String, io::Report)> =
                results.iter().map(|(n, (_, r))| (n.to_string(), r.clone())).collect();
            print!("{}", pipeline::comparison_table(&reports));
        }
        Command::Report { runs, file } => {
            let mut reports = Vec::new();
            for r in &runs {
                let path = if r.is_dir() { find_report(r)? } else { r.clone() };
                reports.push((r.display().to_string(), io::load_json::<io::Report>(&path)?));
            }
            let table = pipeline::comparison_table(&reports);
            if let Some(f) = file {
                io::write_file(&f, &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

/// `report.json` directly inside `dir`, else the post-hoc then base eval.
fn find_report(dir: &Path) -> Result<PathBuf> {
    ["report.json", "eval-poore/report.json", "eval-base/report.json"]
        .iter()
        .map(|p| dir.join(p))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no report.json under {}", dir.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
