//! End-to-end run: splits, training, fusing-weight fit, evaluation and the
//! run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml               resolved configuration
//! manifest.json             config, config hash, seeds, version, status
//! metrics.json              per-seed reports and seed means (no paths, no clocks)
//! history.json              per-model epoch records and gradient traces
//! seed-<s>/models/<m>.json  checkpoints
//! seed-<s>/curves/<m>.csv   served curve on the test split (position,value,count)
//! seed-<s>/curves/ground_truth.csv
//! ```

use std::fs;
use std::path::Path;

use anyhow::Context;
use posbias::eval::{self, evaluate, MetricsReport};
use posbias::experiment::{probe_rows, Splits};
use posbias::fusion::{approx_unaware_curve, epsilon_closed_form, grid_search_alpha, GridSearch, Mixture};
use posbias::models::{serve_curve, train_with_history, GradientProbe, TrainHistory};
use posbias::{ClickModel, FusionResult, ModelKind, PositionCurve, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunKind};

pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    /// Trained kind; `None` for the explicit mixture.
    pub kind: Option<ModelKind>,
    /// Weight on the aware member, for mixtures and fitted-rate models.
    pub alpha: Option<f64>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Label curve of the test split.
    pub ground_truth: PositionCurve,
    /// Label curve of the training split, for comparison only.
    pub train_label_curve: PositionCurve,
    pub fusion: Option<FusionResult>,
    pub grid_eps_fit: Option<GridSearch>,
    pub grid_test: Option<GridSearch>,
    /// Test AUC of the mixture at the closed-form weight.
    pub closed_form_test_auc: Option<f64>,
    pub models: Vec<ModelEntry>,
}

impl SeedReport {
    pub fn model(&self, name: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub auc: f64,
    pub overestimation_ratio: f64,
    pub position_gradient: f64,
    pub estimation_error_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seeds: Vec<SeedReport>,
    /// Means over seeds, in first-seen model order.
    pub summary: Vec<ModelSummary>,
}

impl RunMetrics {
    pub fn summary_for(&self, name: &str) -> Option<&ModelSummary> {
        self.summary.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedHistory {
    pub seed: u64,
    pub models: Vec<(String, TrainHistory)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub seeds: Vec<SeedHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub status: String,
    pub config: ExperimentConfig,
}

/// File-name form of a model name: `GI(0.25)` becomes `gi_0.25`.
pub fn slug(name: &str) -> String {
    name.to_ascii_lowercase().replace('(', "_").replace(')', "")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Kinds to train, in training order. Mixtures and fitted-rate models pull
/// in their members.
fn training_plan(kinds: &[RunKind]) -> Vec<ModelKind> {
    let needs_members = kinds
        .iter()
        .any(|k| matches!(k, RunKind::Mixture | RunKind::FittedRate));
    let listed = |m: ModelKind| kinds.contains(&RunKind::Model(m));
    let mut out = Vec::new();
    for m in [ModelKind::Base, ModelKind::StPsf] {
        if listed(m) || needs_members {
            out.push(m);
        }
    }
    if listed(ModelKind::Pal) {
        out.push(ModelKind::Pal);
    }
    out.extend(kinds.iter().filter_map(|k| match k {
        RunKind::Model(m @ ModelKind::Gi { .. }) => Some(*m),
        _ => None,
    }));
    out
}

struct Trained {
    name: String,
    model: TrainedModel,
    alpha: Option<f64>,
}

fn stage<T>(name: &str, seed: u64, r: posbias::Result<T>) -> anyhow::Result<T> {
    r.with_context(|| format!("stage {name} failed (seed {seed})"))
}

fn run_seed(
    config: &ExperimentConfig,
    kinds: &[RunKind],
    seed: u64,
    dir: &Path,
    history: &mut RunHistory,
) -> anyhow::Result<SeedReport> {
    let seed_dir = dir.join(format!("seed-{seed}"));
    let models_dir = seed_dir.join("models");
    let curves_dir = seed_dir.join("curves");
    for d in [&models_dir, &curves_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }

    eprintln!("[seed {seed}] generating splits");
    let Splits {
        train,
        validation,
        eps_fit,
        test,
    } = stage("generate", seed, config.plan().build(seed))?;
    let ground_truth = stage("ground truth", seed, eval::empirical_curve(&test))?;
    let fit_truth = stage("ground truth", seed, eval::empirical_curve(&eps_fit))?;
    let train_label_curve = stage("ground truth", seed, eval::empirical_curve(&train))?;
    fs::write(curves_dir.join("ground_truth.csv"), ground_truth.to_csv())?;
    let probe = GradientProbe {
        rows: probe_rows(&test, config.probe_size),
        every_steps: config.trace_every,
    };
    let train_config = config.train_config(seed);

    let mut seed_history = SeedHistory {
        seed,
        models: Vec::new(),
    };
    let mut trained: Vec<Trained> = Vec::new();
    let mut fit = |kind: ModelKind, name: String, alpha: Option<f64>, trained: &mut Vec<Trained>| {
        eprintln!("[seed {seed}] training {name}");
        let (model, h) = stage(
            &format!("train {name}"),
            seed,
            train_with_history(kind, &train, &validation, &train_config, Some(&probe)),
        )?;
        stage(
            &format!("save {name}"),
            seed,
            model.save(models_dir.join(format!("{}.json", slug(&name)))),
        )?;
        seed_history.models.push((name.clone(), h));
        trained.push(Trained { name, model, alpha });
        anyhow::Ok(())
    };
    for kind in training_plan(kinds) {
        fit(kind, kind.to_string(), None, &mut trained)?;
    }

    let find = |trained: &[Trained], kind: ModelKind| trained.iter().position(|t| t.model.kind() == kind);
    let aware_idx = find(&trained, ModelKind::StPsf);
    let unaware_idx = find(&trained, ModelKind::Base);

    let fusion = match aware_idx {
        Some(a) => {
            let p_a = stage("fuse", seed, serve_curve(&trained[a].model, &eps_fit))?;
            let p_u = match unaware_idx {
                Some(u) if config.exact_unaware => stage("fuse", seed, serve_curve(&trained[u].model, &eps_fit))?,
                _ => stage("fuse", seed, approx_unaware_curve(&p_a))?,
            };
            Some(stage("fuse", seed, epsilon_closed_form(&fit_truth, &p_a, &p_u))?)
        }
        None => None,
    };

    if let (true, Some(f)) = (kinds.contains(&RunKind::FittedRate), &fusion) {
        let kind = stage("fit rate", seed, ModelKind::gi(f.randomization_rate))?;
        fit(kind, RunKind::FittedRate.to_string(), Some(f.alpha), &mut trained)?;
    }

    let mut models = Vec::new();
    for t in &trained {
        eprintln!("[seed {seed}] evaluating {}", t.name);
        let report = stage(
            &format!("evaluate {}", t.name),
            seed,
            evaluate(&t.model, &test, &ground_truth, probe.rows.view()),
        )?;
        fs::write(curves_dir.join(format!("{}.csv", slug(&t.name))), report.curve.to_csv())?;
        models.push(ModelEntry {
            name: t.name.clone(),
            kind: Some(t.model.kind()),
            alpha: t.alpha,
            report,
        });
    }

    let (mut grid_eps_fit, mut grid_test, mut closed_form_test_auc) = (None, None, None);
    if let (Some(a), Some(u), Some(f)) = (aware_idx, unaware_idx, &fusion) {
        let (aware, unaware) = (&trained[a].model, &trained[u].model);
        let step = config.alpha_grid_step;
        grid_eps_fit = Some(stage(
            "grid search",
            seed,
            grid_search_alpha(aware, unaware, &eps_fit, step),
        )?);
        grid_test = Some(stage(
            "grid search",
            seed,
            grid_search_alpha(aware, unaware, &test, step),
        )?);
        let mixture = stage("mix", seed, Mixture::new(aware, unaware, f.alpha))?;
        let report = stage(
            "evaluate GI",
            seed,
            evaluate(&mixture as &dyn ClickModel, &test, &ground_truth, probe.rows.view()),
        )?;
        closed_form_test_auc = Some(report.auc);
        if kinds.contains(&RunKind::Mixture) {
            let name = RunKind::Mixture.to_string();
            fs::write(curves_dir.join(format!("{}.csv", slug(&name))), report.curve.to_csv())?;
            models.push(ModelEntry {
                name,
                kind: None,
                alpha: Some(f.alpha),
                report,
            });
        }
    }

    history.seeds.push(seed_history);
    Ok(SeedReport {
        seed,
        ground_truth,
        train_label_curve,
        fusion,
        grid_eps_fit,
        grid_test,
        closed_form_test_auc,
        models,
    })
}

fn summarize(seeds: &[SeedReport]) -> Vec<ModelSummary> {
    let mut names: Vec<&str> = Vec::new();
    for s in seeds {
        for m in &s.models {
            if !names.contains(&m.name.as_str()) {
                names.push(&m.name);
            }
        }
    }
    names
        .into_iter()
        .map(|name| {
            let reports: Vec<&MetricsReport> = seeds.iter().filter_map(|s| s.model(name)).map(|m| &m.report).collect();
            let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64;
            ModelSummary {
                name: name.to_string(),
                auc: mean(|r| r.auc),
                overestimation_ratio: mean(|r| r.overestimation_ratio),
                position_gradient: mean(|r| r.position_gradient),
                estimation_error_sq: mean(|r| r.estimation_error_sq),
            }
        })
        .collect()
}

/// Runs every seed of `config`, writing the run directory as it goes. On
/// failure the manifest records the failing stage and earlier artifacts stay
/// in place.
pub fn run_pipeline(config: &ExperimentConfig, deterministic: bool) -> anyhow::Result<RunMetrics> {
    config.validate()?;
    let kinds = config.run_kinds()?;
    let dir = config.out.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        deterministic,
        status: "running".into(),
        config: config.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;

    let mut history = RunHistory::default();
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        match run_seed(config, &kinds, seed, &dir, &mut history) {
            Ok(r) => reports.push(r),
            Err(e) => {
                manifest.status = format!("failed: {e:#}");
                write_json(&dir.join(MANIFEST_FILE), &manifest)?;
                write_json(&dir.join(HISTORY_FILE), &history)?;
                return Err(e);
            }
        }
    }
    let metrics = RunMetrics {
        summary: summarize(&reports),
        seeds: reports,
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    write_json(&dir.join(HISTORY_FILE), &history)?;
    manifest.status = "complete".into();
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(metrics)
}
