//! Flat experiment configuration.
//!
//! The file format is TOML restricted to top-level `key = value` pairs. Every
//! key has a command-line flag of the same name with dashes, which wins over
//! the file:
//!
//! ```toml
//! seeds = [1, 2, 3]
//! kinds = ["base", "st_psf", "gi"]
//! l2_coeff = 1e-4
//! max_epochs = 30
//! ```
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seeds` | `[1, 2, 3]` | one full run per seed |
//! | `out` | `runs/latest` | run directory |
//! | `kinds` | `["base", "st_psf", "gi"]` | models to report, see [`RunKind`] |
//! | `alpha_grid_step` | `0.1` | step of the fusing-weight grid search |
//! | `exact_unaware` | `false` | use the trained BASE curve instead of the mean approximation |
//! | `probe_size` | `10000` | random-traffic rows for the position gradient |
//! | `trace_every` | `500` | optimizer steps between gradient-trace points (0 = off) |
//! | `rs_users` | `50000` | ranking-biased users |
//! | `random_users` | `10000` | random-traffic users |
//! | `items_per_query` | `10` | K |
//! | `noise_scale` | `1.0` | scale of the per-exposure noise |
//! | `resample_noise` | `false` | redraw the noise after placement |
//! | `train_fraction` | `0.8` | leading share of ranking-biased users used for training |
//! | `validation_fraction` | `0.1` | trailing share used for early stopping |
//! | `eps_fit_fraction` | `0.5` | share of random-traffic users used to fit the weight |
//! | `hidden_sizes` | `[64, 32]` | main network hidden layers |
//! | `tower_hidden_sizes` | `[]` | position tower hidden layers |
//! | `tower_user_features` | `false` | feed user features to the tower |
//! | `l2_coeff` | `1e-4` | λ |
//! | `learning_rate` | `1e-3` | Adam step size |
//! | `batch_size` | `1024` | |
//! | `beta1`, `beta2`, `adam_epsilon` | `0.9`, `0.999`, `1e-8` | Adam moments |
//! | `max_epochs` | `30` | |
//! | `patience` | `8` | epochs without validation gain before stopping (0 = never) |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::Args;
use posbias::experiment::SplitPlan;
use posbias::{ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One entry of `kinds`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RunKind {
    /// A model trained on its own.
    Model(ModelKind),
    /// `ST_PSF` and `BASE` mixed at the closed-form weight (`gi`).
    Mixture,
    /// Randomized-position training at rate `1 - alpha` (`gi:fit`).
    FittedRate,
}

impl FromStr for RunKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gi" => Ok(RunKind::Mixture),
            "gi:fit" => Ok(RunKind::FittedRate),
            other => Ok(RunKind::Model(other.parse()?)),
        }
    }
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunKind::Model(kind) => kind.fmt(f),
            RunKind::Mixture => f.write_str("GI"),
            RunKind::FittedRate => f.write_str("GI_FIT"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub kinds: Vec<String>,
    pub alpha_grid_step: f64,
    pub exact_unaware: bool,
    pub probe_size: usize,
    pub trace_every: usize,

    pub rs_users: usize,
    pub random_users: usize,
    pub items_per_query: usize,
    pub noise_scale: f64,
    pub resample_noise: bool,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub eps_fit_fraction: f64,

    pub hidden_sizes: Vec<usize>,
    pub tower_hidden_sizes: Vec<usize>,
    pub tower_user_features: bool,
    pub l2_coeff: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let plan = SplitPlan::default();
        let train = TrainConfig::default();
        Self {
            seeds: vec![1, 2, 3],
            out: PathBuf::from("runs/latest"),
            kinds: vec!["base".into(), "st_psf".into(), "gi".into()],
            alpha_grid_step: 0.1,
            exact_unaware: false,
            probe_size: 10_000,
            trace_every: 500,
            rs_users: plan.rs_users,
            random_users: plan.random_users,
            items_per_query: plan.items_per_query,
            noise_scale: plan.noise_scale,
            resample_noise: plan.resample_noise,
            train_fraction: plan.train_fraction,
            validation_fraction: plan.validation_fraction,
            eps_fit_fraction: plan.eps_fit_fraction,
            hidden_sizes: train.hidden_sizes,
            tower_hidden_sizes: train.tower_hidden_sizes,
            tower_user_features: train.tower_user_features,
            l2_coeff: train.l2_coeff,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            beta1: train.beta1,
            beta2: train.beta2,
            adam_epsilon: train.adam_epsilon,
            max_epochs: train.max_epochs,
            patience: train.patience,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn plan(&self) -> SplitPlan {
        SplitPlan {
            rs_users: self.rs_users,
            random_users: self.random_users,
            items_per_query: self.items_per_query,
            noise_scale: self.noise_scale,
            resample_noise: self.resample_noise,
            train_fraction: self.train_fraction,
            validation_fraction: self.validation_fraction,
            eps_fit_fraction: self.eps_fit_fraction,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden_sizes: self.hidden_sizes.clone(),
            tower_hidden_sizes: self.tower_hidden_sizes.clone(),
            tower_user_features: self.tower_user_features,
            l2_coeff: self.l2_coeff,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }

    pub fn run_kinds(&self) -> anyhow::Result<Vec<RunKind>> {
        self.kinds
            .iter()
            .map(|k| k.parse().with_context(|| format!("kinds entry {k:?}")))
            .collect()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.out.as_os_str().is_empty() {
            bail!("out must name a directory");
        }
        if self.kinds.is_empty() {
            bail!("kinds must not be empty");
        }
        let kinds = self.run_kinds()?;
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                bail!("kinds entry {k} listed twice");
            }
        }
        if !(self.alpha_grid_step > 0.0 && self.alpha_grid_step <= 1.0) {
            bail!("alpha_grid_step must lie in (0, 1]");
        }
        if self.probe_size == 0 {
            bail!("probe_size must be positive");
        }
        self.plan().validate()?;
        self.train_config(0).validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Comma-separated layer sizes; the empty string means no hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Sizes(pub Vec<usize>);

impl FromStr for Sizes {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map(Sizes)
    }
}

/// Config file plus one override flag per key.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a single seed (shorthand for `--seeds <SEED>`).
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated: base, st_psf, pal, gi, gi:fit, gi:<rate>.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    #[arg(long)]
    pub alpha_grid_step: Option<f64>,
    #[arg(long)]
    pub exact_unaware: Option<bool>,
    #[arg(long)]
    pub probe_size: Option<usize>,
    #[arg(long)]
    pub trace_every: Option<usize>,
    #[arg(long)]
    pub rs_users: Option<usize>,
    #[arg(long)]
    pub random_users: Option<usize>,
    #[arg(long)]
    pub items_per_query: Option<usize>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub resample_noise: Option<bool>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub eps_fit_fraction: Option<f64>,
    #[arg(long)]
    pub hidden_sizes: Option<Sizes>,
    #[arg(long)]
    pub tower_hidden_sizes: Option<Sizes>,
    #[arg(long)]
    pub tower_user_features: Option<bool>,
    #[arg(long)]
    pub l2_coeff: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_epsilon: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then the flags.
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    c.$field = v.clone();
                })*
            };
        }
        set!(
            seeds,
            out,
            kinds,
            alpha_grid_step,
            exact_unaware,
            probe_size,
            trace_every,
            rs_users,
            random_users,
            items_per_query,
            noise_scale,
            resample_noise,
            train_fraction,
            validation_fraction,
            eps_fit_fraction,
            tower_user_features,
            l2_coeff,
            learning_rate,
            batch_size,
            beta1,
            beta2,
            adam_epsilon,
            max_epochs,
            patience
        );
        if let Some(seed) = self.seed {
            c.seeds = vec![seed];
        }
        if let Some(Sizes(s)) = &self.hidden_sizes {
            c.hidden_sizes = s.clone();
        }
        if let Some(Sizes(s)) = &self.tower_hidden_sizes {
            c.tower_hidden_sizes = s.clone();
        }
        c.validate()?;
        Ok(c)
    }
}
