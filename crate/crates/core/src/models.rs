//! CTR models and their training loop.
//!
//! | kind     | prediction                                              |
//! |----------|---------------------------------------------------------|
//! | `BASE`   | `σ(main(x))`, position ignored                          |
//! | `ST_PSF` | `σ(main(x) + tower(pos))`                               |
//! | `PAL`    | `σ(tower(pos)) · σ(main(x))`                            |
//! | `GI(r)`  | as `ST_PSF`, trained with a fraction `r` of positions   |
//! |          | replaced by uniform random ones in every mini-batch     |
//!
//! `x` is the user ⊕ item feature row. The tower sees a one-hot encoding of
//! the position, optionally followed by the user features.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, INPUT_DIM};
use crate::error::{Error, Result};
use crate::eval;
use crate::fusion::PositionCurve;
use crate::nnet::{adam_step, logistic, logit_cross_entropy, AdamState, Mlp, TrainConfig};
use crate::synthgen::{FeatureVector, FEATURE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    Base,
    StPsf,
    Pal,
    Gi { randomization_rate: f64 },
}

impl ModelKind {
    pub fn gi(randomization_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&randomization_rate) {
            return Err(Error::invalid(format!(
                "randomization rate {randomization_rate} outside [0, 1]"
            )));
        }
        Ok(ModelKind::Gi { randomization_rate })
    }

    pub fn uses_position(&self) -> bool {
        !matches!(self, ModelKind::Base)
    }

    fn randomization_rate(&self) -> f64 {
        match self {
            ModelKind::Gi { randomization_rate } => *randomization_rate,
            _ => 0.0,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Base => f.write_str("BASE"),
            ModelKind::StPsf => f.write_str("ST_PSF"),
            ModelKind::Pal => f.write_str("PAL"),
            ModelKind::Gi { randomization_rate } => write!(f, "GI({randomization_rate})"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    /// Accepts `base`, `st_psf` / `st-psf`, `pal` and `gi:<rate>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('-', "_");
        match lower.as_str() {
            "base" => Ok(ModelKind::Base),
            "st_psf" | "stpsf" | "psf" => Ok(ModelKind::StPsf),
            "pal" => Ok(ModelKind::Pal),
            other => {
                let rate = other
                    .strip_prefix("gi:")
                    .or_else(|| other.strip_prefix("gi(").and_then(|r| r.strip_suffix(')')))
                    .ok_or_else(|| Error::invalid(format!("unknown model kind {s:?}")))?;
                let rate: f64 = rate
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad randomization rate in {s:?}")))?;
                ModelKind::gi(rate)
            }
        }
    }
}

/// Anything that maps (user ⊕ item row, position) to a click probability.
pub trait ClickModel: Sync {
    fn num_positions(&self) -> usize;

    /// Predicted CTR for every row of `features` placed at the matching entry
    /// of `positions`.
    fn predict_rows(&self, features: ArrayView2<f64>, positions: &[usize]) -> Result<Array1<f64>>;

    fn predict(&self, user: &FeatureVector, item: &FeatureVector, position: usize) -> Result<f64> {
        let row: Vec<f64> = user.as_slice().iter().chain(item.as_slice()).copied().collect();
        let x = ArrayView2::from_shape((1, INPUT_DIM), &row).expect("one row");
        Ok(self.predict_rows(x, &[position])?[0])
    }
}

fn check_rows(features: ArrayView2<f64>, positions: &[usize], k: usize, uses_position: bool) -> Result<()> {
    if features.nrows() != positions.len() {
        return Err(Error::DimensionMismatch {
            context: "rows vs positions",
            expected: features.nrows(),
            got: positions.len(),
        });
    }
    if uses_position {
        if let Some(&p) = positions.iter().find(|&&p| p >= k) {
            return Err(Error::PositionOutOfRange { position: p, k });
        }
    }
    Ok(())
}

/// Tower input: one-hot position, optionally followed by the user features.
fn tower_input(features: ArrayView2<f64>, positions: &[usize], k: usize, with_user: bool) -> Array2<f64> {
    let width = if with_user { k + FEATURE_DIM } else { k };
    let mut out = Array2::zeros((positions.len(), width));
    for (i, &p) in positions.iter().enumerate() {
        out[(i, p)] = 1.0;
    }
    if with_user {
        out.slice_mut(s![.., k..])
            .assign(&features.slice(s![.., ..FEATURE_DIM]));
    }
    out
}

/// Parameters of a trained model. Immutable once returned by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    kind: ModelKind,
    main_net: Mlp,
    position_tower: Option<Mlp>,
    tower_user_features: bool,
    k: usize,
    fingerprint: String,
}

impl TrainedModel {
    pub fn new(
        kind: ModelKind,
        main_net: Mlp,
        position_tower: Option<Mlp>,
        tower_user_features: bool,
        k: usize,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if main_net.input_dim() != INPUT_DIM {
            return Err(Error::DimensionMismatch {
                context: "main network input",
                expected: INPUT_DIM,
                got: main_net.input_dim(),
            });
        }
        match (&position_tower, kind.uses_position()) {
            (None, false) => {}
            (Some(tower), true) => {
                let expected = if tower_user_features { k + FEATURE_DIM } else { k };
                if tower.input_dim() != expected {
                    return Err(Error::DimensionMismatch {
                        context: "position tower input",
                        expected,
                        got: tower.input_dim(),
                    });
                }
            }
            (Some(_), false) => return Err(Error::invalid("BASE models carry no position tower")),
            (None, true) => return Err(Error::invalid(format!("{kind} needs a position tower"))),
        }
        if k < 2 {
            return Err(Error::invalid("need at least two positions"));
        }
        Ok(Self {
            kind,
            main_net,
            position_tower,
            tower_user_features,
            k,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn main_net(&self) -> &Mlp {
        &self.main_net
    }

    pub fn position_tower(&self) -> Option<&Mlp> {
        self.position_tower.as_ref()
    }

    /// Number of positions the model was trained for.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Sum of squared weights over both networks.
    pub fn weight_norm_sq(&self) -> f64 {
        self.main_net.weight_norm_sq() + self.position_tower.as_ref().map_or(0.0, Mlp::weight_norm_sq)
    }

    fn tower_logits(&self, features: ArrayView2<f64>, positions: &[usize]) -> Result<Option<Array1<f64>>> {
        self.position_tower
            .as_ref()
            .map(|t| t.forward_batch(tower_input(features, positions, self.k, self.tower_user_features).view()))
            .transpose()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&Checkpoint::from(self))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str::<Checkpoint>(&text)?.try_into()
    }
}

impl ClickModel for TrainedModel {
    fn num_positions(&self) -> usize {
        self.k
    }

    fn predict_rows(&self, features: ArrayView2<f64>, positions: &[usize]) -> Result<Array1<f64>> {
        check_rows(features, positions, self.k, self.kind.uses_position())?;
        let main = self.main_net.forward_batch(features)?;
        let tower = self.tower_logits(features, positions)?;
        Ok(match (self.kind, tower) {
            (ModelKind::Pal, Some(t)) => ndarray::Zip::from(&main)
                .and(&t)
                .map_collect(|&m, &t| logistic(t) * logistic(m)),
            (_, Some(t)) => ndarray::Zip::from(&main).and(&t).map_collect(|&m, &t| logistic(m + t)),
            (_, None) => main.mapv(logistic),
        })
    }
}

/// On-disk model layout (JSON).
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model_kind: ModelKind,
    k: usize,
    train_config_fingerprint: String,
    tower_user_features: bool,
    main_net: NetRecord,
    position_tower: Option<NetRecord>,
}

#[derive(Serialize, Deserialize)]
struct NetRecord {
    layer_sizes: Vec<usize>,
    layers: Vec<crate::nnet::Dense>,
}

const CHECKPOINT_FORMAT: &str = "posbias-checkpoint";

impl From<&Mlp> for NetRecord {
    fn from(net: &Mlp) -> Self {
        Self {
            layer_sizes: net.layer_sizes(),
            layers: net.layers().to_vec(),
        }
    }
}

impl TryFrom<NetRecord> for Mlp {
    type Error = Error;

    fn try_from(rec: NetRecord) -> Result<Self> {
        let net = Mlp::from_layers(rec.layers)?;
        if net.layer_sizes() != rec.layer_sizes {
            return Err(Error::invalid("checkpoint layer_sizes disagree with the stored arrays"));
        }
        Ok(net)
    }
}

impl From<&TrainedModel> for Checkpoint {
    fn from(m: &TrainedModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            model_kind: m.kind,
            k: m.k,
            train_config_fingerprint: m.fingerprint.clone(),
            tower_user_features: m.tower_user_features,
            main_net: (&m.main_net).into(),
            position_tower: m.position_tower.as_ref().map(NetRecord::from),
        }
    }
}

impl TryFrom<Checkpoint> for TrainedModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != 1 {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        TrainedModel::new(
            c.model_kind,
            c.main_net.try_into()?,
            c.position_tower.map(Mlp::try_from).transpose()?,
            c.tower_user_features,
            c.k,
            c.train_config_fingerprint,
        )
    }
}

/// Replaces each position, independently with probability `rate`, by a
/// uniform draw from `0..k`.
pub fn randomize_positions(positions: &[usize], rate: f64, k: usize, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("randomization rate {rate} outside [0, 1]")));
    }
    let mut out = positions.to_vec();
    randomize_in_place(&mut out, rate, k, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

fn randomize_in_place(positions: &mut [usize], rate: f64, k: usize, rng: &mut impl Rng) {
    if rate == 0.0 {
        return;
    }
    for p in positions {
        if rng.random::<f64>() < rate {
            *p = rng.random_range(0..k);
        }
    }
}

/// Mean predicted CTR per recorded position.
pub fn serve_curve(model: &dyn ClickModel, data: &Dataset) -> Result<PositionCurve> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = model.predict_rows(data.features(), data.positions())?;
    PositionCurve::from_samples(data.positions(), preds.iter().copied(), model.num_positions())
}

/// Same as [`serve_curve`] but every exposure is scored at `position`.
pub fn serve_curve_at(model: &dyn ClickModel, data: &Dataset, position: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let fixed = vec![position; data.len()];
    let preds = model.predict_rows(data.features(), &fixed)?;
    Ok(preds.mean().expect("non-empty"))
}

/// Per-sample loss and logit gradients for one kind.
fn loss_and_logit_grads(
    kind: ModelKind,
    main: &Array1<f64>,
    tower: Option<&Array1<f64>>,
    labels: ndarray::ArrayView1<f64>,
) -> (f64, Array1<f64>, Option<Array1<f64>>) {
    let n = labels.len();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_main = Array1::zeros(n);
    match (kind, tower) {
        (ModelKind::Pal, Some(tower)) => {
            let mut d_tower = Array1::zeros(n);
            for i in 0..n {
                let (a, b, y) = (logistic(tower[i]), logistic(main[i]), labels[i]);
                let p = a * b;
                // ln p = -softplus(-zt) - softplus(-zm)
                let ln_p = -logit_cross_entropy(tower[i], 1.0) - logit_cross_entropy(main[i], 1.0);
                let ln_q = (-p).ln_1p();
                loss -= y * ln_p + (1.0 - y) * ln_q;
                let common = (p - y) / (1.0 - p);
                d_tower[i] = common * (1.0 - a) * inv_n;
                d_main[i] = common * (1.0 - b) * inv_n;
            }
            (loss * inv_n, d_main, Some(d_tower))
        }
        (_, Some(tower)) => {
            for i in 0..n {
                let z = main[i] + tower[i];
                loss += logit_cross_entropy(z, labels[i]);
                d_main[i] = (logistic(z) - labels[i]) * inv_n;
            }
            let d_tower = d_main.clone();
            (loss * inv_n, d_main, Some(d_tower))
        }
        (_, None) => {
            for i in 0..n {
                loss += logit_cross_entropy(main[i], labels[i]);
                d_main[i] = (logistic(main[i]) - labels[i]) * inv_n;
            }
            (loss * inv_n, d_main, None)
        }
    }
}

/// Regularized training loss of a model on a batch, with gradients for the
/// main network and the tower.
pub fn model_loss_and_grad(
    model: &TrainedModel,
    features: ArrayView2<f64>,
    positions: &[usize],
    labels: ndarray::ArrayView1<f64>,
    l2: f64,
) -> Result<(f64, Mlp, Option<Mlp>)> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_rows(features, positions, model.k, model.kind.uses_position())?;
    let main_cache = model.main_net.forward_cached(features)?;
    let tower_in = model
        .position_tower
        .as_ref()
        .map(|_| tower_input(features, positions, model.k, model.tower_user_features));
    let tower_cache = match (&model.position_tower, &tower_in) {
        (Some(t), Some(x)) => Some(t.forward_cached(x.view())?),
        _ => None,
    };
    let (ce, d_main, d_tower) = loss_and_logit_grads(
        model.kind,
        &main_cache.logits,
        tower_cache.as_ref().map(|c| &c.logits),
        labels,
    );
    let loss = ce + l2 * model.weight_norm_sq();
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut g_main = model.main_net.backward(&main_cache, d_main.view());
    model.main_net.add_l2_grad(&mut g_main, l2);
    let g_tower = match (&model.position_tower, tower_cache, d_tower) {
        (Some(t), Some(cache), Some(d)) => {
            let mut g = t.backward(&cache, d.view());
            t.add_l2_grad(&mut g, l2);
            Some(g)
        }
        _ => None,
    };
    Ok((loss, g_main, g_tower))
}

/// Periodic position-gradient measurement during training.
#[derive(Clone, Debug)]
pub struct GradientProbe {
    /// User ⊕ item rows taken from random traffic.
    pub rows: Array2<f64>,
    /// Measure after every this many optimizer steps.
    pub every_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_train_loss: f64,
    pub validation_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned snapshot.
    pub best_epoch: usize,
    /// `(optimizer step, position gradient)` pairs.
    pub gradient_trace: Vec<(u64, f64)>,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    crate::synthgen::user_seed(seed, stream)
}

/// Trains `kind` by mini-batch Adam with early stopping on validation AUC.
pub fn train(kind: ModelKind, train_set: &Dataset, validation: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    Ok(train_with_history(kind, train_set, validation, config, None)?.0)
}

/// [`train`], also returning per-epoch statistics and, when `probe` is
/// given, a position-gradient trace.
pub fn train_with_history(
    kind: ModelKind,
    train_set: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
    probe: Option<&GradientProbe>,
) -> Result<(TrainedModel, TrainHistory)> {
    config.validate()?;
    if let ModelKind::Gi { randomization_rate } = kind {
        ModelKind::gi(randomization_rate)?;
    }
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let k = train_set.k();
    if validation.k() != k {
        return Err(Error::DimensionMismatch {
            context: "validation positions",
            expected: k,
            got: validation.k(),
        });
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![INPUT_DIM];
    sizes.extend(&config.hidden_sizes);
    sizes.push(1);
    let main = Mlp::init(&sizes, &mut init_rng)?;
    let tower = if kind.uses_position() {
        let mut tsizes = vec![if config.tower_user_features { k + FEATURE_DIM } else { k }];
        tsizes.extend(&config.tower_hidden_sizes);
        tsizes.push(1);
        Some(Mlp::init(&tsizes, &mut init_rng)?)
    } else {
        None
    };
    let mut model = TrainedModel::new(kind, main, tower, config.tower_user_features, k, config.fingerprint())?;
    let mut main_state = AdamState::new(&model.main_net);
    let mut tower_state = model.position_tower.as_ref().map(AdamState::new);

    // Separate streams so that randomization never perturbs batch order.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut position_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    let rate = kind.randomization_rate();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut stale = 0;
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    if let Some(p) = probe {
        history
            .gradient_trace
            .push((0, eval::position_gradient(&model, p.rows.view())?));
    }

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = train_set.features().select(Axis(0), chunk);
            let y = train_set.labels().select(Axis(0), chunk);
            let mut pos: Vec<usize> = chunk.iter().map(|&i| train_set.positions()[i]).collect();
            randomize_in_place(&mut pos, rate, k, &mut position_rng);

            let (loss, g_main, g_tower) = model_loss_and_grad(&model, x.view(), &pos, y.view(), config.l2_coeff)
                .map_err(|e| Error::NonFinite(format!("{kind} epoch {epoch} step {step}: {e}")))?;
            adam_step(&mut model.main_net, &g_main, &mut main_state, config)?;
            if let (Some(t), Some(g), Some(st)) =
                (model.position_tower.as_mut(), g_tower.as_ref(), tower_state.as_mut())
            {
                adam_step(t, g, st, config)?;
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
            if let Some(p) = probe {
                if p.every_steps > 0 && step.is_multiple_of(p.every_steps as u64) {
                    history
                        .gradient_trace
                        .push((step, eval::position_gradient(&model, p.rows.view())?));
                }
            }
        }

        let preds = model.predict_rows(validation.features(), validation.positions())?;
        let val_auc = eval::auc(
            validation.labels().as_slice().expect("contiguous"),
            preds.as_slice().expect("contiguous"),
        )?;
        history.epochs.push(EpochRecord {
            epoch,
            steps: step,
            mean_train_loss: loss_sum / batches as f64,
            validation_auc: val_auc,
        });
        if best.as_ref().is_none_or(|(b, _)| val_auc > *b) {
            best = Some((val_auc, model.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }

    let (_, model) = best.expect("at least one epoch ran");
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::finite_diff_check;
    use crate::synthgen::{generate, GenConfig, TrafficMode};

    fn small_data(mode: TrafficMode, users: usize, seed: u64) -> Dataset {
        let groups = generate(&GenConfig {
            n_users: users,
            master_seed: seed,
            traffic_mode: mode,
            ..GenConfig::default()
        })
        .unwrap();
        Dataset::from_groups(&groups, 10).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            hidden_sizes: vec![16, 8],
            batch_size: 256,
            max_epochs: 3,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        }
    }

    fn zero_model(kind: ModelKind) -> TrainedModel {
        let tower = kind.uses_position().then(|| Mlp::zeros(&[10, 1]).unwrap());
        TrainedModel::new(kind, Mlp::zeros(&[INPUT_DIM, 4, 1]).unwrap(), tower, false, 10, "test").unwrap()
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("base".parse::<ModelKind>().unwrap(), ModelKind::Base);
        assert_eq!("ST-PSF".parse::<ModelKind>().unwrap(), ModelKind::StPsf);
        assert_eq!(
            "gi:0.25".parse::<ModelKind>().unwrap(),
            ModelKind::Gi {
                randomization_rate: 0.25
            }
        );
        assert!("gi:1.5".parse::<ModelKind>().is_err());
        assert!("dpin".parse::<ModelKind>().is_err());
        assert_eq!(ModelKind::StPsf.to_string(), "ST_PSF");
    }

    #[test]
    fn zero_nets() {
        let u = FeatureVector::new([0.3; 32]).unwrap();
        let i = FeatureVector::new([0.7; 32]).unwrap();
        assert_eq!(zero_model(ModelKind::StPsf).predict(&u, &i, 4).unwrap(), 0.5);
        assert_eq!(zero_model(ModelKind::Pal).predict(&u, &i, 4).unwrap(), 0.25);
        assert_eq!(zero_model(ModelKind::Base).predict(&u, &i, 4).unwrap(), 0.5);
    }

    #[test]
    fn pal_zero_tower_halves_main_factor() {
        let mut model = zero_model(ModelKind::Pal);
        model.main_net.layers_mut()[1].bias[0] = 0.8;
        let u = FeatureVector::new([0.3; 32]).unwrap();
        let i = FeatureVector::new([0.7; 32]).unwrap();
        let p = model.predict(&u, &i, 2).unwrap();
        assert!((p - 0.5 * logistic(0.8)).abs() < 1e-15);
    }

    #[test]
    fn position_range_is_checked() {
        let u = FeatureVector::zeros();
        assert!(matches!(
            zero_model(ModelKind::StPsf).predict(&u, &u, 10),
            Err(Error::PositionOutOfRange { .. })
        ));
        // BASE ignores the position entirely.
        assert!(zero_model(ModelKind::Base).predict(&u, &u, 10).is_ok());
    }

    #[test]
    fn tower_presence_matches_kind() {
        let main = Mlp::zeros(&[INPUT_DIM, 1]).unwrap();
        let tower = Mlp::zeros(&[10, 1]).unwrap();
        assert!(TrainedModel::new(ModelKind::Base, main.clone(), Some(tower.clone()), false, 10, "").is_err());
        assert!(TrainedModel::new(ModelKind::StPsf, main.clone(), None, false, 10, "").is_err());
        assert!(TrainedModel::new(ModelKind::Pal, main.clone(), Some(tower.clone()), true, 10, "").is_err());
        assert!(TrainedModel::new(ModelKind::Pal, main, Some(tower), false, 10, "").is_ok());
    }

    #[test]
    fn randomize_positions_contract() {
        let positions: Vec<usize> = (0..10_000).map(|i| i % 3).collect();
        assert_eq!(randomize_positions(&positions, 0.0, 10, 1).unwrap(), positions);
        let a = randomize_positions(&positions, 0.4, 10, 7).unwrap();
        assert_eq!(a, randomize_positions(&positions, 0.4, 10, 7).unwrap());
        let full = randomize_positions(&positions, 1.0, 10, 3).unwrap();
        let mut counts = [0usize; 10];
        for p in full {
            counts[p] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.1).abs() <= 0.01, "{counts:?}");
        }
        assert!(randomize_positions(&positions, 1.1, 10, 0).is_err());
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let data = small_data(TrafficMode::Rs, 4, 2);
        let rows: Vec<usize> = (0..32).collect();
        let batch = data.select(&rows);
        for (s, kind) in [ModelKind::Base, ModelKind::StPsf, ModelKind::Pal]
            .into_iter()
            .enumerate()
        {
            for tower_user in [false, true] {
                if !kind.uses_position() && tower_user {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
                let mut main = Mlp::init(&[INPUT_DIM, 6, 1], &mut rng).unwrap();
                main.layers_mut()[0].bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
                let tower = kind.uses_position().then(|| {
                    let width = if tower_user { 10 + FEATURE_DIM } else { 10 };
                    Mlp::init(&[width, 3, 1], &mut rng).unwrap()
                });
                let model = TrainedModel::new(kind, main.clone(), tower.clone(), tower_user, 10, "").unwrap();
                let (_, g_main, g_tower) =
                    model_loss_and_grad(&model, batch.features(), batch.positions(), batch.labels(), 1e-3).unwrap();

                // Central differences on each network through the composite loss.
                let h = 1e-5;
                let check = |net_is_tower: bool, grads: &Mlp| {
                    let base = if net_is_tower {
                        tower.clone().unwrap()
                    } else {
                        main.clone()
                    };
                    let flat: Vec<f64> = base.values().collect();
                    let gflat: Vec<f64> = grads.values().collect();
                    for idx in (0..flat.len()).step_by(7) {
                        let eval_at = |delta: f64| {
                            let mut layers = base.layers().to_vec();
                            let mut left = idx;
                            for l in &mut layers {
                                let nw = l.weights.len();
                                if left < nw {
                                    let c = l.weights.ncols();
                                    l.weights[(left / c, left % c)] += delta;
                                    break;
                                }
                                left -= nw;
                                if left < l.bias.len() {
                                    l.bias[left] += delta;
                                    break;
                                }
                                left -= l.bias.len();
                            }
                            let net = Mlp::from_layers(layers).unwrap();
                            let m = if net_is_tower {
                                TrainedModel::new(kind, main.clone(), Some(net), tower_user, 10, "").unwrap()
                            } else {
                                TrainedModel::new(kind, net, tower.clone(), tower_user, 10, "").unwrap()
                            };
                            model_loss_and_grad(&m, batch.features(), batch.positions(), batch.labels(), 1e-3)
                                .unwrap()
                                .0
                        };
                        let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                        let rel = (gflat[idx] - numeric).abs() / (numeric.abs() + 1e-8);
                        assert!(
                            rel < 1e-4,
                            "{kind} tower={net_is_tower} idx {idx}: {} vs {numeric}",
                            gflat[idx]
                        );
                    }
                };
                check(false, &g_main);
                if let Some(g) = &g_tower {
                    check(true, g);
                }
            }
        }
        // The plain network path agrees with the shared checker.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::init(&[INPUT_DIM, 1], &mut rng).unwrap();
        let err = finite_diff_check(&net, batch.features(), batch.labels(), 1e-3, 1e-5, 30, 0).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn gi_zero_matches_st_psf_bit_for_bit() {
        let train_set = small_data(TrafficMode::Rs, 300, 1);
        let val = small_data(TrafficMode::Rs, 60, 2);
        let cfg = quick_config();
        let a = train(ModelKind::StPsf, &train_set, &val, &cfg).unwrap();
        let b = train(
            ModelKind::Gi {
                randomization_rate: 0.0,
            },
            &train_set,
            &val,
            &cfg,
        )
        .unwrap();
        assert_eq!(a.main_net, b.main_net);
        assert_eq!(a.position_tower, b.position_tower);
    }

    #[test]
    fn early_stopping_keeps_best_snapshot() {
        let train_set = small_data(TrafficMode::Rs, 300, 3);
        let val = small_data(TrafficMode::Rs, 60, 4);
        let cfg = TrainConfig {
            max_epochs: 8,
            patience: 2,
            ..quick_config()
        };
        let (model, hist) = train_with_history(ModelKind::StPsf, &train_set, &val, &cfg, None).unwrap();
        let best = hist.epochs[hist.best_epoch].validation_auc;
        for e in &hist.epochs[hist.best_epoch..] {
            assert!(best >= e.validation_auc);
        }
        let preds = model.predict_rows(val.features(), val.positions()).unwrap();
        let auc = eval::auc(val.labels().as_slice().unwrap(), preds.as_slice().unwrap()).unwrap();
        assert_eq!(auc, best);
    }

    #[test]
    fn first_epoch_reduces_loss() {
        let train_set = small_data(TrafficMode::Rs, 400, 5);
        let val = small_data(TrafficMode::Rs, 50, 6);
        let cfg = TrainConfig {
            max_epochs: 1,
            learning_rate: 1e-3,
            ..quick_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = Mlp::init(&[INPUT_DIM, 16, 8, 1], &mut rng).unwrap();
        let (initial, _) = init
            .loss_and_grad(train_set.features(), train_set.labels(), cfg.l2_coeff)
            .unwrap();
        let model = train(ModelKind::Base, &train_set, &val, &cfg).unwrap();
        let (after, _) = model
            .main_net
            .loss_and_grad(train_set.features(), train_set.labels(), cfg.l2_coeff)
            .unwrap();
        assert!(after < initial, "{after} !< {initial}");
    }

    #[test]
    fn empty_splits_are_rejected() {
        let data = small_data(TrafficMode::Rs, 10, 1);
        let empty = data.select(&[]);
        assert!(matches!(
            train(ModelKind::Base, &empty, &data, &quick_config()),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            train(ModelKind::Base, &data, &empty, &quick_config()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn base_is_constant_in_position() {
        let train_set = small_data(TrafficMode::Rs, 100, 8);
        let model = train(ModelKind::Base, &train_set, &train_set, &quick_config()).unwrap();
        let u = FeatureVector::new([0.2; 32]).unwrap();
        let i = FeatureVector::new([0.6; 32]).unwrap();
        let p0 = model.predict(&u, &i, 0).unwrap();
        for k in 1..10 {
            assert_eq!(model.predict(&u, &i, k).unwrap(), p0);
        }
    }

    #[test]
    fn pal_factorizes() {
        let train_set = small_data(TrafficMode::Rs, 200, 9);
        let model = train(ModelKind::Pal, &train_set, &train_set, &quick_config()).unwrap();
        let rows = train_set.features().slice(s![..50, ..]).to_owned();
        let at = |k: usize| model.predict_rows(rows.view(), &vec![k; 50]).unwrap();
        let (p0, p7) = (at(0), at(7));
        let r0 = p0[0] / p7[0];
        for i in 1..50 {
            assert!((p0[i] / p7[i] - r0).abs() < 1e-12 * r0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let train_set = small_data(TrafficMode::Rs, 60, 10);
        let model = train(ModelKind::Pal, &train_set, &train_set, &quick_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pal.json");
        model.save(&path).unwrap();
        assert_eq!(TrainedModel::load(&path).unwrap(), model);

        std::fs::write(&path, "{\"format\":\"other\"}").unwrap();
        assert!(TrainedModel::load(&path).is_err());
    }

    #[test]
    fn serve_curve_of_constant_model() {
        struct Half;
        impl ClickModel for Half {
            fn num_positions(&self) -> usize {
                10
            }
            fn predict_rows(&self, f: ArrayView2<f64>, _: &[usize]) -> Result<Array1<f64>> {
                Ok(Array1::from_elem(f.nrows(), 0.5))
            }
        }
        let data = small_data(TrafficMode::Random, 50, 1);
        let curve = serve_curve(&Half, &data).unwrap();
        assert!(curve.values().iter().all(|&v| v == 0.5));
        assert_eq!(curve.counts().iter().sum::<u64>(), 500);
    }
}
