//! Gradient interpolation: mixing a position-aware and a position-unaware
//! model, and choosing the mixing weight.
//!
//! The mixture predicts `alpha * p_aware + (1 - alpha) * p_unaware`. Given
//! per-position mean CTR curves on unbiased traffic (`p_g` from labels,
//! `p_a` and `p_u` from the two models), the weight that best matches the
//! ground truth in least squares is
//!
//! ```text
//! alpha = Σ_k (p_g[k] - p_u[k]) (p_a[k] - p_u[k]) / Σ_k (p_a[k] - p_u[k])²
//! ```
//!
//! clamped to `[0, 1]`. When the same effect is trained in with random
//! positions, the randomization rate is `1 - alpha`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::models::ClickModel;
use crate::synthgen::FeatureVector;

/// Mean CTR per position with the number of exposures behind each mean.
/// Positions without exposures have count 0 and value 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionCurve {
    values: Vec<f64>,
    counts: Vec<u64>,
}

impl PositionCurve {
    pub fn new(values: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if values.len() != counts.len() {
            return Err(Error::DimensionMismatch {
                context: "curve counts",
                expected: values.len(),
                got: counts.len(),
            });
        }
        for (k, (&v, &c)) in values.iter().zip(&counts).enumerate() {
            if c > 0 && !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "curve value {v} at position {k} outside [0, 1]"
                )));
            }
        }
        Ok(Self { values, counts })
    }

    /// A curve with every position populated, e.g. from a table of rates.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let counts = vec![1; values.len()];
        Self::new(values, counts)
    }

    /// Averages `values` grouped by `positions`.
    pub fn from_samples(positions: &[usize], values: impl IntoIterator<Item = f64>, k: usize) -> Result<Self> {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0u64; k];
        let mut n = 0;
        for (&p, v) in positions.iter().zip(values) {
            if p >= k {
                return Err(Error::PositionOutOfRange { position: p, k });
            }
            sums[p] += v;
            counts[p] += 1;
            n += 1;
        }
        if n != positions.len() {
            return Err(Error::DimensionMismatch {
                context: "curve samples",
                expected: positions.len(),
                got: n,
            });
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        Self::new(values, counts)
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, position: usize) -> Option<f64> {
        (self.counts.get(position).copied().unwrap_or(0) > 0).then(|| self.values[position])
    }

    pub fn is_populated(&self, position: usize) -> bool {
        self.get(position).is_some()
    }

    /// `position,value,count` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,value,count\n");
        for (k, (v, c)) in self.values.iter().zip(&self.counts).enumerate() {
            writeln!(out, "{k},{v},{c}").expect("write to string");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, f64, u64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("position")) {
                continue;
            }
            let bad = |what: &str| Error::invalid(format!("curve CSV line {}: {what}", i + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad("expected position,value,count"));
            }
            let k = fields[0].parse().map_err(|_| bad("bad position"))?;
            let v = fields[1].parse().map_err(|_| bad("bad value"))?;
            let c = fields[2].parse().map_err(|_| bad("bad count"))?;
            rows.push((k, v, c));
        }
        rows.sort_by_key(|r| r.0);
        for (expected, r) in rows.iter().enumerate() {
            if r.0 != expected {
                return Err(Error::invalid(format!("curve CSV is missing position {expected}")));
            }
        }
        Self::new(rows.iter().map(|r| r.1).collect(), rows.iter().map(|r| r.2).collect())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    /// Weight on the position-aware model, in `[0, 1]`.
    pub alpha: f64,
    /// `1 - alpha`: the share of training samples to give random positions.
    pub randomization_rate: f64,
    /// Least-squares optimum before clamping; `None` when degenerate.
    pub unclamped_alpha: Option<f64>,
    /// Squared gap to the ground-truth curve at `alpha`.
    pub objective: f64,
    /// The aware and unaware curves coincide, so every weight fits equally well.
    pub degenerate: bool,
    pub ground_truth: PositionCurve,
    pub aware: PositionCurve,
    pub unaware: PositionCurve,
}

fn check_k(curves: &[&PositionCurve]) -> Result<usize> {
    let k = curves[0].k();
    for c in &curves[1..] {
        if c.k() != k {
            return Err(Error::DimensionMismatch {
                context: "curve lengths",
                expected: k,
                got: c.k(),
            });
        }
    }
    Ok(k)
}

/// Positions populated in every curve, with the three values.
fn shared_points<'a>(
    g: &'a PositionCurve,
    a: &'a PositionCurve,
    u: &'a PositionCurve,
) -> impl Iterator<Item = (f64, f64, f64)> + 'a {
    (0..g.k()).filter_map(move |k| Some((g.get(k)?, a.get(k)?, u.get(k)?)))
}

/// Squared gap between the mixture curve at `alpha` and the ground truth,
/// summed over positions populated in all three curves.
pub fn brute_force_objective(p_g: &PositionCurve, p_a: &PositionCurve, p_u: &PositionCurve, alpha: f64) -> Result<f64> {
    check_k(&[p_g, p_a, p_u])?;
    Ok(shared_points(p_g, p_a, p_u)
        .map(|(g, a, u)| {
            let r = alpha * a + (1.0 - alpha) * u - g;
            r * r
        })
        .sum())
}

/// Closed-form least-squares fusing weight, clamped to `[0, 1]`.
pub fn epsilon_closed_form(p_g: &PositionCurve, p_a: &PositionCurve, p_u: &PositionCurve) -> Result<FusionResult> {
    check_k(&[p_g, p_a, p_u])?;
    let (mut num, mut den, mut used) = (0.0, 0.0, 0usize);
    for (g, a, u) in shared_points(p_g, p_a, p_u) {
        num += (g - u) * (a - u);
        den += (a - u) * (a - u);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty("positions shared by all three curves"));
    }
    let degenerate = den <= f64::MIN_POSITIVE;
    let (alpha, unclamped) = if degenerate {
        (1.0, None)
    } else {
        let raw = num / den;
        (raw.clamp(0.0, 1.0), Some(raw))
    };
    Ok(FusionResult {
        alpha,
        randomization_rate: 1.0 - alpha,
        unclamped_alpha: unclamped,
        objective: brute_force_objective(p_g, p_a, p_u, alpha)?,
        degenerate,
        ground_truth: p_g.clone(),
        aware: p_a.clone(),
        unaware: p_u.clone(),
    })
}

/// Stand-in for the unaware model's curve: the mean of the aware curve over
/// its populated positions, repeated at every position.
pub fn approx_unaware_curve(p_a: &PositionCurve) -> Result<PositionCurve> {
    if let Some(k) = (0..p_a.k()).find(|&k| !p_a.is_populated(k)) {
        return Err(Error::EmptyPosition(k));
    }
    if p_a.k() == 0 {
        return Err(Error::Empty("curve"));
    }
    let mean = p_a.values().iter().sum::<f64>() / p_a.k() as f64;
    PositionCurve::new(vec![mean; p_a.k()], p_a.counts().to_vec())
}

/// Convex combination of two models' predictions.
pub struct Mixture<'a> {
    aware: &'a dyn ClickModel,
    unaware: &'a dyn ClickModel,
    alpha: f64,
}

impl<'a> Mixture<'a> {
    pub fn new(aware: &'a dyn ClickModel, unaware: &'a dyn ClickModel, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        if aware.num_positions() != unaware.num_positions() {
            return Err(Error::DimensionMismatch {
                context: "mixture positions",
                expected: aware.num_positions(),
                got: unaware.num_positions(),
            });
        }
        Ok(Self { aware, unaware, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl ClickModel for Mixture<'_> {
    fn num_positions(&self) -> usize {
        self.aware.num_positions()
    }

    fn predict_rows(&self, features: ArrayView2<f64>, positions: &[usize]) -> Result<Array1<f64>> {
        let a = self.aware.predict_rows(features, positions)?;
        let u = self.unaware.predict_rows(features, positions)?;
        Ok(mix(&a, &u, self.alpha))
    }
}

fn mix(aware: &Array1<f64>, unaware: &Array1<f64>, alpha: f64) -> Array1<f64> {
    ndarray::Zip::from(aware)
        .and(unaware)
        .map_collect(|&a, &u| alpha * a + (1.0 - alpha) * u)
}

pub fn mix_predict(
    aware: &dyn ClickModel,
    unaware: &dyn ClickModel,
    alpha: f64,
    user: &FeatureVector,
    item: &FeatureVector,
    position: usize,
) -> Result<f64> {
    Mixture::new(aware, unaware, alpha)?.predict(user, item, position)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best_alpha: f64,
    pub best_auc: f64,
    /// `(alpha, auc)` for every grid point, ascending in alpha.
    pub grid: Vec<(f64, f64)>,
}

/// The weights `0, step, 2·step, …` below 1, followed by 1.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n)
        .map(|i| (i as f64 * step * 1e12).round() / 1e12)
        .filter(|&a| a < 1.0 - 1e-9)
        .collect();
    grid.push(1.0);
    Ok(grid)
}

/// AUC of the mixture on `validation` at every grid weight; ties go to the
/// smaller weight.
pub fn grid_search_alpha(
    aware: &dyn ClickModel,
    unaware: &dyn ClickModel,
    validation: &Dataset,
    step: f64,
) -> Result<GridSearch> {
    let grid = alpha_grid(step)?;
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let a = aware.predict_rows(validation.features(), validation.positions())?;
    let u = unaware.predict_rows(validation.features(), validation.positions())?;
    let labels = validation.labels();
    let labels = labels.as_slice().expect("contiguous");

    let mut scored = Vec::with_capacity(grid.len());
    let (mut best_alpha, mut best_auc) = (f64::NAN, f64::NEG_INFINITY);
    for alpha in grid {
        let s = mix(&a, &u, alpha);
        let value = auc(labels, s.as_slice().expect("contiguous"))?;
        if value > best_auc {
            best_alpha = alpha;
            best_auc = value;
        }
        scored.push((alpha, value));
    }
    Ok(GridSearch {
        best_alpha,
        best_auc,
        grid: scored,
    })
}
