//! Offline metrics: AUC, per-position CTR curves, estimation error,
//! overestimation ratio and the empirical position gradient.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fusion::PositionCurve;
use crate::models::{serve_curve, ClickModel};

/// Area under the ROC curve via the rank-sum statistic. Tied scores share
/// their mid-rank, so a tied positive/negative pair counts one half.
/// Labels above 0.5 are positives.
pub fn auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            context: "auc inputs",
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&r| labels[r] > 0.5).count();
        rank_sum_pos += mid_rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean click label per position.
pub fn empirical_curve(data: &Dataset) -> Result<PositionCurve> {
    if data.is_empty() {
        return Err(Error::Empty("exposures"));
    }
    PositionCurve::from_samples(data.positions(), data.labels().iter().copied(), data.k())
}

/// Each entry divided by the first.
pub fn relative_curve(curve: &PositionCurve) -> Result<Vec<f64>> {
    if let Some(k) = (0..curve.k()).find(|&k| !curve.is_populated(k)) {
        return Err(Error::EmptyPosition(k));
    }
    let first = curve.values().first().copied().ok_or(Error::Empty("curve"))?;
    if first <= 0.0 {
        return Err(Error::invalid("first position has zero CTR"));
    }
    Ok(curve.values().iter().map(|v| v / first).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationError {
    pub sum_sq: f64,
    pub max_abs: f64,
}

/// Gap between a model's relative curve and the ground-truth one.
pub fn estimation_error(model_rel: &[f64], gt_rel: &[f64]) -> Result<EstimationError> {
    if model_rel.len() != gt_rel.len() {
        return Err(Error::DimensionMismatch {
            context: "relative curves",
            expected: gt_rel.len(),
            got: model_rel.len(),
        });
    }
    let diffs = model_rel.iter().zip(gt_rel).map(|(a, b)| a - b);
    Ok(EstimationError {
        sum_sq: diffs.clone().map(|d| d * d).sum(),
        max_abs: diffs.map(f64::abs).fold(0.0, f64::max),
    })
}

fn spread(curve: &PositionCurve) -> Result<f64> {
    if let Some(k) = (0..curve.k()).find(|&k| !curve.is_populated(k)) {
        return Err(Error::EmptyPosition(k));
    }
    let v = curve.values();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::invalid(
            "curve has a zero entry; the split is too small to give every position a click",
        ));
    }
    Ok(max / min)
}

/// `(max/min of the model curve) / (max/min of the ground-truth curve)`.
/// Above 1 the model exaggerates how much CTR depends on position.
pub fn overestimation_ratio(model_curve: &PositionCurve, gt_curve: &PositionCurve) -> Result<f64> {
    if model_curve.k() != gt_curve.k() {
        return Err(Error::DimensionMismatch {
            context: "overestimation curves",
            expected: gt_curve.k(),
            got: model_curve.k(),
        });
    }
    Ok(spread(model_curve)? / spread(gt_curve)?)
}

/// Mean change in predicted CTR from moving one slot down, averaged over the
/// probe rows and over adjacent position pairs `(k, k+1)`. Probe rows should
/// come from random traffic so that item and position are independent.
pub fn position_gradient(model: &dyn ClickModel, probe: ArrayView2<f64>) -> Result<f64> {
    let n = probe.nrows();
    if n == 0 {
        return Err(Error::Empty("probe set"));
    }
    let k = model.num_positions();
    if k < 2 {
        return Err(Error::invalid("position gradient needs at least two positions"));
    }
    let mut prev = model.predict_rows(probe, &vec![0; n])?;
    let mut total = 0.0;
    for pos in 1..k {
        let cur = model.predict_rows(probe, &vec![pos; n])?;
        total += cur.iter().zip(&prev).map(|(c, p)| c - p).sum::<f64>();
        prev = cur;
    }
    Ok(total / (n * (k - 1)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub curve: PositionCurve,
    pub relative_curve: Vec<f64>,
    pub estimation_error_sq: f64,
    pub estimation_error_maxabs: f64,
    pub overestimation_ratio: f64,
    pub position_gradient: f64,
}

/// All metrics of `model` on `test`, against `ground_truth` (the label curve
/// of random traffic). The gradient is measured on `probe`.
pub fn evaluate(
    model: &dyn ClickModel,
    test: &Dataset,
    ground_truth: &PositionCurve,
    probe: ArrayView2<f64>,
) -> Result<MetricsReport> {
    let preds = model.predict_rows(test.features(), test.positions())?;
    let auc_value = auc(
        test.labels().as_slice().expect("contiguous"),
        preds.as_slice().expect("contiguous"),
    )?;
    let curve = serve_curve(model, test)?;
    let rel = relative_curve(&curve)?;
    let err = estimation_error(&rel, &relative_curve(ground_truth)?)?;
    Ok(MetricsReport {
        auc: auc_value,
        overestimation_ratio: overestimation_ratio(&curve, ground_truth)?,
        relative_curve: rel,
        curve,
        estimation_error_sq: err.sum_sq,
        estimation_error_maxabs: err.max_abs,
        position_gradient: position_gradient(model, probe)?,
    })
}
