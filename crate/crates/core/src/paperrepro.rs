//! Reproductions of the two analytical examples behind the overestimation
//! argument.
//!
//! The linear example compares a ground-truth logistic model with one that
//! leans harder on position on two ranking-biased exposures: item `a`
//! (features all `0.1`) shown at the top slot and item `b` (features all
//! `-0.1`) shown at the second slot. The squared-error loss is summed over
//! both exposures against the ground-truth CTRs, and the L2 term is
//! `0.001 * Σ w_i²` over all eleven weights. Under those choices the
//! position-heavy model gets the lower total loss:
//!
//! ```text
//! item a, slot 0: σ(1) = 0.731059 vs σ(0.9) = 0.710950   -> gap² ≈ 0.000404
//! item b, slot 1: σ(-1 - 1) vs σ(-0.9 - 1.1), both σ(-2)  -> gap² = 0
//! ```
//!
//! The sweep trains the shallow-tower model at several L2 strengths and
//! reports how far its position curve overstates the random-traffic one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{empirical_curve, overestimation_ratio};
use crate::experiment::SplitPlan;
use crate::models::{serve_curve, train, ModelKind};
use crate::nnet::{logistic, TrainConfig};

/// Number of item features in the linear example.
pub const LINEAR_FEATURES: usize = 10;

/// `w_0 = -1` on position, `w_i = 1` on features.
pub const GROUND_TRUTH_WEIGHTS: [f64; LINEAR_FEATURES + 1] = [-1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];

/// `w_0 = -1.1` on position, `w_i = 0.9` on features.
pub const OVERESTIMATION_WEIGHTS: [f64; LINEAR_FEATURES + 1] = [-1.1, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearExample {
    /// `(features, position)` pairs.
    pub exposures: Vec<(Vec<f64>, f64)>,
    pub l2_coeff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLosses {
    pub emp: f64,
    pub reg: f64,
    pub total: f64,
}

impl LinearExample {
    /// Item `a` at position 0 and item `b` at position 1.
    pub fn ranking_biased_pair() -> Self {
        Self {
            exposures: vec![(vec![0.1; LINEAR_FEATURES], 0.0), (vec![-0.1; LINEAR_FEATURES], 1.0)],
            l2_coeff: 0.001,
        }
    }

    fn ctr(weights: &[f64], features: &[f64], position: f64) -> f64 {
        let z: f64 = weights[1..].iter().zip(features).map(|(w, v)| w * v).sum::<f64>() + weights[0] * position;
        logistic(z)
    }

    pub fn losses(&self, model_weights: &[f64], ground_truth_weights: &[f64]) -> Result<LinearLosses> {
        for w in [model_weights, ground_truth_weights] {
            if w.len() != LINEAR_FEATURES + 1 {
                return Err(Error::DimensionMismatch {
                    context: "linear example weights",
                    expected: LINEAR_FEATURES + 1,
                    got: w.len(),
                });
            }
        }
        let mut emp = 0.0;
        for (v, p) in &self.exposures {
            if v.len() != LINEAR_FEATURES {
                return Err(Error::DimensionMismatch {
                    context: "linear example features",
                    expected: LINEAR_FEATURES,
                    got: v.len(),
                });
            }
            let gap = Self::ctr(ground_truth_weights, v, *p) - Self::ctr(model_weights, v, *p);
            emp += gap * gap;
        }
        let reg = self.l2_coeff * model_weights.iter().map(|w| w * w).sum::<f64>();
        Ok(LinearLosses {
            emp,
            reg,
            total: emp + reg,
        })
    }
}

/// Losses of `model_weights` on the ranking-biased pair.
pub fn linear_example_losses(model_weights: &[f64], ground_truth_weights: &[f64]) -> Result<LinearLosses> {
    LinearExample::ranking_biased_pair().losses(model_weights, ground_truth_weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub losses: LinearLosses,
}

pub fn table1() -> Vec<Table1Row> {
    [
        ("Ground-truth model", GROUND_TRUTH_WEIGHTS),
        ("Overestimation model", OVERESTIMATION_WEIGHTS),
    ]
    .into_iter()
    .map(|(name, w)| Table1Row {
        model: name.to_string(),
        losses: linear_example_losses(&w, &GROUND_TRUTH_WEIGHTS).expect("fixed shapes"),
    })
    .collect()
}

/// Fixed-width table, losses rounded to four decimals.
pub fn format_table1(rows: &[Table1Row]) -> String {
    let mut out = format!("{:<22} {:>9} {:>9} {:>9}\n", "model", "loss_emp", "loss_reg", "total");
    for r in rows {
        out += &format!(
            "{:<22} {:>9.4} {:>9.4} {:>9.4}\n",
            r.model, r.losses.emp, r.losses.reg, r.losses.total
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub seed: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// `(lambda, mean ratio over seeds)` in the order the lambdas were given.
    pub mean_ratio: Vec<(f64, f64)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,seed,ratio\n");
        for p in &self.points {
            out += &format!("{},{},{}\n", p.lambda, p.seed, p.ratio);
        }
        out
    }
}

/// Trains `ST_PSF` for every `(lambda, seed)` and reports its overestimation
/// ratio on the random-traffic test split. All lambdas of one seed share the
/// same data and initialization.
pub fn l2_sweep(lambdas: &[f64], plan: &SplitPlan, train_config: &TrainConfig, seeds: &[u64]) -> Result<SweepReport> {
    if lambdas.is_empty() {
        return Err(Error::Empty("lambda list"));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::invalid(format!("L2 coefficient {bad} must be >= 0")));
    }
    let mut points = Vec::with_capacity(lambdas.len() * seeds.len());
    for &seed in seeds {
        let splits = plan.build(seed)?;
        let gt = empirical_curve(&splits.test)?;
        let ratios: Vec<Result<f64>> = lambdas
            .par_iter()
            .map(|&lambda| {
                let config = TrainConfig {
                    l2_coeff: lambda,
                    seed,
                    ..train_config.clone()
                };
                let model = train(ModelKind::StPsf, &splits.train, &splits.validation, &config)?;
                overestimation_ratio(&serve_curve(&model, &splits.test)?, &gt)
            })
            .collect();
        for (&lambda, ratio) in lambdas.iter().zip(ratios) {
            points.push(SweepPoint {
                lambda,
                seed,
                ratio: ratio?,
            });
        }
    }
    let mean_ratio = lambdas
        .iter()
        .map(|&l| {
            let rs: Vec<f64> = points.iter().filter(|p| p.lambda == l).map(|p| p.ratio).collect();
            (l, rs.iter().sum::<f64>() / rs.len() as f64)
        })
        .collect();
    Ok(SweepReport { points, mean_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round4(x: f64) -> f64 {
        (x * 1e4).round() / 1e4
    }

    #[test]
    fn table1_rows() {
        let rows = table1();
        let gt = rows[0].losses;
        assert_eq!(
            (round4(gt.emp), round4(gt.reg), round4(gt.total)),
            (0.0, 0.0110, 0.0110)
        );
        let over = rows[1].losses;
        assert_eq!(
            (round4(over.emp), round4(over.reg), round4(over.total)),
            (0.0004, 0.0093, 0.0097)
        );
        assert!(over.total < gt.total);
    }

    #[test]
    fn derivation_chain() {
        assert!((logistic(1.0) - 0.731059).abs() < 1e-6);
        assert!((logistic(-2.0) - 0.119203).abs() < 1e-6);
        let gap = logistic(1.0) - logistic(0.9);
        assert!((gap * gap - 0.000404).abs() < 1e-6);
        let l = linear_example_losses(&OVERESTIMATION_WEIGHTS, &GROUND_TRUTH_WEIGHTS).unwrap();
        assert!((l.emp - gap * gap).abs() < 1e-15);
    }

    #[test]
    fn zero_model() {
        let zeros = [0.0; 11];
        assert_eq!(
            linear_example_losses(&zeros, &zeros).unwrap(),
            LinearLosses {
                emp: 0.0,
                reg: 0.0,
                total: 0.0
            }
        );
        assert!(linear_example_losses(&zeros[..10], &zeros).is_err());
    }

    #[test]
    fn table_formatting() {
        let text = format_table1(&table1());
        assert!(text.contains("0.0000    0.0110    0.0110"), "{text}");
        assert!(text.contains("0.0004    0.0093    0.0097"), "{text}");
    }

    #[test]
    fn sweep_rejects_empty_inputs() {
        let plan = SplitPlan::default();
        let cfg = TrainConfig::default();
        assert!(l2_sweep(&[], &plan, &cfg, &[1]).is_err());
        assert!(l2_sweep(&[1e-4], &plan, &cfg, &[]).is_err());
        assert!(l2_sweep(&[-1.0], &plan, &cfg, &[1]).is_err());
    }
}
