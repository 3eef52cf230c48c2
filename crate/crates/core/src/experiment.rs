//! Dataset splits shared by the sweep and the end-to-end pipeline.
//!
//! Ranking-biased traffic is split by user into train (first 80%), an unused
//! slice (next 10%) and the early-stopping validation set (last 10%). Random
//! traffic comes from disjoint users and is split in half: one half fits the
//! fusing weight, the other is the final test set.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::synthgen::{generate, user_seed, GenConfig, QueryGroup, TrafficMode, DEFAULT_K};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPlan {
    pub rs_users: usize,
    pub random_users: usize,
    pub items_per_query: usize,
    pub noise_scale: f64,
    pub resample_noise: bool,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Share of random-traffic users used to fit the fusing weight.
    pub eps_fit_fraction: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            rs_users: 50_000,
            random_users: 10_000,
            items_per_query: DEFAULT_K,
            noise_scale: 1.0,
            resample_noise: false,
            train_fraction: 0.8,
            validation_fraction: 0.1,
            eps_fit_fraction: 0.5,
        }
    }
}

pub struct SplitGroups {
    pub train: Vec<QueryGroup>,
    pub validation: Vec<QueryGroup>,
    pub eps_fit: Vec<QueryGroup>,
    pub test: Vec<QueryGroup>,
}

pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub eps_fit: Dataset,
    pub test: Dataset,
}

fn count(users: usize, fraction: f64) -> usize {
    ((users as f64 * fraction).round() as usize).min(users)
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |f: f64| (0.0..=1.0).contains(&f);
        if !in_unit(self.train_fraction)
            || !in_unit(self.validation_fraction)
            || !in_unit(self.eps_fit_fraction)
            || self.train_fraction + self.validation_fraction > 1.0 + 1e-12
        {
            return Err(Error::invalid("split fractions must lie in [0, 1] and not overlap"));
        }
        let rs_train = count(self.rs_users, self.train_fraction);
        let rs_val = count(self.rs_users, self.validation_fraction);
        let fit = count(self.random_users, self.eps_fit_fraction);
        if rs_train == 0 || rs_val == 0 || fit == 0 || fit == self.random_users {
            return Err(Error::invalid("every split needs at least one user"));
        }
        Ok(())
    }

    /// Generator settings for one traffic mode. The two modes get distinct
    /// seeds and user ids so that no user appears in both.
    pub fn gen_config(&self, mode: TrafficMode, seed: u64) -> GenConfig {
        let (stream, users, first) = match mode {
            TrafficMode::Rs => (0x5253, self.rs_users, 0),
            TrafficMode::Random => (0x0052_4e44, self.random_users, self.rs_users as u64),
        };
        GenConfig {
            n_users: users,
            items_per_query: self.items_per_query,
            noise_scale: self.noise_scale,
            master_seed: user_seed(seed, stream),
            traffic_mode: mode,
            resample_noise: self.resample_noise,
            first_user_id: first,
        }
    }

    fn rs_groups(&self, seed: u64) -> Result<(Vec<QueryGroup>, Vec<QueryGroup>)> {
        let mut rs = generate(&self.gen_config(TrafficMode::Rs, seed))?;
        let validation = rs.split_off(self.rs_users - count(self.rs_users, self.validation_fraction));
        rs.truncate(count(self.rs_users, self.train_fraction));
        Ok((rs, validation))
    }

    fn random_groups(&self, seed: u64) -> Result<(Vec<QueryGroup>, Vec<QueryGroup>)> {
        let mut fit = generate(&self.gen_config(TrafficMode::Random, seed))?;
        let test = fit.split_off(count(self.random_users, self.eps_fit_fraction));
        Ok((fit, test))
    }

    /// The four splits as query groups, for export.
    pub fn groups(&self, seed: u64) -> Result<SplitGroups> {
        self.validate()?;
        let (train, validation) = self.rs_groups(seed)?;
        let (eps_fit, test) = self.random_groups(seed)?;
        Ok(SplitGroups {
            train,
            validation,
            eps_fit,
            test,
        })
    }

    pub fn build(&self, seed: u64) -> Result<Splits> {
        self.validate()?;
        let k = self.items_per_query;
        let (train, validation) = self.rs_groups(seed)?;
        let (train, validation) = (Dataset::from_groups(&train, k)?, Dataset::from_groups(&validation, k)?);
        let (eps_fit, test) = self.random_groups(seed)?;
        Ok(Splits {
            train,
            validation,
            eps_fit: Dataset::from_groups(&eps_fit, k)?,
            test: Dataset::from_groups(&test, k)?,
        })
    }
}

/// The first `n` feature rows of `data` (all of them if fewer), used as
/// position-gradient probes.
pub fn probe_rows(data: &Dataset, n: usize) -> Array2<f64> {
    let n = n.min(data.len());
    data.features().slice(s![..n, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let plan = SplitPlan {
            rs_users: 100,
            random_users: 40,
            ..SplitPlan::default()
        };
        let s = plan.build(1).unwrap();
        assert_eq!(s.train.len(), 800);
        assert_eq!(s.validation.len(), 100);
        assert_eq!(s.eps_fit.len(), 200);
        assert_eq!(s.test.len(), 200);
        let g = plan.groups(1).unwrap();
        assert_eq!(
            (g.train.len(), g.validation.len(), g.eps_fit.len(), g.test.len()),
            (80, 10, 20, 20)
        );
        assert_eq!(g.validation[0].user_id, 90);
        let again = Dataset::from_groups(&g.test, plan.items_per_query).unwrap();
        assert_eq!(again.features(), s.test.features());
    }

    #[test]
    fn modes_use_disjoint_users() {
        let plan = SplitPlan {
            rs_users: 10,
            random_users: 4,
            ..SplitPlan::default()
        };
        let rs = generate(&plan.gen_config(TrafficMode::Rs, 3)).unwrap();
        let rnd = generate(&plan.gen_config(TrafficMode::Random, 3)).unwrap();
        let max_rs = rs.iter().map(|g| g.user_id).max().unwrap();
        assert!(rnd.iter().all(|g| g.user_id > max_rs));
    }

    #[test]
    fn bad_plans() {
        let mut plan = SplitPlan {
            rs_users: 5,
            random_users: 1,
            ..SplitPlan::default()
        };
        assert!(plan.validate().is_err());
        plan.random_users = 4;
        plan.train_fraction = 0.95;
        assert!(plan.validate().is_err());
    }
}
