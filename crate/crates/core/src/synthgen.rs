//! Synthetic click logs with coupled position bias and ranking bias.
//!
//! Every user gets `K` freshly drawn items. Each exposure is first scored as
//! if it sat at the top slot; in [`TrafficMode::Rs`] the items are then
//! sorted by that score (the ranking bias), in [`TrafficMode::Random`] they
//! receive a uniformly random permutation of the slots. The score is then
//! recomputed at the final slot, which carries the position bias, clamped to
//! a probability, and a click label is drawn from it.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of user (and, separately, item) features.
pub const FEATURE_DIM: usize = 32;

/// Default number of slots per query.
pub const DEFAULT_K: usize = 10;

/// 32 features in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector([f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn new(values: [f64; FEATURE_DIM]) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("feature value {bad} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self([0.0; FEATURE_DIM])
    }

    fn sample(rng: &mut impl Rng) -> Self {
        let mut values = [0.0; FEATURE_DIM];
        for v in &mut values {
            *v = rng.random::<f64>();
        }
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        let arr: [f64; FEATURE_DIM] = values.try_into().map_err(|v: Vec<f64>| Error::DimensionMismatch {
            context: "feature vector",
            expected: FEATURE_DIM,
            got: v.len(),
        })?;
        Self::new(arr)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(f: FeatureVector) -> Self {
        f.0.to_vec()
    }
}

/// Which policy placed the items.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrafficMode {
    /// Sorted by the recommender's score (ranking-biased).
    #[serde(rename = "RS")]
    Rs,
    /// Uniformly random placement.
    #[serde(rename = "RANDOM")]
    Random,
}

impl fmt::Display for TrafficMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrafficMode::Rs => f.write_str("RS"),
            TrafficMode::Random => f.write_str("RANDOM"),
        }
    }
}

impl std::str::FromStr for TrafficMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RS" => Ok(TrafficMode::Rs),
            "RANDOM" => Ok(TrafficMode::Random),
            other => Err(Error::invalid(format!("unknown traffic mode {other:?}"))),
        }
    }
}

/// One impression. Field order matches the JSON-lines layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exposure {
    pub user_id: u64,
    pub item_id: u64,
    pub user_features: FeatureVector,
    pub item_features: FeatureVector,
    pub position: usize,
    pub label: u8,
    pub traffic: TrafficMode,
    /// Clamped generating probability; only known for synthetic data.
    pub true_pctr: f64,
}

/// The `K` exposures shown to one user for one request, ordered by position.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGroup {
    pub user_id: u64,
    pub exposures: Vec<Exposure>,
}

impl QueryGroup {
    /// Checks that positions form a permutation of `0..k` and that user and
    /// traffic tags agree.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.exposures.len() != k {
            return Err(Error::DimensionMismatch {
                context: "query group size",
                expected: k,
                got: self.exposures.len(),
            });
        }
        let mut seen = vec![false; k];
        let traffic = self.exposures[0].traffic;
        for e in &self.exposures {
            if e.position >= k {
                return Err(Error::PositionOutOfRange {
                    position: e.position,
                    k,
                });
            }
            if std::mem::replace(&mut seen[e.position], true) {
                return Err(Error::invalid(format!(
                    "user {}: position {} appears twice",
                    self.user_id, e.position
                )));
            }
            if e.user_id != self.user_id || e.traffic != traffic {
                return Err(Error::invalid(format!(
                    "user {}: mixed user id or traffic tag within a group",
                    self.user_id
                )));
            }
            if e.label > 1 {
                return Err(Error::invalid(format!("label {} is not 0/1", e.label)));
            }
            if !(0.0..=1.0).contains(&e.true_pctr) {
                return Err(Error::invalid(format!("true_pctr {} outside [0, 1]", e.true_pctr)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_users: usize,
    pub items_per_query: usize,
    /// Multiplies the uniform(-1, 1) noise draw.
    pub noise_scale: f64,
    pub master_seed: u64,
    pub traffic_mode: TrafficMode,
    /// Draw a second noise value for the rescoring pass instead of reusing the first.
    pub resample_noise: bool,
    /// Id of the first generated user; ids are consecutive from here.
    pub first_user_id: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 50_000,
            items_per_query: DEFAULT_K,
            noise_scale: 1.0,
            master_seed: 0,
            traffic_mode: TrafficMode::Rs,
            resample_noise: false,
            first_user_id: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.items_per_query < 2 {
            return Err(Error::invalid("items_per_query must be at least 2"));
        }
        if self.n_users == 0 {
            return Err(Error::invalid("n_users must be at least 1"));
        }
        if !self.noise_scale.is_finite() {
            return Err(Error::invalid("noise_scale must be finite"));
        }
        Ok(())
    }
}

/// The click-score function. `position` is zero-based and `noise` is the
/// already scaled noise draw. The result is positive but may exceed 1.
pub fn score_formula(user: &FeatureVector, item: &FeatureVector, position: usize, noise: f64) -> f64 {
    let u = &user.0;
    let v = &item.0;
    let p = position as f64;

    let user_sum: f64 = u.iter().sum();
    let item_sum: f64 = v.iter().sum();
    // Consecutive pairs of the concatenated 64-vector: (u0,u1), ..., (v30,v31).
    let pair_diff: f64 = u.chunks_exact(2).chain(v.chunks_exact(2)).map(|c| c[0] - c[1]).sum();
    let cross: f64 = u.iter().zip(v).map(|(a, b)| (10.0 * a + 10.0 * b).sin()).sum();
    let half = FEATURE_DIM / 2;
    let user_pos: f64 = (0..half).map(|i| u[i] - u[i + half]).sum();

    (user_sum.sin() + item_sum.sin() + pair_diff.cos() + 0.01 * cross - 0.1 * p
        + 0.1 * (user_pos + p).cos()
        + 0.1 * noise
        - 3.0)
        .exp()
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-user RNG seed: `mix64(master_seed ^ mix64(user_id))`, where `mix64`
/// is the SplitMix64 step. Stable across versions and thread counts.
pub fn user_seed(master_seed: u64, user_id: u64) -> u64 {
    mix64(master_seed ^ mix64(user_id))
}

/// One user's group together with the top-slot scores used for ranking.
/// [`generate`] keeps only the group.
pub struct DrawnGroup {
    pub group: QueryGroup,
    /// Step-1 score of each exposure, aligned with `group.exposures`.
    pub step1_scores: Vec<f64>,
}

pub fn draw_group(config: &GenConfig, user_id: u64) -> DrawnGroup {
    let k = config.items_per_query;
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed(config.master_seed, user_id));

    // Feature and noise draws come first and in a fixed order, so both
    // traffic modes see the same users, items and noise.
    let user = FeatureVector::sample(&mut rng);
    let items: Vec<FeatureVector> = (0..k).map(|_| FeatureVector::sample(&mut rng)).collect();
    let noise: Vec<f64> = (0..k)
        .map(|_| config.noise_scale * rng.random_range(-1.0..1.0))
        .collect();
    let item_ids: Vec<u64> = (0..k as u64).map(|j| user_id * k as u64 + j).collect();

    let step1: Vec<f64> = items
        .iter()
        .zip(&noise)
        .map(|(item, &s)| score_formula(&user, item, 0, s))
        .collect();

    let mut slot_of = vec![0usize; k];
    match config.traffic_mode {
        TrafficMode::Rs => {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| step1[b].total_cmp(&step1[a]).then(item_ids[a].cmp(&item_ids[b])));
            for (rank, &j) in order.iter().enumerate() {
                slot_of[j] = rank;
            }
        }
        TrafficMode::Random => {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            slot_of.copy_from_slice(&perm);
        }
    }

    let mut exposures = Vec::with_capacity(k);
    let mut step1_scores = Vec::with_capacity(k);
    for j in 0..k {
        let s = if config.resample_noise {
            config.noise_scale * rng.random_range(-1.0..1.0)
        } else {
            noise[j]
        };
        let pctr = score_formula(&user, &items[j], slot_of[j], s).clamp(0.0, 1.0);
        let label = u8::from(rng.random::<f64>() < pctr);
        exposures.push(Exposure {
            user_id,
            item_id: item_ids[j],
            user_features: user.clone(),
            item_features: items[j].clone(),
            position: slot_of[j],
            label,
            traffic: config.traffic_mode,
            true_pctr: pctr,
        });
        step1_scores.push(step1[j]);
    }

    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by_key(|&j| exposures[j].position);
    let exposures_sorted = idx.iter().map(|&j| exposures[j].clone()).collect();
    let step1_sorted = idx.iter().map(|&j| step1_scores[j]).collect();

    DrawnGroup {
        group: QueryGroup {
            user_id,
            exposures: exposures_sorted,
        },
        step1_scores: step1_sorted,
    }
}

/// Generates `config.n_users` query groups. Output depends only on the
/// config, never on the rayon pool size.
pub fn generate(config: &GenConfig) -> Result<Vec<QueryGroup>> {
    config.validate()?;
    Ok((0..config.n_users as u64)
        .into_par_iter()
        .map(|i| draw_group(config, config.first_user_id + i).group)
        .collect())
}

/// Writes one exposure per line as JSON.
pub fn export_jsonl(groups: &[QueryGroup], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for e in groups.iter().flat_map(|g| &g.exposures) {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|err| Error::io(path, err))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines file written by [`export_jsonl`]. Consecutive lines
/// with the same user id and traffic tag form one group, and every group is
/// checked against `k`.
pub fn import_jsonl(path: impl AsRef<Path>, k: usize) -> Result<Vec<QueryGroup>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut groups: Vec<QueryGroup> = Vec::new();
    let mut group_start = 0;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Exposure = serde_json::from_str(&line).map_err(|err| malformed(lineno, err.to_string()))?;
        if e.position >= k {
            return Err(malformed(
                lineno,
                Error::PositionOutOfRange {
                    position: e.position,
                    k,
                }
                .to_string(),
            ));
        }
        let starts_new = groups
            .last()
            .is_none_or(|g| g.exposures.len() == k || g.user_id != e.user_id || g.exposures[0].traffic != e.traffic);
        if starts_new {
            if let Some(g) = groups.last() {
                g.validate(k).map_err(|err| malformed(group_start, err.to_string()))?;
            }
            group_start = lineno;
            groups.push(QueryGroup {
                user_id: e.user_id,
                exposures: Vec::with_capacity(k),
            });
        }
        groups.last_mut().expect("group pushed above").exposures.push(e);
    }
    if let Some(g) = groups.last() {
        g.validate(k).map_err(|err| malformed(group_start, err.to_string()))?;
    }
    Ok(groups)
}
