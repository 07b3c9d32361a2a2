//! Dataset ingestion, federated partitioning, and packing.

pub mod adult;
pub mod femnist;
pub mod packed;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Features, InputShape};

/// Tabular split: row features, binary labels, group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    pub groups: Vec<u32>,
}

/// Image split: (n, c, h, w) pixels in [0,1], digit labels, group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Array4<f64>,
    pub labels: Vec<u32>,
    pub groups: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitData {
    Tabular(TabularDataset),
    Image(ImageDataset),
}

impl SplitData {
    pub fn len(&self) -> usize {
        match self {
            SplitData::Tabular(t) => t.labels.len(),
            SplitData::Image(i) => i.labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[u32] {
        match self {
            SplitData::Tabular(t) => &t.labels,
            SplitData::Image(i) => &i.labels,
        }
    }

    pub fn groups(&self) -> &[u32] {
        match self {
            SplitData::Tabular(t) => &t.groups,
            SplitData::Image(i) => &i.groups,
        }
    }

    /// Gather rows into a batch, preserving order.
    pub fn batch(&self, rows: &[u32]) -> Batch {
        match self {
            SplitData::Tabular(t) => {
                let mut x = Array2::zeros((rows.len(), t.features.ncols()));
                for (i, &r) in rows.iter().enumerate() {
                    x.row_mut(i).assign(&t.features.row(r as usize));
                }
                Batch {
                    features: Features::Tabular(x),
                    labels: rows.iter().map(|&r| t.labels[r as usize]).collect(),
                    groups: rows.iter().map(|&r| t.groups[r as usize]).collect(),
                }
            }
            SplitData::Image(im) => {
                let s = im.images.shape();
                let mut x = Array4::zeros((rows.len(), s[1], s[2], s[3]));
                for (i, &r) in rows.iter().enumerate() {
                    x.index_axis_mut(Axis(0), i)
                        .assign(&im.images.index_axis(Axis(0), r as usize));
                }
                Batch {
                    features: Features::Images(x),
                    labels: rows.iter().map(|&r| im.labels[r as usize]).collect(),
                    groups: rows.iter().map(|&r| im.groups[r as usize]).collect(),
                }
            }
        }
    }

    pub fn full_batch(&self) -> Batch {
        let rows: Vec<u32> = (0..self.len() as u32).collect();
        self.batch(&rows)
    }

    pub fn input_shape(&self) -> InputShape {
        match self {
            SplitData::Tabular(t) => InputShape::Flat(t.features.ncols()),
            SplitData::Image(i) => {
                let s = i.images.shape();
                InputShape::Image {
                    channels: s[1],
                    height: s[2],
                    width: s[3],
                }
            }
        }
    }
}

/// One user's shard: an id and the train-row indices it owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserShard {
    pub id: String,
    pub indices: Vec<u32>,
}

impl UserShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Partition of the train split across users. Shards are kept sorted by id;
/// every shard is nonempty and together they cover each row exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedSplit {
    pub shards: Vec<UserShard>,
}

impl FederatedSplit {
    pub fn user_count(&self) -> usize {
        self.shards.len()
    }

    pub fn total_samples(&self) -> usize {
        self.shards.iter().map(|s| s.len()).sum()
    }

    pub fn validate(&self, n_rows: usize) -> Result<()> {
        let mut seen = vec![false; n_rows];
        for shard in &self.shards {
            if shard.is_empty() {
                return Err(Error::InvalidConfig(format!("shard {} is empty", shard.id)));
            }
            for &idx in &shard.indices {
                let idx = idx as usize;
                if idx >= n_rows {
                    return Err(Error::InvalidConfig(format!(
                        "shard {} references row {idx} beyond {n_rows}",
                        shard.id
                    )));
                }
                if seen[idx] {
                    return Err(Error::InvalidConfig(format!(
                        "row {idx} assigned to more than one shard"
                    )));
                }
                seen[idx] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::InvalidConfig(
                "partition does not cover every row".into(),
            ));
        }
        let sorted = self
            .shards
            .windows(2)
            .all(|w| w[0].id < w[1].id);
        if !sorted {
            return Err(Error::InvalidConfig(
                "shards must be sorted by user id".into(),
            ));
        }
        Ok(())
    }
}

/// A dataset ready for training: both splits, the user partition, and the
/// group/label metadata shared by every consumer.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub group_count: usize,
    pub group_names: Vec<String>,
    pub label_count: usize,
    pub train: SplitData,
    pub test: SplitData,
    pub split: FederatedSplit,
}

impl PreparedDataset {
    pub fn validate(&self) -> Result<()> {
        self.split.validate(self.train.len())?;
        for split in [&self.train, &self.test] {
            if split.is_empty() {
                return Err(Error::InvalidConfig("empty split".into()));
            }
            if let Some(&g) = split.groups().iter().find(|&&g| g as usize >= self.group_count) {
                return Err(Error::InvalidConfig(format!(
                    "group id {g} outside declared domain {}",
                    self.group_count
                )));
            }
            if let Some(&l) = split.labels().iter().find(|&&l| l as usize >= self.label_count)
            {
                return Err(Error::InvalidConfig(format!(
                    "label {l} outside declared domain {}",
                    self.label_count
                )));
            }
        }
        Ok(())
    }

    /// Per-group sample counts of a split.
    pub fn group_histogram(&self, split: &SplitData) -> Vec<usize> {
        let mut hist = vec![0usize; self.group_count];
        for &g in split.groups() {
            hist[g as usize] += 1;
        }
        hist
    }
}

/// Poisson rate whose zero-truncated mean equals `mean`, i.e. the solution
/// of `rate / (1 - exp(-rate)) = mean`. Requires mean > 1 since truncated
/// sizes are at least 1.
fn truncated_poisson_rate(mean: f64) -> Result<f64> {
    if !(mean.is_finite() && mean > 1.0) {
        return Err(Error::InvalidConfig(format!(
            "mean shard size must exceed 1, got {mean}"
        )));
    }
    let f = |rate: f64| rate / (-(-rate).exp_m1()) - mean;
    let (mut lo, mut hi) = (1e-9, mean);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Partition `n_rows` shuffled rows into user shards with sizes drawn from
/// a Poisson distribution (zero draws are redrawn, with the rate chosen so
/// the resulting shard-size mean equals `mean`), consuming every row.
pub fn partition_users(n_rows: usize, mean: f64, seed: u64) -> Result<FederatedSplit> {
    if n_rows == 0 {
        return Err(Error::InvalidConfig("cannot partition an empty dataset".into()));
    }
    let rate = truncated_poisson_rate(mean)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows: Vec<u32> = (0..n_rows as u32).collect();
    rows.shuffle(&mut rng);

    let poisson = Poisson::new(rate)
        .map_err(|e| Error::InvalidConfig(format!("poisson: {e}")))?;
    let mut shards = Vec::new();
    let mut at = 0usize;
    while at < n_rows {
        let mut size = 0usize;
        while size == 0 {
            size = poisson.sample(&mut rng) as usize;
        }
        let size = size.min(n_rows - at);
        let indices = rows[at..at + size].to_vec();
        shards.push(UserShard {
            id: format!("u{:06}", shards.len()),
            indices,
        });
        at += size;
    }
    Ok(FederatedSplit { shards })
}

/// Hypothetical-population scaling for noise calibration: multiplies the
/// accountant's population size and divides delta, leaving the real shards
/// untouched. Only factors 1, 100, and 1000 are supported.
pub fn scale_population(population: usize, delta: f64, factor: u32) -> Result<(usize, f64)> {
    match factor {
        1 => Ok((population, delta)),
        100 | 1000 => Ok((population * factor as usize, delta / factor as f64)),
        other => Err(Error::InvalidConfig(format!(
            "population factor must be 1, 100, or 1000, got {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_everything_and_is_deterministic() {
        let a = partition_users(1000, 2.0, 42).unwrap();
        a.validate(1000).unwrap();
        assert_eq!(a.total_samples(), 1000);
        let b = partition_users(1000, 2.0, 42).unwrap();
        assert_eq!(a, b);
        let c = partition_users(1000, 2.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn user_count_concentrates_near_n_over_mean() {
        for seed in 0..5 {
            let split = partition_users(32_561, 2.0, seed).unwrap();
            let k = split.user_count() as f64;
            let expect = 32_561.0 / 2.0;
            assert!(
                k > 0.9 * expect && k < 1.1 * expect,
                "seed {seed}: K = {k} vs {expect}"
            );
        }
    }

    #[test]
    fn shard_size_mean_matches_request() {
        let split = partition_users(50_000, 2.0, 7).unwrap();
        let mean = split.total_samples() as f64 / split.user_count() as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean shard size {mean}");
        assert!(split.shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn scale_population_factors() {
        assert_eq!(scale_population(200, 2.5e-4, 1).unwrap(), (200, 2.5e-4));
        let (k, d) = scale_population(200, 2.5e-4, 100).unwrap();
        assert_eq!(k, 20_000);
        assert!((d - 2.5e-6).abs() < 1e-18);
        assert!(scale_population(200, 2.5e-4, 7).is_err());
    }
}
