//! Train/validation/test partitioning (7:1:2).

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ResponseDataset;
use crate::error::{Error, Result};
use crate::numerics::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub stratified: bool,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sizes for `n` items: train and validation are floored, the remainder
/// goes to test.
fn sizes(n: usize) -> (usize, usize) {
    (n * 7 / 10, n / 10)
}

/// Global uniform shuffle of log indices, then 70/10/20.
pub fn split(ds: &ResponseDataset, seed: u64) -> Result<SplitSpec> {
    let n = ds.logs.len();
    if n < 10 {
        return Err(Error::Data(format!(
            "need at least 10 logs to split, have {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split", 0));
    let (n_train, n_val) = sizes(n);
    Ok(SplitSpec {
        seed,
        stratified: false,
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

/// Per-student variant: each student's logs are shuffled and split with the
/// same floor rule.
pub fn split_stratified(ds: &ResponseDataset, seed: u64) -> Result<SplitSpec> {
    if ds.logs.len() < 10 {
        return Err(Error::Data(format!(
            "need at least 10 logs to split, have {}",
            ds.logs.len()
        )));
    }
    let mut by_student = vec![Vec::new(); ds.num_students];
    for (i, l) in ds.logs.iter().enumerate() {
        by_student[l.student].push(i);
    }
    let mut r = rng::stream(seed, "split-stratified", 0);
    let mut spec = SplitSpec {
        seed,
        stratified: true,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut group in by_student {
        group.shuffle(&mut r);
        let (n_train, n_val) = sizes(group.len());
        spec.train.extend_from_slice(&group[..n_train]);
        spec.val.extend_from_slice(&group[n_train..n_train + n_val]);
        spec.test.extend_from_slice(&group[n_train + n_val..]);
    }
    Ok(spec)
}

impl SplitSpec {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// True when train/val/test partition `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}
