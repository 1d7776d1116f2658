//! Synthetic noise for robustness runs.
//!
//! The default mode adds new records: `round(level · #correct)` correct and
//! `round(level · #incorrect)` incorrect logs, counted over the training
//! split, each on a uniformly drawn (student, exercise) pair that has no
//! record yet. The alternative mode flips that many existing training labels.
//! Validation and test logs are never touched.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ResponseDataset, ResponseLog, SplitSpec};
use crate::error::{Error, Result};
use crate::numerics::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    #[default]
    Add,
    Flip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
    pub mode: NoiseMode,
    /// Appended logs as `(student, exercise, correct)`.
    pub added_logs: Vec<(usize, usize, bool)>,
    /// Indices of training logs whose label was flipped.
    pub flipped: Vec<usize>,
}

impl NoiseSpec {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Inject noise into the training split. Returns the new dataset, the split
/// extended with the appended indices, and the record of what changed.
pub fn inject_noise(
    ds: &ResponseDataset,
    split: &SplitSpec,
    level: f64,
    seed: u64,
    mode: NoiseMode,
) -> Result<(ResponseDataset, SplitSpec, NoiseSpec)> {
    if !(0.0..=0.5).contains(&level) {
        return Err(Error::Contract(format!(
            "noise level {level} outside [0, 0.5]"
        )));
    }
    let mut spec = NoiseSpec {
        level,
        seed,
        mode,
        added_logs: Vec::new(),
        flipped: Vec::new(),
    };
    if level == 0.0 {
        return Ok((ds.clone(), split.clone(), spec));
    }
    let n_correct = ds.correct_count(&split.train);
    let n_incorrect = split.train.len() - n_correct;
    let want_correct = (level * n_correct as f64).round() as usize;
    let want_incorrect = (level * n_incorrect as f64).round() as usize;

    let mut out = ds.clone();
    let mut new_split = split.clone();
    let mut r = rng::stream(seed, "noise", 0);
    match mode {
        NoiseMode::Add => {
            let needed = want_correct + want_incorrect;
            let max_rejections = 10 * needed;
            let mut used: HashSet<(usize, usize)> =
                ds.logs.iter().map(|l| (l.student, l.exercise)).collect();
            let labels = std::iter::repeat_n(true, want_correct)
                .chain(std::iter::repeat_n(false, want_incorrect));
            for correct in labels {
                let mut rejections = 0;
                let (s, e) = loop {
                    let s = r.random_range(0..ds.num_students);
                    let e = r.random_range(0..ds.num_exercises);
                    if used.insert((s, e)) {
                        break (s, e);
                    }
                    rejections += 1;
                    if rejections > max_rejections {
                        return Err(Error::Data(format!(
                            "response graph too dense: {rejections} rejections placing a noise record ({} of {needed} placed)",
                            spec.added_logs.len()
                        )));
                    }
                };
                new_split.train.push(out.logs.len());
                out.logs.push(ResponseLog {
                    student: s,
                    exercise: e,
                    correct,
                });
                spec.added_logs.push((s, e, correct));
            }
        }
        NoiseMode::Flip => {
            let (mut cor, mut inc): (Vec<usize>, Vec<usize>) =
                split.train.iter().partition(|&&i| ds.logs[i].correct);
            cor.shuffle(&mut r);
            inc.shuffle(&mut r);
            for &i in cor[..want_correct].iter().chain(&inc[..want_incorrect]) {
                out.logs[i].correct = !out.logs[i].correct;
                spec.flipped.push(i);
            }
        }
    }
    out.validate()?;
    Ok((out, new_split, spec))
}
