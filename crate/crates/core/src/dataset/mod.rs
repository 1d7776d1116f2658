//! Response logs, Q-matrix, splits and noise injection.

mod io;
mod noise;
mod split;
pub mod synthetic;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use io::{
    load_concept_names, load_dataset, load_dataset_with, write_concept_names, write_dataset,
    LoadOptions,
};
pub use noise::{inject_noise, NoiseMode, NoiseSpec};
pub use split::{split, split_stratified, SplitSpec};

/// One interaction `(student, exercise, correctness)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ResponseLog {
    pub student: usize,
    pub exercise: usize,
    pub correct: bool,
}

/// Binary exercise × concept relevance matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QMatrix {
    num_concepts: usize,
    concepts: Vec<Vec<usize>>,
}

impl QMatrix {
    /// `concepts[j]` lists the concepts of exercise `j`; duplicates are dropped.
    pub fn new(num_concepts: usize, mut concepts: Vec<Vec<usize>>) -> Result<Self> {
        for (j, row) in concepts.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if row.is_empty() {
                return Err(Error::Data(format!("exercise {j} has no concept")));
            }
            if let Some(&k) = row.iter().find(|&&k| k >= num_concepts) {
                return Err(Error::Data(format!(
                    "exercise {j} references concept {k} of {num_concepts}"
                )));
            }
        }
        Ok(QMatrix {
            num_concepts,
            concepts,
        })
    }

    pub fn num_exercises(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn concepts_of(&self, exercise: usize) -> &[usize] {
        &self.concepts[exercise]
    }

    pub fn contains(&self, exercise: usize, concept: usize) -> bool {
        self.concepts[exercise].binary_search(&concept).is_ok()
    }

    /// Dense 0/1 row of length Z.
    pub fn dense_row(&self, exercise: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_concepts];
        for &k in &self.concepts[exercise] {
            row[k] = 1.0;
        }
        row
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseDataset {
    pub num_students: usize,
    pub num_exercises: usize,
    pub num_concepts: usize,
    pub logs: Vec<ResponseLog>,
    pub q_matrix: QMatrix,
    /// Original identifiers, indexed by dense id.
    pub student_labels: Vec<String>,
    pub exercise_labels: Vec<String>,
    pub concept_labels: Vec<String>,
}

impl ResponseDataset {
    /// Build a dataset with numeric labels `0..n` and check every invariant.
    pub fn new(num_students: usize, logs: Vec<ResponseLog>, q_matrix: QMatrix) -> Result<Self> {
        let labels = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        let ds = ResponseDataset {
            num_students,
            num_exercises: q_matrix.num_exercises(),
            num_concepts: q_matrix.num_concepts(),
            student_labels: labels(num_students),
            exercise_labels: labels(q_matrix.num_exercises()),
            concept_labels: labels(q_matrix.num_concepts()),
            logs,
            q_matrix,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_matrix.num_exercises() != self.num_exercises
            || self.q_matrix.num_concepts() != self.num_concepts
        {
            return Err(Error::Data("Q-matrix shape disagrees with counts".into()));
        }
        let mut seen = HashMap::with_capacity(self.logs.len());
        for (i, log) in self.logs.iter().enumerate() {
            if log.student >= self.num_students || log.exercise >= self.num_exercises {
                return Err(Error::Data(format!(
                    "log {i} references ({}, {}) outside {}x{}",
                    log.student, log.exercise, self.num_students, self.num_exercises
                )));
            }
            if let Some(prev) = seen.insert((log.student, log.exercise), i) {
                return Err(Error::Data(format!(
                    "log {i} duplicates log {prev} for pair ({}, {})",
                    log.student, log.exercise
                )));
            }
        }
        Ok(())
    }

    pub fn correct_count(&self, indices: &[usize]) -> usize {
        indices.iter().filter(|&&i| self.logs[i].correct).count()
    }

    /// Logs selected by index.
    pub fn select(&self, indices: &[usize]) -> Vec<ResponseLog> {
        indices.iter().map(|&i| self.logs[i]).collect()
    }

    /// Drop students with fewer than `min` logs and re-index the rest densely.
    pub fn filter_min_responses(&self, min: usize) -> Result<ResponseDataset> {
        let mut counts = vec![0usize; self.num_students];
        for l in &self.logs {
            counts[l.student] += 1;
        }
        let mut remap = vec![usize::MAX; self.num_students];
        let mut labels = Vec::new();
        for (s, &c) in counts.iter().enumerate() {
            if c >= min {
                remap[s] = labels.len();
                labels.push(self.student_labels[s].clone());
            }
        }
        let logs = self
            .logs
            .iter()
            .filter(|l| remap[l.student] != usize::MAX)
            .map(|l| ResponseLog {
                student: remap[l.student],
                ..*l
            })
            .collect();
        let ds = ResponseDataset {
            num_students: labels.len(),
            student_labels: labels,
            logs,
            ..self.clone()
        };
        ds.validate()?;
        Ok(ds)
    }
}
