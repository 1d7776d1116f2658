//! DINA-style synthetic response data with long-tail per-student counts.
//!
//! Each student has an ability `θ ~ N(0,1)` and each concept a difficulty
//! `δ ~ N(0,1)`; mastery of concept k is Bernoulli(σ(1.7(θ − δ_k))). An
//! exercise is answered correctly with probability `1 − slip` when every
//! required concept is mastered and `guess` otherwise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Pareto};
use serde::{Deserialize, Serialize};

use super::{QMatrix, ResponseDataset, ResponseLog};
use crate::error::{Error, Result};
use crate::numerics::{rng, sigmoid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub students: usize,
    pub exercises: usize,
    pub concepts: usize,
    pub guess: f64,
    pub slip: f64,
    pub min_responses: usize,
    pub max_responses: usize,
    /// Pareto shape of the per-student count distribution.
    pub tail_alpha: f64,
    pub max_concepts_per_exercise: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            students: 300,
            exercises: 200,
            concepts: 10,
            guess: 0.1,
            slip: 0.1,
            min_responses: 15,
            max_responses: 150,
            tail_alpha: 1.5,
            max_concepts_per_exercise: 2,
            seed: 0,
        }
    }
}

pub struct SyntheticData {
    pub dataset: ResponseDataset,
    /// Ground-truth binary mastery, students × concepts.
    pub mastery: Vec<Vec<bool>>,
    pub concept_names: Vec<String>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.students == 0 || cfg.exercises == 0 || cfg.concepts == 0 {
        return Err(Error::Contract("synthetic sizes must be positive".into()));
    }
    if cfg.min_responses > cfg.exercises || cfg.min_responses > cfg.max_responses {
        return Err(Error::Contract(format!(
            "min_responses {} incompatible with {} exercises / max {}",
            cfg.min_responses, cfg.exercises, cfg.max_responses
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Q-matrix: 1..=max concepts per exercise; the first `concepts` exercises
    // cycle through every concept so each one is covered.
    let mut r = rng::stream(cfg.seed, "synthetic-q", 0);
    let max_k = cfg.max_concepts_per_exercise.clamp(1, cfg.concepts);
    let mut q = Vec::with_capacity(cfg.exercises);
    for j in 0..cfg.exercises {
        let k = r.random_range(1..=max_k);
        let mut row: Vec<usize> = (0..cfg.concepts).collect();
        row.shuffle(&mut r);
        row.truncate(k);
        if j < cfg.concepts && !row.contains(&j) {
            row[0] = j;
        }
        q.push(row);
    }
    let q_matrix = QMatrix::new(cfg.concepts, q)?;

    let mut r = rng::stream(cfg.seed, "synthetic-traits", 0);
    let delta: Vec<f64> = (0..cfg.concepts).map(|_| normal.sample(&mut r)).collect();
    let mut mastery = Vec::with_capacity(cfg.students);
    for _ in 0..cfg.students {
        let theta: f64 = normal.sample(&mut r);
        mastery.push(
            delta
                .iter()
                .map(|d| r.random::<f64>() < sigmoid(1.7 * (theta - d)))
                .collect::<Vec<bool>>(),
        );
    }

    let pareto = Pareto::new(cfg.min_responses as f64, cfg.tail_alpha)
        .map_err(|e| Error::Contract(format!("pareto: {e}")))?;
    let cap = cfg.max_responses.min(cfg.exercises);
    let mut r = rng::stream(cfg.seed, "synthetic-logs", 0);
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..cfg.exercises).collect();
    for (s, m) in mastery.iter().enumerate() {
        let n = (pareto.sample(&mut r).floor() as usize).clamp(cfg.min_responses, cap);
        order.shuffle(&mut r);
        for &e in &order[..n] {
            let eta = q_matrix.concepts_of(e).iter().all(|&k| m[k]);
            let p = if eta { 1.0 - cfg.slip } else { cfg.guess };
            logs.push(ResponseLog {
                student: s,
                exercise: e,
                correct: r.random::<f64>() < p,
            });
        }
    }
    let dataset = ResponseDataset::new(cfg.students, logs, q_matrix)?;
    let concept_names = (0..cfg.concepts)
        .map(|k| format!("concept_{k:02}"))
        .collect();
    Ok(SyntheticData {
        dataset,
        mastery,
        concept_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_coverage() {
        let cfg = SyntheticConfig {
            seed: 3,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        let ds = &data.dataset;
        assert_eq!(
            (ds.num_students, ds.num_exercises, ds.num_concepts),
            (300, 200, 10)
        );
        let mut per_student = vec![0; 300];
        for l in &ds.logs {
            per_student[l.student] += 1;
        }
        assert!(per_student.iter().all(|&c| (15..=150).contains(&c)));
        // Long tail: the mean sits well above the median.
        let mut sorted = per_student.clone();
        sorted.sort_unstable();
        let mean = ds.logs.len() as f64 / 300.0;
        assert!(mean > sorted[150] as f64);
        for k in 0..10 {
            assert!((0..200).any(|j| ds.q_matrix.contains(j, k)));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig::default();
        assert_eq!(
            generate(&cfg).unwrap().dataset,
            generate(&cfg).unwrap().dataset
        );
    }

    #[test]
    fn masters_answer_more_often() {
        let data = generate(&SyntheticConfig::default()).unwrap();
        let (mut hit, mut n_hit, mut miss, mut n_miss) = (0, 0, 0, 0);
        for l in &data.dataset.logs {
            let eta = data
                .dataset
                .q_matrix
                .concepts_of(l.exercise)
                .iter()
                .all(|&k| data.mastery[l.student][k]);
            if eta {
                n_hit += 1;
                hit += usize::from(l.correct);
            } else {
                n_miss += 1;
                miss += usize::from(l.correct);
            }
        }
        let p_hit = hit as f64 / n_hit as f64;
        let p_miss = miss as f64 / n_miss as f64;
        assert!((p_hit - 0.9).abs() < 0.03, "{p_hit}");
        assert!((p_miss - 0.1).abs() < 0.03, "{p_miss}");
    }
}
