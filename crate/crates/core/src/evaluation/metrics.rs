//! Classification metrics and the degree of agreement.

use serde::{Deserialize, Serialize};

use crate::dataset::{QMatrix, ResponseLog};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "metric",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::Contract("metric over empty input".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Fraction of rows where `score ≥ threshold` agrees with the label.
pub fn acc(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Mann–Whitney AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::NotApplicable("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let rank = (i + j + 2) as f64 / 2.0;
        rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 on the positive class; 0 when nothing is predicted positive.
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Degree of agreement of `mastery` (N × Z) with the responses in `logs`.
///
/// For concept k and every ordered pair (a, d) with `Mas[a,k] > Mas[d,k]`,
/// take the exercises on k answered by both with different outcomes; the
/// pair scores the fraction where a was correct. Pairs without such
/// exercises are skipped. A concept's value is the mean over its scored
/// pairs and the result is the mean over concepts with at least one.
pub fn doa(mastery: &Tensor, logs: &[ResponseLog], q: &QMatrix) -> Result<f64> {
    let (n, z) = (mastery.rows(), mastery.cols());
    if z != q.num_concepts() {
        return Err(Error::shape(
            "doa",
            format!("mastery has {z} concepts, Q-matrix {}", q.num_concepts()),
        ));
    }
    let m = q.num_exercises();
    // response[s][j]: None, Some(false), Some(true). Last write wins.
    let mut response = vec![vec![None; m]; n];
    for l in logs {
        if l.student >= n || l.exercise >= m {
            return Err(Error::Data(format!(
                "log ({}, {}) outside mastery/Q bounds",
                l.student, l.exercise
            )));
        }
        response[l.student][l.exercise] = Some(l.correct);
    }
    let mut by_concept: Vec<Vec<usize>> = vec![Vec::new(); z];
    for j in 0..m {
        for &k in q.concepts_of(j) {
            by_concept[k].push(j);
        }
    }
    let mut concept_values = Vec::new();
    for k in 0..z {
        let exercises = &by_concept[k];
        if exercises.is_empty() {
            continue;
        }
        // Students with at least one response on concept k.
        let active: Vec<usize> = (0..n)
            .filter(|&s| exercises.iter().any(|&j| response[s][j].is_some()))
            .collect();
        let (mut total, mut pairs) = (0.0, 0usize);
        for &a in &active {
            for &d in &active {
                if mastery.get(a, k) <= mastery.get(d, k) {
                    continue;
                }
                let (mut num, mut den) = (0usize, 0usize);
                for &j in exercises {
                    if let (Some(ra), Some(rd)) = (response[a][j], response[d][j]) {
                        if ra != rd {
                            den += 1;
                            if ra {
                                num += 1;
                            }
                        }
                    }
                }
                if den > 0 {
                    total += num as f64 / den as f64;
                    pairs += 1;
                }
            }
        }
        if pairs > 0 {
            concept_values.push(total / pairs as f64);
        }
    }
    if concept_values.is_empty() {
        return Err(Error::NotApplicable(
            "no concept has a comparable student pair".into(),
        ));
    }
    Ok(concept_values.iter().sum::<f64>() / concept_values.len() as f64)
}

/// Metrics of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    /// Absent for heads without mastery or when no pair is comparable.
    pub doa: Option<f64>,
}

impl Metrics {
    pub fn compute(scores: &[f64], labels: &[bool], doa: Option<f64>) -> Result<Self> {
        Ok(Metrics {
            acc: acc(scores, labels, THRESHOLD)?,
            auc: auc(scores, labels)?,
            f1: f1(scores, labels, THRESHOLD)?,
            doa,
        })
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Percentages with two decimals, e.g. `74.46±0.18`.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s)
}

/// Per-seed metrics and their summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<Metrics>,
}

impl MetricsReport {
    pub fn push(&mut self, seed: u64, m: Metrics) {
        self.seeds.push(seed);
        self.runs.push(m);
    }

    pub fn acc(&self) -> Vec<f64> {
        self.runs.iter().map(|m| m.acc).collect()
    }

    pub fn auc(&self) -> Vec<f64> {
        self.runs.iter().map(|m| m.auc).collect()
    }

    pub fn f1(&self) -> Vec<f64> {
        self.runs.iter().map(|m| m.f1).collect()
    }

    /// DOA over seeds, when every run has one.
    pub fn doa(&self) -> Option<Vec<f64>> {
        self.runs.iter().map(|m| m.doa).collect()
    }

    /// `acc, auc, f1, doa` cells in `mean±std` form; `-` where not applicable.
    pub fn summary_cells(&self) -> [String; 4] {
        [
            format_mean_std(&self.acc()),
            format_mean_std(&self.auc()),
            format_mean_std(&self.f1()),
            self.doa()
                .map_or_else(|| "-".to_string(), |d| format_mean_std(&d)),
        ]
    }
}
