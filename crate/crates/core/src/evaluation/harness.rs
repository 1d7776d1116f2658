//! Multi-seed runs, λ selection and the noise, ρ and ablation sweeps.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::metrics::{doa, format_mean_std, mean_std, Metrics, MetricsReport};
use crate::error::{Error, Result};
use crate::training::{pipeline, train, Ablation, Model, RunConfig, TrainData, TrainOutcome};

/// One finished run, as written to sweep tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Series name: framework and head, or an ablation label.
    pub label: String,
    pub seed: u64,
    pub lambda: f64,
    pub rho: f64,
    pub noise_level: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_auc: f64,
    pub test: Metrics,
}

/// Test-split metrics, with DOA for heads that expose mastery.
pub fn evaluate_test(model: &Model, data: &TrainData) -> Result<Metrics> {
    let logs = data.test_logs();
    let scores = model.predict(&logs)?;
    let labels: Vec<bool> = logs.iter().map(|l| l.correct).collect();
    let doa = if model.ids.head.kind.supports_mastery() {
        match doa(&model.mastery()?, &logs, &data.dataset.q_matrix) {
            Ok(v) => Some(v),
            Err(Error::NotApplicable(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Metrics::compute(&scores, &labels, doa)
}

pub fn default_label(cfg: &RunConfig) -> String {
    let fw = match cfg.model.framework {
        crate::training::Framework::Dllm => "dllm",
        crate::training::Framework::Plain => "plain",
    };
    format!("{fw}-{}", cfg.model.head)
}

/// Prepare data for `cfg`, train, and score the best-validation model on test.
pub fn run_once(cfg: &RunConfig) -> Result<(TrainOutcome, TrainData, RunSummary)> {
    let (_, data, _) = pipeline::prepare(cfg)?;
    let outcome = train(cfg, &data)?;
    let test = evaluate_test(&outcome.model, &data)?;
    let summary = RunSummary {
        label: default_label(cfg),
        seed: cfg.seed,
        lambda: cfg.loss.lambda,
        rho: cfg.loss.rho,
        noise_level: cfg.data.noise_level,
        epochs: outcome.state.epoch,
        best_epoch: outcome.best_epoch(),
        val_auc: outcome.best_val_auc(),
        test,
    };
    Ok((outcome, data, summary))
}

pub fn run_summary(cfg: &RunConfig) -> Result<RunSummary> {
    run_once(cfg).map(|(_, _, s)| s)
}

/// Train once per λ on `cfg.seed` and keep the best validation AUC; earlier
/// grid entries win ties. Returns the choice and every `(λ, val AUC)`.
pub fn select_lambda(cfg: &RunConfig, grid: &[f64], jobs: usize) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty λ grid".into()));
    }
    let configs: Vec<RunConfig> = grid
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.loss.lambda = l;
            c
        })
        .collect();
    let scores: Vec<(f64, f64)> = run_all(&configs, jobs)?
        .into_iter()
        .map(|s| (s.lambda, s.val_auc))
        .collect();
    let best = scores
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(l, a)| match acc {
            Some((_, ba)) if ba >= a => acc,
            _ => Some((l, a)),
        })
        .expect("non-empty grid");
    Ok((best.0, scores))
}

/// One run per seed in `cfg.seeds`.
pub fn multi_seed(cfg: &RunConfig, jobs: usize) -> Result<(MetricsReport, Vec<RunSummary>)> {
    let configs: Vec<RunConfig> = cfg.seeds.iter().map(|&s| cfg.with_seed(s)).collect();
    let runs = run_all(&configs, jobs)?;
    let mut report = MetricsReport::default();
    for r in &runs {
        report.push(r.seed, r.test);
    }
    Ok((report, runs))
}

/// Run every config, at most `jobs` at a time, keeping input order.
pub fn run_all(configs: &[RunConfig], jobs: usize) -> Result<Vec<RunSummary>> {
    parallel_map(configs, jobs, run_summary)
}

fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

pub const NOISE_LEVELS: [f64; 4] = [0.0, 0.05, 0.10, 0.15];
pub const RHO_GRID: [f64; 4] = [0.05, 0.1, 0.2, 0.4];

/// Retrain at each noise level for every seed. Rows are level-major.
pub fn noise_sweep(cfg: &RunConfig, levels: &[f64], jobs: usize) -> Result<Vec<RunSummary>> {
    let mut configs = Vec::new();
    for &level in levels {
        for &seed in &cfg.seeds {
            let mut c = cfg.with_seed(seed);
            c.data.noise_level = level;
            configs.push(c);
        }
    }
    run_all(&configs, jobs)
}

/// Retrain for each ρ at each noise level for every seed.
pub fn rho_sweep(
    cfg: &RunConfig,
    rhos: &[f64],
    levels: &[f64],
    jobs: usize,
) -> Result<Vec<RunSummary>> {
    let mut configs = Vec::new();
    for &rho in rhos {
        for &level in levels {
            for &seed in &cfg.seeds {
                let mut c = cfg.with_seed(seed);
                c.loss.rho = rho;
                c.data.noise_level = level;
                configs.push(c);
            }
        }
    }
    run_all(&configs, jobs)
}

/// Every on/off combination of the ablation flags, for every seed. The
/// semantic flag is held at its configured value.
pub fn ablation_sweep(cfg: &RunConfig, jobs: usize) -> Result<Vec<RunSummary>> {
    let mut configs = Vec::new();
    let mut labels = Vec::new();
    for abl in Ablation::grid(cfg.ablation.semantic) {
        for &seed in &cfg.seeds {
            let mut c = cfg.with_seed(seed);
            c.ablation = abl;
            labels.push(abl.label());
            configs.push(c);
        }
    }
    let mut rows = run_all(&configs, jobs)?;
    for (r, l) in rows.iter_mut().zip(labels) {
        r.label = l;
    }
    Ok(rows)
}

const RUN_HEADER: &str =
    "label\tseed\tlambda\trho\tnoise_level\tepochs\tbest_epoch\tval_auc\tacc\tauc\tf1\tdoa";

/// One line per run.
pub fn runs_tsv(rows: &[RunSummary]) -> String {
    let mut out = format!("{RUN_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            r.label,
            r.seed,
            r.lambda,
            r.rho,
            r.noise_level,
            r.epochs,
            r.best_epoch,
            r.val_auc,
            r.test.acc,
            r.test.auc,
            r.test.f1,
            r.test
                .doa
                .map_or_else(|| "-".to_string(), |d| format!("{d:.6}")),
        ));
    }
    out
}

type GroupKey = (String, u64, u64);

fn key(r: &RunSummary) -> GroupKey {
    (r.label.clone(), r.rho.to_bits(), r.noise_level.to_bits())
}

fn groups(rows: &[RunSummary]) -> Vec<(GroupKey, MetricsReport)> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut by: BTreeMap<GroupKey, MetricsReport> = BTreeMap::new();
    for r in rows {
        let k = key(r);
        if !by.contains_key(&k) {
            order.push(k.clone());
        }
        by.entry(k).or_default().push(r.seed, r.test);
    }
    order
        .into_iter()
        .map(|k| {
            let rep = by.remove(&k).expect("grouped");
            (k, rep)
        })
        .collect()
}

/// `mean±std` per (label, ρ, noise level), in first-seen order.
pub fn summary_tsv(rows: &[RunSummary]) -> String {
    let mut out = String::from("label\trho\tnoise_level\tseeds\tACC\tAUC\tF1\tDOA\n");
    for ((label, rho, level), rep) in groups(rows) {
        let [acc, auc, f1, doa] = rep.summary_cells();
        out.push_str(&format!(
            "{label}\t{}\t{}\t{}\t{acc}\t{auc}\t{f1}\t{doa}\n",
            f64::from_bits(rho),
            f64::from_bits(level),
            rep.seeds.len()
        ));
    }
    out
}

/// A single-row table in the layout of a published results row.
pub fn table_row(label: &str, report: &MetricsReport) -> String {
    let [acc, auc, f1, doa] = report.summary_cells();
    format!("model\tACC\tAUC\tF1\tDOA\n{label}\t{acc}\t{auc}\t{f1}\t{doa}\n")
}

/// Mean ACC against `x` for one series: `x\tacc_mean\tacc_std` lines.
fn curve(points: &[(f64, Vec<f64>)]) -> String {
    let mut out = String::from("x\tacc_mean\tacc_std\n");
    for (x, accs) in points {
        let (m, s) = mean_std(accs);
        out.push_str(&format!("{x}\t{m:.6}\t{s:.6}\n"));
    }
    out
}

/// ACC against noise level, one file per label.
pub fn write_noise_curves(dir: &Path, rows: &[RunSummary]) -> Result<Vec<String>> {
    let mut series: BTreeMap<String, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    for ((label, _, level), rep) in groups(rows) {
        series
            .entry(label)
            .or_default()
            .push((f64::from_bits(level), rep.acc()));
    }
    write_series(dir, "acc_vs_noise", series)
}

/// ACC against ρ, one file per noise level.
pub fn write_rho_curves(dir: &Path, rows: &[RunSummary]) -> Result<Vec<String>> {
    let mut series: BTreeMap<String, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    for ((_, rho, level), rep) in groups(rows) {
        series
            .entry(format!("noise{}", f64::from_bits(level)))
            .or_default()
            .push((f64::from_bits(rho), rep.acc()));
    }
    write_series(dir, "acc_vs_rho", series)
}

fn write_series(
    dir: &Path,
    prefix: &str,
    series: BTreeMap<String, Vec<(f64, Vec<f64>)>>,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (name, mut points) in series {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let file = format!("{prefix}_{name}.tsv");
        std::fs::write(dir.join(&file), curve(&points))?;
        names.push(file);
    }
    Ok(names)
}

/// Whether mean ACC never increases with the noise level, per label.
/// Reported alongside sweeps; not a hard requirement.
pub fn monotone_degradation(rows: &[RunSummary]) -> BTreeMap<String, bool> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((label, _, level), rep) in groups(rows) {
        series
            .entry(label)
            .or_default()
            .push((f64::from_bits(level), mean_std(&rep.acc()).0));
    }
    series
        .into_iter()
        .map(|(label, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let ok = pts.windows(2).all(|w| w[1].1 <= w[0].1);
            (label, ok)
        })
        .collect()
}

/// `mean±std` string of one metric across rows.
pub fn format_metric(rows: &[RunSummary], f: impl Fn(&Metrics) -> f64) -> String {
    format_mean_std(&rows.iter().map(|r| f(&r.test)).collect::<Vec<_>>())
}
