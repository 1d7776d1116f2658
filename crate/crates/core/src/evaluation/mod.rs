//! Metrics and the robustness and hyperparameter sweeps.

mod harness;
mod metrics;

pub use harness::{
    ablation_sweep, default_label, evaluate_test, format_metric, monotone_degradation, multi_seed,
    noise_sweep, rho_sweep, run_all, run_once, run_summary, runs_tsv, select_lambda, summary_tsv,
    table_row, write_noise_curves, write_rho_curves, RunSummary, NOISE_LEVELS, RHO_GRID,
};
pub use metrics::{
    acc, auc, doa, f1, format_mean_std, mean_std, Metrics, MetricsReport, THRESHOLD,
};
