//! Command-line front end.
//!
//! Every command resolves a run config (file, then `--set` overrides, then
//! `--seed`/`--seeds`), creates its run directory, writes the manifest and
//! only then starts working.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::dataset::{write_concept_names, write_dataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_sweep, evaluate_test, monotone_degradation, multi_seed, noise_sweep, rho_sweep,
    runs_tsv, select_lambda, summary_tsv, table_row, write_noise_curves, write_rho_curves, Metrics,
    MetricsReport, RunSummary, NOISE_LEVELS, RHO_GRID,
};
use crate::semantics::write_embeddings;
use crate::training::{
    ablate, artifacts, checkpoint, load_best, pipeline, train_from, Framework, Model, RunConfig,
    TrainData, TrainState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "dllm",
    version,
    about = "Noise-robust cognitive diagnosis over response logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Model seed of single runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds of multi-seed runs and sweeps, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory; defaults to `<runs-root>/<timestamp>-<config hash>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
    /// Concurrent training runs in sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load or generate the dataset, split it and inject noise; write the result.
    PrepareData(Common),
    /// Write the student and exercise prompts, one file per entity.
    GenPrompts(Common),
    /// Embed the prompts with the configured provider and write the raw vectors.
    IngestEmbeddings(Common),
    /// Train, evaluate the best-validation model on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train every seed in `seeds` and emit a mean±std table row.
        #[arg(long)]
        all_seeds: bool,
        /// Choose λ from `loss.lambda_grid` by validation AUC on the first seed.
        #[arg(long)]
        select_lambda: bool,
    },
    /// Score a checkpoint on its test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrain at several injected-noise levels.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Frameworks to compare, e.g. `dllm,plain`.
        #[arg(long, value_delimiter = ',', default_value = "dllm")]
        frameworks: Vec<String>,
    },
    /// Retrain over a grid of ρ at several noise levels.
    SweepRho {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
    },
    /// Run every ablation combination, or only the one given by `--without`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Flags to switch off: raa, ddm-u, ddm-c, semantic.
        #[arg(long, value_delimiter = ',')]
        without: Vec<String>,
    },
}

/// Exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::PrepareData(c) => prepare_data(&c),
        Command::GenPrompts(c) => gen_prompts(&c),
        Command::IngestEmbeddings(c) => ingest_embeddings(&c),
        Command::Train {
            common,
            resume,
            all_seeds,
            select_lambda,
        } => match resume {
            Some(path) => resume_training(&common, &path),
            None if all_seeds => train_all_seeds(&common, select_lambda),
            None => train_single(&common, select_lambda),
        },
        Command::Evaluate { common, checkpoint } => evaluate(&common, &checkpoint),
        Command::NoiseSweep {
            common,
            levels,
            frameworks,
        } => noise(
            &common,
            levels.as_deref().unwrap_or(&NOISE_LEVELS),
            &frameworks,
        ),
        Command::SweepRho {
            common,
            rhos,
            levels,
        } => rho(
            &common,
            rhos.as_deref().unwrap_or(&RHO_GRID),
            levels.as_deref().unwrap_or(&NOISE_LEVELS),
        ),
        Command::Ablate { common, without } => ablation(&common, &without),
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path, &c.set)?,
        None => RunConfig::from_toml_with("", &c.set)?,
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(seeds) = &c.seeds {
        if seeds.is_empty() {
            return Err(Error::Config("--seeds needs at least one seed".into()));
        }
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Create the run directory and write its manifest.
fn start(c: &Common, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<PathBuf> {
    let dir = c
        .run_dir
        .clone()
        .unwrap_or_else(|| artifacts::new_run_dir(&c.runs_root, cfg));
    artifacts::write_manifest(&dir, command, cfg, extra)?;
    log::info!("{command}: writing to {}", dir.display());
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn prepare_data(c: &Common) -> Result<()> {
    let cfg = resolve_config(c)?;
    let dir = start(c, "prepare-data", &cfg, json!({}))?;
    let source = pipeline::load_source(&cfg)?;
    let (ds, split, noise) = pipeline::split_and_noise(&cfg, &source.dataset)?;
    write_dataset(&ds, &dir.join("logs.csv"), &dir.join("q_matrix.csv"))?;
    write_concept_names(&dir.join("concept_names.csv"), &ds, &source.concept_names)?;
    split.save(&dir.join("split.toml"))?;
    if let Some(n) = &noise {
        n.save(&dir.join("noise.toml"))?;
    }
    let summary = json!({
        "students": ds.num_students,
        "exercises": ds.num_exercises,
        "concepts": ds.num_concepts,
        "logs": ds.logs.len(),
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
        "noise_logs": noise.as_ref().map_or(0, |n| n.added_logs.len()),
    });
    write_json(&dir.join("dataset.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn gen_prompts(c: &Common) -> Result<()> {
    let cfg = resolve_config(c)?;
    let dir = start(c, "gen-prompts", &cfg, json!({}))?;
    let source = pipeline::load_source(&cfg)?;
    let (ds, split, _) = pipeline::split_and_noise(&cfg, &source.dataset)?;
    let bundle = pipeline::prompts(&source, &ds, &split)?;
    bundle.dump(&dir.join("prompts"), &ds)?;
    println!(
        "wrote {} student and {} exercise prompts to {}",
        ds.num_students,
        ds.num_exercises,
        dir.join("prompts").display()
    );
    Ok(())
}

fn ingest_embeddings(c: &Common) -> Result<()> {
    let cfg = resolve_config(c)?;
    let dir = start(c, "ingest-embeddings", &cfg, json!({}))?;
    let source = pipeline::load_source(&cfg)?;
    let (ds, split, _) = pipeline::split_and_noise(&cfg, &source.dataset)?;
    let bundle = pipeline::prompts(&source, &ds, &split)?;
    let (rs, re) = pipeline::raw_embeddings(&cfg, &ds, &bundle)?;
    write_embeddings(&dir.join("student_embeddings.tsv"), &ds.student_labels, &rs)?;
    write_embeddings(
        &dir.join("exercise_embeddings.tsv"),
        &ds.exercise_labels,
        &re,
    )?;
    println!(
        "wrote {}×{} student and {}×{} exercise vectors to {}",
        rs.rows(),
        rs.cols(),
        re.rows(),
        re.cols(),
        dir.display()
    );
    Ok(())
}

fn summary_of(
    cfg: &RunConfig,
    model: &Model,
    state: &TrainState,
    data: &TrainData,
) -> Result<RunSummary> {
    Ok(RunSummary {
        label: crate::evaluation::default_label(cfg),
        seed: cfg.seed,
        lambda: cfg.loss.lambda,
        rho: cfg.loss.rho,
        noise_level: cfg.data.noise_level,
        epochs: state.epoch,
        best_epoch: state.best.as_ref().map_or(0, |b| b.epoch),
        val_auc: state.best.as_ref().map_or(f64::NAN, |b| b.val_auc),
        test: evaluate_test(model, data)?,
    })
}

/// Train in `dir`, rewriting history and checkpoint after every epoch.
fn train_in(
    dir: &Path,
    model: &mut Model,
    state: &mut TrainState,
    data: &TrainData,
) -> Result<RunSummary> {
    let history = dir.join(artifacts::HISTORY);
    let ckpt = dir.join(artifacts::CHECKPOINT);
    train_from(model, state, data, &mut |m, s| {
        artifacts::write_history(&history, &s.history)?;
        checkpoint::save(&ckpt, m, s)
    })?;
    artifacts::write_history(&history, &state.history)?;
    checkpoint::save(&ckpt, model, state)?;
    let current = model.store.values().to_vec();
    load_best(model, state)?;
    let summary = summary_of(&model.config.clone(), model, state, data)?;
    model.store.load_values(current)?;
    write_json(&dir.join(artifacts::METRICS), &summary)?;
    Ok(summary)
}

fn print_run(s: &RunSummary) {
    println!(
        "seed {} best epoch {} val auc {:.4} test acc {:.4} auc {:.4} f1 {:.4} doa {}",
        s.seed,
        s.best_epoch,
        s.val_auc,
        s.test.acc,
        s.test.auc,
        s.test.f1,
        s.test.doa.map_or_else(|| "-".into(), |d| format!("{d:.4}"))
    );
}

fn with_selected_lambda(cfg: RunConfig, jobs: usize) -> Result<(RunConfig, serde_json::Value)> {
    let (lambda, scores) =
        select_lambda(&cfg.with_seed(cfg.seeds[0]), &cfg.loss.lambda_grid, jobs)?;
    log::info!("selected λ = {lambda} from {scores:?}");
    let mut cfg = cfg;
    cfg.loss.lambda = lambda;
    Ok((cfg, json!({ "lambda_selection": scores, "lambda": lambda })))
}

fn train_single(c: &Common, select: bool) -> Result<()> {
    let mut cfg = resolve_config(c)?;
    let mut extra = json!({});
    if select {
        (cfg, extra) = with_selected_lambda(cfg, c.jobs)?;
    }
    let dir = start(c, "train", &cfg, extra)?;
    let (_, data, _) = pipeline::prepare(&cfg)?;
    let mut model = Model::build(
        &cfg,
        &data.dataset,
        &data.split.train,
        data.semantic.clone(),
    )?;
    let mut state = TrainState::new(&model);
    let s = train_in(&dir, &mut model, &mut state, &data)?;
    print_run(&s);
    Ok(())
}

fn train_all_seeds(c: &Common, select: bool) -> Result<()> {
    let mut cfg = resolve_config(c)?;
    let mut extra = json!({});
    if select {
        (cfg, extra) = with_selected_lambda(cfg, c.jobs)?;
    }
    let dir = start(c, "train", &cfg, extra)?;
    let mut report = MetricsReport::default();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let seed_cfg = cfg.with_seed(seed);
        let sub = dir.join(format!("seed-{seed}"));
        artifacts::write_manifest(&sub, "train", &seed_cfg, json!({ "parent": dir }))?;
        let (_, data, _) = pipeline::prepare(&seed_cfg)?;
        let mut model = Model::build(
            &seed_cfg,
            &data.dataset,
            &data.split.train,
            data.semantic.clone(),
        )?;
        let mut state = TrainState::new(&model);
        let s = train_in(&sub, &mut model, &mut state, &data)?;
        print_run(&s);
        report.push(seed, s.test);
        runs.push(s);
    }
    let label = crate::evaluation::default_label(&cfg);
    let table = table_row(&label, &report);
    std::fs::write(dir.join("table.tsv"), &table)?;
    write_json(
        &dir.join(artifacts::METRICS),
        &json!({ "report": report, "runs": runs }),
    )?;
    print!("{table}");
    Ok(())
}

fn resume_training(c: &Common, path: &Path) -> Result<()> {
    let ck = checkpoint::load(path)?;
    let cfg = ck.config.clone();
    let dir = start(
        c,
        "train",
        &cfg,
        json!({ "resumed_from": path, "epoch": ck.state.epoch }),
    )?;
    let (_, data, _) = pipeline::prepare(&cfg)?;
    let (mut model, mut state) = ck.restore(&data)?;
    let s = train_in(&dir, &mut model, &mut state, &data)?;
    print_run(&s);
    Ok(())
}

fn evaluate(c: &Common, path: &Path) -> Result<()> {
    let ck = checkpoint::load(path)?;
    let cfg = ck.config.clone();
    let dir = start(c, "evaluate", &cfg, json!({ "checkpoint": path }))?;
    let (_, data, _) = pipeline::prepare(&cfg)?;
    let (mut model, _) = ck.restore(&data)?;
    model.store.load_values(ck.eval_params().to_vec())?;
    let test: Metrics = evaluate_test(&model, &data)?;
    let mut report = MetricsReport::default();
    report.push(cfg.seed, test);
    let table = table_row(&crate::evaluation::default_label(&cfg), &report);
    std::fs::write(dir.join("metrics.tsv"), &table)?;
    write_json(&dir.join(artifacts::METRICS), &test)?;
    print!("{table}");
    Ok(())
}

fn parse_framework(name: &str) -> Result<Framework> {
    match name {
        "dllm" => Ok(Framework::Dllm),
        "plain" => Ok(Framework::Plain),
        other => Err(Error::Config(format!(
            "unknown framework `{other}` (expected dllm or plain)"
        ))),
    }
}

fn write_sweep(dir: &Path, rows: &[RunSummary]) -> Result<()> {
    std::fs::write(dir.join("runs.tsv"), runs_tsv(rows))?;
    let summary = summary_tsv(rows);
    std::fs::write(dir.join("summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn noise(c: &Common, levels: &[f64], frameworks: &[String]) -> Result<()> {
    let cfg = resolve_config(c)?;
    let frameworks: Vec<Framework> = frameworks
        .iter()
        .map(|f| parse_framework(f))
        .collect::<Result<_>>()?;
    let dir = start(
        c,
        "noise-sweep",
        &cfg,
        json!({ "levels": levels, "frameworks": frameworks }),
    )?;
    let mut rows = Vec::new();
    for fw in frameworks {
        let mut fc = cfg.clone();
        fc.model.framework = fw;
        rows.extend(noise_sweep(&fc, levels, c.jobs)?);
    }
    write_sweep(&dir, &rows)?;
    let curves = write_noise_curves(&dir.join("curves"), &rows)?;
    let monotone = monotone_degradation(&rows);
    for (label, ok) in &monotone {
        println!(
            "{label}: accuracy {} with noise",
            if *ok {
                "never rises"
            } else {
                "is not monotone"
            }
        );
    }
    write_json(
        &dir.join(artifacts::METRICS),
        &json!({ "runs": rows, "curves": curves, "monotone_degradation": monotone }),
    )
}

fn rho(c: &Common, rhos: &[f64], levels: &[f64]) -> Result<()> {
    let cfg = resolve_config(c)?;
    let dir = start(
        c,
        "sweep-rho",
        &cfg,
        json!({ "rhos": rhos, "levels": levels }),
    )?;
    let rows = rho_sweep(&cfg, rhos, levels, c.jobs)?;
    write_sweep(&dir, &rows)?;
    let curves = write_rho_curves(&dir.join("curves"), &rows)?;
    write_json(
        &dir.join(artifacts::METRICS),
        &json!({ "runs": rows, "curves": curves }),
    )
}

fn ablation(c: &Common, without: &[String]) -> Result<()> {
    let cfg = resolve_config(c)?;
    let dir = start(c, "ablate", &cfg, json!({ "without": without }))?;
    let rows = if without.is_empty() {
        ablation_sweep(&cfg, c.jobs)?
    } else {
        let flags: Vec<&str> = without.iter().map(String::as_str).collect();
        let ablated = ablate(&cfg, &flags)?;
        let (_, mut rows) = multi_seed(&ablated, c.jobs)?;
        for r in &mut rows {
            r.label = ablated.ablation.label();
        }
        rows
    };
    write_sweep(&dir, &rows)?;
    write_json(&dir.join(artifacts::METRICS), &json!({ "runs": rows }))
}
