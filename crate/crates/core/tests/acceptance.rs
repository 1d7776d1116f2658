//! Acceptance suite. Each test checks one criterion and prints a single
//! `criterion N: PASS|FAIL|SKIP` line. Tests hold a shared lock so runtimes
//! are measured without competing for the CPU.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use dllm_core::alignment::{fuse, info_nce, Activation, AlignmentConfig};
use dllm_core::cdm::{bce_logits, transform, BceMode, Head, HeadKind};
use dllm_core::dataset::synthetic::SyntheticConfig;
use dllm_core::dataset::{inject_noise, split, NoiseMode, QMatrix, ResponseDataset, ResponseLog};
use dllm_core::diffusion::{
    cond_loss, refine, register_denoiser, register_film, uncond_loss, ConditionalDenoiser,
    Denoiser, DenoiserIds, DiffusionSchedule, FilmIds, NoisePredictor, ScheduleConfig,
};
use dllm_core::evaluation::{
    auc, doa, mean_std, multi_seed, select_lambda, table_row, MetricsReport,
};
use dllm_core::graphs::{lightgcn, lightgcn_values, sym_normalize};
use dllm_core::numerics::gradcheck::{check_gradients, GradCheckReport};
use dllm_core::numerics::{
    rng, AdamConfig, AdamState, Binding, ParamStore, SparseMatrix, Tape, Tensor,
};
use dllm_core::training::{
    artifacts, epoch_step, pipeline, train, Ablation, Framework, Model, RunConfig, TrainData,
    TrainState,
};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the stderr handle directly so the line survives test output capture.
fn line(text: &str) {
    let _ = writeln!(std::io::stderr(), "{text}");
}

/// Print the criterion line and fail the test when `pass` is false.
fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    line(&format!(
        "criterion {id}: {verdict} | {name} | {detail} | {:.1}s",
        elapsed.as_secs_f64()
    ));
    assert!(pass, "criterion {id} failed: {detail}");
}

fn normal(rows: usize, cols: usize, seed: u64, label: &str) -> Tensor {
    let mut g = rng::stream(seed, label, 0);
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut g))
            .collect(),
    )
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- criterion 1

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Enumerate every concept, ordered student pair and exercise straight from
/// the log list.
fn brute_doa(mastery: &[Vec<f64>], logs: &[ResponseLog], q: &[Vec<bool>]) -> Option<f64> {
    let (n, z, m) = (mastery.len(), q[0].len(), q.len());
    let answer = |s: usize, j: usize| {
        logs.iter()
            .find(|l| l.student == s && l.exercise == j)
            .map(|l| l.correct)
    };
    let mut per_concept = Vec::new();
    for k in 0..z {
        let (mut total, mut count) = (0.0, 0usize);
        for a in 0..n {
            for d in 0..n {
                if mastery[a][k] <= mastery[d][k] {
                    continue;
                }
                let (mut num, mut den) = (0usize, 0usize);
                for j in (0..m).filter(|&j| q[j][k]) {
                    if let (Some(ra), Some(rd)) = (answer(a, j), answer(d, j)) {
                        if ra != rd {
                            den += 1;
                            num += ra as usize;
                        }
                    }
                }
                if den > 0 {
                    total += num as f64 / den as f64;
                    count += 1;
                }
            }
        }
        if count > 0 {
            per_concept.push(total / count as f64);
        }
    }
    (!per_concept.is_empty()).then(|| per_concept.iter().sum::<f64>() / per_concept.len() as f64)
}

fn dense_lightgcn(adj: &[Vec<f64>], h0: &Tensor, layers: usize) -> Tensor {
    let n = adj.len();
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let mut a_hat = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if adj[i][j] != 0.0 {
                a_hat.set(i, j, adj[i][j] / (deg[i].sqrt() * deg[j].sqrt()));
            }
        }
    }
    let mut h = h0.clone();
    let mut sum = h0.clone();
    for _ in 0..layers {
        h = a_hat.matmul(&h).unwrap();
        sum = sum.zip_map(&h, |a, b| a + b).unwrap();
    }
    sum.map(|x| x / (layers + 1) as f64)
}

#[test]
fn criterion_1_oracle_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let mut g = rng::stream(1, "acceptance-oracles", 0);

    let mut auc_err: f64 = 0.0;
    for inst in 0..50 {
        let labels: Vec<bool> = (0..200).map(|_| g.random::<bool>()).collect();
        // Coarse scores on half the instances force ties.
        let scores: Vec<f64> = (0..200)
            .map(|_| {
                let s: f64 = g.random();
                if inst % 2 == 0 {
                    (s * 10.0).floor() / 10.0
                } else {
                    s
                }
            })
            .collect();
        auc_err = auc_err.max((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs());
    }

    let mut doa_mismatch = 0;
    let mut doa_checked = 0;
    for _ in 0..40 {
        let (n, m, z) = (
            g.random_range(2..=15),
            g.random_range(1..=10),
            g.random_range(1..=3),
        );
        let q_bool: Vec<Vec<bool>> = (0..m)
            .map(|_| {
                let mut row: Vec<bool> = (0..z).map(|_| g.random_bool(0.4)).collect();
                row[g.random_range(0..z)] = true;
                row
            })
            .collect();
        let q = QMatrix::new(
            z,
            q_bool
                .iter()
                .map(|r| (0..z).filter(|&k| r[k]).collect())
                .collect(),
        )
        .unwrap();
        let mut logs = Vec::new();
        for s in 0..n {
            for j in 0..m {
                if g.random_bool(0.6) {
                    logs.push(ResponseLog {
                        student: s,
                        exercise: j,
                        correct: g.random(),
                    });
                }
            }
        }
        logs.shuffle(&mut g);
        // Mastery on a coarse grid so equal values occur.
        let mastery: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..z).map(|_| g.random_range(0..5) as f64 / 4.0).collect())
            .collect();
        let m_t = Tensor::from_rows(&mastery).unwrap();
        let got = doa(&m_t, &logs, &q).ok();
        doa_checked += 1;
        if got != brute_doa(&mastery, &logs, &q_bool) {
            doa_mismatch += 1;
        }
    }

    let mut gcn_err: f64 = 0.0;
    for _ in 0..20 {
        let n = g.random_range(2..=30);
        let mut adj = vec![vec![0.0; n]; n];
        let mut entries = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if g.random_bool(0.2) {
                    let w = if g.random_bool(0.5) {
                        1.0
                    } else {
                        g.random_range(0.5..2.0)
                    };
                    adj[i][j] = w;
                    adj[j][i] = w;
                    entries.push((i, j, w));
                    entries.push((j, i, w));
                }
            }
        }
        let a_hat = sym_normalize(&SparseMatrix::new(n, n, entries).unwrap());
        let h0 = normal(n, 4, g.random(), "gcn-h0");
        for layers in 0..=3 {
            let want = dense_lightgcn(&adj, &h0, layers);
            let got = lightgcn_values(&a_hat, &h0, layers).unwrap();
            let mut tape = Tape::new();
            let h = tape.constant(h0.clone());
            let on_tape = lightgcn(&mut tape, &Arc::new(a_hat.clone()), h, layers).unwrap();
            for (x, y) in got
                .data()
                .iter()
                .chain(tape.value(on_tape).data())
                .zip(want.data().iter().cycle())
            {
                gcn_err = gcn_err.max((x - y).abs());
            }
        }
    }

    let elapsed = start.elapsed();
    let pass = auc_err <= 1e-12
        && doa_mismatch == 0
        && gcn_err <= 1e-10
        && elapsed < Duration::from_secs(5);
    report(
        1,
        "oracle equivalence",
        pass,
        &format!(
            "auc max err {auc_err:.1e} (50×200 pts); doa {}/{doa_checked} exact; lightgcn max err {gcn_err:.1e}",
            doa_checked - doa_mismatch
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------- criterion 2

const GC_TOL: f64 = 1e-7;

fn random_q(b: usize, z: usize, seed: u64) -> Tensor {
    let mut g = rng::stream(seed, "acceptance-q", 0);
    let mut q = Tensor::zeros(&[b, z]);
    for r in 0..b {
        q.set(r, g.random_range(0..z), 1.0);
        if g.random::<bool>() {
            q.set(r, g.random_range(0..z), 1.0);
        }
    }
    q
}

fn diffusion_store(d: usize, seed: u64) -> (ParamStore, DenoiserIds, FilmIds) {
    let mut store = ParamStore::new();
    let ids = register_denoiser(&mut store, "u", d, seed).unwrap();
    let film = register_film(&mut store, "c", d, seed).unwrap();
    (store, ids, film)
}

#[test]
fn criterion_2_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut checks: Vec<(String, GradCheckReport)> = Vec::new();

    let cfg = AlignmentConfig::default();
    checks.push((
        "infonce".into(),
        check_gradients(
            &[normal(4, 3, 1, "a"), normal(4, 3, 2, "p")],
            |t, v| info_nce(t, v[0], v[1], &cfg),
            1e-5,
        )
        .unwrap(),
    ));

    for act in [Activation::Linear, Activation::Relu] {
        checks.push((
            format!("fusion-{act:?}"),
            check_gradients(
                &[
                    normal(3, 2, 3, "c"),
                    normal(3, 2, 4, "i"),
                    normal(4, 2, 5, "w"),
                    normal(1, 2, 6, "b"),
                ],
                |t, v| {
                    let f = fuse(t, v[0], v[1], &[(v[2], v[3])], act)?;
                    let sq = t.mul(f, f)?;
                    Ok(t.sum(sq))
                },
                1e-5,
            )
            .unwrap(),
        ));
    }

    for kind in HeadKind::ALL {
        let (dim, hidden) = if kind.is_latent() {
            (3, (1, 1))
        } else {
            (3, (3, 2))
        };
        let mut store = ParamStore::new();
        let head = Head::register(&mut store, kind, dim, 3, hidden, 7).unwrap();
        // Shift parameters off the clamp boundary at zero.
        let mut inputs: Vec<Tensor> = store
            .values()
            .iter()
            .map(|v| {
                let mut v = v.clone();
                for (i, x) in v.data_mut().iter_mut().enumerate() {
                    *x += 0.05 * (i as f64 + 1.0);
                }
                v
            })
            .collect();
        let n_params = inputs.len();
        inputs.push(normal(5, dim, 8, "hs"));
        inputs.push(normal(5, dim, 9, "he"));
        let q = random_q(5, 3, 10);
        let labels = Tensor::matrix(5, 1, vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        for mode in [BceMode::Sum, BceMode::Mean] {
            checks.push((
                format!("bce-{kind}-{mode:?}"),
                check_gradients(
                    &inputs,
                    |t, v| {
                        let b = Binding::from_vars(v[..n_params].to_vec());
                        let qv = t.constant(q.clone());
                        let z = head.logits(t, &b, v[n_params], v[n_params + 1], qv)?;
                        bce_logits(t, z, &labels, mode)
                    },
                    1e-4,
                )
                .unwrap(),
            ));
        }
    }

    let sched = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
    let (store, ids, film) = diffusion_store(1, 11);
    let x0 = normal(6, 1, 12, "x0");
    let c = normal(6, 1, 13, "cond");
    let denoiser: Vec<Tensor> = ids.ids().iter().map(|&i| store.get(i).clone()).collect();
    checks.push((
        "diffusion-uncond".into(),
        check_gradients(
            &denoiser,
            |t, v| {
                let net = ids.vars(&Binding::from_vars(v.to_vec()));
                uncond_loss(t, &net, &x0, &sched, &mut rng::stream(1, "gc", 0))
            },
            1e-5,
        )
        .unwrap(),
    ));
    let all: Vec<Tensor> = store.values().to_vec();
    checks.push((
        "diffusion-cond".into(),
        check_gradients(
            &all,
            |t, v| {
                let b = Binding::from_vars(v.to_vec());
                cond_loss(
                    t,
                    &ids.vars(&b),
                    &film.vars(&b),
                    &x0,
                    &c,
                    &sched,
                    &mut rng::stream(1, "gc", 0),
                )
            },
            1e-5,
        )
        .unwrap(),
    ));

    checks.push((
        "transform".into(),
        check_gradients(
            &[
                normal(4, 3, 14, "h"),
                normal(3, 2, 15, "w"),
                normal(4, 1, 16, "b"),
            ],
            |t, v| {
                let o = transform(t, v[0], v[1], v[2])?;
                let sq = t.mul(o, o)?;
                Ok(t.sum(sq))
            },
            1e-5,
        )
        .unwrap(),
    ));

    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .max_by(|a, b| a.1.max_relative_error.total_cmp(&b.1.max_relative_error))
        .unwrap();
    let max_params = checks.iter().map(|c| c.1.parameter_count).max().unwrap();
    let failing: Vec<&str> = checks
        .iter()
        .filter(|c| !(c.1.max_relative_error < GC_TOL))
        .map(|c| c.0.as_str())
        .collect();
    let pass = failing.is_empty() && max_params <= 64 && elapsed < Duration::from_secs(30);
    report(
        2,
        "gradient suite",
        pass,
        &format!(
            "{} checks, worst {} at {:.1e}, largest net {max_params} params, failing {failing:?}",
            checks.len(),
            worst.0,
            worst.1.max_relative_error
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_diffusion_properties() {
    let _g = serial();
    let start = Instant::now();

    let mut monotone = true;
    for (steps, b0, b1) in [
        (50, 1e-4, 0.02),
        (1000, 1e-4, 0.02),
        (10, 1e-3, 0.2),
        (7, 0.05, 0.05),
    ] {
        let s = DiffusionSchedule::new(&ScheduleConfig {
            steps,
            beta_start: b0,
            beta_end: b1,
        })
        .unwrap();
        monotone &=
            (1..=steps).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
    }

    // Zero FiLM weights: conditional and unconditional losses, predictions and
    // refinements agree bit for bit on the same stream.
    let sched = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
    let (mut store, ids, film) = diffusion_store(4, 21);
    for id in film.ids() {
        *store.get_mut(id) = Tensor::zeros(&[4, 4]);
    }
    let x0 = normal(16, 4, 22, "x0");
    let c = normal(16, 4, 23, "c");
    let mut t1 = Tape::new();
    let b1 = store.bind(&mut t1);
    let lu = uncond_loss(
        &mut t1,
        &ids.vars(&b1),
        &x0,
        &sched,
        &mut rng::stream(9, "film", 0),
    )
    .unwrap();
    let mut t2 = Tape::new();
    let b2 = store.bind(&mut t2);
    let lc = cond_loss(
        &mut t2,
        &ids.vars(&b2),
        &film.vars(&b2),
        &x0,
        &c,
        &sched,
        &mut rng::stream(9, "film", 0),
    )
    .unwrap();
    let loss_equal =
        t1.value(lu).item().unwrap().to_bits() == t2.value(lc).item().unwrap().to_bits();
    let u = Denoiser { store: &store, ids };
    let cd = ConditionalDenoiser {
        base: Denoiser { store: &store, ids },
        film,
        condition: &c,
    };
    let pred_equal = (1..=50).all(|t| u.predict(&x0, t).unwrap() == cd.predict(&x0, t).unwrap());
    let ru = refine(
        &x0,
        Some(&u),
        Some(&u),
        &sched,
        5,
        &mut rng::stream(9, "film-refine", 0),
    )
    .unwrap();
    let rc = refine(
        &x0,
        Some(&u),
        Some(&cd),
        &sched,
        5,
        &mut rng::stream(9, "film-refine", 0),
    )
    .unwrap();
    let film_zero = loss_equal && pred_equal && ru == rc;

    // Denoising benchmark: clean rows on a 2-d subspace of R^16.
    let basis = normal(2, 16, 31, "basis").map(|v| v / 2f64.sqrt());
    let clean = normal(100, 2, 32, "coef").matmul(&basis).unwrap();
    let noisy = clean
        .zip_map(&normal(100, 16, 33, "noise"), |x, e| x + 0.3 * e)
        .unwrap();
    let (mut store, ids, film) = diffusion_store(16, 34);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: 0.01,
            ..Default::default()
        },
        &store,
    );
    for step in 0..2000u64 {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let l_u = uncond_loss(
            &mut t,
            &ids.vars(&b),
            &clean,
            &sched,
            &mut rng::stream(35, "u", step),
        )
        .unwrap();
        let l_c = cond_loss(
            &mut t,
            &ids.vars(&b),
            &film.vars(&b),
            &clean,
            &noisy,
            &sched,
            &mut rng::stream(35, "c", step),
        )
        .unwrap();
        let l = t.add(l_u, l_c).unwrap();
        let g = t.backward(l).unwrap();
        adam.step(&mut store, &b.collect(&t, &g)).unwrap();
    }
    let u = Denoiser { store: &store, ids };
    let cd = ConditionalDenoiser {
        base: Denoiser { store: &store, ids },
        film,
        condition: &noisy,
    };
    let t_star = RunConfig::default().diffusion.t_star;
    let refined = refine(
        &noisy,
        Some(&u),
        Some(&cd),
        &sched,
        t_star,
        &mut rng::stream(36, "refine", 0),
    )
    .unwrap();
    let (before, after) = (mse(&noisy, &clean), mse(&refined, &clean));
    let reduction = 1.0 - after / before;

    let elapsed = start.elapsed();
    let pass = monotone && film_zero && reduction >= 0.30 && elapsed < Duration::from_secs(120);
    report(
        3,
        "diffusion properties",
        pass,
        &format!(
            "alpha_bar monotone {monotone}; film-zero bit-identical {film_zero}; \
             denoising mse {before:.4} -> {after:.4} ({:.1}% reduction, t_star {t_star})",
            100.0 * reduction
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------- criterion 4

fn small_config(head: HeadKind) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic = Some(SyntheticConfig {
        students: 40,
        exercises: 30,
        concepts: 4,
        min_responses: 8,
        max_responses: 25,
        ..SyntheticConfig::default()
    });
    cfg.model.head = head;
    if head.is_latent() {
        cfg.model.dim = Some(8);
    }
    cfg.model.hidden = [8, 6];
    cfg.train.batch_size = 128;
    cfg.train.max_epochs = 6;
    cfg.train.patience = 3;
    cfg.semantics.mock_dim = 48;
    cfg
}

fn prepared(cfg: &RunConfig) -> TrainData {
    pipeline::prepare(cfg).unwrap().1
}

/// Largest parameter change of `term` over three epochs.
fn term_delta(cfg: &RunConfig, term: &str) -> f64 {
    let data = prepared(cfg);
    let mut model =
        Model::build(cfg, &data.dataset, &data.split.train, data.semantic.clone()).unwrap();
    let ids = model.term_params(term);
    let before: Vec<Tensor> = ids.iter().map(|&i| model.store.get(i).clone()).collect();
    let mut state = TrainState::new(&model);
    let logs = data.train_logs();
    for _ in 0..3 {
        epoch_step(&mut model, &mut state, &logs).unwrap();
    }
    ids.iter()
        .zip(&before)
        .map(|(&i, b)| {
            model
                .store
                .get(i)
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Parameters after three epochs with the given semantic rows.
fn trained_with_semantics(cfg: &RunConfig, data: &TrainData, semantic: Tensor) -> Vec<Tensor> {
    let mut model = Model::build(cfg, &data.dataset, &data.split.train, Some(semantic)).unwrap();
    let mut state = TrainState::new(&model);
    let logs = data.train_logs();
    for _ in 0..3 {
        epoch_step(&mut model, &mut state, &logs).unwrap();
    }
    model.store.values().to_vec()
}

#[test]
fn criterion_4_reductions() {
    let _g = serial();
    let start = Instant::now();
    let mut notes = Vec::new();

    // λ = 0 against the backbone with every regulariser switched off.
    let mut lambda_zero = true;
    for head in [HeadKind::Ncdm, HeadKind::Irt, HeadKind::Cdmfkc] {
        let mut with = small_config(head);
        with.loss.lambda = 0.0;
        let mut backbone = with.clone();
        backbone.ablation = Ablation::all_off();
        let a = train(&with, &prepared(&with)).unwrap();
        let data = prepared(&backbone);
        let b = train(&backbone, &data).unwrap();
        let logs = data.test_logs();
        lambda_zero &= a.state.history == b.state.history
            && a.model.store.values() == b.model.store.values()
            && a.model.predict(&logs).unwrap() == b.model.predict(&logs).unwrap();
    }
    notes.push(format!("lambda=0 bit-identical {lambda_zero}"));

    // ρ = 0: the unconditional term neither moves its parameters nor enters the total.
    let base = small_config(HeadKind::Ncdm);
    let mut rho0 = base.clone();
    rho0.loss.rho = 0.0;
    let out = train(&rho0, &prepared(&rho0)).unwrap();
    let lambda = rho0.loss.lambda;
    let total_ok =
        out.state.history.iter().all(|r| {
            (r.total - (r.bce + lambda * (r.relation + r.semantic + r.cond))).abs() < 1e-12
        });
    let rho_zero =
        total_ok && term_delta(&rho0, "uncond") == 0.0 && term_delta(&base, "uncond") > 0.0;
    notes.push(format!("rho=0 removes uncond {rho_zero}"));

    // t_star = 0 returns the input untouched.
    let sched = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
    let (store, ids, film) = diffusion_store(4, 41);
    let x = normal(10, 4, 42, "x");
    let u = Denoiser { store: &store, ids };
    let cd = ConditionalDenoiser {
        base: Denoiser { store: &store, ids },
        film,
        condition: &x,
    };
    let t_zero = refine(
        &x,
        Some(&u),
        Some(&cd),
        &sched,
        0,
        &mut rng::stream(0, "t0", 0),
    )
    .unwrap()
        == x;
    notes.push(format!("t_star=0 identity {t_zero}"));

    // Ablation flags.
    let mut no_u = base.clone();
    no_u.ablation.ddm_u = false;
    let mut no_c = base.clone();
    no_c.ablation.ddm_c = false;
    let ddm = term_delta(&no_u, "uncond") == 0.0
        && term_delta(&no_u, "cond") > 0.0
        && term_delta(&no_c, "cond") == 0.0
        && term_delta(&no_c, "uncond") > 0.0
        && term_delta(&base, "cond") > 0.0;

    let data = prepared(&base);
    let d = data.semantic.as_ref().unwrap().cols();
    let rows = data.dataset.num_students + data.dataset.num_exercises;
    let (s1, s2) = (normal(rows, d, 43, "sem"), normal(rows, d, 44, "sem"));
    let mut no_sem = base.clone();
    no_sem.ablation.semantic = false;
    let semantic = trained_with_semantics(&no_sem, &data, s1.clone())
        == trained_with_semantics(&no_sem, &data, s2.clone())
        && trained_with_semantics(&base, &data, s1) != trained_with_semantics(&base, &data, s2);

    let mut no_raa = base.clone();
    no_raa.ablation.raa = false;
    let graphs = |cfg: &RunConfig| {
        let m = Model::build(cfg, &data.dataset, &data.split.train, data.semantic.clone()).unwrap();
        let g = m.graphs().unwrap();
        (g[0] == g[2], g[1] == g[3])
    };
    let raa = graphs(&no_raa) == (true, true) && graphs(&base) == (false, false);
    notes.push(format!(
        "flags ddm_u/ddm_c {ddm}, semantic {semantic}, raa {raa}"
    ));

    let pass = lambda_zero && rho_zero && t_zero && ddm && semantic && raa;
    report(
        4,
        "equation reductions",
        pass,
        &notes.join("; "),
        start.elapsed(),
    );
}

// ---------------------------------------------------------------- criterion 5

fn benchmark_config(head: HeadKind, framework: Framework) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic = Some(SyntheticConfig::default());
    cfg.model.head = head;
    cfg.model.framework = framework;
    cfg
}

/// Mean test AUC of the selected-λ DLLM model and of the plain backbone,
/// plus the per-seed reports.
fn paired_auc(head: HeadKind) -> (RunConfig, MetricsReport, MetricsReport) {
    let mut dllm = benchmark_config(head, Framework::Dllm);
    let (lambda, _) = select_lambda(
        &dllm.with_seed(dllm.seeds[0]),
        &dllm.loss.lambda_grid.clone(),
        1,
    )
    .unwrap();
    dllm.loss.lambda = lambda;
    let (d, _) = multi_seed(&dllm, 1).unwrap();
    let (p, _) = multi_seed(&benchmark_config(head, Framework::Plain), 1).unwrap();
    (dllm, d, p)
}

fn acc_drop(clean: &MetricsReport, noisy: &MetricsReport) -> f64 {
    mean(
        &clean
            .acc()
            .iter()
            .zip(noisy.acc())
            .map(|(c, n)| c - n)
            .collect::<Vec<_>>(),
    )
}

#[test]
fn criterion_5_synthetic_end_to_end() {
    let _g = serial();
    let start = Instant::now();

    let (irt_cfg, irt_d, irt_p) = paired_auc(HeadKind::Irt);
    let (ncdm_cfg, ncdm_d, ncdm_p) = paired_auc(HeadKind::Ncdm);

    let mut dllm_noisy = ncdm_cfg.clone();
    dllm_noisy.data.noise_level = 0.15;
    let mut plain_noisy = benchmark_config(HeadKind::Ncdm, Framework::Plain);
    plain_noisy.data.noise_level = 0.15;
    let (dn, _) = multi_seed(&dllm_noisy, 1).unwrap();
    let (pn, _) = multi_seed(&plain_noisy, 1).unwrap();
    let (drop_d, drop_p) = (acc_drop(&ncdm_d, &dn), acc_drop(&ncdm_p, &pn));

    let irt_ok = mean(&irt_d.auc()) >= mean(&irt_p.auc());
    let ncdm_ok = mean(&ncdm_d.auc()) >= mean(&ncdm_p.auc());
    let noise_ok = drop_d <= drop_p;
    let elapsed = start.elapsed();
    let pass = irt_ok && ncdm_ok && noise_ok && elapsed < Duration::from_secs(15 * 60);
    report(
        5,
        "synthetic end-to-end",
        pass,
        &format!(
            "IRT auc dllm {:.4} vs plain {:.4} (lambda {}) {}; NCDM auc dllm {:.4} vs plain {:.4} (lambda {}) {}; \
             NCDM acc drop at 15% noise dllm {drop_d:.4} vs plain {drop_p:.4} {}",
            mean(&irt_d.auc()),
            mean(&irt_p.auc()),
            irt_cfg.loss.lambda,
            if irt_ok { "ok" } else { "short" },
            mean(&ncdm_d.auc()),
            mean(&ncdm_p.auc()),
            ncdm_cfg.loss.lambda,
            if ncdm_ok { "ok" } else { "short" },
            if noise_ok { "ok" } else { "short" },
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------- criterion 6

/// Runs when `DLLM_ASSIST0910_CONFIG` names a run config over the real data.
#[test]
fn criterion_6_full_scale_optional() {
    let _g = serial();
    let start = Instant::now();
    let path = match std::env::var_os("DLLM_ASSIST0910_CONFIG") {
        Some(p) if Path::new(&p).is_file() => p,
        _ => {
            line(
                "criterion 6: SKIP | full-scale optional (not gating) | set DLLM_ASSIST0910_CONFIG to a run config \
                 over the ASSIST0910 files | 0.0s"
            );
            return;
        }
    };
    let cfg = RunConfig::load(Path::new(&path), &[]).unwrap();
    let (report_, _) = multi_seed(&cfg, 1).unwrap();
    let row = table_row("dllm-ncdm", &report_);
    let (acc_mean, acc_std) = mean_std(&report_.acc());
    report(
        6,
        "full-scale optional",
        true,
        &format!(
            "{}; reference ACC 74.46±0.18, measured {:.2}±{:.2}",
            row.lines().last().unwrap_or(""),
            100.0 * acc_mean,
            100.0 * acc_std
        ),
        start.elapsed(),
    );
}

// ---------------------------------------------------------------- criterion 7

const CLI_CONFIG: &str = r#"
[data.synthetic]
students = 40
exercises = 30
concepts = 4
min_responses = 8
max_responses = 25
[model]
dim = 8
hidden = [8, 6]
[train]
batch_size = 128
max_epochs = 5
patience = 3
[semantics]
mock_dim = 48
"#;

#[test]
fn criterion_7_determinism() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), CLI_CONFIG).unwrap();
    let variants: [&[&str]; 4] = [
        &["--set", "model.head=\"ncdm\"", "--set", "model.dim=4"],
        &["--set", "model.head=\"irt\""],
        &[
            "--set",
            "model.head=\"mirt\"",
            "--set",
            "data.noise_level=0.1",
        ],
        &[
            "--set",
            "model.head=\"cdmfkc\"",
            "--set",
            "model.dim=4",
            "--set",
            "model.framework=\"plain\"",
        ],
    ];
    let mut identical = 0;
    for (k, extra) in variants.iter().enumerate() {
        let mut files = Vec::new();
        for rep in 0..2 {
            let run = format!("v{k}-{rep}");
            let mut args = vec![
                "train",
                "--config",
                "c.toml",
                "--seed",
                "7",
                "--run-dir",
                &run,
            ];
            args.extend_from_slice(extra);
            let out = Command::new(env!("CARGO_BIN_EXE_dllm"))
                .current_dir(dir.path())
                .env("RUST_LOG", "warn")
                .args(&args)
                .output()
                .unwrap();
            assert!(
                out.status.success(),
                "{}",
                String::from_utf8_lossy(&out.stderr)
            );
            let read = |f: &str| std::fs::read(dir.path().join(&run).join(f)).unwrap();
            files.push((read(artifacts::HISTORY), read(artifacts::CHECKPOINT)));
        }
        if files[0] == files[1] {
            identical += 1;
        }
    }
    let pass = identical == variants.len();
    report(
        7,
        "determinism",
        pass,
        &format!(
            "{identical}/{} train commands gave byte-identical history and checkpoint",
            variants.len()
        ),
        start.elapsed(),
    );
}

// ---------------------------------------------------------------- criterion 8

fn toy_dataset(n: usize, m: usize, correct: usize, incorrect: usize, seed: u64) -> ResponseDataset {
    let mut g = rng::stream(seed, "acceptance-toy", 0);
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|s| (0..m).map(move |j| (s, j))).collect();
    pairs.shuffle(&mut g);
    let logs = pairs[..correct + incorrect]
        .iter()
        .enumerate()
        .map(|(i, &(s, j))| ResponseLog {
            student: s,
            exercise: j,
            correct: i < correct,
        })
        .collect();
    let q = QMatrix::new(3, (0..m).map(|j| vec![j % 3]).collect()).unwrap();
    ResponseDataset::new(n, logs, q).unwrap()
}

#[test]
fn criterion_8_protocol_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let mut notes = Vec::new();

    // Split sizes follow the floor rule and partition the logs.
    let mut split_ok = true;
    for total in [10, 11, 99, 101, 1000, 1234] {
        let ds = toy_dataset(40, 40, total / 2, total - total / 2, total as u64);
        let sp = split(&ds, 3).unwrap();
        let mut all: Vec<usize> = sp
            .train
            .iter()
            .chain(&sp.val)
            .chain(&sp.test)
            .copied()
            .collect();
        all.sort_unstable();
        split_ok &= sp.train.len() == total * 7 / 10
            && sp.val.len() == total / 10
            && sp.test.len() == total - total * 7 / 10 - total / 10
            && all == (0..total).collect::<Vec<_>>();
    }
    let ds = toy_dataset(20, 20, 60, 41, 0);
    let sp = split(&ds, 0).unwrap();
    split_ok &= (sp.train.len(), sp.val.len(), sp.test.len()) == (70, 10, 21);
    notes.push(format!("split 7:1:2 floor rule {split_ok}"));

    // Noise counts: round(level · count) of each label over the training split.
    let mut noise_ok = true;
    let ds = toy_dataset(100, 40, 1000, 500, 5);
    let everything = dllm_core::dataset::SplitSpec {
        seed: 0,
        stratified: false,
        train: (0..1500).collect(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let (noisy, _, spec) = inject_noise(&ds, &everything, 0.10, 1, NoiseMode::Add).unwrap();
    let added_correct = spec.added_logs.iter().filter(|l| l.2).count();
    noise_ok &= (added_correct, spec.added_logs.len() - added_correct) == (100, 50);
    noise_ok &= noisy.logs.len() == 1650;
    for level in [0.05, 0.10, 0.15] {
        let ds = toy_dataset(60, 50, 900, 400, (level * 100.0) as u64);
        let sp = split(&ds, 2).unwrap();
        let train_correct = sp.train.iter().filter(|&&i| ds.logs[i].correct).count();
        let train_incorrect = sp.train.len() - train_correct;
        let (noisy, nsp, spec) = inject_noise(&ds, &sp, level, 4, NoiseMode::Add).unwrap();
        let add_c = spec.added_logs.iter().filter(|l| l.2).count();
        let add_i = spec.added_logs.len() - add_c;
        noise_ok &= add_c == (level * train_correct as f64).round() as usize
            && add_i == (level * train_incorrect as f64).round() as usize;
        // Held-out logs are untouched and every (student, exercise) pair is unique.
        noise_ok &= nsp.val == sp.val && nsp.test == sp.test;
        noise_ok &= sp
            .val
            .iter()
            .chain(&sp.test)
            .all(|&i| noisy.logs[i] == ds.logs[i]);
        let mut seen = std::collections::HashSet::new();
        noise_ok &= noisy
            .logs
            .iter()
            .all(|l| seen.insert((l.student, l.exercise)));
        noise_ok &= nsp.train.len() == sp.train.len() + spec.added_logs.len();
    }
    let (same, _, _) = inject_noise(&ds, &sp, 0.0, 1, NoiseMode::Add).unwrap();
    noise_ok &= same == ds;
    notes.push(format!("noise counts exact {noise_ok}"));

    // Defaults and the full config snapshot.
    let cfg = RunConfig::default();
    let defaults_ok = cfg.train.batch_size == 4096
        && cfg.train.lr == 0.04
        && cfg.model.layers == 3
        && cfg.model.dim.is_none()
        && HeadKind::ALL.iter().all(|&h| {
            let mut c = cfg.clone();
            c.model.head = h;
            c.model.dim_for(10) == if h.is_latent() { 32 } else { 10 }
        });
    let snapshot = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots/default_config.toml"),
    )
    .unwrap();
    let snapshot_ok = cfg.to_toml().unwrap() == snapshot;
    notes.push(format!(
        "defaults batch 4096 lr 0.04 L 3 d 32/Z {defaults_ok}; snapshot match {snapshot_ok}"
    ));

    let pass = split_ok && noise_ok && defaults_ok && snapshot_ok;
    report(
        8,
        "protocol fidelity",
        pass,
        &notes.join("; "),
        start.elapsed(),
    );
}
