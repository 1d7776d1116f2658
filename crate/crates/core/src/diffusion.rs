//! Latent denoising diffusion: linear-β schedule, an MLP noise predictor,
//! its FiLM-conditioned variant, training losses, reverse steps and the
//! noise-then-denoise refinement.
//!
//! The noise predictor is `ε_θ(x, t) = W₃·silu(W₂·silu(W₁x + b₁ + W_τ·τ(t)) + b₂) + b₃`
//! with hidden width `2d` and a sinusoidal time embedding `τ(t)` of width
//! `d`. The conditional predictor modulates its output as
//! `ε_θ(x, t)·(1 + cW_γ) + cW_β`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    rng::StreamRng, xavier_uniform, Binding, ParamId, ParamStore, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Tables indexed by step `t ∈ 1..=T`; index 0 holds `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        if t == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {} and {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let mut betas = vec![0.0];
        for i in 0..t {
            let frac = if t == 1 {
                0.0
            } else {
                i as f64 / (t - 1) as f64
            };
            betas.push(cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0];
        for a in &alphas[1..] {
            alpha_bars.push(alpha_bars.last().expect("non-empty") * a);
        }
        Ok(DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε`.
pub fn forward_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Sinusoidal embedding of width `d`: `sin(tω_k)` then `cos(tω_k)` with
/// frequencies `ω_k` geometric from 1 down to 10⁻⁴ (periods 2π to 2π·10⁴).
/// An odd `d` leaves the last column zero.
pub fn time_embedding(ts: &[usize], d: usize) -> Tensor {
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                10_000f64.powf(-(k as f64) / (half - 1) as f64)
            }
        })
        .collect();
    let mut out = Tensor::zeros(&[ts.len(), d]);
    for (r, &t) in ts.iter().enumerate() {
        let row = out.row_mut(r);
        for (k, w) in freqs.iter().enumerate() {
            row[k] = (t as f64 * w).sin();
            row[half + k] = (t as f64 * w).cos();
        }
    }
    out
}

/// Parameter handles of one noise predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserIds {
    pub dim: usize,
    w_in: ParamId,
    b_in: ParamId,
    w_time: ParamId,
    w_hidden: ParamId,
    b_hidden: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// FiLM projections `W_γ`, `W_β` (d × d).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilmIds {
    pub w_gamma: ParamId,
    pub w_beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DenoiserVars {
    w_in: Var,
    b_in: Var,
    w_time: Var,
    w_hidden: Var,
    b_hidden: Var,
    w_out: Var,
    b_out: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FilmVars {
    pub w_gamma: Var,
    pub w_beta: Var,
}

/// Stable per-parameter seed so adding parameters elsewhere never shifts
/// this one's initial values.
pub(crate) fn param_seed(seed: u64, name: &str) -> u64 {
    crate::numerics::rng::stream_key(seed, name, 0)
}

fn add_xavier(
    store: &mut ParamStore,
    name: String,
    shape: [usize; 2],
    seed: u64,
) -> Result<ParamId> {
    let v = xavier_uniform(&shape, param_seed(seed, &name));
    store.add(name, v)
}

pub fn register_denoiser(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    seed: u64,
) -> Result<DenoiserIds> {
    let h = 2 * d;
    Ok(DenoiserIds {
        dim: d,
        w_in: add_xavier(store, format!("{prefix}.w_in"), [d, h], seed)?,
        b_in: store.add(format!("{prefix}.b_in"), Tensor::zeros(&[1, h]))?,
        w_time: add_xavier(store, format!("{prefix}.w_time"), [d, h], seed)?,
        w_hidden: add_xavier(store, format!("{prefix}.w_hidden"), [h, h], seed)?,
        b_hidden: store.add(format!("{prefix}.b_hidden"), Tensor::zeros(&[1, h]))?,
        w_out: add_xavier(store, format!("{prefix}.w_out"), [h, d], seed)?,
        b_out: store.add(format!("{prefix}.b_out"), Tensor::zeros(&[1, d]))?,
    })
}

pub fn register_film(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) -> Result<FilmIds> {
    Ok(FilmIds {
        w_gamma: add_xavier(store, format!("{prefix}.w_gamma"), [d, d], seed)?,
        w_beta: add_xavier(store, format!("{prefix}.w_beta"), [d, d], seed)?,
    })
}

impl DenoiserIds {
    pub fn ids(&self) -> [ParamId; 7] {
        [
            self.w_in,
            self.b_in,
            self.w_time,
            self.w_hidden,
            self.b_hidden,
            self.w_out,
            self.b_out,
        ]
    }

    pub fn vars(&self, b: &Binding) -> DenoiserVars {
        DenoiserVars {
            w_in: b.var(self.w_in),
            b_in: b.var(self.b_in),
            w_time: b.var(self.w_time),
            w_hidden: b.var(self.w_hidden),
            b_hidden: b.var(self.b_hidden),
            w_out: b.var(self.w_out),
            b_out: b.var(self.b_out),
        }
    }

    /// Current values as constants on `tape`.
    pub fn constants(&self, tape: &mut Tape, store: &ParamStore) -> DenoiserVars {
        let mut c = |id| tape.constant(store.get(id).clone());
        DenoiserVars {
            w_in: c(self.w_in),
            b_in: c(self.b_in),
            w_time: c(self.w_time),
            w_hidden: c(self.w_hidden),
            b_hidden: c(self.b_hidden),
            w_out: c(self.w_out),
            b_out: c(self.b_out),
        }
    }
}

impl FilmIds {
    pub fn ids(&self) -> [ParamId; 2] {
        [self.w_gamma, self.w_beta]
    }

    pub fn vars(&self, b: &Binding) -> FilmVars {
        FilmVars {
            w_gamma: b.var(self.w_gamma),
            w_beta: b.var(self.w_beta),
        }
    }

    pub fn constants(&self, tape: &mut Tape, store: &ParamStore) -> FilmVars {
        FilmVars {
            w_gamma: tape.constant(store.get(self.w_gamma).clone()),
            w_beta: tape.constant(store.get(self.w_beta).clone()),
        }
    }
}

/// Unconditional noise prediction for rows `x_t` with time embeddings `temb`.
pub fn predict_noise(tape: &mut Tape, net: &DenoiserVars, x_t: Var, temb: Var) -> Result<Var> {
    let a = tape.matmul(x_t, net.w_in)?;
    let tt = tape.matmul(temb, net.w_time)?;
    let a = tape.add(a, tt)?;
    let a = tape.add_row(a, net.b_in)?;
    let h1 = tape.silu(a);
    let b = tape.matmul(h1, net.w_hidden)?;
    let b = tape.add_row(b, net.b_hidden)?;
    let h2 = tape.silu(b);
    let o = tape.matmul(h2, net.w_out)?;
    tape.add_row(o, net.b_out)
}

/// `base · (1 + cW_γ) + cW_β`.
pub fn modulate(tape: &mut Tape, base: Var, film: &FilmVars, c: Var) -> Result<Var> {
    if tape.value(c).shape() != tape.value(base).shape() {
        return Err(Error::shape(
            "film",
            format!(
                "condition {:?} vs output {:?}",
                tape.value(c).shape(),
                tape.value(base).shape()
            ),
        ));
    }
    let gamma = tape.matmul(c, film.w_gamma)?;
    let gamma = tape.add_scalar(gamma, 1.0);
    let shift = tape.matmul(c, film.w_beta)?;
    let scaled = tape.mul(base, gamma)?;
    tape.add(scaled, shift)
}

/// A frozen noise predictor evaluated at one step for every row.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

pub struct Denoiser<'a> {
    pub store: &'a ParamStore,
    pub ids: DenoiserIds,
}

pub struct ConditionalDenoiser<'a> {
    pub base: Denoiser<'a>,
    pub film: FilmIds,
    pub condition: &'a Tensor,
}

impl NoisePredictor for Denoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.ids.constants(&mut tape, self.store);
        let x = tape.constant(x_t.clone());
        let temb = tape.constant(time_embedding(&vec![t; x_t.rows()], self.ids.dim));
        let out = predict_noise(&mut tape, &net, x, temb)?;
        Ok(tape.value(out).clone())
    }
}

impl NoisePredictor for ConditionalDenoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.base.ids.constants(&mut tape, self.base.store);
        let film = self.film.constants(&mut tape, self.base.store);
        let x = tape.constant(x_t.clone());
        let temb = tape.constant(time_embedding(&vec![t; x_t.rows()], self.base.ids.dim));
        let c = tape.constant(self.condition.clone());
        let base = predict_noise(&mut tape, &net, x, temb)?;
        let out = modulate(&mut tape, base, &film, c)?;
        Ok(tape.value(out).clone())
    }
}

/// One uniform step per row, then a standard normal matrix, in that order.
pub fn sample_noising(
    n: usize,
    d: usize,
    sched: &DiffusionSchedule,
    rng: &mut StreamRng,
) -> (Vec<usize>, Tensor) {
    let ts: Vec<usize> = (0..n)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect();
    let eps = Tensor::matrix(
        n,
        d,
        (0..n * d).map(|_| rng.sample(StandardNormal)).collect(),
    );
    (ts, eps)
}

/// Per-row noised inputs `x_t` for steps `ts`.
pub fn noised_rows(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &DiffusionSchedule) -> Tensor {
    let mut out = x0.clone();
    for (r, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (o, e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
            *o = a * *o + b * e;
        }
    }
    out
}

/// Mean over rows of `‖ε − ε̂‖²`, where `ε̂ = predict(tape, x_t, temb)`.
/// `x0` is treated as a constant.
pub fn denoising_loss<F>(
    tape: &mut Tape,
    x0: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut StreamRng,
    predict: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var, Var, &[usize]) -> Result<Var>,
{
    let (n, d) = (x0.rows(), x0.cols());
    if n == 0 {
        return Err(Error::Contract("denoising loss over zero rows".into()));
    }
    let (ts, eps) = sample_noising(n, d, sched, rng);
    let x_t = tape.constant(noised_rows(x0, &ts, &eps, sched));
    let temb = tape.constant(time_embedding(&ts, d));
    let pred = predict(tape, x_t, temb, &ts)?;
    let target = tape.constant(eps);
    let diff = tape.sub(target, pred)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

pub fn uncond_loss(
    tape: &mut Tape,
    net: &DenoiserVars,
    x0: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut StreamRng,
) -> Result<Var> {
    denoising_loss(tape, x0, sched, rng, |tape, x_t, temb, _| {
        predict_noise(tape, net, x_t, temb)
    })
}

/// As [`uncond_loss`] with the FiLM-modulated predictor; `c` is a constant
/// aligned row-for-row with `x0`.
pub fn cond_loss(
    tape: &mut Tape,
    net: &DenoiserVars,
    film: &FilmVars,
    x0: &Tensor,
    c: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut StreamRng,
) -> Result<Var> {
    if c.shape() != x0.shape() {
        return Err(Error::shape(
            "cond_loss",
            format!("condition {:?} vs x0 {:?}", c.shape(), x0.shape()),
        ));
    }
    let cv = tape.constant(c.clone());
    denoising_loss(tape, x0, sched, rng, |tape, x_t, temb, _| {
        let base = predict_noise(tape, net, x_t, temb)?;
        modulate(tape, base, film, cv)
    })
}

/// `x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t) ε̂)/√α_t + σ_t z` with `σ_t² = β_t`;
/// `z` is ignored at `t = 1`.
pub fn reverse_step_with(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &DiffusionSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let coef = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let sigma = if t == 1 { 0.0 } else { sched.beta(t).sqrt() };
    let mean = x_t.zip_map(eps_hat, |x, e| inv * (x - coef * e))?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    mean.zip_map(z, |m, zz| m + sigma * zz)
}

pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let eps_hat = predictor.predict(x_t, t)?;
    reverse_step_with(x_t, t, &eps_hat, sched, z)
}

fn normal(n: usize, d: usize, rng: &mut StreamRng) -> Tensor {
    Tensor::matrix(
        n,
        d,
        (0..n * d).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

/// Diffuse to `t_star`, then walk back to 0 with `predictor`.
fn noise_then_denoise(
    x: &Tensor,
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    t_star: usize,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let mut cur = forward_sample(x, t_star, &normal(n, d, rng), sched)?;
    for t in (1..=t_star).rev() {
        let z = if t > 1 {
            normal(n, d, rng)
        } else {
            Tensor::zeros(&[n, d])
        };
        cur = reverse_step(&cur, t, predictor, sched, &z)?;
    }
    Ok(cur)
}

/// Two-stage refinement: noise to `t_star` and denoise with `stage1`, then
/// noise the result to `t_star` again and denoise with `stage2`. A missing
/// stage is skipped; `t_star = 0` returns `x` unchanged.
pub fn refine(
    x: &Tensor,
    stage1: Option<&dyn NoisePredictor>,
    stage2: Option<&dyn NoisePredictor>,
    sched: &DiffusionSchedule,
    t_star: usize,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    if t_star > sched.steps() {
        return Err(Error::Config(format!(
            "t_star {t_star} exceeds T = {}",
            sched.steps()
        )));
    }
    if t_star == 0 {
        return Ok(x.clone());
    }
    let mut cur = x.clone();
    if let Some(p) = stage1 {
        cur = noise_then_denoise(&cur, p, sched, t_star, rng)?;
    }
    if let Some(p) = stage2 {
        cur = noise_then_denoise(&cur, p, sched, t_star, rng)?;
    }
    Ok(cur)
}
