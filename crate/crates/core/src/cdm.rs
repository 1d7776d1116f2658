//! Prediction heads, the dimension-alignment transform and the task loss.
//!
//! Every head maps gathered student rows `h_s`, exercise rows `h_e` and the
//! exercises' Q rows to one logit per response; `ŷ = σ(logit)`.
//!
//! | head   | logit |
//! |--------|-------|
//! | IRT    | `softplus(h_e·w_a) · (h_s·w_θ − h_e·w_b)` |
//! | MIRT   | `Σ h_s ⊙ (h_e W_a) − h_e·w_b` |
//! | NCDM   | `f(q ⊙ (σ(h_s) − σ(h_e)) · σ(h_e·w_disc))` |
//! | CDMFKC | `f(q ⊙ (σ(h_s) − σ(h_e) − g) ⊙ softplus(λ) · σ(h_e·w_disc))` |
//!
//! `f` is a sigmoid MLP whose weights are kept non-negative by [`Head::project`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::param_seed;
use crate::error::{Error, Result};
use crate::numerics::{tape, xavier_uniform, Binding, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Irt,
    Mirt,
    Ncdm,
    Cdmfkc,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Irt,
        HeadKind::Mirt,
        HeadKind::Ncdm,
        HeadKind::Cdmfkc,
    ];

    /// Heads with a latent dimension of their own; the others work in concept space.
    pub fn is_latent(self) -> bool {
        matches!(self, HeadKind::Irt | HeadKind::Mirt)
    }

    pub fn supports_mastery(self) -> bool {
        !self.is_latent()
    }

    /// Default embedding width for `num_concepts` concepts.
    pub fn default_dim(self, num_concepts: usize) -> usize {
        if self.is_latent() {
            32
        } else {
            num_concepts
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Irt => "irt",
            HeadKind::Mirt => "mirt",
            HeadKind::Ncdm => "ncdm",
            HeadKind::Cdmfkc => "cdmfkc",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "irt" => Ok(HeadKind::Irt),
            "mirt" => Ok(HeadKind::Mirt),
            "ncdm" | "ncd" => Ok(HeadKind::Ncdm),
            "cdmfkc" => Ok(HeadKind::Cdmfkc),
            other => Err(Error::Config(format!(
                "unknown head `{other}` (irt, mirt, ncdm, cdmfkc)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Interaction {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Params {
    Irt {
        w_theta: ParamId,
        w_b: ParamId,
        w_a: ParamId,
    },
    Mirt {
        w_a: ParamId,
        w_b: ParamId,
    },
    Ncdm {
        w_disc: ParamId,
        net: Interaction,
    },
    Cdmfkc {
        w_disc: ParamId,
        net: Interaction,
        g: ParamId,
        lambda: ParamId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    /// Width of the rows the head consumes.
    pub dim: usize,
    pub num_concepts: usize,
    params: Params,
}

fn xavier(store: &mut ParamStore, name: &str, shape: [usize; 2], seed: u64) -> Result<ParamId> {
    store.add(name, xavier_uniform(&shape, param_seed(seed, name)))
}

fn zeros(store: &mut ParamStore, name: &str, shape: [usize; 2]) -> Result<ParamId> {
    store.add(name, Tensor::zeros(&shape))
}

impl Head {
    /// Register a head consuming rows of width `dim`. NCDM and CDMFKC need
    /// `dim == num_concepts`; `hidden` sets their interaction widths.
    pub fn register(
        store: &mut ParamStore,
        kind: HeadKind,
        dim: usize,
        num_concepts: usize,
        hidden: (usize, usize),
        seed: u64,
    ) -> Result<Head> {
        if dim == 0 || num_concepts == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if !kind.is_latent() && dim != num_concepts {
            return Err(Error::shape(
                "head",
                format!("{kind} consumes concept-space rows of width {num_concepts}, got {dim}"),
            ));
        }
        let params = match kind {
            HeadKind::Irt => Params::Irt {
                w_theta: xavier(store, "head.w_theta", [dim, 1], seed)?,
                w_b: xavier(store, "head.w_b", [dim, 1], seed)?,
                w_a: xavier(store, "head.w_a", [dim, 1], seed)?,
            },
            HeadKind::Mirt => Params::Mirt {
                w_a: xavier(store, "head.w_a", [dim, dim], seed)?,
                w_b: xavier(store, "head.w_b", [dim, 1], seed)?,
            },
            HeadKind::Ncdm | HeadKind::Cdmfkc => {
                let (h1, h2) = hidden;
                if h1 == 0 || h2 == 0 {
                    return Err(Error::Config("interaction widths must be positive".into()));
                }
                let w_disc = xavier(store, "head.w_disc", [dim, 1], seed)?;
                let net = Interaction {
                    w1: xavier(store, "head.w1", [dim, h1], seed)?,
                    b1: zeros(store, "head.b1", [1, h1])?,
                    w2: xavier(store, "head.w2", [h1, h2], seed)?,
                    b2: zeros(store, "head.b2", [1, h2])?,
                    w3: xavier(store, "head.w3", [h2, 1], seed)?,
                    b3: zeros(store, "head.b3", [1, 1])?,
                };
                if kind == HeadKind::Ncdm {
                    Params::Ncdm { w_disc, net }
                } else {
                    Params::Cdmfkc {
                        w_disc,
                        net,
                        g: zeros(store, "head.g", [1, dim])?,
                        lambda: zeros(store, "head.lambda", [1, dim])?,
                    }
                }
            }
        };
        let head = Head {
            kind,
            dim,
            num_concepts,
            params,
        };
        head.project(store);
        head.centre(store);
        Ok(head)
    }

    /// Offset the interaction biases so every unit starts at σ(0): layers
    /// two and three see sigmoid outputs near ½, and with non-negative
    /// weights zero biases would saturate them.
    fn centre(&self, store: &mut ParamStore) {
        let (Params::Ncdm { net, .. } | Params::Cdmfkc { net, .. }) = self.params else {
            return;
        };
        for (w, b) in [(net.w2, net.b2), (net.w3, net.b3)] {
            let w = store.get(w).clone();
            let bias = store.get_mut(b).data_mut();
            for (j, bj) in bias.iter_mut().enumerate() {
                *bj = -0.5 * (0..w.rows()).map(|i| w.get(i, j)).sum::<f64>();
            }
        }
    }

    /// Parameters clamped at zero after every update.
    pub fn constrained(&self) -> Vec<ParamId> {
        match self.params {
            Params::Ncdm { net, .. } | Params::Cdmfkc { net, .. } => vec![net.w1, net.w2, net.w3],
            _ => Vec::new(),
        }
    }

    /// Learning-rate multipliers: `1/√fan_in` on the interaction weights.
    /// Their entries are non-negative, so Adam moves a whole column in the
    /// same direction and an unscaled step shifts each unit by `fan_in·lr`.
    pub fn lr_scales(&self, store: &ParamStore) -> Vec<f64> {
        let mut scales = vec![1.0; store.len()];
        for id in self.constrained() {
            scales[id.index()] = 1.0 / (store.get(id).rows() as f64).sqrt();
        }
        scales
    }

    /// Clamp interaction weights at zero.
    pub fn project(&self, store: &mut ParamStore) {
        for id in self.constrained() {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = w.max(0.0));
        }
    }

    /// One logit per row; `h_s`, `h_e` are `B × dim` and `q` is `B × Z`.
    pub fn logits(&self, tape: &mut Tape, b: &Binding, h_s: Var, h_e: Var, q: Var) -> Result<Var> {
        let rows = tape.value(h_s).rows();
        for (what, v, width) in [
            ("students", h_s, self.dim),
            ("exercises", h_e, self.dim),
            ("q", q, self.num_concepts),
        ] {
            let s = tape.value(v).shape();
            if s.len() != 2 || s[0] != rows || s[1] != width {
                return Err(Error::shape(
                    "head",
                    format!(
                        "{} {what} rows have shape {s:?}, expected [{rows}, {width}]",
                        self.kind
                    ),
                ));
            }
        }
        match self.params {
            Params::Irt { w_theta, w_b, w_a } => {
                let theta = tape.matmul(h_s, b.var(w_theta))?;
                let diff = tape.matmul(h_e, b.var(w_b))?;
                let a = tape.matmul(h_e, b.var(w_a))?;
                let a = tape.softplus(a);
                let gap = tape.sub(theta, diff)?;
                tape.mul(a, gap)
            }
            Params::Mirt { w_a, w_b } => {
                let a = tape.matmul(h_e, b.var(w_a))?;
                let prod = tape.mul(h_s, a)?;
                let dot = tape.sum_cols(prod);
                let diff = tape.matmul(h_e, b.var(w_b))?;
                tape.sub(dot, diff)
            }
            Params::Ncdm { w_disc, net } => {
                let x = self.concept_gap(tape, h_s, h_e, q, None)?;
                let x = discriminate(tape, b, x, h_e, w_disc)?;
                interaction(tape, b, &net, x)
            }
            Params::Cdmfkc {
                w_disc,
                net,
                g,
                lambda,
            } => {
                let x = self.concept_gap(tape, h_s, h_e, q, Some((b.var(g), b.var(lambda))))?;
                let x = discriminate(tape, b, x, h_e, w_disc)?;
                interaction(tape, b, &net, x)
            }
        }
    }

    fn concept_gap(
        &self,
        tape: &mut Tape,
        h_s: Var,
        h_e: Var,
        q: Var,
        fkc: Option<(Var, Var)>,
    ) -> Result<Var> {
        let s = tape.sigmoid(h_s);
        let e = tape.sigmoid(h_e);
        let mut gap = tape.sub(s, e)?;
        if let Some((g, lambda)) = fkc {
            let neg = tape.scale(g, -1.0);
            gap = tape.add_row(gap, neg)?;
            let scale = tape.softplus(lambda);
            let rows = vec![0; tape.value(gap).rows()];
            let scale = tape.gather_rows(scale, &rows)?;
            gap = tape.mul(gap, scale)?;
        }
        tape.mul(q, gap)
    }

    /// `σ(h_s)`: per-concept mastery for the concept-space heads.
    pub fn mastery(&self, students: &Tensor) -> Result<Tensor> {
        mastery(self.kind, students)
    }
}

fn discriminate(tape: &mut Tape, b: &Binding, x: Var, h_e: Var, w_disc: ParamId) -> Result<Var> {
    let disc = tape.matmul(h_e, b.var(w_disc))?;
    let disc = tape.sigmoid(disc);
    tape.mul_col(x, disc)
}

fn interaction(tape: &mut Tape, b: &Binding, net: &Interaction, x: Var) -> Result<Var> {
    let z = tape.matmul(x, b.var(net.w1))?;
    let z = tape.add_row(z, b.var(net.b1))?;
    let z = tape.sigmoid(z);
    let z = tape.matmul(z, b.var(net.w2))?;
    let z = tape.add_row(z, b.var(net.b2))?;
    let z = tape.sigmoid(z);
    let z = tape.matmul(z, b.var(net.w3))?;
    tape.add_row(z, b.var(net.b3))
}

/// Mastery matrix `σ(h_s)` (N × Z) for heads that expose one.
pub fn mastery(kind: HeadKind, students: &Tensor) -> Result<Tensor> {
    if !kind.supports_mastery() {
        return Err(Error::NotApplicable(format!(
            "{kind} has no per-concept mastery"
        )));
    }
    Ok(students.map(tape::sigmoid))
}

/// `H W_t + b_t` with one bias per node broadcast across the Z columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub nodes: usize,
    pub d: usize,
    pub z: usize,
}

impl TransformLayer {
    pub fn register(
        store: &mut ParamStore,
        nodes: usize,
        d: usize,
        z: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(TransformLayer {
            w: xavier(store, "transform.w", [d, z], seed)?,
            b: zeros(store, "transform.b", [nodes, 1])?,
            nodes,
            d,
            z,
        })
    }

    pub fn apply(&self, tape: &mut Tape, b: &Binding, h: Var) -> Result<Var> {
        transform(tape, h, b.var(self.w), b.var(self.b))
    }
}

pub fn transform(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    tape.add_col(hw, b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BceMode {
    /// Summed negative log-likelihood divided by the batch size.
    #[default]
    Mean,
    Sum,
}

/// Negative log-likelihood of labels `r` under probabilities `ŷ`.
pub fn bce(yhat: &[f64], r: &[bool], mode: BceMode) -> Result<f64> {
    if yhat.len() != r.len() {
        return Err(Error::shape(
            "bce",
            format!("{} predictions, {} labels", yhat.len(), r.len()),
        ));
    }
    if yhat.is_empty() {
        return Err(Error::Contract("bce over an empty batch".into()));
    }
    let mut total = 0.0;
    for (&y, &label) in yhat.iter().zip(r) {
        if !(y > 0.0 && y < 1.0) {
            return Err(Error::Numeric(format!("prediction {y} outside (0, 1)")));
        }
        total -= if label { y.ln() } else { (1.0 - y).ln() };
    }
    Ok(match mode {
        BceMode::Sum => total,
        BceMode::Mean => total / yhat.len() as f64,
    })
}

/// BCE from logits: `softplus(z) − r z` per row, which equals
/// `−[r ln σ(z) + (1−r) ln(1−σ(z))]` without forming σ.
pub fn bce_logits(tape: &mut Tape, logits: Var, labels: &Tensor, mode: BceMode) -> Result<Var> {
    let n = tape.value(logits).len();
    if labels.len() != n {
        return Err(Error::shape(
            "bce",
            format!("{n} logits, {} labels", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::Contract("bce over an empty batch".into()));
    }
    let r = tape.constant(Tensor::matrix(n, 1, labels.data().to_vec()));
    let sp = tape.softplus(logits);
    let rz = tape.mul(r, logits)?;
    let per = tape.sub(sp, rz)?;
    let total = tape.sum(per);
    Ok(match mode {
        BceMode::Sum => total,
        BceMode::Mean => tape.scale(total, 1.0 / n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(r: usize, c: usize, seed: u64) -> Tensor {
        let mut g = rng::stream(seed, "cdm-test", 0);
        Tensor::matrix(
            r,
            c,
            (0..r * c).map(|_| g.random::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    fn q_rows(b: usize, z: usize, seed: u64) -> Tensor {
        let mut g = rng::stream(seed, "cdm-q", 0);
        let mut q = Tensor::zeros(&[b, z]);
        for r in 0..b {
            let k = g.random_range(0..z);
            q.set(r, k, 1.0);
            if g.random::<bool>() {
                q.set(r, g.random_range(0..z), 1.0);
            }
        }
        q
    }

    fn predict(head: &Head, store: &ParamStore, s: &Tensor, e: &Tensor, q: &Tensor) -> Vec<f64> {
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let (s, e, q) = (
            t.constant(s.clone()),
            t.constant(e.clone()),
            t.constant(q.clone()),
        );
        let z = head.logits(&mut t, &b, s, e, q).unwrap();
        t.value(z)
            .data()
            .iter()
            .map(|&x| tape::sigmoid(x))
            .collect()
    }

    #[test]
    fn irt_closed_forms() {
        let mut store = ParamStore::new();
        let head = Head::register(&mut store, HeadKind::Irt, 1, 3, (1, 1), 0).unwrap();
        let Params::Irt { w_theta, w_b, w_a } = head.params else {
            unreachable!()
        };
        *store.get_mut(w_theta) = Tensor::matrix(1, 1, vec![1.0]);
        *store.get_mut(w_b) = Tensor::matrix(1, 1, vec![1.0]);
        // softplus(x) = 1 at x = ln(e − 1); the second exercise row is 0.5.
        *store.get_mut(w_a) = Tensor::matrix(1, 1, vec![2.0 * (std::f64::consts::E - 1.0).ln()]);
        let q = Tensor::zeros(&[2, 3]);
        let s = Tensor::matrix(2, 1, vec![0.3, 1.5]);
        let e = Tensor::matrix(2, 1, vec![0.3, 0.5]);
        let y = predict(&head, &store, &s, &e, &q);
        assert!((y[0] - 0.5).abs() < 1e-15);
        assert!((y[1] - 0.7311).abs() < 1e-4);
        assert!((y[1] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn ncdm_zero_gap_gives_half() {
        let mut store = ParamStore::new();
        let head = Head::register(&mut store, HeadKind::Ncdm, 4, 4, (8, 6), 1).unwrap();
        let h = random(5, 4, 2);
        let q = q_rows(5, 4, 3);
        // Fresh heads start centred.
        let y = predict(&head, &store, &h, &h, &q);
        assert!(y.iter().all(|&v| (v - 0.5).abs() < 1e-12), "{y:?}");
        // Zero biases alone do not give 1/2 through non-negative weights;
        // with zero output weights the net outputs σ(0) exactly.
        let Params::Ncdm { net, .. } = head.params else {
            unreachable!()
        };
        for (b, shape) in [(net.b1, [1, 8]), (net.b2, [1, 6]), (net.b3, [1, 1])] {
            *store.get_mut(b) = Tensor::zeros(&shape);
        }
        *store.get_mut(net.w3) = Tensor::zeros(&[6, 1]);
        let y = predict(&head, &store, &h, &h, &q);
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ncdm_gap_zero_means_constant_input() {
        // Mastery equal to difficulty makes the interaction input exactly zero,
        // so every row gets the same prediction.
        let mut store = ParamStore::new();
        let head = Head::register(&mut store, HeadKind::Ncdm, 3, 3, (5, 4), 4).unwrap();
        let h = random(6, 3, 5);
        let y = predict(&head, &store, &h, &h, &q_rows(6, 3, 6));
        let Params::Ncdm { net, .. } = head.params else {
            unreachable!()
        };
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let zero = t.constant(Tensor::zeros(&[1, 3]));
        let z = interaction(&mut t, &b, &net, zero).unwrap();
        let want = tape::sigmoid(t.value(z).item().unwrap());
        assert!(y.iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut store = ParamStore::new();
        assert!(Head::register(&mut store, HeadKind::Ncdm, 5, 4, (2, 2), 0).is_err());
        let head = Head::register(&mut store, HeadKind::Mirt, 4, 3, (2, 2), 0).unwrap();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let s = t.constant(random(2, 3, 0));
        let q = t.constant(q_rows(2, 3, 0));
        assert!(head.logits(&mut t, &b, s, s, q).is_err());
    }

    #[test]
    fn interaction_weights_nonnegative() {
        for kind in [HeadKind::Ncdm, HeadKind::Cdmfkc] {
            let mut store = ParamStore::new();
            let head = Head::register(&mut store, kind, 5, 5, (7, 3), 9).unwrap();
            assert_eq!(head.constrained().len(), 3);
            for id in head.constrained() {
                assert!(store.get(id).data().iter().all(|&w| w >= 0.0));
                store.get_mut(id).data_mut()[0] = -1.0;
            }
            head.project(&mut store);
            for id in head.constrained() {
                assert_eq!(store.get(id).data()[0], 0.0);
            }
        }
    }

    #[test]
    fn proficiency_monotone_on_required_concepts() {
        for kind in [HeadKind::Ncdm, HeadKind::Cdmfkc] {
            let mut store = ParamStore::new();
            let head = Head::register(&mut store, kind, 4, 4, (6, 5), 10).unwrap();
            let e = random(8, 4, 11);
            let q = q_rows(8, 4, 12);
            let mut s = random(8, 4, 13);
            let mut prev = predict(&head, &store, &s, &e, &q);
            for _ in 0..10 {
                for r in 0..8 {
                    for k in 0..4 {
                        if q.get(r, k) == 1.0 {
                            s.set(r, k, s.get(r, k) + 0.3);
                        }
                    }
                }
                let next = predict(&head, &store, &s, &e, &q);
                assert!(next.iter().zip(&prev).all(|(n, p)| n >= p));
                prev = next;
            }
        }
    }

    #[test]
    fn outputs_inside_unit_interval() {
        for kind in HeadKind::ALL {
            let dim = if kind.is_latent() { 6 } else { 4 };
            let mut store = ParamStore::new();
            let head = Head::register(&mut store, kind, dim, 4, (8, 8), 14).unwrap();
            let y = predict(
                &head,
                &store,
                &random(30, dim, 15),
                &random(30, dim, 16),
                &q_rows(30, 4, 17),
            );
            assert!(
                y.iter().all(|&v| v.is_finite() && v > 0.0 && v < 1.0),
                "{kind}"
            );
        }
    }

    const H: f64 = 1e-4;

    #[test]
    fn every_head_passes_gradient_check() {
        for kind in HeadKind::ALL {
            // ≤ 64 parameters each.
            let (dim, hidden) = if kind.is_latent() {
                (3, (1, 1))
            } else {
                (3, (3, 2))
            };
            let mut store = ParamStore::new();
            let head = Head::register(&mut store, kind, dim, 3, hidden, 18).unwrap();
            // Move clamped zeros away from the ReLU-free but clamp-shaped corner.
            let mut values: Vec<Tensor> = store.values().to_vec();
            for v in &mut values {
                for (i, x) in v.data_mut().iter_mut().enumerate() {
                    *x += 0.05 * (i as f64 + 1.0);
                }
            }
            let n_params = values.len();
            assert!(values.iter().map(Tensor::len).sum::<usize>() <= 64);
            let mut inputs = values;
            inputs.push(random(5, dim, 19));
            inputs.push(random(5, dim, 20));
            let q = q_rows(5, 3, 21);
            let labels = Tensor::matrix(5, 1, vec![1.0, 0.0, 1.0, 1.0, 0.0]);
            let report = check_gradients(
                &inputs,
                |t, v| {
                    let b = Binding::from_vars(v[..n_params].to_vec());
                    let qv = t.constant(q.clone());
                    let z = head.logits(t, &b, v[n_params], v[n_params + 1], qv)?;
                    bce_logits(t, z, &labels, BceMode::Sum)
                },
                H,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-7, "{kind}: {report:?}");
        }
    }

    #[test]
    fn transform_cases() {
        let h = random(4, 3, 22);
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let w = t.constant(Tensor::zeros(&[3, 2]));
        let b = t.constant(Tensor::zeros(&[4, 1]));
        let out = transform(&mut t, hv, w, b).unwrap();
        assert_eq!(t.value(out), &Tensor::zeros(&[4, 2]));

        // Identity-extended W_t on rows whose extra columns are zero matches
        // the bypass path on the leading block.
        let mut hz = Tensor::zeros(&[4, 5]);
        for r in 0..4 {
            hz.row_mut(r)[..3].copy_from_slice(h.row(r));
        }
        let mut wi = Tensor::zeros(&[5, 3]);
        for i in 0..3 {
            wi.set(i, i, 1.0);
        }
        let hv = t.constant(hz);
        let w = t.constant(wi);
        let b = t.constant(Tensor::zeros(&[4, 1]));
        let out = transform(&mut t, hv, w, b).unwrap();
        assert_eq!(t.value(out), &h);

        let bad = t.constant(Tensor::zeros(&[3, 1]));
        assert!(transform(&mut t, hv, w, bad).is_err());

        let report = check_gradients(
            &[random(4, 3, 23), random(3, 2, 24), random(4, 1, 25)],
            |t, v| {
                let o = transform(t, v[0], v[1], v[2])?;
                let sq = t.mul(o, o)?;
                Ok(t.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
    }

    #[test]
    fn transform_layer_registers_per_node_bias() {
        let mut store = ParamStore::new();
        let layer = TransformLayer::register(&mut store, 7, 4, 3, 0).unwrap();
        assert_eq!(store.get(layer.w).shape(), &[4, 3]);
        assert_eq!(store.get(layer.b).shape(), &[7, 1]);
    }

    #[test]
    fn bce_cases() {
        let k = 7;
        let v = bce(&vec![0.5; k], &vec![true; k], BceMode::Sum).unwrap();
        assert!((v - k as f64 * 2f64.ln()).abs() < 1e-12);
        let v = bce(&[1.0 - 1e-12, 1e-12], &[true, false], BceMode::Sum).unwrap();
        assert!(v < 1e-10);
        assert!(bce(&[1.0], &[true], BceMode::Sum).is_err());
        assert!(bce(&[0.0], &[false], BceMode::Sum).is_err());
        assert!(bce(&[f64::NAN], &[false], BceMode::Sum).is_err());
        assert!(bce(&[], &[], BceMode::Mean).is_err());
    }

    #[test]
    fn mastery_cases() {
        let m = mastery(HeadKind::Ncdm, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.5));
        assert!(matches!(
            mastery(HeadKind::Irt, &Tensor::zeros(&[1, 1])),
            Err(Error::NotApplicable(_))
        ));
        assert!(matches!(
            mastery(HeadKind::Mirt, &Tensor::zeros(&[1, 1])),
            Err(Error::NotApplicable(_))
        ));
        let s = random(3, 4, 26);
        let base = mastery(HeadKind::Cdmfkc, &s).unwrap();
        let mut up = s.clone();
        up.set(1, 2, up.get(1, 2) + 0.5);
        assert!(mastery(HeadKind::Cdmfkc, &up).unwrap().get(1, 2) >= base.get(1, 2));
    }

    #[test]
    fn head_names_round_trip() {
        for k in HeadKind::ALL {
            assert_eq!(k.to_string().parse::<HeadKind>().unwrap(), k);
        }
        assert!("foo".parse::<HeadKind>().is_err());
        assert_eq!(HeadKind::Irt.default_dim(10), 32);
        assert_eq!(HeadKind::Ncdm.default_dim(10), 10);
    }

    proptest! {
        #[test]
        fn bce_matches_formula(ps in proptest::collection::vec((0.001f64..0.999, any::<bool>()), 1..50)) {
            let (y, r): (Vec<f64>, Vec<bool>) = ps.into_iter().unzip();
            let direct: f64 = y.iter().zip(&r).map(|(&p, &l)| {
                let rv = if l { 1.0 } else { 0.0 };
                -(rv * p.ln() + (1.0 - rv) * (1.0 - p).ln())
            }).sum();
            prop_assert!((bce(&y, &r, BceMode::Sum).unwrap() - direct).abs() < 1e-12 * direct.max(1.0));
            prop_assert!((bce(&y, &r, BceMode::Mean).unwrap() - direct / y.len() as f64).abs() < 1e-12 * direct.max(1.0));

            let logits: Vec<f64> = y.iter().map(|p| (p / (1.0 - p)).ln()).collect();
            let mut t = Tape::new();
            let z = t.constant(Tensor::matrix(y.len(), 1, logits));
            let labels = Tensor::matrix(r.len(), 1, r.iter().map(|&l| f64::from(u8::from(l))).collect());
            let l = bce_logits(&mut t, z, &labels, BceMode::Sum).unwrap();
            prop_assert!((t.value(l).item().unwrap() - direct).abs() < 1e-9 * direct.max(1.0));
        }
    }
}
