//! Cosine InfoNCE, relation and semantic alignment losses, and the fusion
//! network combining the correct and incorrect views.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng::StreamRng, Tape, Var};

/// Which entities serve as negatives for an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePolicy {
    /// Every other row.
    FullSet,
    /// Rows are shuffled into batches of this size; negatives come from the
    /// anchor's batch.
    InBatch(usize),
    /// Full set up to `AUTO_FULL_SET_LIMIT` rows, batches of 4096 beyond.
    Auto,
}

pub const AUTO_FULL_SET_LIMIT: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub temperature: f64,
    pub negatives: NegativePolicy,
    /// Lower bound on the norm used for cosine similarity. Zero means a
    /// zero-norm row is an error.
    pub norm_floor: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            temperature: 0.5,
            negatives: NegativePolicy::Auto,
            norm_floor: 0.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if matches!(self.negatives, NegativePolicy::InBatch(0)) {
            return Err(Error::Config("in-batch size must be positive".into()));
        }
        if self.norm_floor < 0.0 {
            return Err(Error::Config("norm_floor must be non-negative".into()));
        }
        Ok(())
    }
}

/// `−Σ_i log softmax_j(cos(a_i, p_j)/τ)[i]` over the full set of rows.
pub fn info_nce(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    cfg: &AlignmentConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (sa, sp) = (
        tape.value(anchors).shape().to_vec(),
        tape.value(positives).shape().to_vec(),
    );
    if sa != sp {
        return Err(Error::shape("info_nce", format!("{sa:?} vs {sp:?}")));
    }
    let a = tape.normalize_rows_floor(anchors, cfg.norm_floor)?;
    let p = tape.normalize_rows_floor(positives, cfg.norm_floor)?;
    let sim = tape.matmul_nt(a, p)?;
    let logits = tape.scale(sim, 1.0 / cfg.temperature);
    let lse = tape.logsumexp_rows(logits);
    let pos = tape.diag(logits)?;
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.sum(per_row))
}

/// InfoNCE under `cfg.negatives`. The in-batch partition is drawn from
/// `rng`; with one batch covering every row it equals [`info_nce`].
pub fn info_nce_with_policy(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    cfg: &AlignmentConfig,
    rng: &mut StreamRng,
) -> Result<Var> {
    let n = tape.value(anchors).rows();
    let batch = match cfg.negatives {
        NegativePolicy::FullSet => n,
        NegativePolicy::InBatch(b) => b,
        NegativePolicy::Auto if n <= AUTO_FULL_SET_LIMIT => n,
        NegativePolicy::Auto => 4096,
    };
    if batch >= n {
        return info_nce(tape, anchors, positives, cfg);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut total: Option<Var> = None;
    for chunk in order.chunks(batch) {
        let a = tape.gather_rows(anchors, chunk)?;
        let p = tape.gather_rows(positives, chunk)?;
        let l = info_nce(tape, a, p, cfg)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("n > batch > 0 implies a chunk"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Linear,
}

/// `act([h_cor ⊕ h_incor] W_1 + b_1)`, followed by further `d → d` layers
/// when more than one `(W, b)` pair is given. Biases are `1 × d` rows.
pub fn fuse(
    tape: &mut Tape,
    h_cor: Var,
    h_incor: Var,
    layers: &[(Var, Var)],
    activation: Activation,
) -> Result<Var> {
    let (sc, si) = (
        tape.value(h_cor).shape().to_vec(),
        tape.value(h_incor).shape().to_vec(),
    );
    if sc != si {
        return Err(Error::shape("fuse", format!("{sc:?} vs {si:?}")));
    }
    let mut x = tape.concat_cols(h_cor, h_incor)?;
    for &(w, b) in layers {
        let z = tape.matmul(x, w)?;
        let z = tape.add_row(z, b)?;
        x = match activation {
            Activation::Relu => tape.relu(z),
            Activation::Linear => z,
        };
    }
    Ok(x)
}

/// Propagated embeddings of one subgraph: original and (refined) augmented.
#[derive(Clone, Copy, Debug)]
pub struct SubgraphViews {
    pub original: Var,
    pub augmented: Var,
}

/// Σ over subgraphs of InfoNCE(student rows) + InfoNCE(exercise rows), with
/// the original view as anchors. Rows `0..num_students` are students.
pub fn relation_loss(
    tape: &mut Tape,
    views: &[SubgraphViews],
    num_students: usize,
    cfg: &AlignmentConfig,
    rng: &mut StreamRng,
) -> Result<Var> {
    let mut total = tape.constant(crate::numerics::Tensor::scalar(0.0));
    for v in views {
        let n = tape.value(v.original).rows();
        let (os, oe) = split_entities(tape, v.original, num_students, n)?;
        let (as_, ae) = split_entities(tape, v.augmented, num_students, n)?;
        let ls = info_nce_with_policy(tape, os, as_, cfg, rng)?;
        let le = info_nce_with_policy(tape, oe, ae, cfg, rng)?;
        total = tape.add(total, ls)?;
        total = tape.add(total, le)?;
    }
    Ok(total)
}

/// InfoNCE(fused students, semantic students) + InfoNCE(fused exercises,
/// semantic exercises). `semantic` stacks student rows over exercise rows.
pub fn semantic_loss(
    tape: &mut Tape,
    fused: Var,
    semantic: Var,
    num_students: usize,
    cfg: &AlignmentConfig,
    rng: &mut StreamRng,
) -> Result<Var> {
    let n = tape.value(fused).rows();
    let (fs, fe) = split_entities(tape, fused, num_students, n)?;
    let (vs, ve) = split_entities(tape, semantic, num_students, n)?;
    let ls = info_nce_with_policy(tape, fs, vs, cfg, rng)?;
    let le = info_nce_with_policy(tape, fe, ve, cfg, rng)?;
    tape.add(ls, le)
}

fn split_entities(tape: &mut Tape, x: Var, num_students: usize, n: usize) -> Result<(Var, Var)> {
    if tape.value(x).rows() != n || num_students > n {
        return Err(Error::shape(
            "alignment",
            format!(
                "{} rows, expected {n} with {num_students} students",
                tape.value(x).rows()
            ),
        ));
    }
    Ok((
        tape.slice_rows(x, 0, num_students)?,
        tape.slice_rows(x, num_students, n)?,
    ))
}
