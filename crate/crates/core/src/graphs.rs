//! Bipartite response graph, decomposition by correctness, low-degree
//! relation augmentation and LightGCN propagation.
//!
//! Node ids: students occupy `0..N`, exercises `N..N+M`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::dataset::ResponseDataset;
use crate::error::{Error, Result};
use crate::numerics::{rng, SparseMatrix, Tape, Tensor, Var};

/// Correct and incorrect subgraphs plus their augmented variants.
#[derive(Clone, Debug)]
pub struct SubgraphPair {
    pub num_students: usize,
    pub num_exercises: usize,
    pub a_cor: SparseMatrix,
    pub a_incor: SparseMatrix,
    pub a_cor_aug: SparseMatrix,
    pub a_incor_aug: SparseMatrix,
}

/// Result of augmenting one subgraph.
#[derive(Clone, Debug)]
pub struct Augmentation {
    pub matrix: SparseMatrix,
    /// Student pairs `(s_i, s_j)` that received an edge.
    pub added: Vec<(usize, usize)>,
    /// Low-degree students for which no free partner was found.
    pub skipped: Vec<usize>,
}

fn bipartite(n: usize, m: usize, edges: impl Iterator<Item = (usize, usize)>) -> SparseMatrix {
    let mut entries = Vec::new();
    for (s, e) in edges {
        entries.push((s, n + e, 1.0));
        entries.push((n + e, s, 1.0));
    }
    SparseMatrix::new(n + m, n + m, entries).expect("dataset pairs are unique and in range")
}

/// Split the logs selected by `indices` into correct and incorrect
/// subgraphs. The augmented fields are copies of the originals until
/// [`SubgraphPair::augment`] is called.
pub fn decompose(ds: &ResponseDataset, indices: &[usize]) -> SubgraphPair {
    let (n, m) = (ds.num_students, ds.num_exercises);
    let pick = |want: bool| {
        indices
            .iter()
            .map(|&i| ds.logs[i])
            .filter(move |l| l.correct == want)
            .map(|l| (l.student, l.exercise))
    };
    let a_cor = bipartite(n, m, pick(true));
    let a_incor = bipartite(n, m, pick(false));
    SubgraphPair {
        num_students: n,
        num_exercises: m,
        a_cor_aug: a_cor.clone(),
        a_incor_aug: a_incor.clone(),
        a_cor,
        a_incor,
    }
}

/// Every log of the dataset.
pub fn decompose_all(ds: &ResponseDataset) -> SubgraphPair {
    decompose(ds, &(0..ds.logs.len()).collect::<Vec<_>>())
}

/// The `floor(N/2)` students of smallest degree in `sub`, ties broken by
/// ascending id.
pub fn low_degree_students(sub: &SparseMatrix, n: usize) -> Vec<usize> {
    let mut order: Vec<(usize, usize)> = (0..n).map(|s| (sub.row_entries(s).len(), s)).collect();
    order.sort_unstable();
    order.into_iter().take(n / 2).map(|(_, s)| s).collect()
}

const PARTNER_ATTEMPTS: usize = 10;

/// Give each low-degree student one extra symmetric edge to a uniformly
/// drawn other student. A partner that would duplicate an existing edge is
/// redrawn up to ten times, after which the student is skipped.
pub fn augment(sub: &SparseMatrix, n: usize, seed: u64, stream: u64) -> Result<Augmentation> {
    if n < 2 {
        return Err(Error::Contract(format!(
            "augmentation needs at least 2 students, got {n}"
        )));
    }
    if sub.rows() < n {
        return Err(Error::shape(
            "augment",
            format!("{} nodes < {n} students", sub.rows()),
        ));
    }
    let mut r = rng::stream(seed, "augment", stream);
    let mut present: HashSet<(usize, usize)> = HashSet::new();
    let mut added = Vec::new();
    let mut skipped = Vec::new();
    for s in low_degree_students(sub, n) {
        let mut placed = false;
        for _ in 0..PARTNER_ATTEMPTS {
            // Uniform over S \ {s}.
            let mut p = r.random_range(0..n - 1);
            if p >= s {
                p += 1;
            }
            let key = (s.min(p), s.max(p));
            if sub.contains(s, p) || !present.insert(key) {
                continue;
            }
            added.push((s, p));
            placed = true;
            break;
        }
        if !placed {
            skipped.push(s);
        }
    }
    if !skipped.is_empty() {
        log::warn!(
            "augmentation skipped {} students after {PARTNER_ATTEMPTS} collisions",
            skipped.len()
        );
    }
    let mut entries = sub.entries().to_vec();
    for &(a, b) in &added {
        entries.push((a, b, 1.0));
        entries.push((b, a, 1.0));
    }
    Ok(Augmentation {
        matrix: SparseMatrix::new(sub.rows(), sub.cols(), entries)?,
        added,
        skipped,
    })
}

impl SubgraphPair {
    /// Fill the augmented variants. Correct and incorrect subgraphs use
    /// independent degree profiles and streams `2·round` and `2·round + 1`.
    pub fn augment(&mut self, seed: u64, round: u64) -> Result<(Augmentation, Augmentation)> {
        let cor = augment(&self.a_cor, self.num_students, seed, 2 * round)?;
        let incor = augment(&self.a_incor, self.num_students, seed, 2 * round + 1)?;
        self.a_cor_aug = cor.matrix.clone();
        self.a_incor_aug = incor.matrix.clone();
        Ok((cor, incor))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_students + self.num_exercises
    }

    /// Normalised adjacencies in the order cor, incor, cor_aug, incor_aug.
    pub fn normalized(&self) -> [Arc<SparseMatrix>; 4] {
        [
            &self.a_cor,
            &self.a_incor,
            &self.a_cor_aug,
            &self.a_incor_aug,
        ]
        .map(|a| Arc::new(sym_normalize(a)))
    }

    /// Write all four adjacencies as `row\tcol\tvalue` lists into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, a) in [
            ("a_cor", &self.a_cor),
            ("a_incor", &self.a_incor),
            ("a_cor_aug", &self.a_cor_aug),
            ("a_incor_aug", &self.a_incor_aug),
        ] {
            let mut out = String::new();
            for &(r, c, v) in a.entries() {
                let _ = writeln!(out, "{r}\t{c}\t{v}");
            }
            std::fs::write(dir.join(format!("{name}.tsv")), out)?;
        }
        Ok(())
    }
}

/// `D^{-1/2} A D^{-1/2}` with `d^{-1/2} = 0` for isolated nodes.
pub fn sym_normalize(a: &SparseMatrix) -> SparseMatrix {
    let inv: Vec<f64> = a
        .row_sums()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let entries = a
        .entries()
        .iter()
        .map(|&(r, c, v)| (r, c, v * inv[r] * inv[c]))
        .collect();
    SparseMatrix::new(a.rows(), a.cols(), entries).expect("same pattern as input")
}

/// Mean of `h0, Âh0, …, Â^L h0`, recorded on `tape`.
pub fn lightgcn(tape: &mut Tape, a_hat: &Arc<SparseMatrix>, h0: Var, layers: usize) -> Result<Var> {
    let mut h = h0;
    let mut acc = h0;
    for _ in 0..layers {
        h = tape.spmm(a_hat, h)?;
        acc = tape.add(acc, h)?;
    }
    Ok(tape.scale(acc, 1.0 / (layers + 1) as f64))
}

/// Plain-value LightGCN.
pub fn lightgcn_values(a_hat: &SparseMatrix, h0: &Tensor, layers: usize) -> Result<Tensor> {
    let mut h = h0.clone();
    let mut acc = h0.clone();
    for _ in 0..layers {
        h = a_hat.spmm(&h)?;
        acc.add_assign(&h);
    }
    let k = 1.0 / (layers + 1) as f64;
    Ok(acc.map(|x| x * k))
}
