//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints. Only nodes that depend on a leaf are visited.

use std::sync::Arc;

use super::sparse::SparseMatrix;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    SpMM(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    /// Divisor per row and whether it was clamped to the floor.
    NormalizeRows(Var, Vec<(f64, bool)>),
    LogSumExpRows(Var),
    Diag(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input (parameter or anything we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, b: Var) -> Result<Var> {
        let v = s.spmm(self.value(b))?;
        let ng = self.ng(b);
        Ok(self.push(v, Op::SpMM(Arc::clone(s), b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a (r×c) + b (1×c)`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.len() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut v = av.clone();
        let c = av.cols();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i % c];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::AddRow(a, b), ng))
    }

    /// `a (r×c) + b (r×1)`, broadcasting `b` over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.len() != av.rows() {
            return Err(Error::shape(
                "add_col",
                format!("{:?} + col {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut v = av.clone();
        let c = av.cols();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i / c];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::AddCol(a, b), ng))
    }

    /// `a (r×c) ⊙ b (r×1)`, broadcasting `b` over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.len() != av.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * col {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut v = av.clone();
        let c = av.cols().max(1);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= bv.data()[i / c];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MulCol(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", av.shape(), bv.shape()),
            ));
        }
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(r, ca + cb, data), Op::ConcatCols(a, b), ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape(
                "concat_rows",
                format!("{:?} over {:?}", av.shape(), bv.shape()),
            ));
        }
        let v = Tensor::vstack(&[av, bv])?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatRows(a, b), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {:?}", av.shape()),
            ));
        }
        let v = av.slice_rows(start, end);
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceRows(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {:?}", av.shape()),
            ));
        }
        let v = av.gather_rows(idx);
        let ng = self.ng(a);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    /// Sum across columns: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::matrix(
            t.rows(),
            1,
            (0..t.rows()).map(|r| t.row(r).iter().sum()).collect(),
        );
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Divide every row by its Euclidean norm. Zero rows are a contract error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.normalize_rows_floor(a, 0.0)
    }

    /// Divide every row by `max(‖row‖, floor)`. With `floor == 0` a zero row
    /// is a contract error; with a positive floor it stays (near) zero.
    pub fn normalize_rows_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        let t = self.value(a);
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.clone();
        for r in 0..t.rows() {
            let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if !n.is_finite() || (n == 0.0 && floor <= 0.0) {
                return Err(Error::Contract(format!(
                    "row {r} has norm {n}; cosine similarity is undefined"
                )));
            }
            let clamped = n < floor;
            let div = if clamped { floor } else { n };
            out.row_mut(r).iter_mut().for_each(|x| *x /= div);
            norms.push((div, clamped));
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::NormalizeRows(a, norms), ng))
    }

    /// Row-wise log-sum-exp: `r×c → r×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::matrix(
            t.rows(),
            1,
            (0..t.rows())
                .map(|r| {
                    let row = t.row(r);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect(),
        );
        let ng = self.ng(a);
        self.push(v, Op::LogSumExpRows(a), ng)
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != t.cols() {
            return Err(Error::shape("diag", format!("{:?} not square", t.shape())));
        }
        let v = Tensor::matrix(t.rows(), 1, (0..t.rows()).map(|i| t.get(i, i)).collect());
        let ng = self.ng(a);
        Ok(self.push(v, Op::Diag(a), ng))
    }

    /// Adjoints of `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` for each of `params`; zeros for unreachable ones.
    pub fn gradients_for(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.backward(loss)?;
        Ok(params.iter().map(|&p| g.get(self, p)).collect())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_nt(val(*b)).expect("shapes checked"));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).matmul_tn(g).expect("shapes checked"));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul(val(*b)).expect("shapes checked"));
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_tn(val(*a)).expect("shapes checked"));
                }
            }
            Op::SpMM(s, b) => acc(*b, s.spmm_t(g)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y).expect("same shape"));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y).expect("same shape"));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("len"));
                }
            }
            Op::AddCol(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    let db = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("len"));
                }
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = g.cols().max(1);
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (i, x) in da.data_mut().iter_mut().enumerate() {
                        *x *= bv.data()[i / c];
                    }
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let db = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).expect("len"));
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => {
                let d = g
                    .zip_map(&node.value, |x, y| x * y * (1.0 - y))
                    .expect("same shape");
                acc(*a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })
                    .expect("same shape");
                acc(*a, d);
            }
            Op::Silu(a) => {
                let d = g
                    .zip_map(val(*a), |x, y| {
                        let s = sigmoid(y);
                        x * s * (1.0 + y * (1.0 - s))
                    })
                    .expect("same shape");
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let d = g
                    .zip_map(val(*a), |x, y| x * sigmoid(y))
                    .expect("same shape");
                acc(*a, d);
            }
            Op::ConcatRows(a, b) => {
                let ra = val(*a).rows();
                if self.ng(*a) {
                    acc(*a, g.slice_rows(0, ra));
                }
                if self.ng(*b) {
                    acc(*b, g.slice_rows(ra, g.rows()));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let r = g.rows();
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        da.extend_from_slice(&g.row(i)[..ca]);
                    }
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), da).expect("len"));
                }
                if self.ng(*b) {
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        db.extend_from_slice(&g.row(i)[ca..]);
                    }
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("len"));
                }
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let c = src.cols();
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                let c = src.cols();
                let mut d = Tensor::zeros(src.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (x, y) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                acc(*a, Tensor::filled(val(*a).shape(), s));
            }
            Op::MeanAll(a) => {
                let src = val(*a);
                let s = g.data()[0] / src.len().max(1) as f64;
                acc(*a, Tensor::filled(src.shape(), s));
            }
            Op::SumCols(a) => {
                let src = val(*a);
                let c = src.cols();
                let d = (0..src.len()).map(|i| g.data()[i / c]).collect();
                acc(*a, Tensor::new(src.shape().to_vec(), d).expect("len"));
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for (r, &(n, clamped)) in norms.iter().enumerate() {
                    if clamped {
                        d.row_mut(r).iter_mut().for_each(|x| *x /= n);
                        continue;
                    }
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for (x, (yy, gg)) in d.row_mut(r).iter_mut().zip(y.row(r).iter().zip(g.row(r)))
                    {
                        *x = (gg - yy * dot) / n;
                    }
                }
                acc(*a, d);
            }
            Op::LogSumExpRows(a) => {
                let src = val(*a);
                let mut d = src.clone();
                for r in 0..src.rows() {
                    let lse = node.value.data()[r];
                    let gr = g.data()[r];
                    for x in d.row_mut(r) {
                        *x = gr * (*x - lse).exp();
                    }
                }
                acc(*a, d);
            }
            Op::Diag(a) => {
                let src = val(*a);
                let mut d = Tensor::zeros(src.shape());
                for i in 0..src.rows() {
                    d.set(i, i, g.data()[i]);
                }
                acc(*a, d);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros shaped like its value when `v` is not on
    /// the path to the loss.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, relative_error};

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 5.0]));
        let l = t.sum(p);
        let g = t.gradients_for(l, &[p]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let sq = t.mul(p, p).unwrap();
        let l = t.sum(sq);
        let g = t.gradients_for(l, &[p]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let q = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]));
        let l = t.sum(p);
        let g = t.gradients_for(l, &[p, q]).unwrap();
        assert_eq!(g[1], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!(matches!(t.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let build = |t: &mut Tape, which: u8| {
            let p = t.leaf(Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.2]));
            let a = t.sigmoid(p);
            let la = t.sum(a);
            let b = t.softplus(p);
            let lb = t.mean(b);
            let l = match which {
                0 => la,
                1 => lb,
                _ => {
                    let s = t.add(la, lb).unwrap();
                    s
                }
            };
            (p, l)
        };
        let mut g = Vec::new();
        for w in 0..3 {
            let mut t = Tape::new();
            let (p, l) = build(&mut t, w);
            g.push(t.gradients_for(l, &[p]).unwrap().remove(0));
        }
        for i in 0..4 {
            assert!((g[0].data()[i] + g[1].data()[i] - g[2].data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_rows_stacks_and_splits_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = t.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let c = t.concat_rows(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m = t.mul(c, w).unwrap();
        let l = t.sum(m);
        let g = t.gradients_for(l, &[a, b]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 2.0]);
        assert_eq!(g[1].data(), &[3.0, 4.0, 5.0, 6.0]);
        let d = t.leaf(Tensor::matrix(1, 3, vec![0.0; 3]));
        assert!(t.concat_rows(a, d).is_err());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let sparse = Arc::new(
            SparseMatrix::new(
                3,
                3,
                vec![(0, 1, 0.5), (1, 0, 0.5), (1, 2, 0.7), (2, 1, 0.7)],
            )
            .unwrap(),
        );
        let inputs = vec![
            Tensor::matrix(3, 2, vec![0.3, -0.4, 0.9, 0.1, -0.5, 0.8]),
            Tensor::matrix(2, 3, vec![0.2, 0.6, -0.3, 0.7, -0.1, 0.4]),
            Tensor::matrix(1, 2, vec![0.05, -0.2]),
            Tensor::matrix(3, 1, vec![0.4, -0.6, 1.3]),
        ];
        let f = |t: &mut Tape, p: &[Var]| -> Result<Var> {
            let (a, w, row, col) = (p[0], p[1], p[2], p[3]);
            let h = t.spmm(&sparse, a)?;
            let h = t.add_row(h, row)?;
            let h = t.silu(h);
            let z = t.matmul(h, w)?; // 3x3
            let z = t.add_col(z, col)?;
            let s = t.sigmoid(z);
            let r = t.relu(z);
            let sp = t.softplus(z);
            let m = t.mul(s, sp)?;
            let m = t.sub(m, r)?;
            let m = t.mul_col(m, col)?;
            let n = t.normalize_rows(m)?;
            let nt = t.matmul_nt(n, n)?;
            let nt = t.scale(nt, 1.7);
            let lse = t.logsumexp_rows(nt);
            let dg = t.diag(nt)?;
            let c = t.concat_cols(lse, dg)?;
            let c = t.add_scalar(c, 0.3);
            let sq = dg_pair(t, c)?;
            let c = t.concat_rows(c, sq)?;
            let g = t.gather_rows(c, &[2, 0, 5])?;
            let sl = t.slice_rows(g, 1, 3)?;
            let sc = t.sum_cols(sl);
            let l1 = t.sum(sc);
            let l2 = t.mean(g);
            t.add(l1, l2)
        };
        fn dg_pair(t: &mut Tape, c: Var) -> Result<Var> {
            let sq = t.mul(c, c)?;
            t.slice_rows(sq, 0, 3)
        }
        let report = check_gradients(&inputs, f, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
        assert!(relative_error(&[1.0], &[1.0]) == 0.0);
    }
}
