//! Coordinate-list sparse matrices kept sorted by (row, col).

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
    row_ptr: Vec<usize>,
}

impl SparseMatrix {
    /// Validates indices and rejects duplicate coordinates.
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::Contract(format!(
                "sparse entry ({r}, {c}) outside {rows}x{cols}"
            )));
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::Contract(format!(
                "duplicate sparse entry ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut row_ptr = vec![0; rows + 1];
        for &(r, _, _) in &entries {
            row_ptr[r + 1] += 1;
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            entries,
            row_ptr,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            entries: Vec::new(),
            row_ptr: vec![0; rows + 1],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn row_entries(&self, r: usize) -> &[(usize, usize, f64)] {
        &self.entries[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = self.row_entries(r);
        match row.binary_search_by(|e| e.1.cmp(&c)) {
            Ok(i) => row[i].2,
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row_entries(r)
            .binary_search_by(|e| e.1.cmp(&c))
            .is_ok()
    }

    /// Row sums.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row_entries(r).iter().map(|e| e.2).sum())
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.entries.iter().all(|&(r, c, v)| self.get(c, r) == v)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for &(r, c, v) in &self.entries {
            t.set(r, c, v);
        }
        t
    }

    pub fn transpose(&self) -> SparseMatrix {
        let entries = self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect();
        SparseMatrix::new(self.cols, self.rows, entries).expect("transpose keeps validity")
    }

    /// Sparse × dense product.
    pub fn spmm(&self, dense: &Tensor) -> Result<Tensor> {
        if dense.rows() != self.cols {
            return Err(Error::shape(
                "spmm",
                format!(
                    "{}x{} sparse times {}x{}",
                    self.rows,
                    self.cols,
                    dense.rows(),
                    dense.cols()
                ),
            ));
        }
        let d = dense.cols();
        let mut out = Tensor::zeros(&[self.rows, d]);
        let src = dense.data();
        let dst = out.data_mut();
        for &(r, c, v) in &self.entries {
            let o = &mut dst[r * d..(r + 1) * d];
            let s = &src[c * d..(c + 1) * d];
            for (a, b) in o.iter_mut().zip(s) {
                *a += v * b;
            }
        }
        Ok(out)
    }

    /// `selfᵀ × dense`, used for gradients.
    pub(crate) fn spmm_t(&self, dense: &Tensor) -> Tensor {
        let d = dense.cols();
        let mut out = Tensor::zeros(&[self.cols, d]);
        let src = dense.data();
        let dst = out.data_mut();
        for &(r, c, v) in &self.entries {
            let o = &mut dst[c * d..(c + 1) * d];
            let s = &src[r * d..(r + 1) * d];
            for (a, b) in o.iter_mut().zip(s) {
                *a += v * b;
            }
        }
        out
    }
}
