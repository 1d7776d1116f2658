//! Principal component projection via SVD of the centred data.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct Pca {
    /// Column means of the fitted data, length D.
    pub mean: Vec<f64>,
    /// Orthonormal basis, D × d; column i is the i-th component.
    pub basis: Tensor,
    /// Sample variance along each component.
    pub variances: Vec<f64>,
    /// Components that were padded because the data has rank < d.
    pub padded: usize,
}

/// Fit on `raw` (n × D) and return the projected rows (n × d) with the fit.
pub fn pca_project(raw: &Tensor, d: usize) -> Result<(Tensor, Pca)> {
    let (n, dim) = (raw.rows(), raw.cols());
    if n <= d {
        return Err(Error::Contract(format!(
            "PCA to {d} dims needs more than {d} rows, got {n}"
        )));
    }
    if dim < d {
        return Err(Error::Contract(format!(
            "PCA to {d} dims from only {dim} features"
        )));
    }
    let mut mean = vec![0.0; dim];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(raw.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, dim, |r, c| raw.get(r, c) - mean[c]);

    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = top * 1e-10 * (n.max(dim) as f64);

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut variances = Vec::with_capacity(d);
    for &i in order.iter().take(d) {
        let s = svd.singular_values[i];
        if s <= tol {
            break;
        }
        columns.push(v_t.row(i).iter().copied().collect());
        variances.push(s * s / (n - 1) as f64);
    }
    let padded = d - columns.len();
    if padded > 0 {
        log::warn!(
            "data has rank {} < {d}; padding with {padded} zero-variance directions",
            columns.len()
        );
        // Gram-Schmidt over the standard basis.
        let mut e = 0;
        while columns.len() < d {
            let mut v = vec![0.0; dim];
            v[e] = 1.0;
            e += 1;
            for _ in 0..2 {
                for c in &columns {
                    let dot: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                columns.push(v);
                variances.push(0.0);
            }
        }
    }
    for c in &mut columns {
        let (imax, _) =
            c.iter().enumerate().fold(
                (0, 0.0),
                |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best },
            );
        if c[imax] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let basis = Tensor::matrix(
        dim,
        d,
        (0..dim)
            .flat_map(|r| columns.iter().map(move |c| c[r]))
            .collect(),
    );
    // nalgebra is column-major, so the transpose's storage is our row-major layout.
    let projected =
        Tensor::matrix(n, dim, centred.transpose().as_slice().to_vec()).matmul(&basis)?;
    Ok((
        projected,
        Pca {
            mean,
            basis,
            variances,
            padded,
        },
    ))
}

impl Pca {
    /// Project new rows with the fitted mean and basis.
    pub fn transform(&self, raw: &Tensor) -> Result<Tensor> {
        if raw.cols() != self.mean.len() {
            return Err(Error::shape(
                "pca transform",
                format!("{} features, fitted on {}", raw.cols(), self.mean.len()),
            ));
        }
        let centred = Tensor::matrix(
            raw.rows(),
            raw.cols(),
            (0..raw.rows())
                .flat_map(|r| {
                    raw.row(r)
                        .iter()
                        .zip(&self.mean)
                        .map(|(x, m)| x - m)
                        .collect::<Vec<_>>()
                })
                .collect(),
        );
        centred.matmul(&self.basis)
    }
}
