//! Dense f64 helpers for the evaluation probes: Cholesky and ridge regression.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::real::Mat;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("need more samples than features ({samples} <= {features})")]
    TooFewSamples { samples: usize, features: usize },
}

/// In-place lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Mat<f64>) -> Result<Mat<f64>, LinalgError> {
    let n = a.rows;
    if a.cols != n {
        return Err(LinalgError::Shape(a.shape(), (n, n)));
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if !(d > 0.0) {
            return Err(LinalgError::NotPositiveDefinite(j));
        }
        let djj = libm::sqrt(d);
        *l.at_mut(j, j) = djj;
        for i in j + 1..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            *l.at_mut(i, j) = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L L^T X = B` for every column of `B`.
pub fn cholesky_solve(l: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let n = l.rows;
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x.at(i, c);
            for k in 0..i {
                s -= l.at(i, k) * x.at(k, c);
            }
            *x.at_mut(i, c) = s / l.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = x.at(i, c);
            for k in i + 1..n {
                s -= l.at(k, i) * x.at(k, c);
            }
            *x.at_mut(i, c) = s / l.at(i, i);
        }
    }
    x
}

/// Ridge fit with an unpenalized intercept:
/// `min ||Y - 1 b^T - X W||^2 + lambda ||W||^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    pub weights: Mat<f64>,
    pub intercept: Vec<f64>,
}

fn column_means(m: &Mat<f64>) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (a, v) in mean.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    let inv = 1.0 / m.rows.max(1) as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

fn centered(m: &Mat<f64>, mean: &[f64]) -> Mat<f64> {
    Mat::from_fn(m.rows, m.cols, |r, c| m.at(r, c) - mean[c])
}

impl Ridge {
    pub fn fit(x: &Mat<f64>, y: &Mat<f64>, lambda: f64) -> Result<Ridge, LinalgError> {
        if x.rows != y.rows {
            return Err(LinalgError::Shape(x.shape(), y.shape()));
        }
        let xm = column_means(x);
        let ym = column_means(y);
        let xc = centered(x, &xm);
        let yc = centered(y, &ym);
        let mut gram = Mat::zeros(x.cols, x.cols);
        crate::real::matmul_tn_acc(&mut gram, &xc, &xc);
        for i in 0..x.cols {
            *gram.at_mut(i, i) += lambda;
        }
        let mut rhs = Mat::zeros(x.cols, y.cols);
        crate::real::matmul_tn_acc(&mut rhs, &xc, &yc);
        let l = cholesky(&gram)?;
        let weights = cholesky_solve(&l, &rhs);
        let intercept = (0..y.cols)
            .map(|c| ym[c] - (0..x.cols).map(|i| xm[i] * weights.at(i, c)).sum::<f64>())
            .collect();
        Ok(Ridge { weights, intercept })
    }

    pub fn predict(&self, x: &Mat<f64>) -> Mat<f64> {
        let mut y = crate::real::matmul(x, &self.weights);
        for r in 0..y.rows {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.intercept) {
                *v += b;
            }
        }
        y
    }
}

/// Coefficient of determination per column: `1 - SS_res / SS_tot`.
/// A constant column scores 0.
pub fn r2_per_column(y: &Mat<f64>, pred: &Mat<f64>) -> Vec<f64> {
    let mean = column_means(y);
    (0..y.cols)
        .map(|c| {
            let (mut res, mut tot) = (0.0, 0.0);
            for r in 0..y.rows {
                let e = y.at(r, c) - pred.at(r, c);
                let d = y.at(r, c) - mean[c];
                res += e * e;
                tot += d * d;
            }
            if tot > 0.0 {
                1.0 - res / tot
            } else {
                0.0
            }
        })
        .collect()
}
