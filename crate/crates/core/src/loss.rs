//! Contextual InfoNCE, auxiliary predictor MSE and their weighted sum.
//!
//! Every loss returns its value together with the gradient of that value
//! with respect to its inputs, so the model backward pass can be driven
//! without a tape.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{OutputGrads, SequenceTrace};
use crate::real::{dot, Mat, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("contrastive loss needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("embedding row {0} has zero norm")]
    ZeroNorm(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("non-finite value in loss input")]
    NonFinite,
    #[error("invalid loss config: {0}")]
    InvalidConfig(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.5,
            lambda: 1.0,
            symmetric: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(LossError::InvalidConfig("tau must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LossError::InvalidConfig("lambda must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub predictor: f64,
    pub total: f64,
    /// Contrastive term of each pair (averaged over the symmetric directions).
    pub per_index: Vec<f64>,
}

/// Combines the two objectives; `lambda = 0` simply drops the predictor term.
pub fn total_loss(contrastive: f64, predictor: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        contrastive,
        predictor,
        total: contrastive + lambda * predictor,
        per_index: Vec::new(),
    }
}

/// InfoNCE value and gradients for one direction.
#[derive(Clone, Debug)]
pub struct InfoNce<T> {
    /// Mean of `per_index`.
    pub loss: T,
    pub per_index: Vec<T>,
    pub d_anchor: Mat<T>,
    pub d_target: Mat<T>,
}

/// Row `i` of `anchors` has its positive at row `i` of `targets`; every
/// other target row is a negative.
pub fn info_nce<T: Real>(
    anchors: &Mat<T>,
    targets: &Mat<T>,
    tau: f64,
) -> Result<InfoNce<T>, LossError> {
    if anchors.shape() != targets.shape() {
        return Err(LossError::Shape(anchors.shape(), targets.shape()));
    }
    let k = anchors.rows;
    if k < 2 {
        return Err(LossError::TooFewPairs(k));
    }
    for m in [anchors, targets] {
        if !m.is_finite() {
            return Err(LossError::NonFinite);
        }
        for r in 0..k {
            if dot(m.row(r), m.row(r)) <= T::cast(1e-24) {
                return Err(LossError::ZeroNorm(r));
            }
        }
    }
    let inv_tau = T::cast(1.0 / tau);
    let inv_k = T::cast(1.0 / k as f64);
    let mut per_index = Vec::with_capacity(k);
    let mut d_anchor = Mat::zeros(k, anchors.cols);
    let mut d_target = Mat::zeros(k, targets.cols);
    let mut logits = vec![T::zero(); k];
    for i in 0..k {
        let a = anchors.row(i);
        let mut max = T::neg_infinity();
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(a, targets.row(j)) * inv_tau;
            if *l > max {
                max = *l;
            }
        }
        let mut z = T::zero();
        for l in &logits {
            z += (*l - max).exp();
        }
        per_index.push(max + z.ln() - logits[i]);
        for j in 0..k {
            let mut g = (logits[j] - max).exp() / z;
            if j == i {
                g -= T::one();
            }
            let g = g * inv_k * inv_tau;
            if g == T::zero() {
                continue;
            }
            let t = targets.row(j);
            for (d, tv) in d_anchor.row_mut(i).iter_mut().zip(t) {
                *d += g * *tv;
            }
            for (d, av) in d_target.row_mut(j).iter_mut().zip(a) {
                *d += g * *av;
            }
        }
    }
    let loss = per_index.iter().copied().sum::<T>() * inv_k;
    Ok(InfoNce {
        loss,
        per_index,
        d_anchor,
        d_target,
    })
}

/// Contrastive loss over a `2K`-row embedding matrix laid out as
/// `(x_0, y_0, x_1, y_1, ...)`. Returns the value, per-pair terms and the
/// gradient on the embeddings.
pub fn symmetric_contrastive<T: Real>(
    embeddings: &Mat<T>,
    symmetric: bool,
    tau: f64,
) -> Result<(T, Vec<T>, Mat<T>), LossError> {
    let n = embeddings.rows;
    let k = n / 2;
    let xs: Vec<usize> = (0..k).map(|i| 2 * i).collect();
    let ys: Vec<usize> = (0..k).map(|i| 2 * i + 1).collect();
    let ex = embeddings.select_rows(&xs);
    let ey = embeddings.select_rows(&ys);
    let fwd = info_nce(&ex, &ey, tau)?;
    let mut grad = Mat::zeros(n, embeddings.cols);
    if !symmetric {
        scatter(&mut grad, &xs, &fwd.d_anchor, T::one());
        scatter(&mut grad, &ys, &fwd.d_target, T::one());
        return Ok((fwd.loss, fwd.per_index, grad));
    }
    let bwd = info_nce(&ey, &ex, tau)?;
    let half = T::cast(0.5);
    scatter(&mut grad, &xs, &fwd.d_anchor, half);
    scatter(&mut grad, &ys, &fwd.d_target, half);
    scatter(&mut grad, &ys, &bwd.d_anchor, half);
    scatter(&mut grad, &xs, &bwd.d_target, half);
    let per = fwd
        .per_index
        .iter()
        .zip(&bwd.per_index)
        .map(|(a, b)| (*a + *b) * half)
        .collect();
    Ok(((fwd.loss + bwd.loss) * half, per, grad))
}

fn scatter<T: Real>(dst: &mut Mat<T>, rows: &[usize], src: &Mat<T>, s: T) {
    for (i, &r) in rows.iter().enumerate() {
        for (d, v) in dst.row_mut(r).iter_mut().zip(src.row(i)) {
            *d += s * *v;
        }
    }
}

/// Mean squared error over all entries, with its gradient.
pub fn predictor_mse<T: Real>(pred: &Mat<T>, target: &Mat<T>) -> Result<(T, Mat<T>), LossError> {
    if pred.shape() != target.shape() {
        return Err(LossError::Shape(pred.shape(), target.shape()));
    }
    if !pred.is_finite() || !target.is_finite() {
        return Err(LossError::NonFinite);
    }
    let count = pred.data.len();
    if count == 0 {
        return Ok((T::zero(), Mat::zeros(pred.rows, pred.cols)));
    }
    let inv = T::cast(1.0 / count as f64);
    let two = T::cast(2.0);
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    let mut sum = T::zero();
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let e = *p - *t;
        sum += e * e;
        *g = two * e * inv;
    }
    Ok((sum * inv, grad))
}

/// Softmax cross-entropy averaged over the given rows of `logits`.
pub fn cross_entropy<T: Real>(
    logits: &Mat<T>,
    rows: &[usize],
    labels: &[usize],
) -> Result<(T, Mat<T>), LossError> {
    if !logits.is_finite() {
        return Err(LossError::NonFinite);
    }
    let c = logits.cols;
    let mut grad = Mat::zeros(logits.rows, c);
    if rows.is_empty() {
        return Ok((T::zero(), grad));
    }
    let inv = T::cast(1.0 / rows.len() as f64);
    let mut total = T::zero();
    for (&r, &label) in rows.iter().zip(labels) {
        if label >= c {
            return Err(LossError::BadLabel { label, classes: c });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|v| (*v - max).exp()).sum();
        total += max + z.ln() - row[label];
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            let mut s = (row[j] - max).exp() / z;
            if j == label {
                s -= T::one();
            }
            *g = s * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Objective of one context sequence: symmetric contrastive on the
/// normalized outputs plus `lambda` times the predictor MSE on the
/// z-scored targets of the context group (`targets` is `K x width`,
/// aligned with `range` inside the predictor output).
pub fn sequence_loss<T: Real>(
    trace: &SequenceTrace<T>,
    targets: Option<(&Mat<T>, Range<usize>)>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGrads<T>), LossError> {
    cfg.validate()?;
    let fwd = &trace.forward;
    let (c, per, d_norm) = symmetric_contrastive(&fwd.normalized, cfg.symmetric, cfg.tau)?;
    let raw = fwd.raw_grad_from_normalized(&d_norm);
    let mut pred_value = 0.0;
    let mut pred_grad = None;
    if let Some((t, range)) = targets {
        let k = trace.k;
        let pred = &trace.predictor.pred;
        let width = range.len();
        if t.shape() != (k, width) {
            return Err(LossError::Shape(t.shape(), (k, width)));
        }
        let anchor_rows: Vec<usize> = (0..k).map(|i| 2 * i).collect();
        let y_rows: Vec<usize> = (0..k).map(|i| 2 * i + 1).collect();
        let slice = |rows: &[usize]| {
            Mat::from_fn(rows.len(), width, |i, j| pred.at(rows[i], range.start + j))
        };
        let (va, ga) = predictor_mse(&slice(&anchor_rows), t)?;
        let mut value = va;
        let mut full = Mat::zeros(pred.rows, pred.cols);
        let lam = T::cast(cfg.lambda);
        let mut put = |rows: &[usize], g: &Mat<T>, s: T| {
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..width {
                    *full.at_mut(r, range.start + j) += s * g.at(i, j);
                }
            }
        };
        if cfg.symmetric {
            let (vy, gy) = predictor_mse(&slice(&y_rows), t)?;
            let half = T::cast(0.5);
            value = (va + vy) * half;
            put(&anchor_rows, &ga, half * lam);
            put(&y_rows, &gy, half * lam);
        } else {
            put(&anchor_rows, &ga, lam);
        }
        pred_value = value.as_f64();
        if cfg.lambda > 0.0 {
            pred_grad = Some(full);
        }
    }
    let mut breakdown = total_loss(c.as_f64(), pred_value, cfg.lambda);
    breakdown.per_index = per.iter().map(|v| v.as_f64()).collect();
    if !breakdown.total.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok((
        breakdown,
        OutputGrads {
            raw,
            pred: pred_grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[&[f64]]) -> Mat<f64> {
        let cols = rows[0].len();
        let mut m = Mat::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            let n = dot(r, r).sqrt();
            for (d, v) in m.row_mut(i).iter_mut().zip(r.iter()) {
                *d = v / n;
            }
        }
        m
    }

    #[test]
    fn identical_targets_give_log_k() {
        let a = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let t = unit_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let r = info_nce(&a, &t, 0.5).unwrap();
        for v in &r.per_index {
            assert!((v - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_pair_hand_value() {
        let a = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = info_nce(&a, &t, 0.5).unwrap();
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((r.per_index[0] - want).abs() < 1e-12);
        assert!((want - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn small_tau_drives_loss_to_zero() {
        let a = unit_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let r = info_nce(&a, &a, 1e-3).unwrap();
        assert!(r.loss < 1e-12);
    }

    #[test]
    fn errors() {
        let a = unit_rows(&[&[1.0, 0.0]]);
        assert_eq!(
            info_nce(&a, &a, 0.5).unwrap_err(),
            LossError::TooFewPairs(1)
        );
        let z = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(info_nce(&z, &z, 0.5).unwrap_err(), LossError::ZeroNorm(1));
        let nan = Mat::from_vec(1, 1, vec![f64::NAN]);
        assert_eq!(predictor_mse(&nan, &nan).unwrap_err(), LossError::NonFinite);
        assert!(LossConfig {
            tau: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            lambda: -1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mse_examples() {
        let t = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        assert_eq!(predictor_mse(&t, &t).unwrap().0, 0.0);
        let mut p = t.clone();
        p.data.iter_mut().for_each(|v| *v += 1.0);
        assert!((predictor_mse(&p, &t).unwrap().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.7, 0.2, 0.0).total, 0.7);
        assert!((total_loss(0.7, 0.2, 1.0).total - 0.9).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_equals_forward_term() {
        let e = unit_rows(&[&[1.0, 0.2], &[0.3, 1.0], &[-1.0, 0.5], &[0.1, -1.0]]);
        let (v, _, _) = symmetric_contrastive(&e, false, 0.5).unwrap();
        let fwd = info_nce(&e.select_rows(&[0, 2]), &e.select_rows(&[1, 3]), 0.5).unwrap();
        assert_eq!(v, fwd.loss);
    }

    #[test]
    fn symmetric_is_stream_swap_invariant() {
        let e = unit_rows(&[
            &[1.0, 0.2],
            &[0.3, 1.0],
            &[-1.0, 0.5],
            &[0.1, -1.0],
            &[0.7, 0.7],
            &[0.0, 1.0],
        ]);
        let swapped = e.select_rows(&[1, 0, 3, 2, 5, 4]);
        let (a, _, _) = symmetric_contrastive(&e, true, 0.5).unwrap();
        let (b, _, _) = symmetric_contrastive(&swapped, true, 0.5).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let l = Mat::<f64>::zeros(2, 4);
        let (v, g) = cross_entropy(&l, &[0, 1], &[1, 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((g.at(0, 1) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(cross_entropy(&l, &[0], &[4]).is_err());
    }
}
