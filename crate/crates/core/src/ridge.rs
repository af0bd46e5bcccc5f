//! L2-regularised linear regression solved through a Cholesky factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
}

impl RidgeModel {
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.predict_one(x)).collect()
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Minimises `‖y − Xw − b‖² + α‖w‖²`. With `fit_intercept`, `X` and `y` are
/// centred first and `b = ȳ − x̄ᵀw`; otherwise `b = 0`.
///
/// When `n < D` the dual form `w = Xᵀ(XXᵀ + αI)⁻¹y` is used, which is the
/// same solution with a smaller system.
pub fn ridge_fit(xs: &[Vec<f64>], y: &[f64], alpha: f64, fit_intercept: bool) -> Result<RidgeModel> {
    let n = xs.len();
    if n == 0 || n != y.len() {
        return Err(Error::Insufficient(format!("{n} rows for {} targets", y.len())));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!("ridge alpha must be ≥ 0, got {alpha}")));
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ridge rows must share a positive width".into()));
    }
    if xs.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge input"));
    }
    let (x_mean, y_mean) = if fit_intercept {
        let xm: Vec<f64> = (0..d).map(|j| xs.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        (xm, y.iter().sum::<f64>() / n as f64)
    } else {
        (vec![0.0; d], 0.0)
    };
    let x = DMatrix::from_fn(n, d, |i, j| xs[i][j] - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let w = if n >= d {
        let mut a = x.transpose() * &x;
        a.iter_mut().step_by(d + 1).for_each(|v| *v += alpha);
        solve_spd(a, &(x.transpose() * &yc), alpha)?
    } else {
        let mut k = &x * x.transpose();
        k.iter_mut().step_by(n + 1).for_each(|v| *v += alpha);
        x.transpose() * solve_spd(k, &yc, alpha)?
    };
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - weights.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(RidgeModel { weights, intercept, alpha })
}

/// Cholesky solve that also rejects numerically rank-deficient systems:
/// a pivot below `1e-12` of the largest diagonal entry counts as singular.
fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    let singular = || Error::Singular(format!("ridge system with alpha={alpha} is not positive definite"));
    let scale = a.diagonal().max();
    if !(scale > 0.0) {
        return Err(singular());
    }
    let chol = a.cholesky().ok_or_else(singular)?;
    let l = chol.l_dirty();
    if (0..l.nrows()).any(|i| l[(i, i)] * l[(i, i)] < 1e-12 * scale) {
        return Err(singular());
    }
    let x = chol.solve(b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    Ok(x)
}
