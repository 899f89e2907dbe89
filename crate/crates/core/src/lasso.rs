//! `min_w 0.5 * ||Psi w - y||^2 + mu * ||w||_1` by cyclic coordinate descent.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoParams {
    /// Stop once no coordinate moved by more than this in a sweep...
    pub coord_tol: f64,
    /// ...and the optimality (KKT) residual is below this.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoParams {
    fn default() -> Self {
        Self {
            coord_tol: 1e-6,
            kkt_tol: 1e-7,
            max_sweeps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub weights: Array1<f64>,
    pub sweeps: usize,
    pub kkt_residual: f64,
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

pub fn objective(psi: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>, mu: f64) -> f64 {
    let r = psi.dot(&w) - y;
    0.5 * r.dot(&r) + mu * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// Largest violation of the subgradient optimality conditions, with
/// `g = Psi^T (Psi w - y)`: `|g_j| <= mu` where `w_j = 0`, otherwise
/// `g_j = -mu * sign(w_j)`.
pub fn kkt_residual(psi: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>, mu: f64) -> f64 {
    let grad = psi.t().dot(&(psi.dot(&w) - y));
    grad.iter()
        .zip(w.iter())
        .map(|(&g, &wj)| {
            if wj == 0.0 {
                (g.abs() - mu).max(0.0)
            } else {
                (g + mu * wj.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

pub fn solve_lasso(psi: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, mu: f64, params: &LassoParams) -> Result<LassoSolution> {
    if !(mu >= 0.0) {
        return Err(Error::invalid(format!("mu must be non-negative, got {mu}")));
    }
    if psi.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows for {} targets", psi.nrows(), y.len())));
    }
    if psi.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso inputs".into()));
    }
    let d = psi.ncols();
    let col_sq: Vec<f64> = psi.axis_iter(Axis(1)).map(|c| c.dot(&c)).collect();
    let mut w = Array1::<f64>::zeros(d);
    let mut residual = y.to_owned();
    let mut sweeps = 0;
    let mut kkt = f64::INFINITY;
    while sweeps < params.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..d {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = psi.column(j);
            let old = w[j];
            let rho = col.dot(&residual) + col_sq[j] * old;
            let new = soft_threshold(rho, mu) / col_sq[j];
            let delta = new - old;
            if delta != 0.0 {
                residual.scaled_add(-delta, &col);
                w[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < params.coord_tol {
            kkt = kkt_residual(psi, y, w.view(), mu);
            if kkt <= params.kkt_tol {
                break;
            }
        }
    }
    if !kkt.is_finite() {
        kkt = kkt_residual(psi, y, w.view(), mu);
    }
    Ok(LassoSolution {
        weights: w,
        sweeps,
        kkt_residual: kkt,
    })
}

/// Column standardization result; zero-variance columns are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub matrix: Array2<f64>,
    /// Original column index of every kept column.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Centers each column and scales it to unit (population) variance.
pub fn standardize(x: ArrayView2<'_, f64>) -> Standardized {
    let n = x.nrows() as f64;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut cols = Vec::new();
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            dropped.push(j);
            continue;
        }
        kept.push(j);
        cols.push(col.mapv(|v| (v - mean) / sd));
    }
    let mut matrix = Array2::<f64>::zeros((x.nrows(), kept.len()));
    for (k, c) in cols.into_iter().enumerate() {
        matrix.column_mut(k).assign(&c);
    }
    Standardized { matrix, kept, dropped }
}
