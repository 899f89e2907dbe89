//! Depth reduction with nonnegative matrix factorization and inversion back
//! to activation space.
//!
//! Rows of the factorized matrix are spatial locations of activation maps:
//! `V [N, d] ~ S [N, r] * W [r, d]`. Components `W` are the relevant
//! features; interpretation maps are `S * W` with `W` frozen.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::DatasetView;
use crate::error::{Error, Result};

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfParams {
    pub r: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for NmfParams {
    fn default() -> Self {
        Self {
            r: 8,
            max_iter: 200,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    /// `[r, d]`, nonnegative.
    pub components: Array2<f64>,
    pub fit_loss: f64,
    pub iterations_run: usize,
    /// Frobenius loss after initialization and after every iteration.
    pub loss_curve: Vec<f64>,
}

impl NmfModel {
    pub fn r(&self) -> usize {
        self.components.nrows()
    }

    pub fn depth(&self) -> usize {
        self.components.ncols()
    }
}

fn frobenius_residual(v: ArrayView2<'_, f64>, s: &Array2<f64>, w: &Array2<f64>) -> f64 {
    let approx = s.dot(w);
    v.iter()
        .zip(approx.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn init_scale(v: ArrayView2<'_, f64>, r: usize) -> f64 {
    let mean = v.mean().unwrap_or(0.0);
    (mean / r as f64).sqrt()
}

/// `S <- S * (V W^T) / (S W W^T)`
fn update_coefficients(v: ArrayView2<'_, f64>, s: &mut Array2<f64>, w: &Array2<f64>) {
    let numer = v.dot(&w.t());
    let gram = w.dot(&w.t());
    let denom = s.dot(&gram);
    ndarray::Zip::from(s)
        .and(&numer)
        .and(&denom)
        .for_each(|s, &n, &d| *s *= n / (d + EPS));
}

/// `W <- W * (S^T V) / (S^T S W)`
fn update_components_with(stv: &Array2<f64>, sts: &Array2<f64>, w: &mut Array2<f64>) {
    let denom = sts.dot(&*w);
    ndarray::Zip::from(w)
        .and(stv)
        .and(&denom)
        .for_each(|w, &n, &d| *w *= n / (d + EPS));
}

fn check_nonnegative(v: ArrayView2<'_, f64>) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("NMF input".into()));
    }
    if v.iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("NMF input has negative entries"));
    }
    Ok(())
}

/// Lee-Seung multiplicative updates on the Frobenius loss.
///
/// Coefficients start at a constant so the fit does not depend on row
/// order; components start seeded uniform, both scaled by
/// `sqrt(mean(V) / r)`.
pub fn fit_nmf(v: ArrayView2<'_, f64>, params: &NmfParams) -> Result<NmfModel> {
    let (n, d) = v.dim();
    check_nonnegative(v)?;
    if params.r == 0 || params.r > n.min(d) {
        return Err(Error::invalid(format!(
            "component count {} outside 1..={}",
            params.r,
            n.min(d)
        )));
    }
    let scale = init_scale(v, params.r);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut w = Array2::from_shape_fn((params.r, d), |_| scale * rng.random::<f64>());
    let mut s = Array2::from_elem((n, params.r), scale);

    let v_sq: f64 = v.iter().map(|x| x * x).sum();
    let mut loss = frobenius_residual(v, &s, &w);
    let mut curve = vec![loss];
    let mut iterations = 0;
    while iterations < params.max_iter && loss > 0.0 {
        update_coefficients(v, &mut s, &w);
        let stv = s.t().dot(&v);
        let sts = s.t().dot(&s);
        update_components_with(&stv, &sts, &mut w);
        iterations += 1;
        // ||V - S W||^2 = ||V||^2 - 2 <S^T V, W> + <S^T S, W W^T>
        let cross: f64 = stv.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        let quad: f64 = sts.iter().zip(w.dot(&w.t()).iter()).map(|(a, b)| a * b).sum();
        let expanded = v_sq - 2.0 * cross + quad;
        // The expansion cancels badly near an exact fit.
        let next = if expanded > 1e-4 * v_sq {
            expanded.sqrt()
        } else {
            frobenius_residual(v, &s, &w)
        };
        curve.push(next);
        let rel = (loss - next) / loss;
        loss = next;
        if rel < params.tol {
            break;
        }
    }
    Ok(NmfModel {
        components: w,
        fit_loss: loss,
        iterations_run: iterations,
        loss_curve: curve,
    })
}

/// Nonnegative coefficients for `v` against frozen components.
pub fn project(v: ArrayView2<'_, f64>, model: &NmfModel, max_iter: usize, tol: f64) -> Result<Array2<f64>> {
    check_nonnegative(v)?;
    if v.ncols() != model.depth() {
        return Err(Error::Shape(format!(
            "input depth {} does not match component depth {}",
            v.ncols(),
            model.depth()
        )));
    }
    let w = &model.components;
    let scale = init_scale(v, model.r());
    let mut s = Array2::from_elem((v.nrows(), model.r()), scale);
    // W is frozen, so V W^T and W W^T are fixed and the residual expands to
    // ||V||^2 - 2 <S, V W^T> + <S^T S, W W^T>.
    let numer = v.dot(&w.t());
    let gram = w.dot(&w.t());
    let v_sq: f64 = v.iter().map(|x| x * x).sum();
    let residual = |s: &Array2<f64>| {
        let cross: f64 = s.iter().zip(numer.iter()).map(|(a, b)| a * b).sum();
        let quad: f64 = s.t().dot(s).iter().zip(gram.iter()).map(|(a, b)| a * b).sum();
        let expanded = v_sq - 2.0 * cross + quad;
        if expanded > 1e-4 * v_sq {
            expanded.sqrt()
        } else {
            frobenius_residual(v, s, w)
        }
    };
    let mut loss = residual(&s);
    for _ in 0..max_iter {
        if loss == 0.0 {
            break;
        }
        let denom = s.dot(&gram);
        ndarray::Zip::from(&mut s)
            .and(&numer)
            .and(&denom)
            .for_each(|s, &n, &d| *s *= n / (d + EPS));
        let next = residual(&s);
        let rel = (loss - next) / loss;
        loss = next;
        if rel < tol {
            break;
        }
    }
    Ok(s)
}

/// Clamps activations at zero and flattens `[n, h, w, d]` to `[(n*h*w), d]`.
pub fn clamp_flatten(t: ArrayView4<'_, f32>) -> Array2<f64> {
    let (n, h, w, d) = t.dim();
    let owned = t.mapv(|x| f64::from(x).max(0.0));
    owned
        .into_shape_with_order((n * h * w, d))
        .expect("contiguous after mapv")
}

/// Reduce-then-invert maps `S * W`, shaped like the input tensor.
pub fn ice_maps(t: ArrayView4<'_, f32>, model: &NmfModel, params: &NmfParams) -> Result<Array4<f64>> {
    let (n, h, w, d) = t.dim();
    if d != model.depth() {
        return Err(Error::Shape(format!(
            "tensor depth {d} does not match component depth {}",
            model.depth()
        )));
    }
    let v = clamp_flatten(t);
    let s = project(v.view(), model, params.max_iter, params.tol)?;
    Ok(s.dot(&model.components)
        .into_shape_with_order((n, h, w, d))
        .expect("same element count"))
}

/// One factorization per class, fit on that class's samples of the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IceFeatures {
    pub layer_id: String,
    pub params: NmfParams,
    pub per_class: BTreeMap<usize, NmfModel>,
}

pub fn fit_ice(view: &DatasetView<'_>, layer_id: &str, params: &NmfParams) -> Result<IceFeatures> {
    let tensor = view.tensor(layer_id)?;
    let labels = view.labels();
    let parts = crate::activation::partition_by_class(&labels);
    let fits: Result<Vec<(usize, NmfModel)>> = parts
        .into_par_iter()
        .map(|(c, idx)| {
            let sub = tensor.select(&idx);
            let v = clamp_flatten(sub.view());
            let r = params.r.min(v.nrows()).min(v.ncols());
            let p = NmfParams { r, ..params.clone() };
            Ok((c, fit_nmf(v.view(), &p)?))
        })
        .collect();
    Ok(IceFeatures {
        layer_id: layer_id.to_string(),
        params: params.clone(),
        per_class: fits?.into_iter().collect(),
    })
}
