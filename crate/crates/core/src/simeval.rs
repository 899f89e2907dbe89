//! Similarity between interpretation maps derived from different data
//! budgets: a partial-whitening angular shape distance, its class average,
//! and mean/std summaries across budgets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Budgets summarized by [`robustness_summary`].
pub const ROBUSTNESS_BUDGETS: [f64; 5] = [0.10, 0.20, 0.30, 0.40, 0.50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetricConfig {
    /// 0 is full whitening, 1 is none.
    pub alpha: f64,
    pub max_rows: usize,
    pub seed: u64,
    /// Covariance ridge; `None` uses `1e-6 * trace(cov) / p`.
    #[serde(default)]
    pub ridge: Option<f64>,
}

impl Default for ShapeMetricConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            max_rows: 20_000,
            seed: 0,
            ridge: None,
        }
    }
}

impl ShapeMetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0) {
                return Err(Error::invalid("ridge must be non-negative"));
            }
        }
        Ok(())
    }
}

/// `[n, h, w, d] -> [(n*h*w), d]`, sample-major then spatial row-major.
pub fn flatten_maps(z: ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, h, w, d) = z.dim();
    z.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, d))
        .expect("standard layout")
}

pub fn unflatten_maps(flat: Array2<f64>, n: usize, h: usize, w: usize) -> Result<Array4<f64>> {
    let d = flat.ncols();
    flat.into_shape_with_order((n, h, w, d))
        .map_err(|e| Error::Shape(e.to_string()))
}

fn pad_columns(x: ArrayView2<'_, f64>, width: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((x.nrows(), width));
    out.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
    out
}

fn center_columns(x: &mut Array2<f64>) {
    if let Some(mean) = x.mean_axis(Axis(0)) {
        *x -= &mean;
    }
}

fn frobenius(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn to_dmatrix(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

fn from_dmatrix(x: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), x.ncols()), |(i, j)| x[(i, j)])
}

/// `X ((1 - alpha) (cov + ridge I)^{-1/2} + alpha I)` for centered `X`.
fn partial_whiten(x: &Array2<f64>, alpha: f64, ridge: Option<f64>) -> Array2<f64> {
    let (n, p) = x.dim();
    if alpha >= 1.0 {
        return x.clone();
    }
    let cov = x.t().dot(x) / n as f64;
    let trace: f64 = cov.diag().sum();
    let ridge = ridge.unwrap_or(1e-6 * trace / p as f64).max(1e-12);
    let eig = SymmetricEigen::new(to_dmatrix(&cov));
    let inv_sqrt: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&lam| 1.0 / (lam.max(0.0) + ridge).sqrt())
        .collect();
    let vecs = from_dmatrix(&eig.eigenvectors);
    let scaled = Array2::from_shape_fn((p, p), |(i, k)| vecs[[i, k]] * inv_sqrt[k]);
    let mut transform = scaled.dot(&vecs.t()) * (1.0 - alpha);
    for i in 0..p {
        transform[[i, i]] += alpha;
    }
    x.dot(&transform)
}

/// Angular distance in `[0, pi]` after centering, partial whitening and
/// optimal orthogonal alignment of `Y` onto `X`.
pub fn angular_shape_distance(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, cfg: &ShapeMetricConfig) -> Result<f64> {
    cfg.validate()?;
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::Shape(format!("row counts differ: {n} vs {}", y.nrows())));
    }
    let width = x.ncols().max(y.ncols());
    if width == 0 {
        return Err(Error::Degenerate("no columns".into()));
    }
    if n <= width {
        return Err(Error::invalid(format!(
            "need more rows ({n}) than columns ({width})"
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("interpretation maps".into()));
    }
    let (mut xs, mut ys) = if cfg.max_rows < n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut rows = sample(&mut rng, n, cfg.max_rows.max(width + 1)).into_vec();
        rows.sort_unstable();
        (
            pad_columns(x.select(Axis(0), &rows).view(), width),
            pad_columns(y.select(Axis(0), &rows).view(), width),
        )
    } else {
        (pad_columns(x, width), pad_columns(y, width))
    };
    center_columns(&mut xs);
    center_columns(&mut ys);
    if frobenius(&xs) == 0.0 || frobenius(&ys) == 0.0 {
        return Err(Error::Degenerate("zero norm after centering".into()));
    }
    let mx = partial_whiten(&xs, cfg.alpha, cfg.ridge);
    let my = partial_whiten(&ys, cfg.alpha, cfg.ridge);
    let (nx, ny) = (frobenius(&mx), frobenius(&my));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate("zero norm after whitening".into()));
    }
    // max_Q tr(Mx^T My Q) over orthogonal Q is the nuclear norm of Mx^T My.
    let cross = to_dmatrix(&mx.t().dot(&my));
    let nuclear: f64 = cross.singular_values().iter().sum();
    Ok((nuclear / (nx * ny)).clamp(-1.0, 1.0).acos())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportLabels {
    pub interpretation: String,
    pub coreset: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub per_class_distance: BTreeMap<usize, f64>,
    /// Class average of the angular distances.
    pub phi_mean: f64,
    pub budget_rho: Option<f64>,
    pub labels: ReportLabels,
    /// Classes left out of the average, with the reason.
    pub skipped_classes: BTreeMap<usize, String>,
    pub metric: ShapeMetricConfig,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Two-pass population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

impl SimilarityReport {
    pub fn from_distances(
        distances: BTreeMap<usize, f64>,
        skipped_classes: BTreeMap<usize, String>,
        budget_rho: Option<f64>,
        labels: ReportLabels,
        metric: ShapeMetricConfig,
    ) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::Degenerate(format!(
                "every class was skipped: {skipped_classes:?}"
            )));
        }
        let values: Vec<f64> = distances.values().copied().collect();
        Ok(Self {
            phi_mean: mean(&values),
            per_class_distance: distances,
            budget_rho,
            labels,
            skipped_classes,
            metric,
        })
    }
}

/// Per-class distances between full-data and coreset maps (computed in
/// parallel) and their average. Degenerate classes are skipped and listed.
pub fn phi_average(
    pairs: &BTreeMap<usize, (Array2<f64>, Array2<f64>)>,
    cfg: &ShapeMetricConfig,
    budget_rho: Option<f64>,
    labels: ReportLabels,
) -> Result<SimilarityReport> {
    let results: Vec<(usize, Result<f64>)> = pairs
        .par_iter()
        .map(|(&c, (z, zp))| (c, angular_shape_distance(z.view(), zp.view(), cfg)))
        .collect();
    let mut distances = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for (c, r) in results {
        match r {
            Ok(d) => {
                distances.insert(c, d);
            }
            Err(e @ (Error::Degenerate(_) | Error::Invalid(_))) => {
                skipped.insert(c, e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    SimilarityReport::from_distances(distances, skipped, budget_rho, labels, cfg.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub labels: ReportLabels,
    pub budgets: Vec<f64>,
    pub phi: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Expected budgets that had no report.
    pub missing_budgets: Vec<f64>,
}

/// Mean and population std of Φ over the reports' budgets.
pub fn robustness_summary(reports: &[SimilarityReport]) -> Result<RobustnessReport> {
    if reports.len() < 2 {
        return Err(Error::invalid("robustness needs at least two budgets"));
    }
    let mut points: Vec<(f64, f64)> = reports
        .iter()
        .map(|r| {
            r.budget_rho
                .map(|rho| (rho, r.phi_mean))
                .ok_or_else(|| Error::invalid("report without a budget"))
        })
        .collect::<Result<_>>()?;
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let budgets: Vec<f64> = points.iter().map(|p| p.0).collect();
    let phi: Vec<f64> = points.iter().map(|p| p.1).collect();
    let missing_budgets = ROBUSTNESS_BUDGETS
        .iter()
        .copied()
        .filter(|b| !budgets.iter().any(|x| (x - b).abs() < 1e-9))
        .collect();
    Ok(RobustnessReport {
        labels: reports[0].labels.clone(),
        mean: mean(&phi),
        std: population_std(&phi),
        budgets,
        phi,
        missing_budgets,
    })
}

fn sci(v: f64) -> String {
    format!("{v:.2e}")
}

/// Plain-text table: one block per model, coreset selectors as rows,
/// interpretation methods as columns, `mean ± std` cells.
pub fn robustness_table(reports: &[RobustnessReport]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    let mut selectors: Vec<&str> = Vec::new();
    for r in reports {
        for (list, item) in [
            (&mut models, r.labels.model.as_str()),
            (&mut methods, r.labels.interpretation.as_str()),
            (&mut selectors, r.labels.coreset.as_str()),
        ] {
            if !list.contains(&item) {
                list.push(item);
            }
        }
    }
    let cell = |model: &str, method: &str, sel: &str| {
        reports
            .iter()
            .find(|r| r.labels.model == model && r.labels.interpretation == method && r.labels.coreset == sel)
            .map(|r| format!("{} ± {}", sci(r.mean), sci(r.std)))
            .unwrap_or_else(|| "-".to_string())
    };
    let first_width = selectors.iter().map(|s| s.len()).chain([18]).max().unwrap_or(18);
    let mut widths: Vec<usize> = methods.iter().map(|m| m.len().max(19)).collect();
    for model in &models {
        for (k, method) in methods.iter().enumerate() {
            for sel in &selectors {
                widths[k] = widths[k].max(cell(model, method, sel).chars().count());
            }
        }
    }
    let mut out = String::new();
    for model in &models {
        let _ = writeln!(out, "[{model}]");
        let _ = write!(out, "{:<first_width$}", "coreset \\ method");
        for (k, m) in methods.iter().enumerate() {
            let _ = write!(out, " | {:<w$}", m, w = widths[k]);
        }
        out.push('\n');
        let total = first_width + widths.iter().map(|w| w + 3).sum::<usize>();
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for sel in &selectors {
            let _ = write!(out, "{:<first_width$}", sel);
            for (k, m) in methods.iter().enumerate() {
                let text = cell(model, m, sel);
                let pad = widths[k].saturating_sub(text.chars().count());
                let _ = write!(out, " | {text}{}", " ".repeat(pad));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(&mut rng))
    }

    fn random_orthogonal(p: usize, seed: u64) -> Array2<f64> {
        let qr = to_dmatrix(&gaussian(p, p, seed)).qr();
        from_dmatrix(&qr.q())
    }

    #[test]
    fn flatten_ordering() {
        let z = Array4::from_shape_fn((2, 2, 2, 3), |(i, u, v, c)| (i * 1000 + u * 100 + v * 10 + c) as f64);
        let f = flatten_maps(z.view());
        assert_eq!(f.dim(), (8, 3));
        assert_eq!(f.row(0).to_vec(), vec![0.0, 1.0, 2.0]);
        assert_eq!(f[[1, 0]], 10.0); // sample 0, location (0, 1)
        assert_eq!(f[[4, 0]], 1000.0);
        let single = Array4::from_shape_vec((1, 1, 1, 3), vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(flatten_maps(single.view()).row(0).to_vec(), vec![4.0, 5.0, 6.0]);
        assert_eq!(unflatten_maps(f, 2, 2, 2).unwrap(), z);
    }

    #[test]
    fn identity_and_rotation() {
        let x = gaussian(200, 6, 1);
        let cfg = ShapeMetricConfig::default();
        assert!(angular_shape_distance(x.view(), x.view(), &cfg).unwrap() < 1e-6);
        let q = random_orthogonal(6, 2);
        for alpha in [0.0, 0.3, 1.0] {
            let cfg = ShapeMetricConfig { alpha, ..Default::default() };
            let xq = x.dot(&q);
            assert!(angular_shape_distance(x.view(), xq.view(), &cfg).unwrap() < 1e-5);
        }
    }

    #[test]
    fn range_and_degenerate() {
        let cfg = ShapeMetricConfig::default();
        let x = gaussian(50, 3, 3);
        let y = gaussian(50, 5, 4);
        let d = angular_shape_distance(x.view(), y.view(), &cfg).unwrap();
        assert!((0.0..=std::f64::consts::PI).contains(&d));
        let constant = Array2::from_elem((50, 3), 2.0);
        assert!(matches!(
            angular_shape_distance(x.view(), constant.view(), &cfg),
            Err(Error::Degenerate(_))
        ));
        assert!(angular_shape_distance(x.view(), gaussian(49, 3, 1).view(), &cfg).is_err());
    }

    #[test]
    fn subsampling_is_seeded() {
        let x = gaussian(300, 4, 7);
        let y = gaussian(300, 4, 8);
        let cfg = ShapeMetricConfig { max_rows: 100, ..Default::default() };
        let a = angular_shape_distance(x.view(), y.view(), &cfg).unwrap();
        let b = angular_shape_distance(x.view(), y.view(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phi_average_examples() {
        let d = SimilarityReport::from_distances(
            [(0, 0.0), (1, std::f64::consts::PI)].into(),
            BTreeMap::new(),
            None,
            ReportLabels::default(),
            ShapeMetricConfig::default(),
        )
        .unwrap();
        assert_eq!(d.phi_mean, std::f64::consts::FRAC_PI_2);
        let one = SimilarityReport::from_distances(
            [(3, 0.7)].into(),
            BTreeMap::new(),
            None,
            ReportLabels::default(),
            ShapeMetricConfig::default(),
        )
        .unwrap();
        assert_eq!(one.phi_mean, 0.7);
        assert!(SimilarityReport::from_distances(
            BTreeMap::new(),
            BTreeMap::new(),
            None,
            ReportLabels::default(),
            ShapeMetricConfig::default()
        )
        .is_err());
    }

    #[test]
    fn phi_average_skips_degenerate_classes() {
        let x = gaussian(40, 3, 1);
        let pairs: BTreeMap<usize, (Array2<f64>, Array2<f64>)> = [
            (0, (x.clone(), x.clone())),
            (1, (x.clone(), Array2::zeros((40, 3)))),
        ]
        .into();
        let r = phi_average(&pairs, &ShapeMetricConfig::default(), Some(0.1), ReportLabels::default()).unwrap();
        assert_eq!(r.per_class_distance.len(), 1);
        assert!(r.skipped_classes.contains_key(&1));
    }

    fn report(rho: f64, phi: f64) -> SimilarityReport {
        SimilarityReport::from_distances(
            [(0, phi)].into(),
            BTreeMap::new(),
            Some(rho),
            ReportLabels::default(),
            ShapeMetricConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn robustness_examples() {
        let equal = robustness_summary(&[report(0.1, 0.4), report(0.2, 0.4), report(0.3, 0.4)]).unwrap();
        assert!(equal.std < 1e-15, "{}", equal.std);
        assert_eq!(equal.missing_budgets, vec![0.4, 0.5]);
        let two = robustness_summary(&[report(0.1, 1.0), report(0.2, 3.0)]).unwrap();
        assert_eq!(two.mean, 2.0);
        assert_eq!(two.std, 1.0);
        assert!(robustness_summary(&[report(0.1, 1.0)]).is_err());
    }

    #[test]
    fn table_lists_every_cell() {
        let mut reports = Vec::new();
        for method in ["vebi", "ice"] {
            for sel in ["random", "moderate"] {
                let mut r = robustness_summary(&[report(0.1, 0.5), report(0.2, 0.7)]).unwrap();
                r.labels = ReportLabels {
                    interpretation: method.into(),
                    coreset: sel.into(),
                    model: "m".into(),
                };
                reports.push(r);
            }
        }
        let t = robustness_table(&reports);
        assert!(t.starts_with("[m]\n"));
        assert_eq!(t.matches("6.00e-1 ± 1.00e-1").count(), 4);
    }
}
