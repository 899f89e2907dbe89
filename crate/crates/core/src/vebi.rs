//! Relevant-unit identification with per-class sparse regression over the
//! pooled responses of every exported layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::DatasetView;
use crate::error::{Error, Result};
use crate::lasso::{solve_lasso, standardize, LassoParams};

/// Column layout of the concatenated unit matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitColumnMap {
    /// `(layer_id, depth, first column)` in manifest order.
    layers: Vec<(String, usize, usize)>,
}

impl UnitColumnMap {
    pub fn new(layers: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut offset = 0;
        let layers = layers
            .into_iter()
            .map(|(id, depth)| {
                let entry = (id, depth, offset);
                offset += depth;
                entry
            })
            .collect();
        Self { layers }
    }

    pub fn total(&self) -> usize {
        self.layers.last().map_or(0, |(_, d, o)| o + d)
    }

    pub fn unit(&self, column: usize) -> Option<(&str, usize)> {
        self.layers
            .iter()
            .find(|(_, d, o)| column >= *o && column < o + d)
            .map(|(id, _, o)| (id.as_str(), column - o))
    }

    pub fn column(&self, layer_id: &str, filter: usize) -> Option<usize> {
        self.layers
            .iter()
            .find(|(id, d, _)| id == layer_id && filter < *d)
            .map(|(_, _, o)| o + filter)
    }

    pub fn depth(&self, layer_id: &str) -> Option<usize> {
        self.layers.iter().find(|(id, ..)| id == layer_id).map(|(_, d, _)| *d)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(id, ..)| id.as_str())
    }
}

/// Pooled responses of all layers, concatenated in manifest order.
pub fn build_unit_matrix(view: &DatasetView<'_>) -> Result<(Array2<f64>, UnitColumnMap)> {
    let layer_ids = &view.dataset().manifest().layer_ids;
    let mut blocks = Vec::with_capacity(layer_ids.len());
    for id in layer_ids {
        blocks.push(view.pooled(id)?);
    }
    let map = UnitColumnMap::new(blocks.iter().map(|b| (b.layer_id.clone(), b.depth())));
    let views: Vec<_> = blocks.iter().map(|b| b.data.view()).collect();
    let matrix = ndarray::concatenate(Axis(1), &views)
        .map_err(|e| Error::Shape(format!("layers disagree on sample count: {e}")))?;
    Ok((matrix, map))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub layer_id: String,
    pub filter: usize,
    pub weight: f64,
}

/// How the regularization strength is chosen per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum MuSpec {
    /// `mu = factor * ||Psi^T y||_inf`, computed per class.
    Relative(f64),
    Absolute(f64),
}

impl Default for MuSpec {
    fn default() -> Self {
        MuSpec::Relative(0.05)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevantUnits {
    pub mu: MuSpec,
    /// Units per class, sorted by descending `|weight|`.
    pub per_class: BTreeMap<usize, Vec<Unit>>,
    /// Original column indices dropped for zero variance.
    pub dropped_columns: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RelevantUnitsFile {
    mu: MuSpec,
    classes: BTreeMap<String, Vec<(String, usize, f64)>>,
}

impl RelevantUnits {
    pub fn class_units(&self, class: usize) -> &[Unit] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn to_json(&self) -> String {
        let file = RelevantUnitsFile {
            mu: self.mu,
            classes: self
                .per_class
                .iter()
                .map(|(c, units)| {
                    (
                        c.to_string(),
                        units.iter().map(|u| (u.layer_id.clone(), u.filter, u.weight)).collect(),
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("units serialize")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: RelevantUnitsFile = serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        let mut per_class = BTreeMap::new();
        for (c, units) in file.classes {
            let c: usize = c
                .parse()
                .map_err(|_| Error::invalid(format!("class key {c} is not an index")))?;
            per_class.insert(
                c,
                units
                    .into_iter()
                    .map(|(layer_id, filter, weight)| Unit { layer_id, filter, weight })
                    .collect(),
            );
        }
        Ok(Self {
            mu: file.mu,
            per_class,
            dropped_columns: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// One-vs-rest lasso per class on the standardized unit matrix.
pub fn identify_units(view: &DatasetView<'_>, mu: MuSpec, params: &LassoParams) -> Result<RelevantUnits> {
    let (matrix, map) = build_unit_matrix(view)?;
    let labels = view.labels();
    identify_units_from_matrix(matrix.view(), &map, &labels, mu, params)
}

pub fn identify_units_from_matrix(
    matrix: ndarray::ArrayView2<'_, f64>,
    map: &UnitColumnMap,
    labels: &[usize],
    mu: MuSpec,
    params: &LassoParams,
) -> Result<RelevantUnits> {
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("unit identification needs at least two classes"));
    }
    let std = standardize(matrix);
    let psi = std.matrix.view();
    let solved: Result<Vec<(usize, Vec<Unit>)>> = classes
        .par_iter()
        .map(|&c| {
            let y: Array1<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
            let strength = match mu {
                MuSpec::Absolute(m) => m,
                MuSpec::Relative(f) => f * psi.t().dot(&y).iter().fold(0.0f64, |a, v| a.max(v.abs())),
            };
            let sol = solve_lasso(psi, y.view(), strength, params)?;
            let mut units: Vec<Unit> = sol
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(k, &weight)| {
                    let (layer, filter) = map.unit(std.kept[k]).expect("column map is total");
                    Unit {
                        layer_id: layer.to_string(),
                        filter,
                        weight,
                    }
                })
                .collect();
            units.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()));
            Ok((c, units))
        })
        .collect();
    let per_class: BTreeMap<usize, Vec<Unit>> = solved?.into_iter().collect();
    let warnings = per_class
        .iter()
        .filter(|(_, u)| u.is_empty())
        .map(|(c, _)| format!("class {c}: no relevant units at this regularization"))
        .collect();
    Ok(RelevantUnits {
        mu,
        per_class,
        dropped_columns: std.dropped,
        warnings,
    })
}

/// Unit filters of one layer on both sides, trimmed to equal counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedLayer {
    pub layer_id: String,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

fn top_filters(units: &[Unit], layer: &str, count: usize) -> Vec<usize> {
    let mut in_layer: Vec<&Unit> = units.iter().filter(|u| u.layer_id == layer).collect();
    in_layer.sort_by(|x, y| y.weight.abs().total_cmp(&x.weight.abs()).then(x.filter.cmp(&y.filter)));
    in_layer.into_iter().take(count).map(|u| u.filter).collect()
}

/// For every layer where both unit lists have entries, keeps the top
/// `min(p_a, p_b)` units by `|weight|` on each side. Layers found on one
/// side only are dropped. Layer order follows first appearance in `a`.
pub fn align_unit_sets(a: &[Unit], b: &[Unit]) -> Result<Vec<AlignedLayer>> {
    let mut order: Vec<&str> = Vec::new();
    for u in a {
        if !order.contains(&u.layer_id.as_str()) {
            order.push(&u.layer_id);
        }
    }
    let aligned: Vec<AlignedLayer> = order
        .into_iter()
        .filter_map(|layer| {
            let pa = a.iter().filter(|u| u.layer_id == layer).count();
            let pb = b.iter().filter(|u| u.layer_id == layer).count();
            let p = pa.min(pb);
            (p > 0).then(|| AlignedLayer {
                layer_id: layer.to_string(),
                a: top_filters(a, layer, p),
                b: top_filters(b, layer, p),
            })
        })
        .collect();
    if aligned.is_empty() {
        return Err(Error::invalid("unit sets share no layer"));
    }
    Ok(aligned)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageNorm {
    /// `|a & b| / |a | b|`
    #[default]
    Jaccard,
    /// `|a & b| / |b|`, with `b` the reference (full-data) set.
    Reference,
}

/// Percentage overlap of (layer, filter) identities per class. Classes
/// where the denominator is empty map to `None`.
pub fn intersection_coverage(a: &RelevantUnits, b: &RelevantUnits, norm: CoverageNorm) -> BTreeMap<usize, Option<f64>> {
    let classes: BTreeSet<usize> = a.per_class.keys().chain(b.per_class.keys()).copied().collect();
    classes
        .into_iter()
        .map(|c| {
            let sa: BTreeSet<(&str, usize)> = a.class_units(c).iter().map(|u| (u.layer_id.as_str(), u.filter)).collect();
            let sb: BTreeSet<(&str, usize)> = b.class_units(c).iter().map(|u| (u.layer_id.as_str(), u.filter)).collect();
            let inter = sa.intersection(&sb).count();
            let denom = match norm {
                CoverageNorm::Jaccard => sa.union(&sb).count(),
                CoverageNorm::Reference => sb.len(),
            };
            (c, (denom > 0).then(|| 100.0 * inter as f64 / denom as f64))
        })
        .collect()
}

/// Channel selection of a layer's maps at the given filters, in order.
pub fn vebi_maps(t: ArrayView4<'_, f32>, filters: &[usize]) -> Result<Array4<f64>> {
    let depth = t.dim().3;
    if filters.is_empty() {
        return Err(Error::invalid("no units to build maps from"));
    }
    if let Some(&bad) = filters.iter().find(|&&f| f >= depth) {
        return Err(Error::invalid(format!("filter {bad} out of range for depth {depth}")));
    }
    Ok(t.select(Axis(3), filters).mapv(f64::from))
}
