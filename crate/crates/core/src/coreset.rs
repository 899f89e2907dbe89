//! Per-class coreset selection: random, moderate (median distance to the
//! class center) and graph-based pruning with message passing on a k-NN
//! sample graph.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{partition_by_class, Dataset, DatasetView};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Random,
    Moderate,
    Dgpruning,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 3] = [
        SelectionMethod::Random,
        SelectionMethod::Moderate,
        SelectionMethod::Dgpruning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Random => "random",
            SelectionMethod::Moderate => "moderate",
            SelectionMethod::Dgpruning => "dgpruning",
        }
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SelectionMethod::Random),
            "moderate" => Ok(SelectionMethod::Moderate),
            "dgpruning" => Ok(SelectionMethod::Dgpruning),
            other => Err(Error::invalid(format!("unknown selection method {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetSpec {
    pub method: SelectionMethod,
    pub rho: f64,
    pub seed: u64,
    pub knn_k: usize,
    pub gamma_forward: f64,
    pub gamma_backward: f64,
    /// Min-max normalize the initial graph scores to [0, 1].
    #[serde(default = "default_true")]
    pub normalize_scores: bool,
}

fn default_true() -> bool {
    true
}

impl CoresetSpec {
    pub fn new(method: SelectionMethod, rho: f64) -> Self {
        Self {
            method,
            rho,
            seed: 0,
            knn_k: 5,
            gamma_forward: 1.0,
            gamma_backward: 1.0,
            normalize_scores: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.knn_k == 0 {
            return Err(Error::invalid("knn_k must be at least 1"));
        }
        if !(self.gamma_forward >= 0.0 && self.gamma_backward >= 0.0) {
            return Err(Error::invalid("message-passing gammas must be non-negative"));
        }
        Ok(())
    }
}

/// `max(1, round(rho * n))`, rounding half away from zero.
pub fn budget(n: usize, rho: f64) -> usize {
    ((rho * n as f64).round() as usize).clamp(1, n.max(1))
}

pub fn class_center(vectors: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    vectors
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::invalid("class center of an empty class"))
}

fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn center_distances(vectors: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let center = class_center(vectors)?;
    Ok(vectors
        .outer_iter()
        .map(|row| euclidean(row, center.view()))
        .collect())
}

/// Uniform sample without replacement; returned positions are sorted.
pub fn select_random(class_indices: &[usize], rho: f64, seed: u64) -> Vec<usize> {
    let n = class_indices.len();
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, n, budget(n, rho))
        .into_iter()
        .map(|p| class_indices[p])
        .collect();
    picked.sort_unstable();
    picked
}

/// Local positions (rows of `vectors`) whose distance-to-center rank is
/// nearest the median rank. Tied distances share their average rank; ties
/// in rank deviation go to the lower position.
pub fn select_moderate(vectors: ArrayView2<'_, f64>, rho: f64) -> Result<Vec<usize>> {
    let dist = center_distances(vectors)?;
    Ok(moderate_from_distances(&dist, rho))
}

/// Selection step of [`select_moderate`] on precomputed center distances.
pub fn moderate_from_distances(dist: &[f64], rho: f64) -> Vec<usize> {
    let n = dist.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));

    let mut rank = vec![0.0f64; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && dist[order[end]] == dist[order[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            rank[i] = avg;
        }
        start = end;
    }

    let median_rank = (n - 1) as f64 / 2.0;
    let mut by_deviation: Vec<usize> = (0..n).collect();
    by_deviation.sort_by(|&a, &b| {
        let da = (rank[a] - median_rank).abs();
        let db = (rank[b] - median_rank).abs();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = by_deviation.into_iter().take(budget(n, rho)).collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub target: usize,
    pub weight: f64,
}

/// Directed k-NN graph over the rows of one class, edges weighted by
/// `exp(-d / sigma)` where sigma is the median kept distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGraph {
    pub neighbors: Vec<Vec<Edge>>,
    pub sigma: f64,
}

impl SampleGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    })
}

pub fn build_knn_graph(vectors: ArrayView2<'_, f64>, k: usize) -> SampleGraph {
    let n = vectors.nrows();
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return SampleGraph {
            neighbors: vec![Vec::new(); n],
            sigma: 1.0,
        };
    }
    let kept: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = vectors.row(i);
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, euclidean(row, vectors.row(j))))
                .collect();
            let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            cand
        })
        .collect();
    let mut all: Vec<f64> = kept.iter().flatten().map(|&(_, d)| d).collect();
    let sigma = median(&mut all).unwrap_or(1.0).max(1e-12);
    let neighbors = kept
        .into_iter()
        .map(|edges| {
            edges
                .into_iter()
                .map(|(target, d)| Edge {
                    target,
                    weight: (-d / sigma).exp().max(f64::MIN_POSITIVE),
                })
                .collect()
        })
        .collect();
    SampleGraph { neighbors, sigma }
}

/// Centrality scores `-||x_i - center||`, optionally min-max normalized.
/// A class whose samples are all equidistant gets a constant score of one.
pub fn centrality_scores(vectors: ArrayView2<'_, f64>, normalize: bool) -> Result<Vec<f64>> {
    let raw: Vec<f64> = center_distances(vectors)?.into_iter().map(|d| -d).collect();
    if !normalize {
        return Ok(raw);
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(vec![1.0; raw.len()]);
    }
    Ok(raw.into_iter().map(|s| (s - lo) / (hi - lo)).collect())
}

/// Local positions picked by graph message passing.
pub fn select_dgpruning(vectors: ArrayView2<'_, f64>, spec: &CoresetSpec) -> Result<Vec<usize>> {
    let n = vectors.nrows();
    let initial = centrality_scores(vectors, spec.normalize_scores)?;
    let graph = build_knn_graph(vectors, spec.knn_k);

    let mut score: Vec<f64> = (0..n)
        .map(|i| {
            let msg: f64 = graph.neighbors[i]
                .iter()
                .map(|e| e.weight * initial[e.target])
                .sum();
            initial[i] + spec.gamma_forward * msg
        })
        .collect();

    let target = budget(n, spec.rho);
    let mut selected = vec![false; n];
    let mut picked = Vec::with_capacity(target);
    while picked.len() < target {
        let best = (0..n)
            .filter(|&i| !selected[i])
            .max_by(|&a, &b| score[a].total_cmp(&score[b]).then(b.cmp(&a)))
            .expect("budget never exceeds class size");
        selected[best] = true;
        picked.push(best);
        for e in &graph.neighbors[best] {
            if !selected[e.target] {
                score[e.target] *= 1.0 - spec.gamma_backward * e.weight;
            }
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Selected global sample indices per class, with the spec that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    pub per_class_indices: BTreeMap<usize, Vec<usize>>,
    pub spec: CoresetSpec,
    pub source_model: String,
}

impl Coreset {
    pub fn len(&self) -> usize {
        self.per_class_indices.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All selected indices, ascending.
    pub fn indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.per_class_indices.values().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn to_file(&self, sample_ids: &[String]) -> CoresetFile {
        CoresetFile {
            spec: self.spec.clone(),
            source_model: self.source_model.clone(),
            per_class: self
                .per_class_indices
                .iter()
                .map(|(c, idx)| (c.to_string(), idx.iter().map(|&i| sample_ids[i].clone()).collect()))
                .collect(),
            config_hash: None,
        }
    }
}

/// Selects a coreset from pooled vectors of the selection layer.
pub fn select(vectors: ArrayView2<'_, f64>, labels: &[usize], spec: &CoresetSpec, source_model: &str) -> Result<Coreset> {
    spec.validate()?;
    if vectors.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} vectors for {} labels",
            vectors.nrows(),
            labels.len()
        )));
    }
    let parts = partition_by_class(labels);
    let chosen: Result<Vec<(usize, Vec<usize>)>> = parts
        .into_par_iter()
        .map(|(c, idx)| {
            let local = match spec.method {
                SelectionMethod::Random => {
                    // Class-specific stream so classes are independent of each other.
                    let seed = spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ c as u64;
                    return Ok((c, select_random(&idx, spec.rho, seed)));
                }
                SelectionMethod::Moderate => select_moderate(vectors.select(Axis(0), &idx).view(), spec.rho)?,
                SelectionMethod::Dgpruning => select_dgpruning(vectors.select(Axis(0), &idx).view(), spec)?,
            };
            Ok((c, local.into_iter().map(|p| idx[p]).collect()))
        })
        .collect();
    Ok(Coreset {
        per_class_indices: chosen?.into_iter().collect(),
        spec: spec.clone(),
        source_model: source_model.to_string(),
    })
}

/// Selects on the pooled last layer of `dataset`.
pub fn select_for_dataset(dataset: &Dataset, spec: &CoresetSpec) -> Result<Coreset> {
    let pooled = dataset.full_view().pooled(dataset.manifest().last_layer())?;
    select(pooled.data.view(), dataset.labels(), spec, dataset.source_model())
}

/// On-disk form of a coreset: sample ids rather than positions, so it can
/// be applied to activations exported from another model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetFile {
    pub spec: CoresetSpec,
    pub source_model: String,
    pub per_class: BTreeMap<String, Vec<String>>,
    /// Hash of the run configuration that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CoresetFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("coreset serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolves the coreset's sample ids against `dataset`. The view keeps the
/// dataset's sample order. Works across source models.
pub fn apply_coreset<'a>(coreset: &CoresetFile, dataset: &'a Dataset) -> Result<DatasetView<'a>> {
    let lookup: HashMap<&str, usize> = dataset
        .manifest()
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut missing = Vec::new();
    let mut indices = Vec::with_capacity(coreset.len());
    for id in coreset.per_class.values().flatten() {
        match lookup.get(id.as_str()) {
            Some(&i) => indices.push(i),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingSamples(missing));
    }
    indices.sort_unstable();
    indices.dedup();
    dataset.view(indices)
}

/// Ordering helper shared with the reference tests: descending score, then
/// ascending position.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}
