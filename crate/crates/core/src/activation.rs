//! Activation interchange format and the dataset model.
//!
//! Tensors are stored one NPY file per exported layer as little-endian
//! `f32` in `[n, h, w, d]` order. A JSON manifest ties the tensors to
//! sample ids, labels and an optional pooled-input classifier head.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activations of one layer for `n` samples, laid out `[n, h, w, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    data: Array4<f32>,
    layer_id: String,
}

impl ActivationTensor {
    pub fn new(data: Array4<f32>, layer_id: impl Into<String>) -> Result<Self> {
        let layer_id = layer_id.into();
        if data.shape().contains(&0) {
            return Err(Error::Shape(format!(
                "layer {layer_id}: every axis of an activation tensor must be non-empty, got {:?}",
                data.shape()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {layer_id}")));
        }
        Ok(Self { data, layer_id })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView4<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn n(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn depth(&self) -> usize {
        self.data.shape()[3]
    }

    /// Rows `indices` along the sample axis, in the given order.
    pub fn select(&self, indices: &[usize]) -> ActivationTensor {
        ActivationTensor {
            data: self.data.select(Axis(0), indices),
            layer_id: self.layer_id.clone(),
        }
    }

    pub fn to_f64(&self) -> Array4<f64> {
        self.data.mapv(f64::from)
    }

    pub fn read_npy(path: &Path, layer_id: impl Into<String>) -> Result<Self> {
        let layer_id = layer_id.into();
        let data: Array4<f32> = ndarray_npy::read_npy(path).map_err(|e| Error::Npy {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::new(data, layer_id).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(path.display().to_string()),
            Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write_npy(&self, path: &Path) -> Result<()> {
        write_npy_array(path, &self.data)
    }
}

pub(crate) fn write_npy_array<A, D>(path: &Path, array: &ndarray::Array<A, D>) -> Result<()>
where
    A: ndarray_npy::WritableElement,
    D: ndarray::Dimension,
{
    ndarray_npy::write_npy(path, array).map_err(|e| match e {
        ndarray_npy::WriteNpyError::Io(source) => Error::io(path, source),
        other => Error::Npy {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

pub(crate) fn read_npy_array<A, D>(path: &Path) -> Result<ndarray::Array<A, D>>
where
    A: ndarray_npy::ReadableElement,
    D: ndarray::Dimension,
{
    ndarray_npy::read_npy(path).map_err(|e| Error::Npy {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Globally pooled activations, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVectorSet {
    pub data: Array2<f64>,
    pub layer_id: String,
}

impl ActivationVectorSet {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn depth(&self) -> usize {
        self.data.ncols()
    }
}

/// Spatial mean of every channel: `out[i, c] = mean_{u,v} t[i, u, v, c]`.
pub fn global_average_pool(t: &ActivationTensor) -> ActivationVectorSet {
    ActivationVectorSet {
        data: pool_f32(t.view()),
        layer_id: t.layer_id.clone(),
    }
}

pub(crate) fn pool_f32(t: ArrayView4<'_, f32>) -> Array2<f64> {
    let (n, h, w, d) = t.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::<f64>::zeros((n, d));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let sample = t.index_axis(Axis(0), i);
        for spatial_row in sample.outer_iter() {
            for loc in spatial_row.outer_iter() {
                for (acc, &v) in row.iter_mut().zip(loc.iter()) {
                    *acc += f64::from(v);
                }
            }
        }
        row.mapv_inplace(|v| v * scale);
    }
    out
}

/// Same as [`global_average_pool`] for maps already held in `f64`.
pub fn pool_maps(t: ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, h, w, d) = t.dim();
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, h * w, d))
        .expect("standard layout")
        .mean_axis(Axis(1))
        .unwrap_or_else(|| Array2::zeros((n, d)))
}

/// Paths of the classifier head arrays, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierFiles {
    pub weights: PathBuf,
    pub bias: PathBuf,
    pub input_layer_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    pub layer_ids: Vec<String>,
    pub tensor_files: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub classifier_file: Option<ClassifierFiles>,
    pub source_model: String,
    /// Free-form extractor metadata, e.g. whether activations are taken
    /// before or after the nonlinearity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn n(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn num_classes(&self) -> usize {
        match &self.class_names {
            Some(names) => names.len(),
            None => self.labels.iter().max().map_or(0, |m| m + 1),
        }
    }

    /// The layer selection and the classifier head read from.
    pub fn last_layer(&self) -> &str {
        self.layer_ids.last().map(String::as_str).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sample_ids.len();
        if n == 0 {
            return Err(Error::invalid("manifest lists no samples"));
        }
        if self.labels.len() != n {
            return Err(Error::invalid(format!(
                "manifest has {} labels for {n} sample ids",
                self.labels.len()
            )));
        }
        let c = self.num_classes();
        if let Some(bad) = self.labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        if let Some(dup) = self.sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate sample id {dup}")));
        }
        if self.layer_ids.is_empty() {
            return Err(Error::invalid("manifest lists no layers"));
        }
        for layer in &self.layer_ids {
            if !self.tensor_files.contains_key(layer) {
                return Err(Error::invalid(format!("layer {layer} has no tensor file")));
            }
        }
        if let Some(head) = &self.classifier_file {
            if !self.layer_ids.contains(&head.input_layer_id) {
                return Err(Error::invalid(format!(
                    "classifier input layer {} is not exported",
                    head.input_layer_id
                )));
            }
        }
        Ok(())
    }
}

/// Linear head applied to globally pooled features of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[C, d]`
    pub weights: Array2<f64>,
    /// `[C]`
    pub bias: Array1<f64>,
    pub input_layer_id: String,
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, input_layer_id: impl Into<String>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "head has {} weight rows and {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier head".into()));
        }
        Ok(Self {
            weights,
            bias,
            input_layer_id: input_layer_id.into(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn input_depth(&self) -> usize {
        self.weights.ncols()
    }

    pub fn load(root: &Path, files: &ClassifierFiles) -> Result<Self> {
        let w: Array2<f32> = read_npy_array(&root.join(&files.weights))?;
        let b: Array1<f32> = read_npy_array(&root.join(&files.bias))?;
        Self::new(w.mapv(f64::from), b.mapv(f64::from), files.input_layer_id.clone())
    }

    pub fn save(&self, root: &Path, files: &ClassifierFiles) -> Result<()> {
        write_npy_array(&root.join(&files.weights), &self.weights.mapv(|v| v as f32))?;
        write_npy_array(&root.join(&files.bias), &self.bias.mapv(|v| v as f32))
    }
}

/// A validated manifest whose tensors are read from disk on first access.
#[derive(Debug)]
pub struct Dataset {
    manifest: DatasetManifest,
    root: PathBuf,
    tensors: BTreeMap<String, OnceLock<Arc<ActivationTensor>>>,
    head: OnceLock<ClassifierHead>,
}

impl Dataset {
    /// Builds a dataset from tensors held in memory (no files involved).
    pub fn from_tensors(manifest: DatasetManifest, tensors: Vec<ActivationTensor>) -> Result<Self> {
        manifest.validate()?;
        let mut map = BTreeMap::new();
        for t in tensors {
            if t.n() != manifest.n() {
                return Err(Error::Shape(format!(
                    "layer {} has {} samples, manifest lists {}",
                    t.layer_id,
                    t.n(),
                    manifest.n()
                )));
            }
            let cell = OnceLock::new();
            let id = t.layer_id.clone();
            let _ = cell.set(Arc::new(t));
            map.insert(id, cell);
        }
        for layer in &manifest.layer_ids {
            if !map.contains_key(layer) {
                return Err(Error::invalid(format!("no tensor given for layer {layer}")));
            }
        }
        Ok(Self {
            manifest,
            root: PathBuf::new(),
            tensors: map,
            head: OnceLock::new(),
        })
    }

    /// Attaches a head held in memory; it must consume the manifest's
    /// classifier input layer.
    pub fn with_head(self, head: ClassifierHead) -> Result<Self> {
        let depth = self.tensor(&head.input_layer_id)?.depth();
        if head.input_depth() != depth {
            return Err(Error::Shape(format!(
                "classifier expects depth {}, layer {} has {depth}",
                head.input_depth(),
                head.input_layer_id
            )));
        }
        let _ = self.head.set(head);
        Ok(self)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn n(&self) -> usize {
        self.manifest.n()
    }

    pub fn labels(&self) -> &[usize] {
        &self.manifest.labels
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn source_model(&self) -> &str {
        &self.manifest.source_model
    }

    /// Loads (once) and returns the full tensor of `layer_id`.
    pub fn tensor(&self, layer_id: &str) -> Result<Arc<ActivationTensor>> {
        let cell = self
            .tensors
            .get(layer_id)
            .ok_or_else(|| Error::invalid(format!("unknown layer {layer_id}")))?;
        if let Some(t) = cell.get() {
            return Ok(Arc::clone(t));
        }
        let path = self.root.join(&self.manifest.tensor_files[layer_id]);
        let t = ActivationTensor::read_npy(&path, layer_id)?;
        if t.n() != self.manifest.n() {
            return Err(Error::Shape(format!(
                "{} holds {} samples, manifest lists {}",
                path.display(),
                t.n(),
                self.manifest.n()
            )));
        }
        let _ = cell.set(Arc::new(t));
        Ok(Arc::clone(cell.get().expect("initialized above")))
    }

    pub fn classifier_head(&self) -> Result<Option<ClassifierHead>> {
        if let Some(head) = self.head.get() {
            return Ok(Some(head.clone()));
        }
        match &self.manifest.classifier_file {
            None => Ok(None),
            Some(files) => {
                let head = ClassifierHead::load(&self.root, files)?;
                let depth = self.tensor(&files.input_layer_id)?.depth();
                if head.input_depth() != depth {
                    return Err(Error::Shape(format!(
                        "classifier expects depth {}, layer {} has {depth}",
                        head.input_depth(),
                        files.input_layer_id
                    )));
                }
                Ok(Some(self.head.get_or_init(|| head).clone()))
            }
        }
    }

    pub fn full_view(&self) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices: (0..self.n()).collect(),
        }
    }

    pub fn view(&self, indices: Vec<usize>) -> Result<DatasetView<'_>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::invalid(format!("sample index {bad} out of range")));
        }
        Ok(DatasetView {
            dataset: self,
            indices,
        })
    }
}

/// Reads and validates a manifest. Tensor contents are checked lazily.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    manifest.validate()?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    for (layer, file) in &manifest.tensor_files {
        let path = root.join(file);
        if !path.is_file() {
            return Err(Error::invalid(format!(
                "tensor file for layer {layer} not found: {}",
                path.display()
            )));
        }
    }
    if let Some(head) = &manifest.classifier_file {
        for p in [&head.weights, &head.bias] {
            if !root.join(p).is_file() {
                return Err(Error::invalid(format!(
                    "classifier file not found: {}",
                    root.join(p).display()
                )));
            }
        }
    }
    let tensors = manifest
        .layer_ids
        .iter()
        .map(|l| (l.clone(), OnceLock::new()))
        .collect();
    Ok(Dataset {
        manifest,
        root,
        tensors,
        head: OnceLock::new(),
    })
}

/// A subset of a dataset's samples, in a fixed order.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    dataset: &'a Dataset,
    indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.indices.iter().map(|&i| self.dataset.labels()[i]).collect()
    }

    pub fn sample_ids(&self) -> Vec<&str> {
        self.indices
            .iter()
            .map(|&i| self.dataset.manifest.sample_ids[i].as_str())
            .collect()
    }

    pub fn tensor(&self, layer_id: &str) -> Result<ActivationTensor> {
        Ok(self.dataset.tensor(layer_id)?.select(&self.indices))
    }

    pub fn pooled(&self, layer_id: &str) -> Result<ActivationVectorSet> {
        let full = self.dataset.tensor(layer_id)?;
        let sub = full.view().select(Axis(0), &self.indices);
        Ok(ActivationVectorSet {
            data: pool_f32(sub.view()),
            layer_id: layer_id.to_string(),
        })
    }

    /// Restricts the view to samples of `class`, preserving order.
    pub fn class_subset(&self, class: usize) -> DatasetView<'a> {
        let labels = self.dataset.labels();
        DatasetView {
            dataset: self.dataset,
            indices: self
                .indices
                .iter()
                .copied()
                .filter(|&i| labels[i] == class)
                .collect(),
        }
    }
}

/// Sample indices of each non-empty class, ascending.
pub fn partition_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut parts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        parts.entry(l).or_default().push(i);
    }
    parts
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
