//! Config-driven runs: coreset selection, interpretation on full data or a
//! coreset, comparison against the full-data reference, robustness tables
//! and heatmap panels.
//!
//! Output layout, relative to `output_dir`:
//!
//! ```text
//! {model}/coresets/coreset_{selector}_rho{rho}.json
//! {model}/{method}/full/all/            features on every sample
//! {model}/{method}/{selector}/{rho}/    features, similarity.json, fidelity.json
//! {model}/robustness.json, robustness.txt, fidelity.csv
//! ```
//!
//! A coreset taken from another model's activations lands under
//! `{selector}@{source_model}` instead of `{selector}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use ndarray::{Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{
    load_dataset, partition_by_class, read_npy_array, write_npy_array, ActivationTensor, ClassifierHead, Dataset, DatasetView,
};
use crate::coreset::{apply_coreset, select_for_dataset, CoresetFile, CoresetSpec, SelectionMethod};
use crate::error::{Error, Result};
use crate::fidelity::{self, Condition, FidelityReport};
use crate::ice::{fit_ice, ice_maps, IceFeatures, NmfModel, NmfParams};
use crate::lasso::LassoParams;
use crate::simeval::{
    angular_shape_distance, flatten_maps, robustness_summary, robustness_table, ReportLabels, RobustnessReport,
    ShapeMetricConfig, SimilarityReport, ROBUSTNESS_BUDGETS,
};
use crate::topic::{fit_topics, topic_maps, topic_reconstruct, TopicModel, TopicParams};
use crate::vebi::{align_unit_sets, identify_units, vebi_maps, MuSpec, RelevantUnits};
use crate::viz::{self, HeatmapSource, RenderMetadata};

pub const FULL_TAG: &str = "full";
pub const DEFAULT_BUDGETS: [f64; 6] = [0.05, 0.10, 0.20, 0.30, 0.40, 0.50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMethod {
    Ice,
    Vebi,
    Topic,
}

impl InterpMethod {
    pub const ALL: [InterpMethod; 3] = [InterpMethod::Ice, InterpMethod::Vebi, InterpMethod::Topic];

    pub fn name(self) -> &'static str {
        match self {
            InterpMethod::Ice => "ice",
            InterpMethod::Vebi => "vebi",
            InterpMethod::Topic => "topic",
        }
    }
}

impl std::fmt::Display for InterpMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterpMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown interpretation method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// Label for the output tree; defaults to the manifest's source model.
    pub model: Option<String>,
    pub methods: Vec<InterpMethod>,
    pub selectors: Vec<SelectionMethod>,
    pub budgets: Vec<f64>,
    pub seed: u64,
    pub knn_k: usize,
    pub gamma_forward: f64,
    pub gamma_backward: f64,
    pub nmf: NmfParams,
    pub vebi_mu: MuSpec,
    pub topic: TopicParams,
    pub metric: ShapeMetricConfig,
    pub viz_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("manifest.json"),
            output_dir: PathBuf::from("outputs"),
            model: None,
            methods: InterpMethod::ALL.to_vec(),
            selectors: SelectionMethod::ALL.to_vec(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            seed: 0,
            knn_k: 5,
            gamma_forward: 1.0,
            gamma_backward: 1.0,
            nmf: NmfParams::default(),
            vebi_mu: MuSpec::default(),
            topic: TopicParams::default(),
            metric: ShapeMetricConfig::default(),
            viz_k: viz::DEFAULT_K,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.budgets.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid(format!("budget {bad} outside (0, 1)")));
        }
        if self.budgets.is_empty() {
            return Err(Error::invalid("no budgets configured"));
        }
        if self.methods.is_empty() || self.selectors.is_empty() {
            return Err(Error::invalid("no methods or selectors configured"));
        }
        if self.viz_k == 0 {
            return Err(Error::invalid("viz_k must be at least 1"));
        }
        self.metric.validate()?;
        self.coreset_spec(SelectionMethod::Random, self.budgets[0]).validate()
    }

    /// First 16 hex digits of the SHA-256 of the config's JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn coreset_spec(&self, method: SelectionMethod, rho: f64) -> CoresetSpec {
        CoresetSpec {
            knn_k: self.knn_k,
            gamma_forward: self.gamma_forward,
            gamma_backward: self.gamma_backward,
            ..CoresetSpec::new(method, rho).with_seed(self.seed)
        }
    }

    pub fn nmf_params(&self) -> NmfParams {
        NmfParams {
            seed: self.seed,
            ..self.nmf.clone()
        }
    }

    pub fn topic_params(&self) -> TopicParams {
        TopicParams {
            seed: self.seed,
            ..self.topic.clone()
        }
    }

    pub fn metric_config(&self) -> ShapeMetricConfig {
        ShapeMetricConfig {
            seed: self.seed,
            ..self.metric.clone()
        }
    }

    pub fn model_label(&self, dataset: &Dataset) -> String {
        self.model.clone().unwrap_or_else(|| dataset.source_model().to_string())
    }
}

/// `0.1 -> "0.10"`; values that need more digits keep them.
pub fn rho_label(rho: f64) -> String {
    let short = format!("{rho:.2}");
    if short.parse::<f64>().is_ok_and(|v| v == rho) {
        short
    } else {
        rho.to_string()
    }
}

pub fn coreset_file_name(method: SelectionMethod, rho: f64) -> String {
    format!("coreset_{}_rho{}.json", method.name(), rho_label(rho))
}

/// Identifies one cell of the experimental grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTag {
    pub method: InterpMethod,
    /// Selector name, `full`, or `{selector}@{source_model}` for transfers.
    pub coreset: String,
    pub rho: Option<f64>,
}

impl FeatureTag {
    pub fn full(method: InterpMethod) -> Self {
        Self {
            method,
            coreset: FULL_TAG.to_string(),
            rho: None,
        }
    }

    pub fn for_coreset(method: InterpMethod, coreset: &CoresetFile, target_model: &str) -> Self {
        let selector = coreset.spec.method.name();
        let label = if coreset.source_model == target_model {
            selector.to_string()
        } else {
            format!("{selector}@{}", coreset.source_model)
        };
        Self {
            method,
            coreset: label,
            rho: Some(coreset.spec.rho),
        }
    }

    pub fn dir(&self, output_dir: &Path, model: &str) -> PathBuf {
        let rho = self.rho.map_or_else(|| "all".to_string(), rho_label);
        output_dir
            .join(model)
            .join(self.method.name())
            .join(&self.coreset)
            .join(rho)
    }
}

/// Relevant features of one interpretation method.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Ice(IceFeatures),
    Vebi(RelevantUnits),
    Topic(TopicModel),
}

impl Features {
    pub fn method(&self) -> InterpMethod {
        match self {
            Features::Ice(_) => InterpMethod::Ice,
            Features::Vebi(_) => InterpMethod::Vebi,
            Features::Topic(_) => InterpMethod::Topic,
        }
    }
}

fn head_of(dataset: &Dataset) -> Result<ClassifierHead> {
    dataset
        .classifier_head()?
        .ok_or_else(|| Error::invalid("dataset has no classifier head"))
}

/// Runs `method` on the samples of `view`.
pub fn interpret(view: &DatasetView<'_>, method: InterpMethod, cfg: &RunConfig) -> Result<Features> {
    let dataset = view.dataset();
    match method {
        InterpMethod::Ice => Ok(Features::Ice(fit_ice(view, dataset.manifest().last_layer(), &cfg.nmf_params())?)),
        InterpMethod::Vebi => Ok(Features::Vebi(identify_units(view, cfg.vebi_mu, &LassoParams::default())?)),
        InterpMethod::Topic => Ok(Features::Topic(fit_topics(view, &head_of(dataset)?, &cfg.topic_params())?)),
    }
}

fn class_model(ice: &IceFeatures, class: usize) -> Result<&NmfModel> {
    ice.per_class
        .get(&class)
        .ok_or_else(|| Error::invalid(format!("no NMF model for class {class}")))
}

/// ICE or topic maps of `t`, whose samples all belong to `class`.
fn dense_maps(features: &Features, class: usize, t: &ActivationTensor) -> Result<Array4<f64>> {
    match features {
        Features::Ice(ice) => ice_maps(t.view(), class_model(ice, class)?, &ice.params),
        Features::Topic(model) => topic_maps(t.view(), model),
        Features::Vebi(_) => Err(Error::invalid("VEBI maps depend on the compared unit set")),
    }
}

/// Head predictions from ICE maps directly, from topic maps after recovery.
fn predict_from_maps(features: &Features, maps: &Array4<f64>, head: &ClassifierHead) -> Result<Vec<usize>> {
    match features {
        Features::Topic(model) => fidelity::predict(topic_reconstruct(maps.view(), model)?.view(), head),
        _ => fidelity::predict(maps.view(), head),
    }
}

/// VEBI maps of one class for every layer the two unit sets share.
fn vebi_class_maps(
    a: &RelevantUnits,
    b: &RelevantUnits,
    dataset: &Dataset,
    class: usize,
    samples: &[usize],
) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    let view = dataset.view(samples.to_vec())?;
    align_unit_sets(a.class_units(class), b.class_units(class))?
        .iter()
        .map(|layer| {
            let t = view.tensor(&layer.layer_id)?;
            Ok((
                flatten_maps(vebi_maps(t.view(), &layer.a)?.view()),
                flatten_maps(vebi_maps(t.view(), &layer.b)?.view()),
            ))
        })
        .collect()
}

fn mean_distance(pairs: &[(Array2<f64>, Array2<f64>)], metric: &ShapeMetricConfig) -> Result<f64> {
    let mut ds = Vec::new();
    let mut last_err = None;
    for (za, zb) in pairs {
        match angular_shape_distance(za.view(), zb.view(), metric) {
            Ok(d) => ds.push(d),
            Err(e @ Error::Degenerate(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    if ds.is_empty() {
        return Err(last_err.unwrap_or_else(|| Error::Degenerate("no maps".into())));
    }
    Ok(ds.iter().sum::<f64>() / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub similarity: SimilarityReport,
    pub fidelity: FidelityReport,
}

/// Full-data features with their interpretation maps computed once, so
/// that many coreset results can be compared against them.
pub struct Reference<'a> {
    dataset: &'a Dataset,
    features: Features,
    head: ClassifierHead,
    classes: BTreeMap<usize, Vec<usize>>,
    baseline_accuracy: f64,
    /// Flattened maps per class (ICE, topic only).
    maps: BTreeMap<usize, Array2<f64>>,
    fidelity: FidelityReport,
}

impl<'a> Reference<'a> {
    pub fn new(features: Features, dataset: &'a Dataset) -> Result<Self> {
        let head = head_of(dataset)?;
        let t = dataset.tensor(&head.input_layer_id)?;
        let labels = dataset.labels();
        let baseline_accuracy = fidelity::classify_tensor(t.view(), labels, &head)?.accuracy;
        let classes = partition_by_class(labels);
        let condition = Condition {
            method: features.method().name().to_string(),
            coreset: FULL_TAG.to_string(),
            rho: None,
        };
        let mut maps = BTreeMap::new();
        let fidelity = match &features {
            Features::Vebi(units) => fidelity::perturb_all_classes(t.view(), labels, units, &head, condition)?,
            _ => {
                let mut predictions = vec![0; labels.len()];
                for (&c, idx) in &classes {
                    let z = dense_maps(&features, c, &t.select(idx))?;
                    for (&i, p) in idx.iter().zip(predict_from_maps(&features, &z, &head)?) {
                        predictions[i] = p;
                    }
                    maps.insert(c, flatten_maps(z.view()));
                }
                FidelityReport::new(&predictions, labels, baseline_accuracy, condition)?
            }
        };
        Ok(Self {
            dataset,
            features,
            head,
            classes,
            baseline_accuracy,
            maps,
            fidelity,
        })
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    /// Head accuracy with the full-data features.
    pub fn fidelity(&self) -> &FidelityReport {
        &self.fidelity
    }

    /// Φ against the reference maps and fidelity of `core`, on every sample.
    /// For VEBI the class distance is the mean over shared layers.
    pub fn evaluate(&self, core: &Features, metric: &ShapeMetricConfig, labels: ReportLabels, rho: Option<f64>) -> Result<Evaluation> {
        if core.method() != self.features.method() {
            return Err(Error::invalid("cannot compare features of different methods"));
        }
        let condition = Condition {
            method: labels.interpretation.clone(),
            coreset: labels.coreset.clone(),
            rho,
        };
        let t = self.dataset.tensor(&self.head.input_layer_id)?;
        let all_labels = self.dataset.labels();
        let mut predictions = vec![0; all_labels.len()];
        let mut distances = BTreeMap::new();
        let mut skipped = BTreeMap::new();
        let fidelity = match (&self.features, core) {
            (Features::Vebi(full), Features::Vebi(units)) => {
                let results: Vec<(usize, Result<f64>)> = self
                    .classes
                    .par_iter()
                    .map(|(&c, idx)| {
                        let d = vebi_class_maps(full, units, self.dataset, c, idx).and_then(|p| mean_distance(&p, metric));
                        (c, d)
                    })
                    .collect();
                for (c, r) in results {
                    record(c, r, &mut distances, &mut skipped)?;
                }
                fidelity::perturb_all_classes(t.view(), all_labels, units, &self.head, condition)?
            }
            _ => {
                for (&c, idx) in &self.classes {
                    let z = dense_maps(core, c, &t.select(idx))?;
                    for (&i, p) in idx.iter().zip(predict_from_maps(core, &z, &self.head)?) {
                        predictions[i] = p;
                    }
                    let d = angular_shape_distance(self.maps[&c].view(), flatten_maps(z.view()).view(), metric);
                    record(c, d, &mut distances, &mut skipped)?;
                }
                FidelityReport::new(&predictions, all_labels, self.baseline_accuracy, condition)?
            }
        };
        let similarity = SimilarityReport::from_distances(distances, skipped, rho, labels, metric.clone())?;
        Ok(Evaluation { similarity, fidelity })
    }
}

fn record(class: usize, r: Result<f64>, distances: &mut BTreeMap<usize, f64>, skipped: &mut BTreeMap<usize, String>) -> Result<()> {
    match r {
        Ok(d) => {
            distances.insert(class, d);
            Ok(())
        }
        Err(e @ (Error::Degenerate(_) | Error::Invalid(_))) => {
            log::warn!("class {class} skipped: {e}");
            skipped.insert(class, e.to_string());
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// One-off comparison; see [`Reference::evaluate`].
pub fn similarity(
    full: &Features,
    core: &Features,
    dataset: &Dataset,
    metric: &ShapeMetricConfig,
    labels: ReportLabels,
    rho: Option<f64>,
) -> Result<SimilarityReport> {
    Ok(Reference::new(full.clone(), dataset)?
        .evaluate(core, metric, labels, rho)?
        .similarity)
}

/// Head accuracy on the interpretation maps of every sample (ICE, topic), or
/// after zeroing each class's units on its own samples (VEBI).
pub fn fidelity_of(features: &Features, dataset: &Dataset, condition: Condition) -> Result<FidelityReport> {
    let mut report = Reference::new(features.clone(), dataset)?.fidelity;
    report.condition = condition;
    Ok(report)
}

/// Metadata written next to every feature artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactInfo {
    pub tag: FeatureTag,
    pub config_hash: String,
    pub seed: u64,
    pub source_model: String,
    /// Model whose activations chose the coreset, if any.
    pub coreset_source_model: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct NmfSidecar {
    class: usize,
    r: usize,
    fit_loss: f64,
    iterations_run: usize,
    seed: u64,
    components: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
enum FeaturePayload {
    Ice {
        layer_id: String,
        params: NmfParams,
        classes: Vec<NmfSidecar>,
    },
    Vebi {
        units: String,
    },
    Topic {
        m: usize,
        l: usize,
        seed: u64,
        initial_loss: f64,
        train_loss_curve: Vec<f64>,
        topics: String,
        recovery_w1: String,
        recovery_w2: String,
    },
}

#[derive(Serialize, Deserialize)]
struct FeaturesFile {
    info: ArtifactInfo,
    features: FeaturePayload,
}

pub const FEATURES_FILE: &str = "features.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_features(features: &Features, info: &ArtifactInfo, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let payload = match features {
        Features::Ice(ice) => {
            let mut classes = Vec::new();
            for (&c, model) in &ice.per_class {
                let name = format!("ice_components_class{c}.npy");
                write_npy_array(&dir.join(&name), &model.components)?;
                classes.push(NmfSidecar {
                    class: c,
                    r: model.r(),
                    fit_loss: model.fit_loss,
                    iterations_run: model.iterations_run,
                    seed: ice.params.seed,
                    components: name,
                });
            }
            FeaturePayload::Ice {
                layer_id: ice.layer_id.clone(),
                params: ice.params.clone(),
                classes,
            }
        }
        Features::Vebi(units) => {
            units.save(&dir.join("units.json"))?;
            FeaturePayload::Vebi {
                units: "units.json".into(),
            }
        }
        Features::Topic(model) => {
            write_npy_array(&dir.join("topic_T.npy"), &model.topics)?;
            write_npy_array(&dir.join("topic_W1.npy"), &model.recovery_w1)?;
            write_npy_array(&dir.join("topic_W2.npy"), &model.recovery_w2)?;
            FeaturePayload::Topic {
                m: model.m(),
                l: model.l(),
                seed: info.seed,
                initial_loss: model.initial_loss,
                train_loss_curve: model.train_loss_curve.clone(),
                topics: "topic_T.npy".into(),
                recovery_w1: "topic_W1.npy".into(),
                recovery_w2: "topic_W2.npy".into(),
            }
        }
    };
    write_json(
        &dir.join(FEATURES_FILE),
        &FeaturesFile {
            info: info.clone(),
            features: payload,
        },
    )
}

pub fn load_features(dir: &Path) -> Result<(Features, ArtifactInfo)> {
    let file: FeaturesFile = read_json(&dir.join(FEATURES_FILE))?;
    let features = match file.features {
        FeaturePayload::Ice {
            layer_id,
            params,
            classes,
        } => {
            let mut per_class = BTreeMap::new();
            for side in classes {
                let components: Array2<f64> = read_npy_array(&dir.join(&side.components))?;
                per_class.insert(
                    side.class,
                    NmfModel {
                        components,
                        fit_loss: side.fit_loss,
                        iterations_run: side.iterations_run,
                        loss_curve: Vec::new(),
                    },
                );
            }
            Features::Ice(IceFeatures {
                layer_id,
                params,
                per_class,
            })
        }
        FeaturePayload::Vebi { units } => Features::Vebi(RelevantUnits::load(&dir.join(units))?),
        FeaturePayload::Topic {
            initial_loss,
            train_loss_curve,
            topics,
            recovery_w1,
            recovery_w2,
            ..
        } => Features::Topic(TopicModel {
            topics: read_npy_array(&dir.join(topics))?,
            recovery_w1: read_npy_array(&dir.join(recovery_w1))?,
            recovery_w2: read_npy_array(&dir.join(recovery_w2))?,
            initial_loss,
            train_loss_curve,
        }),
    };
    Ok((features, file.info))
}

/// A configured run bound to its loaded dataset.
pub struct Run {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub model: String,
    pub hash: String,
}

impl Run {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = load_dataset(&cfg.dataset)?;
        Ok(Self::with_dataset(cfg, dataset))
    }

    pub fn with_dataset(cfg: RunConfig, dataset: Dataset) -> Self {
        let model = cfg.model_label(&dataset);
        let hash = cfg.hash();
        Self {
            cfg,
            dataset,
            model,
            hash,
        }
    }

    pub fn model_dir(&self) -> PathBuf {
        self.cfg.output_dir.join(&self.model)
    }

    pub fn coreset_dir(&self) -> PathBuf {
        self.model_dir().join("coresets")
    }

    /// One coreset file per (selector, budget).
    pub fn select(&self) -> Result<Vec<PathBuf>> {
        let dir = self.coreset_dir();
        create_dir(&dir)?;
        let ids = &self.dataset.manifest().sample_ids;
        let mut written = Vec::new();
        for &method in &self.cfg.selectors {
            for &rho in &self.cfg.budgets {
                let coreset = select_for_dataset(&self.dataset, &self.cfg.coreset_spec(method, rho))?;
                let mut file = coreset.to_file(ids);
                file.config_hash = Some(self.hash.clone());
                let path = dir.join(coreset_file_name(method, rho));
                file.save(&path)?;
                written.push(path);
            }
        }
        Ok(written)
    }

    fn info(&self, tag: FeatureTag, coreset: Option<&CoresetFile>) -> ArtifactInfo {
        ArtifactInfo {
            tag,
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            source_model: self.dataset.source_model().to_string(),
            coreset_source_model: coreset.map(|c| c.source_model.clone()),
        }
    }

    /// Features for every configured method on the full data, or on the
    /// coreset stored at `coreset_path`. Returns the artifact directories.
    pub fn interpret(&self, coreset_path: Option<&Path>) -> Result<Vec<PathBuf>> {
        let coreset = coreset_path.map(CoresetFile::load).transpose()?;
        let view = match &coreset {
            Some(c) => apply_coreset(c, &self.dataset)?,
            None => self.dataset.full_view(),
        };
        let mut dirs = Vec::new();
        for &method in &self.cfg.methods {
            let tag = match &coreset {
                Some(c) => FeatureTag::for_coreset(method, c, self.dataset.source_model()),
                None => FeatureTag::full(method),
            };
            let dir = tag.dir(&self.cfg.output_dir, &self.model);
            let features = interpret(&view, method, &self.cfg)?;
            save_features(&features, &self.info(tag, coreset.as_ref()), &dir)?;
            dirs.push(dir);
        }
        Ok(dirs)
    }

    /// Compares coreset features against full-data features and writes
    /// `similarity.json` and `fidelity.json` next to the coreset features.
    pub fn evaluate(&self, full_dir: &Path, core_dir: &Path) -> Result<Evaluation> {
        let (full, _) = load_features(full_dir)?;
        self.evaluate_against(&Reference::new(full, &self.dataset)?, core_dir)
    }

    pub fn evaluate_against(&self, reference: &Reference<'_>, core_dir: &Path) -> Result<Evaluation> {
        let (core, info) = load_features(core_dir)?;
        if reference.features().method() != info.tag.method {
            return Err(Error::invalid("feature directories hold different methods"));
        }
        let labels = ReportLabels {
            interpretation: info.tag.method.name().to_string(),
            coreset: info.tag.coreset.clone(),
            model: self.model.clone(),
        };
        let eval = reference.evaluate(&core, &self.cfg.metric_config(), labels, info.tag.rho)?;
        write_json(&core_dir.join("similarity.json"), &Stamped::new(&eval.similarity, &self.hash, self.cfg.seed))?;
        write_json(&core_dir.join("fidelity.json"), &Stamped::new(&eval.fidelity, &self.hash, self.cfg.seed))?;
        Ok(eval)
    }

    /// Summarizes stored similarity reports for every (method, selector)
    /// over the configured budgets between 10% and 50%.
    pub fn robustness(&self) -> Result<(Vec<RobustnessReport>, String)> {
        let mut reports = Vec::new();
        for &method in &self.cfg.methods {
            for &selector in &self.cfg.selectors {
                let mut sims = Vec::new();
                for &rho in self.cfg.budgets.iter().filter(|&&b| ROBUSTNESS_BUDGETS.iter().any(|x| (x - b).abs() < 1e-9)) {
                    let tag = FeatureTag {
                        method,
                        coreset: selector.name().to_string(),
                        rho: Some(rho),
                    };
                    let path = tag.dir(&self.cfg.output_dir, &self.model).join("similarity.json");
                    if path.exists() {
                        let stamped: Stamped<SimilarityReport> = read_json(&path)?;
                        sims.push(stamped.report);
                    }
                }
                if sims.len() >= 2 {
                    reports.push(robustness_summary(&sims)?);
                } else {
                    log::warn!("{method}/{selector}: fewer than two evaluated budgets, skipped");
                }
            }
        }
        if reports.is_empty() {
            return Err(Error::invalid("no evaluated budgets to summarize"));
        }
        let table = robustness_table(&reports);
        let dir = self.model_dir();
        create_dir(&dir)?;
        write_json(&dir.join("robustness.json"), &Stamped::new(&reports, &self.hash, self.cfg.seed))?;
        fs::write(dir.join("robustness.txt"), &table).map_err(|e| Error::io(dir.join("robustness.txt"), e))?;
        Ok((reports, table))
    }

    /// Every step for every grid cell: select, interpret, evaluate,
    /// robustness, plus a fidelity CSV with the full-data reference rows.
    pub fn run_all(&self) -> Result<String> {
        let coresets = self.select()?;
        let full_dirs = self.interpret(None)?;
        let mut core_dirs = Vec::new();
        for path in &coresets {
            core_dirs.push(self.interpret(Some(path))?);
        }
        let mut fid_reports = Vec::new();
        for (k, full_dir) in full_dirs.iter().enumerate() {
            let (full, _) = load_features(full_dir)?;
            let reference = Reference::new(full, &self.dataset)?;
            fid_reports.push(reference.fidelity().clone());
            for dirs in &core_dirs {
                fid_reports.push(self.evaluate_against(&reference, &dirs[k])?.fidelity);
            }
        }
        let csv = fidelity::fidelity_csv(&fid_reports);
        let path = self.model_dir().join("fidelity.csv");
        fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        Ok(self.robustness()?.1)
    }

    /// Heatmap panel: one row per sample, the raw image (or a gray stand-in)
    /// followed by one overlay per feature directory.
    pub fn visualize(
        &self,
        feature_dirs: &[PathBuf],
        sample_ids: &[String],
        images_dir: Option<&Path>,
        size: (usize, usize),
        out_path: &Path,
    ) -> Result<PanelMetadata> {
        let loaded: Vec<(Features, ArtifactInfo)> = feature_dirs.iter().map(|d| load_features(d)).collect::<Result<_>>()?;
        let lookup: BTreeMap<&str, usize> = self
            .dataset
            .manifest()
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut rows = Vec::new();
        for id in sample_ids {
            let &i = lookup
                .get(id.as_str())
                .ok_or_else(|| Error::MissingSamples(vec![id.clone()]))?;
            let base = match images_dir.map(|d| d.join(format!("{id}.png"))) {
                Some(p) if p.exists() => {
                    let img = viz::read_rgb(&p)?;
                    image::imageops::resize(&img, size.1 as u32, size.0 as u32, image::imageops::FilterType::Triangle)
                }
                _ => viz::placeholder_image(size.0, size.1),
            };
            let mut row = vec![base.clone()];
            for (features, info) in &loaded {
                let z = sample_maps(features, &self.dataset, i)?;
                let k = self.cfg.viz_k.min(z.dim().2);
                let source = HeatmapSource {
                    sample_id: id.clone(),
                    method: format!("{}/{}", info.tag.method, info.tag.coreset),
                    k,
                };
                let hm = viz::compose_heatmap(z.view(), k, size, source)?;
                row.push(viz::blend(&hm, &base)?);
            }
            rows.push(row);
        }
        let panel: RgbImage = viz::compose_grid(&rows, 4);
        viz::save_png(&panel, out_path)?;
        let meta = PanelMetadata {
            columns: std::iter::once("image".to_string())
                .chain(loaded.iter().map(|(_, info)| {
                    let rho = info.tag.rho.map_or_else(|| "all".to_string(), rho_label);
                    format!("{}/{}/{rho}", info.tag.method, info.tag.coreset)
                }))
                .collect(),
            samples: sample_ids.to_vec(),
            render: RenderMetadata::new(self.cfg.viz_k),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
        };
        write_json(&out_path.with_extension("json"), &meta)?;
        Ok(meta)
    }
}

/// Maps `[h, w, channels]` of one sample under `features`. VEBI uses the
/// sample's class units in the head's input layer.
pub fn sample_maps(features: &Features, dataset: &Dataset, index: usize) -> Result<Array3<f64>> {
    let view = dataset.view(vec![index])?;
    let class = dataset.labels()[index];
    let last = dataset.manifest().last_layer();
    let maps = match features {
        Features::Ice(ice) => ice_maps(view.tensor(&ice.layer_id)?.view(), class_model(ice, class)?, &ice.params)?,
        Features::Topic(model) => topic_maps(view.tensor(last)?.view(), model)?,
        Features::Vebi(units) => {
            let filters: Vec<usize> = units
                .class_units(class)
                .iter()
                .filter(|u| u.layer_id == last)
                .map(|u| u.filter)
                .collect();
            vebi_maps(view.tensor(last)?.view(), &filters)?
        }
    };
    Ok(maps.index_axis_move(Axis(0), 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMetadata {
    pub columns: Vec<String>,
    pub samples: Vec<String>,
    pub render: RenderMetadata,
    pub config_hash: String,
    pub seed: u64,
}

/// A report together with the config hash and seed that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    pub report: T,
}

impl<T: Clone> Stamped<T> {
    pub fn new(report: &T, hash: &str, seed: u64) -> Self {
        Self {
            config_hash: hash.to_string(),
            seed,
            report: report.clone(),
        }
    }
}
