//! Synthetic activation fixtures.
//!
//! Each sample has a latent channel vector drawn around its class mean and
//! spread over the spatial grid by per-sample patterns whose spatial mean is
//! exactly one, so pooling the last layer recovers the latent vector. The
//! bundled head is a nearest-class-mean classifier on pooled features.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::{
    global_average_pool, partition_by_class, write_manifest, ActivationTensor, ClassifierFiles,
    ClassifierHead, DatasetManifest,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelLayout {
    /// Every channel carries a class-dependent mean; each class owns the
    /// channels `ch` with `ch % C == c` as high-activation signature.
    Mixed,
    /// Class `c` drives channel `c` only; all other channels are noise.
    SingleActive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub spread: f64,
    pub seed: u64,
    /// Number of exported layers before the last one.
    pub early_layers: usize,
    pub early_depth: usize,
    pub layout: ChannelLayout,
    /// Selects a different "model" over the same samples: the last layer is
    /// passed through a seeded near-identity mixing. `None` keeps it as is.
    pub model_seed: Option<u64>,
    pub source_model: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 50,
            height: 4,
            width: 4,
            depth: 32,
            spread: 0.5,
            seed: 0,
            early_layers: 1,
            early_depth: 16,
            layout: ChannelLayout::Mixed,
            model_seed: None,
            source_model: "synthetic-a".into(),
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let dims = [
            self.classes,
            self.per_class,
            self.height,
            self.width,
            self.depth,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("synthetic dimensions must be positive"));
        }
        if self.early_layers > 0 && self.early_depth == 0 {
            return Err(Error::invalid("early layer depth must be positive"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::invalid("spread must be a finite non-negative number"));
        }
        if self.layout == ChannelLayout::SingleActive && self.depth < self.classes {
            return Err(Error::invalid("single-active layout needs depth >= classes"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.classes * self.per_class
    }
}

/// In-memory fixture: manifest (with relative file names filled in), one
/// tensor per layer in manifest order, and the bundled head.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub manifest: DatasetManifest,
    pub tensors: Vec<ActivationTensor>,
    pub head: ClassifierHead,
    /// Latent class means used by the generator.
    pub class_means: Array2<f64>,
}

fn layer_name(k: usize) -> String {
    format!("block{k}")
}

const SIGNATURE_BOOST: f64 = 2.0;
const SINGLE_ACTIVE_AMPLITUDE: f64 = 3.0;

fn class_means(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut means = Array2::<f64>::zeros((cfg.classes, cfg.depth));
    for c in 0..cfg.classes {
        for ch in 0..cfg.depth {
            means[[c, ch]] = match cfg.layout {
                ChannelLayout::Mixed => {
                    let base = 0.5 + 0.3 * rng.random::<f64>();
                    if ch % cfg.classes == c {
                        base + SIGNATURE_BOOST
                    } else {
                        base
                    }
                }
                ChannelLayout::SingleActive => {
                    if ch == c {
                        SINGLE_ACTIVE_AMPLITUDE
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    means
}

/// Positive spatial pattern with mean exactly one (in f64).
fn bump_pattern(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let cu = rng.random::<f64>() * h as f64;
    let cv = rng.random::<f64>() * w as f64;
    let sigma = 0.35 * h.max(w) as f64;
    let mut p = Array2::from_shape_fn((h, w), |(u, v)| {
        let du = u as f64 + 0.5 - cu;
        let dv = v as f64 + 0.5 - cv;
        0.2 + (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp()
    });
    let mean = p.mean().unwrap_or(1.0);
    p.mapv_inplace(|x| x / mean);
    p
}

fn flat_pattern(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((h, w), |_| 0.5 + rng.random::<f64>());
    let mean = p.mean().unwrap_or(1.0);
    p.mapv_inplace(|x| x / mean);
    p
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates the fixture in memory. Deterministic for a fixed config.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let (c_count, h, w, d) = (cfg.classes, cfg.height, cfg.width, cfg.depth);
    let n = cfg.n();
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg, &mut data_rng);

    let labels: Vec<usize> = (0..n).map(|i| i % c_count).collect();
    let sample_ids: Vec<String> = (0..n).map(|i| format!("sample_{i:06}")).collect();

    // Last layer of the reference model.
    let mut base = Array4::<f64>::zeros((n, h, w, d));
    for i in 0..n {
        let c = labels[i];
        let latent: Vec<f64> = (0..d)
            .map(|ch| (means[[c, ch]] + cfg.spread * normal(&mut data_rng)).max(0.0))
            .collect();
        let bump = bump_pattern(h, w, &mut data_rng);
        let flat = flat_pattern(h, w, &mut data_rng);
        for ch in 0..d {
            let signature = match cfg.layout {
                ChannelLayout::Mixed => ch % c_count == c,
                ChannelLayout::SingleActive => ch == c,
            };
            let pattern = if signature { &bump } else { &flat };
            for u in 0..h {
                for v in 0..w {
                    base[[i, u, v, ch]] = latent[ch] * pattern[[u, v]];
                }
            }
        }
    }

    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.model_seed.unwrap_or(0) ^ 0x5_eed0_fa11);
    let last = match cfg.model_seed {
        None => base.clone(),
        Some(_) => {
            let scale = 0.3 / (d as f64).sqrt();
            let mix = Array2::from_shape_fn((d, d), |(a, b)| {
                let g = scale * normal(&mut model_rng);
                if a == b {
                    1.0 + g
                } else {
                    g
                }
            });
            let flat = base.view().into_shape_with_order((n * h * w, d)).expect("standard layout");
            flat.dot(&mix.t())
                .mapv(|v| v.max(0.0))
                .into_shape_with_order((n, h, w, d))
                .expect("same element count")
        }
    };

    let flat_base = base.view().into_shape_with_order((n * h * w, d)).expect("standard layout");
    let mut tensors = Vec::with_capacity(cfg.early_layers + 1);
    let mut layer_ids = Vec::with_capacity(cfg.early_layers + 1);
    for k in 0..cfg.early_layers {
        let e = cfg.early_depth;
        let scale = 1.0 / (d as f64).sqrt();
        let mixing = Array2::from_shape_fn((e, d), |_| scale * model_rng.random::<f64>());
        let mut early = flat_base.dot(&mixing.t());
        let noise = 0.05 * cfg.spread.max(0.1);
        early.mapv_inplace(|v| (v + noise * normal(&mut data_rng)).max(0.0));
        let early = early.into_shape_with_order((n, h, w, e)).expect("same element count");
        let id = layer_name(k + 1);
        tensors.push(ActivationTensor::new(early.mapv(|v| v as f32), id.clone())?);
        layer_ids.push(id);
    }
    let last_id = layer_name(cfg.early_layers + 1);
    let last_tensor = ActivationTensor::new(last.mapv(|v| v as f32), last_id.clone())?;

    // Nearest-class-mean head on the stored (f32) pooled features.
    let pooled = global_average_pool(&last_tensor).data;
    let parts = partition_by_class(&labels);
    let mut weights = Array2::<f64>::zeros((c_count, d));
    let mut bias = Array1::<f64>::zeros(c_count);
    for (&c, idx) in &parts {
        let m = pooled.select(Axis(0), idx).mean_axis(Axis(0)).expect("non-empty class");
        bias[c] = -0.5 * m.dot(&m);
        weights.row_mut(c).assign(&m);
    }
    let head = ClassifierHead::new(weights, bias, last_id.clone())?;

    tensors.push(last_tensor);
    layer_ids.push(last_id.clone());
    let tensor_files = layer_ids
        .iter()
        .map(|id| (id.clone(), PathBuf::from(format!("{id}.npy"))))
        .collect();

    let manifest = DatasetManifest {
        sample_ids,
        labels,
        class_names: Some((0..c_count).map(|c| format!("class_{c}")).collect()),
        layer_ids,
        tensor_files,
        classifier_file: Some(ClassifierFiles {
            weights: PathBuf::from("head_weights.npy"),
            bias: PathBuf::from("head_bias.npy"),
            input_layer_id: last_id,
        }),
        source_model: cfg.source_model.clone(),
        metadata: Some(serde_json::json!({
            "generator": "synthetic",
            "activation": "post-nonlinearity",
            "config": cfg,
        })),
    };
    Ok(SyntheticData {
        manifest,
        tensors,
        head,
        class_means: means,
    })
}

/// Writes a generated fixture into `out_dir` and returns the manifest path.
pub fn make_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<PathBuf> {
    let data = generate(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for t in &data.tensors {
        t.write_npy(&out_dir.join(&data.manifest.tensor_files[t.layer_id()]))?;
    }
    let files = data.manifest.classifier_file.as_ref().expect("generator sets a head");
    data.head.save(out_dir, files)?;
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest_path, &data.manifest)?;
    Ok(manifest_path)
}

impl SyntheticData {
    /// In-memory dataset with the head attached. Head parameters go through
    /// `f32` exactly as when written to disk.
    pub fn into_dataset(self) -> Result<crate::activation::Dataset> {
        let head = ClassifierHead::new(
            self.head.weights.mapv(|v| f64::from(v as f32)),
            self.head.bias.mapv(|v| f64::from(v as f32)),
            self.head.input_layer_id.clone(),
        )?;
        crate::activation::Dataset::from_tensors(self.manifest, self.tensors)?.with_head(head)
    }
}
