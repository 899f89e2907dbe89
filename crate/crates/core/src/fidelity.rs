//! Accuracy of the frozen classifier head on interpretation maps, and
//! accuracy drops when identified units are zeroed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array4, ArrayView1, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{partition_by_class, pool_maps, ClassifierHead};
use crate::error::{Error, Result};
use crate::vebi::RelevantUnits;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `head.weights . pooled + head.bias`, one row per sample.
pub fn logits(pooled: ArrayView2<'_, f64>, head: &ClassifierHead) -> Result<ndarray::Array2<f64>> {
    if pooled.ncols() != head.input_depth() {
        return Err(Error::Shape(format!(
            "maps have depth {} but the head expects {}",
            pooled.ncols(),
            head.input_depth()
        )));
    }
    Ok(pooled.dot(&head.weights.t()) + &head.bias)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

pub fn predict(maps: ArrayView4<'_, f64>, head: &ClassifierHead) -> Result<Vec<usize>> {
    let scores = logits(pool_maps(maps).view(), head)?;
    Ok(scores
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(argmax)
        .collect())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// GAP, linear head, argmax; accuracy against `labels`.
pub fn classify(maps: ArrayView4<'_, f64>, labels: &[usize], head: &ClassifierHead) -> Result<Classification> {
    if maps.dim().0 != labels.len() {
        return Err(Error::Shape(format!(
            "{} maps for {} labels",
            maps.dim().0,
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("nothing to classify"));
    }
    let predictions = predict(maps, head)?;
    let accuracy = accuracy(&predictions, labels);
    Ok(Classification { predictions, accuracy })
}

/// [`classify`] on raw activations, through the same `f64` path.
pub fn classify_tensor(t: ArrayView4<'_, f32>, labels: &[usize], head: &ClassifierHead) -> Result<Classification> {
    classify(t.mapv(f64::from).view(), labels, head)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Condition {
    pub method: String,
    pub coreset: String,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub accuracy_drop: f64,
    pub n_evaluated: usize,
    pub condition: Condition,
    #[serde(default)]
    pub per_class_accuracy: BTreeMap<usize, f64>,
    /// Layer whose channels were zeroed, for perturbation reports.
    #[serde(default)]
    pub perturbed_layer: Option<String>,
}

impl FidelityReport {
    pub fn new(predictions: &[usize], labels: &[usize], baseline_accuracy: f64, condition: Condition) -> Result<Self> {
        if labels.is_empty() || predictions.len() != labels.len() {
            return Err(Error::invalid("fidelity report needs one prediction per label"));
        }
        let accuracy = accuracy(predictions, labels);
        let mut per_class_accuracy = BTreeMap::new();
        for (c, idx) in partition_by_class(labels) {
            let hits = idx.iter().filter(|&&i| predictions[i] == c).count();
            per_class_accuracy.insert(c, hits as f64 / idx.len() as f64);
        }
        Ok(Self {
            accuracy,
            baseline_accuracy,
            accuracy_drop: baseline_accuracy - accuracy,
            n_evaluated: labels.len(),
            condition,
            per_class_accuracy,
            perturbed_layer: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn zero_channels(maps: &mut Array4<f64>, samples: &[usize], filters: &[usize]) {
    for &i in samples {
        let mut sample = maps.index_axis_mut(Axis(0), i);
        for &f in filters {
            sample.index_axis_mut(Axis(2), f).fill(0.0);
        }
    }
}

fn check_filters(filters: &[usize], depth: usize) -> Result<()> {
    match filters.iter().find(|&&f| f >= depth) {
        Some(f) => Err(Error::invalid(format!("filter {f} out of range for depth {depth}"))),
        None => Ok(()),
    }
}

/// Zeroes `filters` on the samples of `class` and reports that class's
/// accuracy before and after.
pub fn perturb_and_classify(
    t: ArrayView4<'_, f32>,
    labels: &[usize],
    class: usize,
    filters: &[usize],
    head: &ClassifierHead,
    condition: Condition,
) -> Result<FidelityReport> {
    check_filters(filters, t.dim().3)?;
    let samples: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == class).then_some(i))
        .collect();
    if samples.is_empty() {
        return Err(Error::invalid(format!("class {class} has no samples")));
    }
    let sub = t.select(Axis(0), &samples).mapv(f64::from);
    let sub_labels = vec![class; samples.len()];
    let baseline = classify(sub.view(), &sub_labels, head)?.accuracy;
    let mut maps = sub;
    let all: Vec<usize> = (0..samples.len()).collect();
    zero_channels(&mut maps, &all, filters);
    let predictions = predict(maps.view(), head)?;
    let mut report = FidelityReport::new(&predictions, &sub_labels, baseline, condition)?;
    report.perturbed_layer = Some(head.input_layer_id.clone());
    Ok(report)
}

/// Every class loses its own units (those in the head's input layer) on its
/// own samples; accuracy over all samples.
pub fn perturb_all_classes(
    t: ArrayView4<'_, f32>,
    labels: &[usize],
    units: &RelevantUnits,
    head: &ClassifierHead,
    condition: Condition,
) -> Result<FidelityReport> {
    let depth = t.dim().3;
    let mut maps = t.mapv(f64::from);
    let baseline = classify(maps.view(), labels, head)?.accuracy;
    for (c, idx) in partition_by_class(labels) {
        let filters: Vec<usize> = units
            .class_units(c)
            .iter()
            .filter(|u| u.layer_id == head.input_layer_id)
            .map(|u| u.filter)
            .collect();
        check_filters(&filters, depth)?;
        zero_channels(&mut maps, &idx, &filters);
    }
    let predictions = predict(maps.view(), head)?;
    let mut report = FidelityReport::new(&predictions, labels, baseline, condition)?;
    report.perturbed_layer = Some(head.input_layer_id.clone());
    Ok(report)
}

/// `rho,method,coreset,accuracy` rows; the full-data reference has an empty
/// budget written as `1`.
pub fn fidelity_csv(reports: &[FidelityReport]) -> String {
    let mut out = String::from("rho,method,coreset,accuracy\n");
    for r in reports {
        let rho = r.condition.rho.unwrap_or(1.0);
        let _ = writeln!(out, "{rho},{},{},{}", r.condition.method, r.condition.coreset, r.accuracy);
    }
    out
}
