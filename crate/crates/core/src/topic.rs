//! Topic-based interpretation: topic vectors over the last-layer depth,
//! learned jointly with a two-layer recovery map so that projected
//! activations still classify correctly through the frozen head.
//!
//! Forward pass per spatial location `a` (depth `d`):
//! `z = relu(a T)`, `r = relu(z W1 W2)`; pooled `r` goes through the head
//! and the loss is the mean cross-entropy.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::{ClassifierHead, DatasetView};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicInit {
    #[default]
    Random,
    /// `T = I[:, :m]`, `W1 = I[:m, :l]`, `W2 = I[:l, :d]`: a pass-through
    /// when `m = d <= l`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicParams {
    pub m: usize,
    pub l: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: TopicInit,
}

impl Default for TopicParams {
    fn default() -> Self {
        Self {
            m: 10,
            l: 64,
            epochs: 20,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
            init: TopicInit::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    /// `[d, m]`, unit-norm columns after training.
    pub topics: Array2<f64>,
    /// `[m, l]`
    pub recovery_w1: Array2<f64>,
    /// `[l, d]`
    pub recovery_w2: Array2<f64>,
    pub initial_loss: f64,
    /// Full-data loss after every epoch.
    pub train_loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicGradients {
    pub topics: Array2<f64>,
    pub recovery_w1: Array2<f64>,
    pub recovery_w2: Array2<f64>,
}

impl TopicModel {
    pub fn m(&self) -> usize {
        self.topics.ncols()
    }

    pub fn l(&self) -> usize {
        self.recovery_w1.ncols()
    }

    pub fn depth(&self) -> usize {
        self.topics.nrows()
    }

    pub fn init(d: usize, params: &TopicParams) -> Self {
        let (m, l) = (params.m, params.l);
        let (topics, w1, w2) = match params.init {
            TopicInit::Identity => (
                Array2::eye(d.max(m)).slice(s![..d, ..m]).to_owned(),
                Array2::eye(m.max(l)).slice(s![..m, ..l]).to_owned(),
                Array2::eye(l.max(d)).slice(s![..l, ..d]).to_owned(),
            ),
            TopicInit::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                let mut draw = |shape: (usize, usize), scale: f64| {
                    Array2::from_shape_simple_fn(shape, || {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                };
                let mut t = draw((d, m), 1.0);
                normalize_columns(&mut t);
                // Positive means keep the relu layers active at the start.
                let w1 = draw((m, l), 1.0 / (m as f64).sqrt()).mapv(f64::abs);
                let w2 = draw((l, d), 1.0 / (l as f64).sqrt()).mapv(f64::abs);
                (t, w1, w2)
            }
        };
        Self {
            topics,
            recovery_w1: w1,
            recovery_w2: w2,
            initial_loss: f64::NAN,
            train_loss_curve: Vec::new(),
        }
    }

    /// Rescales topic columns to unit norm and folds the scale into the
    /// matching rows of `W1`, which leaves the network output unchanged
    /// because relu is positively homogeneous.
    pub fn renormalize(&mut self) {
        for j in 0..self.m() {
            let norm = self.topics.column(j).dot(&self.topics.column(j)).sqrt();
            if norm > 0.0 {
                self.topics.column_mut(j).mapv_inplace(|v| v / norm);
                self.recovery_w1.row_mut(j).mapv_inplace(|v| v * norm);
            }
        }
    }
}

fn normalize_columns(t: &mut Array2<f64>) {
    for mut col in t.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
}

fn flatten_f32(x: ArrayView4<'_, f32>) -> Array2<f64> {
    let (n, h, w, d) = x.dim();
    x.mapv(f64::from)
        .into_shape_with_order((n * h * w, d))
        .expect("contiguous")
}

fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn log_softmax_row(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

struct Forward {
    x: Array2<f64>,
    pre_topic: Array2<f64>,
    z: Array2<f64>,
    hidden: Array2<f64>,
    pre_out: Array2<f64>,
    logits: Array2<f64>,
}

fn forward(model: &TopicModel, x: ArrayView4<'_, f32>, head: &ClassifierHead) -> Forward {
    let (n, h, w, _) = x.dim();
    let hw = h * w;
    let flat = flatten_f32(x);
    let pre_topic = flat.dot(&model.topics);
    let mut z = pre_topic.clone();
    relu(&mut z);
    let hidden = z.dot(&model.recovery_w1);
    let pre_out = hidden.dot(&model.recovery_w2);
    let mut out = pre_out.clone();
    relu(&mut out);
    let pooled = out
        .into_shape_with_order((n, hw, model.depth()))
        .expect("contiguous")
        .mean_axis(Axis(1))
        .expect("hw > 0");
    let logits = pooled.dot(&head.weights.t()) + &head.bias;
    Forward {
        x: flat,
        pre_topic,
        z,
        hidden,
        pre_out,
        logits,
    }
}

fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| -log_softmax_row(row)[y])
        .sum();
    total / labels.len() as f64
}

fn check_batch(model: &TopicModel, x: ArrayView4<'_, f32>, labels: &[usize], head: &ClassifierHead) -> Result<()> {
    let d = x.dim().3;
    if d != model.depth() || d != head.input_depth() {
        return Err(Error::Shape(format!(
            "depth {d} does not match topics ({}) or head ({})",
            model.depth(),
            head.input_depth()
        )));
    }
    if labels.len() != x.dim().0 {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), x.dim().0)));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= head.num_classes()) {
        return Err(Error::invalid(format!("label {bad} outside the head's classes")));
    }
    Ok(())
}

/// Mean cross-entropy of `labels` through topics, recovery and head.
pub fn topic_loss(model: &TopicModel, x: ArrayView4<'_, f32>, labels: &[usize], head: &ClassifierHead) -> Result<f64> {
    check_batch(model, x, labels, head)?;
    Ok(cross_entropy(forward(model, x, head).logits.view(), labels))
}

/// Loss and analytic gradients with respect to `T`, `W1` and `W2`.
pub fn topic_loss_and_gradients(
    model: &TopicModel,
    x: ArrayView4<'_, f32>,
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<(f64, TopicGradients)> {
    check_batch(model, x, labels, head)?;
    let (n, h, w, d) = x.dim();
    let hw = h * w;
    let fwd = forward(model, x, head);
    let loss = cross_entropy(fwd.logits.view(), labels);

    let mut dlogits = Array2::<f64>::zeros(fwd.logits.raw_dim());
    for (i, (row, &y)) in fwd.logits.outer_iter().zip(labels).enumerate() {
        let probs = log_softmax_row(row).mapv(f64::exp);
        let mut out = dlogits.row_mut(i);
        out.assign(&probs);
        out[y] -= 1.0;
    }
    dlogits /= n as f64;
    let dpooled = dlogits.dot(&head.weights) / hw as f64;

    // Broadcast the pooled gradient to every location, masked by the relu.
    let mut dpre_out = Array2::<f64>::zeros((n * hw, d));
    for i in 0..n {
        let g = dpooled.row(i);
        let mut block = dpre_out.slice_mut(s![i * hw..(i + 1) * hw, ..]);
        let pre = fwd.pre_out.slice(s![i * hw..(i + 1) * hw, ..]);
        Zip::from(block.rows_mut()).and(pre.rows()).for_each(|mut out, pre_row| {
            Zip::from(&mut out).and(&g).and(&pre_row).for_each(|o, &gv, &p| {
                *o = if p > 0.0 { gv } else { 0.0 };
            });
        });
    }
    let d_w2 = fwd.hidden.t().dot(&dpre_out);
    let d_hidden = dpre_out.dot(&model.recovery_w2.t());
    let d_w1 = fwd.z.t().dot(&d_hidden);
    let mut d_pre_topic = d_hidden.dot(&model.recovery_w1.t());
    Zip::from(&mut d_pre_topic)
        .and(&fwd.pre_topic)
        .for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
    let d_topics = fwd.x.t().dot(&d_pre_topic);
    Ok((
        loss,
        TopicGradients {
            topics: d_topics,
            recovery_w1: d_w1,
            recovery_w2: d_w2,
        },
    ))
}

fn full_loss(model: &TopicModel, x: ArrayView4<'_, f32>, labels: &[usize], head: &ClassifierHead, chunk: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let fwd = forward(model, x.slice(s![start..end, .., .., ..]), head);
        total += cross_entropy(fwd.logits.view(), &labels[start..end]) * (end - start) as f64;
        start = end;
    }
    total / n as f64
}

/// Mini-batch gradient descent on the cross-entropy objective.
pub fn fit_topics_on(x: ArrayView4<'_, f32>, labels: &[usize], head: &ClassifierHead, params: &TopicParams) -> Result<TopicModel> {
    let d = x.dim().3;
    if params.m == 0 || params.m > d {
        return Err(Error::invalid(format!("topic count {} outside 1..={d}", params.m)));
    }
    if params.l == 0 || params.batch_size == 0 {
        return Err(Error::invalid("recovery width and batch size must be positive"));
    }
    if !(params.lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let mut model = TopicModel::init(d, params);
    check_batch(&model, x, labels, head)?;
    let n = labels.len();
    let chunk = 256;
    model.initial_loss = full_loss(&model, x, labels, head, chunk);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x70_91c5);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(params.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, g) = topic_loss_and_gradients(&model, xb.view(), &yb, head)?;
            model.topics.scaled_add(-params.lr, &g.topics);
            model.recovery_w1.scaled_add(-params.lr, &g.recovery_w1);
            model.recovery_w2.scaled_add(-params.lr, &g.recovery_w2);
        }
        model.renormalize();
        let loss = full_loss(&model, x, labels, head, chunk);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "topic loss became {loss} at epoch {}; try a lower learning rate",
                epoch + 1
            )));
        }
        model.train_loss_curve.push(loss);
    }
    if params.epochs == 0 {
        model.renormalize();
    }
    Ok(model)
}

/// Fits topics on the head's input layer for the samples of `view`.
pub fn fit_topics(view: &DatasetView<'_>, head: &ClassifierHead, params: &TopicParams) -> Result<TopicModel> {
    let t = view.tensor(&head.input_layer_id)?;
    fit_topics_on(t.view(), &view.labels(), head, params)
}

/// `Z[i, u, v, :] = relu(A[i, u, v, :] T)`
pub fn topic_maps(t: ArrayView4<'_, f32>, model: &TopicModel) -> Result<Array4<f64>> {
    let (n, h, w, d) = t.dim();
    if d != model.depth() {
        return Err(Error::Shape(format!("tensor depth {d}, topics expect {}", model.depth())));
    }
    let mut z = flatten_f32(t).dot(&model.topics);
    relu(&mut z);
    Ok(z.into_shape_with_order((n, h, w, model.m())).expect("same element count"))
}

/// `relu(Z W1 W2)`, back in activation depth.
pub fn topic_reconstruct(maps: ArrayView4<'_, f64>, model: &TopicModel) -> Result<Array4<f64>> {
    let (n, h, w, m) = maps.dim();
    if m != model.m() {
        return Err(Error::Shape(format!("maps depth {m}, model has {} topics", model.m())));
    }
    let flat = maps
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, m))
        .expect("standard layout");
    let mut out = flat.dot(&model.recovery_w1).dot(&model.recovery_w2);
    relu(&mut out);
    Ok(out.into_shape_with_order((n, h, w, model.depth())).expect("same element count"))
}
