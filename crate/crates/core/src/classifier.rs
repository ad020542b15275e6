//! One-vs-rest logistic regression over sentence embeddings.
//!
//! Every class gets an independent sigmoid model, so a confidence vector is
//! a list of per-intent probabilities that need not sum to one. The same
//! trainer produces the in-scope classifier, the K+1 classifier (OOS as an
//! extra label) and the single-output IS/OOS gate.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::featurize::EmbeddingVector;
use crate::simd;

/// Label reserved for out-of-scope training examples.
pub const OOS_LABEL: &str = "<oos>";
/// Label of the single output of a binary gate.
pub const IN_SCOPE_LABEL: &str = "<in_scope>";

// 32 weight rows (32 KiB at 256 dims) stay cache resident while the
// examples stream past once per block.
const CLASS_BLOCK: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("class `{0}` has no training examples")]
    MissingClassExamples(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("binary gate needs both in-scope and out-of-scope examples")]
    SingleClassBinary,
    #[error("{kind:?} needs at least {needed} classes, got {got}")]
    TooFewClasses { kind: ModelKind, needed: usize, got: usize },
    #[error("example label `{0}` is not a declared class")]
    UnknownLabel(String),
    #[error("no training examples")]
    NoExamples,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// One sigmoid per in-scope intent.
    OvrIs,
    /// One sigmoid: P(in scope). Examples labelled [`OOS_LABEL`] are negatives.
    BinaryGate,
    /// One sigmoid per intent plus one for [`OOS_LABEL`].
    KPlusOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial per-example step size; decays as `lr / (1 + lr * l2 * t)`.
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    /// Small training sets get extra epochs until this many updates happen.
    pub min_updates: usize,
    /// Weight examples inversely to their class frequency.
    pub balanced_class_weights: bool,
    /// Seed of the per-epoch example order.
    pub shuffle_seed: u64,
    /// Gradients smaller than this in magnitude are skipped.
    pub update_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            l2: 1e-4,
            epochs: 4,
            min_updates: 20_000,
            balanced_class_weights: false,
            shuffle_seed: 0,
            update_tolerance: 1e-3,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.update_tolerance.is_nan() || self.update_tolerance < 0.0 {
            return bad("update_tolerance must be non-negative");
        }
        Ok(())
    }
}

/// Per-intent sigmoid scores in `[0, 1]`, aligned with `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector {
    labels: Arc<[String]>,
    values: Vec<f64>,
}

impl ConfidenceVector {
    pub fn new(labels: Arc<[String]>, values: Vec<f64>) -> Self {
        assert_eq!(labels.len(), values.len(), "labels and values must align");
        Self { labels, values }
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        let (labels, values): (Vec<String>, Vec<f64>) = pairs.into_iter().map(|(l, v)| (l.into(), v)).unzip();
        Self::new(labels.into(), values)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.values[i])
    }

    pub fn max(&self) -> Option<f64> {
        self.values.iter().copied().reduce(f64::max)
    }

    /// Index of the highest value; ties go to the lexicographically
    /// smallest label.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.values.iter().enumerate() {
            best = match best {
                None => Some(i),
                Some(b) => {
                    let bv = self.values[b];
                    if v > bv || (v == bv && self.labels[i] < self.labels[b]) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            labels: Arc::clone(&self.labels),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

impl Serialize for ConfidenceVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.values.len()))?;
        for (l, v) in self.labels.iter().zip(&self.values) {
            map.serialize_entry(l, v)?;
        }
        map.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentModel {
    pub kind: ModelKind,
    labels: Vec<String>,
    dim: usize,
    /// Row-major `labels.len() x dim`.
    weights: Vec<f32>,
    bias: Vec<f32>,
    pub config: TrainConfig,
    #[serde(skip)]
    shared_labels: Option<Arc<[String]>>,
}

impl IntentModel {
    /// A model with all weights and biases at zero.
    pub fn zeros(kind: ModelKind, labels: Vec<String>, dim: usize) -> Self {
        let k = labels.len();
        Self {
            kind,
            shared_labels: Some(labels.clone().into()),
            labels,
            dim,
            weights: vec![0.0; k * dim],
            bias: vec![0.0; k],
            config: TrainConfig::default(),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_weights(&self, class: usize) -> (&[f32], f32) {
        (&self.weights[class * self.dim..(class + 1) * self.dim], self.bias[class])
    }

    fn label_arc(&self) -> Arc<[String]> {
        match &self.shared_labels {
            Some(a) => Arc::clone(a),
            None => self.labels.clone().into(),
        }
    }

    /// Restores the cached label list after deserialization.
    pub(crate) fn prepare(&mut self) {
        self.shared_labels = Some(self.labels.clone().into());
    }

    pub fn predict_conf(&self, emb: &EmbeddingVector) -> Result<ConfidenceVector, ClassifierError> {
        if emb.dim() != self.dim {
            return Err(ClassifierError::DimMismatch {
                expected: self.dim,
                got: emb.dim(),
            });
        }
        let mut logits = vec![0f32; self.labels.len()];
        simd::dot_rows(&self.weights, self.dim, emb.values(), &mut logits);
        let values = logits
            .iter()
            .zip(&self.bias)
            .map(|(&z, &b)| simd::sigmoid(f64::from(z) + f64::from(b)))
            .collect();
        Ok(ConfidenceVector::new(self.label_arc(), values))
    }
}

/// Trains on `examples`, taking the class list from the labels present.
pub fn train(
    examples: &[(EmbeddingVector, String)],
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<IntentModel, ClassifierError> {
    let classes: Vec<String> = match kind {
        ModelKind::BinaryGate => vec![IN_SCOPE_LABEL.to_string()],
        _ => examples
            .iter()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    train_with_classes(examples, &classes, kind, config)
}

/// Trains with an explicit class list; every class needs an example.
pub fn train_with_classes(
    examples: &[(EmbeddingVector, String)],
    classes: &[String],
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<IntentModel, ClassifierError> {
    config.validate()?;
    let first = examples.first().ok_or(ClassifierError::NoExamples)?;
    let dim = first.0.dim();
    if let Some((bad, _)) = examples.iter().find(|(e, _)| e.dim() != dim) {
        return Err(ClassifierError::DimMismatch {
            expected: dim,
            got: bad.dim(),
        });
    }

    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let targets: Vec<Option<usize>> = match kind {
        ModelKind::BinaryGate => {
            let t: Vec<_> = examples
                .iter()
                .map(|(_, l)| if l == OOS_LABEL { None } else { Some(0) })
                .collect();
            if t.iter().all(Option::is_some) || t.iter().all(Option::is_none) {
                return Err(ClassifierError::SingleClassBinary);
            }
            t
        }
        _ => examples
            .iter()
            .map(|(_, l)| {
                index
                    .get(l.as_str())
                    .copied()
                    .map(Some)
                    .ok_or_else(|| ClassifierError::UnknownLabel(l.clone()))
            })
            .collect::<Result<_, _>>()?,
    };

    let needed = match kind {
        ModelKind::OvrIs => 1,
        ModelKind::KPlusOne => 2,
        ModelKind::BinaryGate => 1,
    };
    if classes.len() < needed {
        return Err(ClassifierError::TooFewClasses {
            kind,
            needed,
            got: classes.len(),
        });
    }

    let mut counts = vec![0usize; classes.len()];
    let mut none_count = 0usize;
    for t in &targets {
        match t {
            Some(c) => counts[*c] += 1,
            None => none_count += 1,
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(ClassifierError::MissingClassExamples(classes[c].clone()));
    }

    let n = examples.len();
    let sample_weight: Vec<f64> = if config.balanced_class_weights {
        let groups = classes.len() + usize::from(none_count > 0);
        targets
            .iter()
            .map(|t| {
                let size = t.map_or(none_count, |c| counts[c]);
                n as f64 / (groups as f64 * size as f64)
            })
            .collect()
    } else {
        vec![1.0; n]
    };

    let mut x = Vec::with_capacity(n * dim);
    for (e, _) in examples {
        x.extend_from_slice(e.values());
    }

    let epochs = config.epochs.max(config.min_updates.div_ceil(n));
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let orders: Vec<Vec<u32>> = (0..epochs)
        .map(|_| {
            let mut o: Vec<u32> = (0..n as u32).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();

    let total_weight: f64 = sample_weight.iter().sum();
    let mut positive_weight = vec![0f64; classes.len()];
    for (t, w) in targets.iter().zip(&sample_weight) {
        if let Some(c) = t {
            positive_weight[*c] += w;
        }
    }
    // starting at the prior keeps the first epoch from spending most of
    // its updates pulling every bias down
    let prior_logit: Vec<f64> = positive_weight
        .iter()
        .map(|&p| {
            let q = (p / total_weight).clamp(1e-6, 1.0 - 1e-6);
            (q / (1.0 - q)).ln()
        })
        .collect();

    let data = TrainData {
        prior_logit: &prior_logit,
        x: &x,
        dim,
        targets: &targets,
        sample_weight: &sample_weight,
        orders: &orders,
    };
    let blocks: Vec<(usize, usize)> = (0..classes.len())
        .step_by(CLASS_BLOCK)
        .map(|s| (s, (s + CLASS_BLOCK).min(classes.len())))
        .collect();
    let trained: Vec<(Vec<f32>, Vec<f32>)> = blocks
        .par_iter()
        .map(|&(lo, hi)| train_block(&data, lo, hi, config))
        .collect();

    let mut weights = Vec::with_capacity(classes.len() * dim);
    let mut bias = Vec::with_capacity(classes.len());
    for (w, b) in trained {
        weights.extend(w);
        bias.extend(b);
    }
    Ok(IntentModel {
        kind,
        shared_labels: Some(classes.to_vec().into()),
        labels: classes.to_vec(),
        dim,
        weights,
        bias,
        config: config.clone(),
    })
}

struct TrainData<'a> {
    x: &'a [f32],
    dim: usize,
    targets: &'a [Option<usize>],
    sample_weight: &'a [f64],
    orders: &'a [Vec<u32>],
    /// Starting bias per class: the log-odds of its weighted prior.
    prior_logit: &'a [f64],
}

/// SGD for classes `lo..hi`. Each class evolves independently of the others
/// in the block, so results do not depend on how classes are grouped.
fn train_block(data: &TrainData<'_>, lo: usize, hi: usize, cfg: &TrainConfig) -> (Vec<f32>, Vec<f32>) {
    let dim = data.dim;
    let width = hi - lo;
    // w_k = scale_k * v_k keeps the L2 shrinkage O(1) per step
    let mut v = vec![0f32; width * dim];
    let mut scale = vec![1f64; width];
    let mut bias = data.prior_logit[lo..hi].to_vec();
    let mut dots = vec![0f32; width];
    // skipping |g| < tol for negatives means z < logit(tol)
    let skip_below = if cfg.update_tolerance > 0.0 && cfg.update_tolerance < 1.0 {
        (cfg.update_tolerance / (1.0 - cfg.update_tolerance)).ln()
    } else {
        f64::NEG_INFINITY
    };
    let mut t = 0u64;
    for order in data.orders {
        for &i in order {
            let i = i as usize;
            let eta = cfg.learning_rate / (1.0 + cfg.learning_rate * cfg.l2 * t as f64);
            t += 1;
            let decay = 1.0 - eta * cfg.l2;
            let xi = &data.x[i * dim..(i + 1) * dim];
            let target = data.targets[i];
            let sw = data.sample_weight[i];
            simd::dot_rows(&v, dim, xi, &mut dots);
            for k in 0..width {
                let vk = &mut v[k * dim..(k + 1) * dim];
                let z = scale[k] * f64::from(dots[k]) + bias[k];
                scale[k] *= decay;
                let positive = target == Some(lo + k);
                if !positive && z < skip_below {
                    continue;
                }
                let g = (simd::sigmoid(z) - if positive { 1.0 } else { 0.0 }) * sw;
                if g.abs() < cfg.update_tolerance {
                    continue;
                }
                simd::axpy((-eta * g / scale[k]) as f32, xi, vk);
                bias[k] -= eta * g;
                if scale[k] < 1e-6 {
                    let s = scale[k] as f32;
                    vk.iter_mut().for_each(|w| *w *= s);
                    scale[k] = 1.0;
                }
            }
        }
    }
    let mut w = Vec::with_capacity(width * dim);
    for k in 0..width {
        let s = scale[k] as f32;
        w.extend(v[k * dim..(k + 1) * dim].iter().map(|&x| x * s));
    }
    (w, bias.into_iter().map(|b| b as f32).collect())
}
