//! Multinomial logistic regression over the per-pixel feature bank.

use serde::{Deserialize, Serialize};

use super::features::{FeatureImage, FEATURE_SPEC_VERSION, N_FEATURES};
use crate::error::{Error, Result};
use crate::volume::{ClassId, Image2};

/// Optimizer and regularization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            learning_rate: 1e-4,
            epochs: 150,
            batch_size: 256,
            l2: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A labeled mini-batch: `features[i * n_features + f]`, class index and
/// loss weight per sample.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, x: &[f64], label: usize, weight: f64) {
        self.features.extend_from_slice(x);
        self.labels.push(label);
        self.weights.push(weight);
    }
}

/// Linear softmax classifier with a bias column. Inputs are standardized as
/// `(x - shift) * scale` before the linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    pub classes: Vec<ClassId>,
    pub n_features: usize,
    /// Row-major `n_classes x (n_features + 1)`; the last column is the bias.
    pub weights: Vec<f64>,
    pub feature_shift: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub hyper: Hyper,
}

impl SoftmaxModel {
    /// Zero-initialized model over `classes` (sorted, deduplicated).
    pub fn new(classes: &[ClassId], n_features: usize, hyper: Hyper) -> Result<Self> {
        let mut classes = classes.to_vec();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Model("a classifier needs at least two classes".into()));
        }
        Ok(SoftmaxModel {
            weights: vec![0.0; classes.len() * (n_features + 1)],
            classes,
            n_features,
            feature_shift: vec![0.0; n_features],
            feature_scale: vec![1.0; n_features],
            hyper,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn row_len(&self) -> usize {
        self.n_features + 1
    }

    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn check_finite(&self) -> Result<()> {
        let all = self
            .weights
            .iter()
            .chain(&self.feature_shift)
            .chain(&self.feature_scale);
        if all.clone().any(|w| !w.is_finite()) {
            return Err(Error::Model("model parameters contain NaN or infinity".into()));
        }
        if self.weights.len() != self.n_classes() * self.row_len()
            || self.feature_shift.len() != self.n_features
            || self.feature_scale.len() != self.n_features
        {
            return Err(Error::Model("model parameter shapes are inconsistent".into()));
        }
        Ok(())
    }

    /// Standardizes raw features into `out`.
    #[inline]
    pub fn standardize(&self, raw: &[f32], out: &mut [f64]) {
        for ((o, &x), (s, k)) in out
            .iter_mut()
            .zip(raw)
            .zip(self.feature_shift.iter().zip(&self.feature_scale))
        {
            *o = (x as f64 - s) * k;
        }
    }

    #[inline]
    pub fn logits(&self, x: &[f64], out: &mut [f64]) {
        let r = self.row_len();
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weights[c * r..(c + 1) * r];
            *o = w[self.n_features] + w[..self.n_features].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Class probabilities for one standardized feature vector.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.n_classes()];
        self.logits(x, &mut z);
        softmax_in_place(&mut z);
        z
    }

    /// Weighted mean cross-entropy plus `l2/2 * |W|^2` (bias excluded), and
    /// its gradient with respect to `weights`.
    pub fn loss_and_grad(&self, batch: &Batch) -> (f64, Vec<f64>) {
        let r = self.row_len();
        let k = self.n_classes();
        let mut grad = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        let total_w: f64 = batch.weights.iter().sum();
        let mut p = vec![0.0; k];
        if total_w > 0.0 {
            for i in 0..batch.len() {
                let x = &batch.features[i * self.n_features..(i + 1) * self.n_features];
                let w = batch.weights[i] / total_w;
                self.logits(x, &mut p);
                let log_z = log_sum_exp(&p);
                loss -= w * (p[batch.labels[i]] - log_z);
                for c in 0..k {
                    let pc = (p[c] - log_z).exp();
                    let coef = w * (pc - if c == batch.labels[i] { 1.0 } else { 0.0 });
                    let g = &mut grad[c * r..(c + 1) * r];
                    for (gf, &xf) in g[..self.n_features].iter_mut().zip(x) {
                        *gf += coef * xf;
                    }
                    g[self.n_features] += coef;
                }
            }
        }
        let l2 = self.hyper.l2;
        for c in 0..k {
            for f in 0..self.n_features {
                let wv = self.weights[c * r + f];
                loss += 0.5 * l2 * wv * wv;
                grad[c * r + f] += l2 * wv;
            }
        }
        (loss, grad)
    }

    /// Argmax labels for every pixel of a feature image; ties go to the lower
    /// class id.
    pub fn predict_features(&self, feats: &FeatureImage) -> Result<Image2<ClassId>> {
        self.check_finite()?;
        if self.n_features != N_FEATURES {
            return Err(Error::Model(format!(
                "model expects {} features, bank provides {N_FEATURES}",
                self.n_features
            )));
        }
        let mut x = vec![0.0; self.n_features];
        let mut z = vec![0.0; self.n_classes()];
        let data = (0..feats.len())
            .map(|p| {
                self.standardize(feats.pixel(p), &mut x);
                self.logits(&x, &mut z);
                self.classes[argmax_first(&z)]
            })
            .collect();
        Image2::new(feats.width, feats.height, data)
    }

    pub fn to_file(&self, meta: &TrainingMeta) -> ModelFile {
        let r = self.row_len();
        ModelFile {
            n_classes: self.n_classes(),
            feature_spec_version: FEATURE_SPEC_VERSION,
            classes: self.classes.iter().map(|c| c.id()).collect(),
            weights: self.weights.chunks(r).map(|row| row.to_vec()).collect(),
            feature_shift: self.feature_shift.clone(),
            feature_scale: self.feature_scale.clone(),
            hyper: self.hyper,
            training: meta.clone(),
        }
    }

    pub fn to_json(&self, meta: &TrainingMeta) -> String {
        serde_json::to_string_pretty(&self.to_file(meta)).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<(SoftmaxModel, TrainingMeta)> {
        let file: ModelFile = serde_json::from_str(json).map_err(|e| Error::Format(format!("model: {e}")))?;
        file.into_model()
    }
}

/// Everything recorded about how a model was trained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingMeta {
    pub stage: Option<u8>,
    pub seed: u64,
    pub tile_size: usize,
    pub epochs_run: usize,
    pub train_slices: usize,
    pub val_slices: usize,
    pub train_loss: Vec<f64>,
    pub val_iou: Vec<f64>,
}

/// On-disk model layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub n_classes: usize,
    pub feature_spec_version: u32,
    pub classes: Vec<u8>,
    pub weights: Vec<Vec<f64>>,
    pub feature_shift: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub hyper: Hyper,
    #[serde(default)]
    pub training: TrainingMeta,
}

impl ModelFile {
    pub fn into_model(self) -> Result<(SoftmaxModel, TrainingMeta)> {
        if self.feature_spec_version != FEATURE_SPEC_VERSION {
            return Err(Error::Format(format!(
                "feature spec version {} is not supported (expected {FEATURE_SPEC_VERSION})",
                self.feature_spec_version
            )));
        }
        if self.classes.len() != self.n_classes || self.weights.len() != self.n_classes {
            return Err(Error::Format("class count disagrees with classes/weights".into()));
        }
        let classes = self
            .classes
            .iter()
            .map(|&id| ClassId::try_from(id))
            .collect::<Result<Vec<_>>>()?;
        if classes.windows(2).any(|w| w[0] >= w[1]) || classes.len() < 2 {
            return Err(Error::Format("model classes must be strictly increasing, at least two".into()));
        }
        let n_features = self.feature_shift.len();
        if self.weights.iter().any(|row| row.len() != n_features + 1) {
            return Err(Error::Format("weight rows must have n_features + 1 entries".into()));
        }
        let model = SoftmaxModel {
            classes,
            n_features,
            weights: self.weights.concat(),
            feature_shift: self.feature_shift,
            feature_scale: self.feature_scale,
            hyper: self.hyper,
        };
        model.check_finite().map_err(|e| Error::Format(e.to_string()))?;
        Ok((model, self.training))
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Index of the first maximum.
#[inline]
pub fn argmax_first(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], h: &Hyper) {
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= h.learning_rate * mh / (vh.sqrt() + h.eps);
        }
    }
}
