//! Dual-task heads over the embedding, their losses, and the cascade
//! decision rule: a human verdict on Task A short-circuits Task B, an AI
//! verdict attributes the generator by argmax over the Task B softmax.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelVocabulary, HUMAN_LABEL};

/// Probability clamp keeping losses finite at saturation.
pub const PROB_EPSILON: f64 = 1e-7;

/// Default Task A decision threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const DIST_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("class index {index} out of range for {len} classes")]
    ClassOutOfRange { index: usize, len: usize },
    #[error("AI-labeled example is missing its Task B target")]
    MissingTaskBTarget,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vocabulary has no generator classes; cannot attribute an AI verdict")]
    NoGeneratorClasses,
    #[error("threshold {0} must lie in [0, 1]")]
    InvalidThreshold(f64),
}

/// Numerically stable sigmoid, clamped into the open interval (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Binary cross-entropy −(y·log p + (1−y)·log(1−p)) with p clamped into
/// [ε, 1−ε].
pub fn bce_loss(p: f64, y: u8) -> Result<f64, ClassifierError> {
    if y > 1 {
        return Err(ClassifierError::InvalidLabel(y));
    }
    if !p.is_finite() {
        return Err(ClassifierError::InvalidProbability(p));
    }
    let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    Ok(if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
}

/// Cross-entropy −log dist[y]. The distribution must sum to 1 within
/// 1e-6; entries are clamped to ≥ ε and renormalized so the loss stays
/// finite on one-hot inputs.
pub fn ce_loss(dist: ArrayView1<f64>, y: usize) -> Result<f64, ClassifierError> {
    if y >= dist.len() {
        return Err(ClassifierError::ClassOutOfRange { index: y, len: dist.len() });
    }
    if dist.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(ClassifierError::InvalidDistribution(
            "entries must be finite and non-negative".into(),
        ));
    }
    let sum = dist.sum();
    if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
        return Err(ClassifierError::InvalidDistribution(format!(
            "entries sum to {sum}, expected 1"
        )));
    }
    let clamped = dist.mapv(|d| d.max(PROB_EPSILON));
    let total = clamped.sum();
    Ok(-(clamped[y] / total).ln())
}

/// Joint loss: BCE on Task A plus, for AI-labeled examples only, CE on
/// Task B. Human-labeled examples contribute no Task B term.
pub fn total_loss(
    p_a: f64,
    y_a: u8,
    dist_b: Option<ArrayView1<f64>>,
    y_b: Option<usize>,
    is_ai: bool,
) -> Result<f64, ClassifierError> {
    let bce = bce_loss(p_a, y_a)?;
    if !is_ai {
        return Ok(bce);
    }
    let dist = dist_b.ok_or(ClassifierError::MissingTaskBTarget)?;
    let y = y_b.ok_or(ClassifierError::MissingTaskBTarget)?;
    Ok(bce + ce_loss(dist, y)?)
}

/// Binary Task A head: p(AI) = sigmoid(w·e + b).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAHead {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl TaskAHead {
    pub fn new_zeros(embedding_dim: usize) -> Self {
        TaskAHead { weights: Array1::zeros(embedding_dim), bias: 0.0 }
    }

    pub fn logit(&self, embedding: &Array1<f64>) -> Result<f64, ClassifierError> {
        if embedding.len() != self.weights.len() {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.weights.len(),
                got: embedding.len(),
            });
        }
        Ok(self.weights.dot(embedding) + self.bias)
    }

    pub fn prob(&self, embedding: &Array1<f64>) -> Result<f64, ClassifierError> {
        Ok(sigmoid(self.logit(embedding)?))
    }
}

/// Multi-class Task B head: softmax over the non-Human classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBHead {
    /// [embedding_dim × (C−1)]
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl TaskBHead {
    pub fn new_zeros(embedding_dim: usize, generator_classes: usize) -> Self {
        TaskBHead {
            weights: Array2::zeros((embedding_dim, generator_classes)),
            bias: Array1::zeros(generator_classes),
        }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, embedding: &Array1<f64>) -> Result<Array1<f64>, ClassifierError> {
        if embedding.len() != self.weights.nrows() {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.weights.nrows(),
                got: embedding.len(),
            });
        }
        Ok(embedding.dot(&self.weights) + &self.bias)
    }

    pub fn dist(&self, embedding: &Array1<f64>) -> Result<Array1<f64>, ClassifierError> {
        Ok(softmax(self.logits(embedding)?.view()))
    }
}

/// Per-document cascade output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub doc_id: String,
    pub p_ai: f64,
    pub label_a: u8,
    /// Task B distribution over generator classes; absent on the human
    /// branch, where the head is never evaluated.
    pub dist_b: Option<Array1<f64>>,
    pub label_b: String,
    pub threshold: f64,
}

/// Argmax over the generator classes, ties broken by the
/// lexicographically smallest class name.
pub fn argmax_generator(
    dist: &Array1<f64>,
    vocab: &LabelVocabulary,
) -> Result<String, ClassifierError> {
    let classes = vocab.generator_classes();
    if classes.is_empty() {
        return Err(ClassifierError::NoGeneratorClasses);
    }
    if dist.len() != classes.len() {
        return Err(ClassifierError::DimensionMismatch {
            expected: classes.len(),
            got: dist.len(),
        });
    }
    let mut best = 0usize;
    for i in 1..classes.len() {
        if dist[i] > dist[best] || (dist[i] == dist[best] && classes[i] < classes[best]) {
            best = i;
        }
    }
    Ok(classes[best].clone())
}

/// Applies the cascade rule to one embedding: below-threshold p(AI)
/// yields ("Human", no Task B evaluation); otherwise the Task B argmax.
pub fn cascade_predict(
    doc_id: &str,
    embedding: &Array1<f64>,
    task_a: &TaskAHead,
    task_b: &TaskBHead,
    vocab: &LabelVocabulary,
    threshold: f64,
) -> Result<Prediction, ClassifierError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ClassifierError::InvalidThreshold(threshold));
    }
    let p_ai = task_a.prob(embedding)?;
    if p_ai < threshold {
        return Ok(Prediction {
            doc_id: doc_id.to_string(),
            p_ai,
            label_a: 0,
            dist_b: None,
            label_b: HUMAN_LABEL.to_string(),
            threshold,
        });
    }
    let dist = task_b.dist(embedding)?;
    let label_b = argmax_generator(&dist, vocab)?;
    Ok(Prediction { doc_id: doc_id.to_string(), p_ai, label_a: 1, dist_b: Some(dist), label_b, threshold })
}

/// Gradients of the per-example joint loss with respect to both heads.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub a_weights: Array1<f64>,
    pub a_bias: f64,
    pub b_weights: Array2<f64>,
    pub b_bias: Array1<f64>,
}

impl HeadGradients {
    pub fn zeros(embedding_dim: usize, generator_classes: usize) -> Self {
        HeadGradients {
            a_weights: Array1::zeros(embedding_dim),
            a_bias: 0.0,
            b_weights: Array2::zeros((embedding_dim, generator_classes)),
            b_bias: Array1::zeros(generator_classes),
        }
    }

    pub fn add_scaled(&mut self, other: &HeadGradients, scale: f64) {
        self.a_weights.scaled_add(scale, &other.a_weights);
        self.a_bias += scale * other.a_bias;
        self.b_weights.scaled_add(scale, &other.b_weights);
        self.b_bias.scaled_add(scale, &other.b_bias);
    }
}

/// Per-example joint loss and its analytic head gradients.
///
/// Gradients are taken in logit space (∂L/∂z_A = p − y, ∂L/∂z_B =
/// softmax − onehot); the probability clamp applies to the reported
/// loss value only. Human rows contribute zero Task B gradient.
pub fn loss_and_gradients(
    embedding: &Array1<f64>,
    y_a: u8,
    y_b: Option<usize>,
    task_a: &TaskAHead,
    task_b: &TaskBHead,
) -> Result<(f64, HeadGradients), ClassifierError> {
    if y_a > 1 {
        return Err(ClassifierError::InvalidLabel(y_a));
    }
    let is_ai = y_a == 1;
    let p = task_a.prob(embedding)?;
    let residual_a = p - f64::from(y_a);
    let mut grads = HeadGradients {
        a_weights: embedding * residual_a,
        a_bias: residual_a,
        b_weights: Array2::zeros(task_b.weights.dim()),
        b_bias: Array1::zeros(task_b.class_count()),
    };

    if !is_ai {
        let loss = bce_loss(p, y_a)?;
        return Ok((loss, grads));
    }

    let y = y_b.ok_or(ClassifierError::MissingTaskBTarget)?;
    let dist = task_b.dist(embedding)?;
    if y >= dist.len() {
        return Err(ClassifierError::ClassOutOfRange { index: y, len: dist.len() });
    }
    let mut residual_b = dist.clone();
    residual_b[y] -= 1.0;
    for (i, &e) in embedding.iter().enumerate() {
        for (j, &r) in residual_b.iter().enumerate() {
            grads.b_weights[(i, j)] = e * r;
        }
    }
    grads.b_bias = residual_b;
    let loss = total_loss(p, y_a, Some(dist.view()), Some(y), true)?;
    Ok((loss, grads))
}
