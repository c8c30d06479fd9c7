//! Similarity scores, class probabilities and the normalized semantic loss.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{TextEmbeddings, VlError};
use crate::{NUM_CLASSES, NUM_GRADES, NUM_LESIONS};

/// Probabilities are clamped to at least this value inside the log.
pub const LOSS_EPS: f64 = 1e-12;

/// Output of [`predict`] for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Raw similarity scores, grades then lesions.
    pub scores: [f64; NUM_CLASSES],
    /// Softmax over the grade block, sigmoid per lesion entry.
    pub probs: [f64; NUM_CLASSES],
    pub grade: usize,
    pub lesions: [bool; NUM_LESIONS],
}

impl PredictionRecord {
    pub fn grade_probs(&self) -> &[f64] {
        &self.probs[..NUM_GRADES]
    }
}

/// Multi-hot target: one grade plus any number of lesions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub y: [f64; NUM_CLASSES],
}

impl TargetVector {
    pub fn new(grade: usize, lesions: [bool; NUM_LESIONS]) -> Result<Self, VlError> {
        if grade >= NUM_GRADES {
            return Err(VlError::InvalidInput(format!("grade {grade} out of range")));
        }
        let mut y = [0.0; NUM_CLASSES];
        y[grade] = 1.0;
        for (k, &on) in lesions.iter().enumerate() {
            if on {
                y[NUM_GRADES + k] = 1.0;
            }
        }
        Ok(Self { y })
    }

    /// y / ‖y‖₁.
    pub fn normalized(&self) -> [f64; NUM_CLASSES] {
        let l1: f64 = self.y.iter().sum();
        self.y.map(|v| v / l1)
    }
}

/// s = E_text · e. No normalization.
pub fn similarity_scores(
    text: &TextEmbeddings,
    embedding: &Array1<f64>,
) -> Result<[f64; NUM_CLASSES], VlError> {
    if embedding.len() != text.dim() {
        return Err(VlError::Shape(format!(
            "image embedding has {} dims, text has {}",
            embedding.len(),
            text.dim()
        )));
    }
    let s = text.all().dot(embedding);
    Ok(std::array::from_fn(|i| s[i]))
}

fn grade_softmax(scores: &[f64; NUM_CLASSES], temperature: f64) -> [f64; NUM_GRADES] {
    let logits: [f64; NUM_GRADES] = std::array::from_fn(|c| temperature * scores[c]);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex = logits.map(|u| (u - m).exp());
    let z: f64 = ex.iter().sum();
    ex.map(|e| e / z)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Lowest index wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled softmax over grades, sigmoid per lesion.
pub fn predict(scores: &[f64; NUM_CLASSES], temperature: f64) -> PredictionRecord {
    let g = grade_softmax(scores, temperature);
    let mut probs = [0.0; NUM_CLASSES];
    probs[..NUM_GRADES].copy_from_slice(&g);
    for k in 0..NUM_LESIONS {
        probs[NUM_GRADES + k] = sigmoid(temperature * scores[NUM_GRADES + k]);
    }
    PredictionRecord {
        scores: *scores,
        probs,
        grade: argmax(&g),
        lesions: std::array::from_fn(|k| probs[NUM_GRADES + k] > 0.5),
    }
}

/// −(1/N) Σᵢ Σ_c ỹᵢ[c] · log ŷᵢ[c], with ỹ = y/‖y‖₁ and ŷ clamped at [`LOSS_EPS`].
pub fn semantic_loss(
    predictions: &[[f64; NUM_CLASSES]],
    targets: &[TargetVector],
) -> Result<f64, VlError> {
    if predictions.is_empty() {
        return Err(VlError::InvalidInput("empty batch".into()));
    }
    if predictions.len() != targets.len() {
        return Err(VlError::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(VlError::InvalidInput(format!(
                "invalid probabilities {p:?}"
            )));
        }
        let yn = t.normalized();
        total -= yn
            .iter()
            .zip(p)
            .filter(|(y, _)| **y != 0.0)
            .map(|(y, q)| y * q.max(LOSS_EPS).ln())
            .sum::<f64>();
    }
    Ok(total / predictions.len() as f64)
}

/// Per-sample loss with its gradient w.r.t. the raw scores and the temperature.
pub fn loss_and_score_grad(
    scores: &[f64; NUM_CLASSES],
    temperature: f64,
    target: &TargetVector,
) -> (f64, [f64; NUM_CLASSES], f64) {
    let pred = predict(scores, temperature);
    let yn = target.normalized();
    let mut loss = 0.0;
    // gradient w.r.t. the tempered logits u = τ s
    let mut du = [0.0; NUM_CLASSES];

    let mut active_mass = 0.0;
    for c in 0..NUM_GRADES {
        if yn[c] == 0.0 {
            continue;
        }
        let p = pred.probs[c];
        loss -= yn[c] * p.max(LOSS_EPS).ln();
        if p >= LOSS_EPS {
            du[c] -= yn[c];
            active_mass += yn[c];
        }
    }
    for (d, p) in du.iter_mut().zip(&pred.probs[..NUM_GRADES]) {
        *d += active_mass * p;
    }
    for k in NUM_GRADES..NUM_CLASSES {
        if yn[k] == 0.0 {
            continue;
        }
        let q = pred.probs[k];
        loss -= yn[k] * q.max(LOSS_EPS).ln();
        if q >= LOSS_EPS {
            du[k] = -yn[k] * (1.0 - q);
        }
    }
    let ds = du.map(|g| g * temperature);
    let dtau = du.iter().zip(scores).map(|(g, s)| g * s).sum();
    (loss, ds, dtau)
}
