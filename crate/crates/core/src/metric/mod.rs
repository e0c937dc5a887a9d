//! Embedding space, contrastive loss and ranking metrics.

mod embedder;

pub use embedder::{
    contrastive_grad, train_embedder, Embedder, EmbedderShape, Layer, PairSample, TrainConfig, TrainOutcome,
};

use serde::Serialize;

use crate::error::{Error, Result};

/// Vectors with a smaller norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;
/// Allowed deviation from unit norm when accepting external embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Accepts a vector that is already unit norm (within [`UNIT_NORM_TOL`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("embedding has non-finite entries".into()));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidParameter(format!("embedding norm {norm} is not 1")));
        }
        Ok(Embedding(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    let norm = l2_norm(v);
    if !norm.is_finite() || norm <= MIN_NORM {
        return Err(Error::DegenerateVector { norm });
    }
    Ok(Embedding(v.iter().map(|x| x / norm).collect()))
}

/// Euclidean distance between two embeddings; always in `[0, 2]`.
pub fn pair_distance(a: &Embedding, b: &Embedding) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let d = a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    d.min(2.0)
}

/// Contrastive loss for a pair at distance `d`.
pub fn contrastive_loss_at(d: f64, matched: bool, margin: f64) -> f64 {
    if matched {
        0.5 * d * d
    } else {
        let h = (margin - d).max(0.0);
        0.5 * h * h
    }
}

pub fn contrastive_loss(a: &Embedding, b: &Embedding, matched: bool, margin: f64) -> f64 {
    contrastive_loss_at(pair_distance(a, b), matched, margin)
}

/// Matching score in `[0, 1]`: `1 - D/2`.
pub fn similarity(a: &Embedding, b: &Embedding) -> f64 {
    similarity_from_distance(pair_distance(a, b))
}

pub fn similarity_from_distance(d: f64) -> f64 {
    (1.0 - 0.5 * d).clamp(0.0, 1.0)
}

/// Average precision of a ranking by descending score.
///
/// Equal scores keep their input order.
pub fn average_precision(scores: &[(f64, bool)]) -> Result<f64> {
    let positives = scores.iter().filter(|(_, l)| *l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].0.total_cmp(&scores[i].0));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if scores[i].1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}
