//! Image-concept similarity and concept-concept dissimilarity.

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM_TOL: f64 = 1e-12;

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM_TOL || nb < ZERO_NORM_TOL {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 + cos(image, concept)`, in `[0, 2]`.
pub fn sim(image_embedding: &[f64], concept_embedding: &[f64]) -> Result<f64> {
    Ok(1.0 + cosine(image_embedding, concept_embedding)?)
}

/// `(1 - cos(a, b)) / 2`, in `[0, 1]`; 0 for identical directions.
pub fn phi(concept_a: &[f64], concept_b: &[f64]) -> Result<f64> {
    Ok((1.0 - cosine(concept_a, concept_b)?) / 2.0)
}
