//! Numeric kernels shared by the classifier, audit and adapter.
//!
//! Vectors are stored as `f32`; every reduction accumulates in `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense embedding vector. Entries are finite and the dimension is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding vector must have positive dimension"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite entry at index {pos}")));
        }
        Ok(Self(values))
    }

    /// Builds a vector from `f64` values, rounding to storage precision.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Returns the L2-normalized copy.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::DegenerateVector);
        }
        Self::from_f64(&self.0.iter().map(|&v| v as f64 / n).collect::<Vec<_>>())
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

/// Cosine similarity in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Self {
        Self(value.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

#[inline]
fn similarity_with_norms(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<SimilarityScore> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(SimilarityScore::new(similarity_with_norms(
        a.values(),
        b.values(),
        na,
        nb,
    )))
}

/// `1 - cosine_similarity`, in `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?.value())
}

/// Component-wise arithmetic mean. The result is not renormalized.
pub fn centroid(vectors: &[&EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("centroid of an empty vector list"))?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: v.dim(),
            });
        }
        for (s, &x) in acc.iter_mut().zip(v.values()) {
            *s += x as f64;
        }
    }
    let n = vectors.len() as f64;
    EmbeddingVector::from_f64(&acc.iter().map(|s| s / n).collect::<Vec<_>>())
}

/// Numerically stable softmax of `scores / temperature`.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax of an empty score list"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("softmax scores must be finite"));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// A pair `(i, j)` with `i < j` and its cosine distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosePair {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

/// Exact sweep over all unordered pairs, returning those with cosine distance
/// `<= max_distance`. Rows are processed in blocks of `block_size` in
/// parallel; output is sorted by `(i, j)` regardless of scheduling.
pub fn close_pairs_blocked(
    vectors: &[EmbeddingVector],
    max_distance: f64,
    block_size: usize,
) -> Result<Vec<ClosePair>> {
    let Some(first) = vectors.first() else {
        return Ok(Vec::new());
    };
    let dim = first.dim();
    let mut norms = Vec::with_capacity(vectors.len());
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: v.dim(),
            });
        }
        let n = v.norm();
        if n == 0.0 {
            return Err(Error::DegenerateVector);
        }
        norms.push(n);
    }
    let block = block_size.max(1);
    let n = vectors.len();
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(block)
        .flat_map(|bi| (bi..n).step_by(block).map(move |bj| (bi, bj)))
        .collect();
    let found: Vec<Vec<ClosePair>> = blocks
        .par_iter()
        .map(|&(bi, bj)| {
            let mut out = Vec::new();
            for i in bi..(bi + block).min(n) {
                let start = if bi == bj { i + 1 } else { bj };
                for j in start..(bj + block).min(n) {
                    let sim = similarity_with_norms(
                        vectors[i].values(),
                        vectors[j].values(),
                        norms[i],
                        norms[j],
                    );
                    let distance = 1.0 - sim;
                    if distance <= max_distance {
                        out.push(ClosePair { i, j, distance });
                    }
                }
            }
            out
        })
        .collect();
    let mut pairs: Vec<ClosePair> = found.into_iter().flatten().collect();
    pairs.sort_by_key(|p| (p.i, p.j));
    Ok(pairs)
}
