//! Contrastive linear adapter over fixed embeddings.
//!
//! A `dim x dim` matrix `W` maps each vector to `normalize(W x)`. It is trained
//! on all ordered pairs of labeled texts (self-pairs included): same-category
//! pairs are pulled to cosine 1 with `(1 - cos)^2`, different-category pairs
//! are pushed below the margin with `max(0, cos - margin)^2`. An optional
//! `l2_anchor * ||W - I||_F^2` term keeps `W` near the identity.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::EmbeddingVector;

pub const ADAPTER_MANIFEST: &str = "adapter.json";
pub const ADAPTER_MATRIX: &str = "adapter.bin";
const MATRIX_MAGIC: &[u8; 8] = b"QCADP001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub i: usize,
    pub j: usize,
    /// 1 when both texts share a category, else 0.
    pub label: u8,
}

/// All ordered pairs, row-major, `n^2` in total.
pub fn generate_pairs<S: AsRef<str>>(labeled: &[(usize, S)]) -> Result<Vec<TrainingPair>> {
    if labeled.is_empty() {
        return Err(Error::invalid("no labeled texts to pair"));
    }
    let mut pairs = Vec::with_capacity(labeled.len() * labeled.len());
    for (i, ci) in labeled {
        for (j, cj) in labeled {
            pairs.push(TrainingPair {
                i: *i,
                j: *j,
                label: u8::from(ci.as_ref() == cj.as_ref()),
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterHyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub seed: u64,
    pub l2_anchor: f64,
}

impl Default for AdapterHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 256,
            margin: 0.2,
            seed: 42,
            l2_anchor: 1e-3,
        }
    }
}

impl AdapterHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be non-negative and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(-1.0..1.0).contains(&self.margin) {
            return Err(Error::config("margin must lie in [-1, 1)"));
        }
        if !(self.l2_anchor >= 0.0 && self.l2_anchor.is_finite()) {
            return Err(Error::config("l2_anchor must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub pair_count: usize,
    pub hyperparams: AdapterHyperparams,
    /// Full-data objective before the first update.
    pub initial_loss: f64,
    /// Full-data objective after the last update.
    pub final_loss: f64,
    /// Mean mini-batch objective for each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAdapter {
    pub model_id: String,
    pub dim: usize,
    /// Row-major `dim x dim`.
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub manifest: TrainingManifest,
}

fn identity(dim: usize) -> Vec<f64> {
    let mut w = vec![0.0; dim * dim];
    for i in 0..dim {
        w[i * dim + i] = 1.0;
    }
    w
}

fn matvec(w: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
    w.chunks_exact(dim)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss for one pair of already-normalized vectors.
pub fn pair_loss_cos(cos: f64, label: u8, margin: f64) -> f64 {
    if label == 1 {
        (1.0 - cos).powi(2)
    } else {
        (cos - margin).max(0.0).powi(2)
    }
}

fn pair_loss_grad(cos: f64, label: u8, margin: f64) -> f64 {
    if label == 1 {
        -2.0 * (1.0 - cos)
    } else {
        2.0 * (cos - margin).max(0.0)
    }
}

pub fn pair_loss(a: &EmbeddingVector, b: &EmbeddingVector, label: u8, margin: f64) -> Result<f64> {
    let cos = crate::vecmath::cosine_similarity(a, b)?.value();
    Ok(pair_loss_cos(cos, label, margin))
}

/// Objective and its gradient with respect to `W`.
pub struct Objective<'a> {
    pub dim: usize,
    pub xs: &'a [Vec<f64>],
    pub margin: f64,
    pub l2_anchor: f64,
}

impl Objective<'_> {
    /// Mean pair loss over `pairs` plus the anchor penalty, and optionally
    /// the gradient (row-major `dim x dim`).
    pub fn evaluate(&self, w: &[f64], pairs: &[TrainingPair], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let dim = self.dim;
        let mut used: Vec<usize> = pairs.iter().flat_map(|p| [p.i, p.j]).collect();
        used.sort_unstable();
        used.dedup();
        let mut slot = vec![usize::MAX; self.xs.len()];
        for (s, &k) in used.iter().enumerate() {
            slot[k] = s;
        }
        // adapted vectors and their norms
        let adapted: Vec<(Vec<f64>, f64)> = used
            .par_iter()
            .map(|&k| {
                let u = matvec(w, dim, &self.xs[k]);
                let n = dot(&u, &u).sqrt();
                (u.into_iter().map(|x| x / n).collect(), n)
            })
            .collect();

        let scale = 1.0 / pairs.len() as f64;
        let mut loss = 0.0;
        let mut gu = if want_grad { vec![vec![0.0; dim]; used.len()] } else { Vec::new() };
        for p in pairs {
            let (si, sj) = (slot[p.i], slot[p.j]);
            let (ui, ni) = (&adapted[si].0, adapted[si].1);
            let (uj, nj) = (&adapted[sj].0, adapted[sj].1);
            let cos = dot(ui, uj);
            loss += pair_loss_cos(cos, p.label, self.margin);
            if want_grad {
                let g = pair_loss_grad(cos, p.label, self.margin) * scale;
                if g != 0.0 {
                    for d in 0..dim {
                        gu[si][d] += g * (uj[d] - cos * ui[d]) / ni;
                    }
                    for d in 0..dim {
                        gu[sj][d] += g * (ui[d] - cos * uj[d]) / nj;
                    }
                }
            }
        }
        loss *= scale;
        let anchor: f64 = w
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let target = if idx / dim == idx % dim { 1.0 } else { 0.0 };
                (v - target).powi(2)
            })
            .sum();
        loss += self.l2_anchor * anchor;
        if !want_grad {
            return (loss, None);
        }
        // dL/dW[r][c] = sum_k gu_k[r] * x_k[c]; rows are independent
        let grad: Vec<f64> = (0..dim)
            .into_par_iter()
            .flat_map_iter(|r| {
                let mut row = vec![0.0; dim];
                for (s, &k) in used.iter().enumerate() {
                    let g = gu[s][r];
                    if g != 0.0 {
                        for (acc, x) in row.iter_mut().zip(&self.xs[k]) {
                            *acc += g * x;
                        }
                    }
                }
                for (c, acc) in row.iter_mut().enumerate() {
                    let target = if r == c { 1.0 } else { 0.0 };
                    *acc += 2.0 * self.l2_anchor * (w[r * dim + c] - target);
                }
                row
            })
            .collect();
        (loss, Some(grad))
    }
}

fn to_f64_checked(vectors: &[EmbeddingVector]) -> Result<(usize, Vec<Vec<f64>>)> {
    let dim = vectors
        .first()
        .ok_or_else(|| Error::invalid("no training vectors"))?
        .dim();
    let mut xs = Vec::with_capacity(vectors.len());
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: v.dim(),
            });
        }
        xs.push(v.to_f64());
    }
    Ok((dim, xs))
}

fn check_pairs(pairs: &[TrainingPair], n: usize) -> Result<()> {
    if let Some(p) = pairs.iter().find(|p| p.i >= n || p.j >= n) {
        return Err(Error::invalid(format!(
            "pair ({}, {}) references a text outside 0..{n}",
            p.i, p.j
        )));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    Ok(())
}

/// Mini-batch gradient descent from the identity. Shuffling is driven by a
/// ChaCha stream seeded from `hyperparams.seed`, so results are reproducible.
pub fn train(
    model_id: &str,
    vectors: &[EmbeddingVector],
    pairs: &[TrainingPair],
    hyperparams: &AdapterHyperparams,
) -> Result<LinearAdapter> {
    hyperparams.validate()?;
    let (dim, xs) = to_f64_checked(vectors)?;
    check_pairs(pairs, xs.len())?;
    let objective = Objective {
        dim,
        xs: &xs,
        margin: hyperparams.margin,
        l2_anchor: hyperparams.l2_anchor,
    };
    let mut w = identity(dim);
    let (initial_loss, _) = objective.evaluate(&w, pairs, false);
    let mut order: Vec<TrainingPair> = pairs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(hyperparams.seed);
    let mut epoch_losses = Vec::with_capacity(hyperparams.epochs);
    for epoch in 0..hyperparams.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(hyperparams.batch_size) {
            let (loss, grad) = objective.evaluate(&w, batch, true);
            let grad = grad.expect("gradient requested");
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: hyperparams.learning_rate,
                });
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= hyperparams.learning_rate * gi;
            }
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let (final_loss, _) = objective.evaluate(&w, pairs, false);
    if !final_loss.is_finite() || w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence {
            epoch: hyperparams.epochs,
            learning_rate: hyperparams.learning_rate,
        });
    }
    Ok(LinearAdapter {
        model_id: model_id.to_string(),
        dim,
        weights: w,
        manifest: TrainingManifest {
            pair_count: pairs.len(),
            hyperparams: hyperparams.clone(),
            initial_loss,
            final_loss,
            epoch_losses,
        },
    })
}

impl LinearAdapter {
    pub fn identity(model_id: &str, dim: usize) -> Self {
        Self {
            model_id: model_id.to_string(),
            dim,
            weights: identity(dim),
            manifest: TrainingManifest {
                pair_count: 0,
                hyperparams: AdapterHyperparams {
                    epochs: 0,
                    ..AdapterHyperparams::default()
                },
                initial_loss: 0.0,
                final_loss: 0.0,
                epoch_losses: Vec::new(),
            },
        }
    }

    /// Frobenius distance from the identity.
    pub fn distance_from_identity(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let target = if idx / self.dim == idx % self.dim { 1.0 } else { 0.0 };
                (v - target).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Model id under which adapted vectors are tracked.
    pub fn adapted_model_id(&self) -> String {
        format!("{}#adapter", self.model_id)
    }

    pub fn apply_one(&self, v: &EmbeddingVector) -> Result<EmbeddingVector> {
        if v.dim() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: v.dim(),
            });
        }
        let u = matvec(&self.weights, self.dim, &v.to_f64());
        let n = dot(&u, &u).sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateVector);
        }
        EmbeddingVector::from_f64(&u.iter().map(|x| x / n).collect::<Vec<_>>())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut bin = Vec::with_capacity(12 + 8 * self.weights.len());
        bin.extend_from_slice(MATRIX_MAGIC);
        bin.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for w in &self.weights {
            bin.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(dir.join(ADAPTER_MATRIX), bin)?;
        let mut f = fs::File::create(dir.join(ADAPTER_MANIFEST))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Loads an adapter, refusing one trained for another model.
    pub fn load(dir: impl AsRef<Path>, model_id: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(ADAPTER_MANIFEST);
        if !path.exists() {
            return Err(Error::NotFound("no trained adapter".into()));
        }
        let mut adapter: LinearAdapter = serde_json::from_slice(&fs::read(path)?)?;
        if adapter.model_id != model_id {
            return Err(Error::ModelMismatch(adapter.model_id, model_id.to_string()));
        }
        let bin = fs::read(dir.join(ADAPTER_MATRIX))?;
        if bin.len() < 12 || &bin[..8] != MATRIX_MAGIC {
            return Err(Error::Integrity("adapter matrix: bad header".into()));
        }
        let dim = u32::from_le_bytes(bin[8..12].try_into().unwrap()) as usize;
        if dim != adapter.dim || bin.len() != 12 + 8 * dim * dim {
            return Err(Error::Integrity("adapter matrix: size mismatch".into()));
        }
        adapter.weights = bin[12..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(adapter)
    }
}

pub fn apply_adapter(
    adapter: &LinearAdapter,
    model_id: &str,
    vectors: &[EmbeddingVector],
) -> Result<Vec<EmbeddingVector>> {
    if model_id != adapter.model_id {
        return Err(Error::ModelMismatch(adapter.model_id.clone(), model_id.to_string()));
    }
    vectors.par_iter().map(|v| adapter.apply_one(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub probes: usize,
}

/// Relative errors are taken against `max(|analytic|, |numeric|, 1e-6)`.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;
pub const FINITE_DIFFERENCE_STEP: f64 = 1e-5;

/// Compares the analytic gradient of the full-data objective at `weights`
/// (identity when `None`) with central differences on `probe_count` random
/// entries.
pub fn gradient_check(
    vectors: &[EmbeddingVector],
    pairs: &[TrainingPair],
    hyperparams: &AdapterHyperparams,
    probe_count: usize,
    weights: Option<&[f64]>,
) -> Result<GradientCheck> {
    if probe_count == 0 {
        return Err(Error::invalid("probe_count must be at least 1"));
    }
    let (dim, xs) = to_f64_checked(vectors)?;
    check_pairs(pairs, xs.len())?;
    let w = match weights {
        Some(w) if w.len() == dim * dim => w.to_vec(),
        Some(w) => {
            return Err(Error::Shape {
                expected: dim * dim,
                got: w.len(),
            })
        }
        None => identity(dim),
    };
    let objective = Objective {
        dim,
        xs: &xs,
        margin: hyperparams.margin,
        l2_anchor: hyperparams.l2_anchor,
    };
    let (_, grad) = objective.evaluate(&w, pairs, true);
    let grad = grad.expect("gradient requested");
    let entries: Vec<usize> = (0..dim * dim).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyperparams.seed);
    let probes: Vec<usize> = if probe_count >= entries.len() {
        entries
    } else {
        entries.choose_multiple(&mut rng, probe_count).copied().collect()
    };
    let mut out = GradientCheck {
        max_relative_error: 0.0,
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
        probes: probes.len(),
    };
    let h = FINITE_DIFFERENCE_STEP;
    for idx in probes {
        let mut wp = w.clone();
        wp[idx] += h;
        let (lp, _) = objective.evaluate(&wp, pairs, false);
        wp[idx] = w[idx] - h;
        let (lm, _) = objective.evaluate(&wp, pairs, false);
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad[idx];
        let denom = analytic.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
        out.max_relative_error = out.max_relative_error.max((analytic - numeric).abs() / denom);
        out.max_abs_analytic = out.max_abs_analytic.max(analytic.abs());
        out.max_abs_numeric = out.max_abs_numeric.max(numeric.abs());
    }
    Ok(out)
}
