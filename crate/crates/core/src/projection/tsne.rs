//! Exact O(N^2) t-SNE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Projection2D, ProjectionMethod, ProjectionParams};
use crate::error::{Error, Result};
use crate::vecmath::EmbeddingVector;

pub const ENTROPY_TOLERANCE: f64 = 1e-5;
const BISECTION_STEPS: usize = 200;
const P_FLOOR: f64 = 1e-12;
const KL_STEP_TOLERANCE: f64 = 1e-6;
const MONITORED_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    /// `None` picks `max(N / early_exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            seed: 42,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneReport {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub final_kl: f64,
    /// KL divergence at each monitored late iteration.
    pub kl_trace: Vec<f64>,
}

/// Input affinities: per-point conditional distributions and the
/// symmetrized joint matrix (row-major `n x n`).
#[derive(Debug, Clone)]
pub struct Affinities {
    pub n: usize,
    pub conditional: Vec<f64>,
    pub joint: Vec<f64>,
    pub entropies: Vec<f64>,
}

fn squared_distances(vectors: &[EmbeddingVector]) -> Result<(usize, Vec<f64>)> {
    let n = vectors.len();
    let dim = vectors.first().map_or(0, EmbeddingVector::dim);
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::Shape {
            expected: dim,
            got: v.dim(),
        });
    }
    let xs: Vec<Vec<f64>> = vectors.iter().map(EmbeddingVector::to_f64).collect();
    let d: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let xi = &xs[i];
            xs.iter()
                .map(|xj| xi.iter().zip(xj).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect();
    Ok((n, d))
}

/// Finds the Gaussian precision for one row so that the conditional
/// distribution has entropy `ln(perplexity)`.
fn calibrate_row(dist: &[f64], i: usize, target: f64) -> Result<(Vec<f64>, f64)> {
    let n = dist.len();
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut p = vec![0.0; n];
    let mut h = 0.0;
    for _ in 0..BISECTION_STEPS {
        let mut z = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-(dist[j] - dmin) * beta).exp() };
            z += p[j];
        }
        // H = ln Z + beta * E[d - dmin]
        let mut expect = 0.0;
        for j in 0..n {
            p[j] /= z;
            if j != i {
                expect += p[j] * (dist[j] - dmin);
            }
        }
        h = z.ln() + beta * expect;
        let diff = h - target;
        if diff.abs() < ENTROPY_TOLERANCE {
            return Ok((p, h));
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    Err(Error::invalid(format!(
        "perplexity infeasible at point {i}: entropy {h:.6} cannot reach {target:.6}"
    )))
}

/// Conditional and joint input affinities for the given perplexity.
pub fn affinities(vectors: &[EmbeddingVector], perplexity: f64) -> Result<Affinities> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::invalid("affinities need at least two points"));
    }
    if !(perplexity >= 1.0 && perplexity <= (n - 1) as f64) {
        return Err(Error::invalid(format!(
            "perplexity {perplexity} infeasible for {n} points"
        )));
    }
    let (_, d) = squared_distances(vectors)?;
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| calibrate_row(&d[i * n..(i + 1) * n], i, target))
        .collect::<Result<_>>()?;
    let mut conditional = Vec::with_capacity(n * n);
    let mut entropies = Vec::with_capacity(n);
    for (row, h) in rows {
        conditional.extend(row);
        entropies.push(h);
    }
    let mut joint = vec![0.0; n * n];
    let total = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / total;
        }
    }
    Ok(Affinities {
        n,
        conditional,
        joint,
        entropies,
    })
}

/// Exact t-SNE to two dimensions. The run fails if the KL divergence rises
/// by more than 1e-6 between consecutive steps in the last 100 iterations
/// after early exaggeration.
pub fn tsne_2d(vectors: &[EmbeddingVector], params: &TsneParams) -> Result<Projection2D> {
    let n = vectors.len();
    if n < 4 {
        return Err(Error::invalid("t-SNE needs at least four points"));
    }
    if !(params.perplexity > 0.0 && params.perplexity < (n - 1) as f64 / 3.0) {
        return Err(Error::invalid(format!(
            "perplexity must be below (N - 1) / 3 = {:.3}, got {}",
            (n - 1) as f64 / 3.0,
            params.perplexity
        )));
    }
    if params.iterations == 0 {
        return Err(Error::invalid("iterations must be positive"));
    }
    let aff = affinities(vectors, params.perplexity)?;
    let p: Vec<f64> = aff.joint.iter().map(|x| x.max(P_FLOOR)).collect();
    let learning_rate = params
        .learning_rate
        .unwrap_or_else(|| (n as f64 / params.early_exaggeration / 4.0).max(50.0));

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let monitor_from = params
        .iterations
        .saturating_sub(MONITORED_ITERATIONS)
        .max(params.exaggeration_iterations);
    let mut kl_trace = Vec::new();

    for iter in 0..params.iterations {
        let exaggerate = iter < params.exaggeration_iterations;
        let exag = if exaggerate { params.early_exaggeration } else { 1.0 };
        let momentum = if exaggerate { 0.5 } else { 0.8 };
        let (grad, kl) = gradient(&p, &y, exag);
        if grad.iter().any(|g| !g[0].is_finite() || !g[1].is_finite()) {
            return Err(Error::Divergence {
                epoch: iter,
                learning_rate,
            });
        }
        if iter >= monitor_from {
            if let Some(&prev) = kl_trace.last() {
                if kl > prev + KL_STEP_TOLERANCE {
                    return Err(Error::Convergence(format!(
                        "KL divergence rose from {prev} to {kl} at iteration {iter}"
                    )));
                }
            }
            kl_trace.push(kl);
        }
        for i in 0..n {
            for d in 0..2 {
                let g = grad[i][d];
                gains[i][d] = if (g > 0.0) != (velocity[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                velocity[i][d] = momentum * velocity[i][d] - learning_rate * gains[i][d] * g;
                y[i][d] += velocity[i][d];
            }
        }
        let mean = y.iter().fold([0.0; 2], |m, q| [m[0] + q[0], m[1] + q[1]]);
        for q in &mut y {
            q[0] -= mean[0] / n as f64;
            q[1] -= mean[1] / n as f64;
        }
    }
    let (_, final_kl) = gradient(&p, &y, 1.0);
    if y.iter().any(|q| !q[0].is_finite() || !q[1].is_finite()) {
        return Err(Error::Divergence {
            epoch: params.iterations,
            learning_rate,
        });
    }
    Ok(Projection2D {
        points: y,
        method: ProjectionMethod::Tsne,
        params: ProjectionParams::Tsne(TsneReport {
            perplexity: params.perplexity,
            iterations: params.iterations,
            early_exaggeration: params.early_exaggeration,
            exaggeration_iterations: params.exaggeration_iterations,
            learning_rate,
            final_kl,
            kl_trace,
        }),
        seed: Some(params.seed),
    })
}

/// Gradient of KL(P || Q) with P scaled by `exag`, plus the unscaled KL at `y`.
fn gradient(p: &[f64], y: &[[f64; 2]], exag: f64) -> (Vec<[f64; 2]>, f64) {
    let n = y.len();
    let num: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..n).map(move |j| {
                if i == j {
                    0.0
                } else {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    1.0 / (1.0 + dx * dx + dy * dy)
                }
            })
        })
        .collect();
    let row_sums: Vec<f64> = num.par_chunks(n).map(|r| r.iter().sum()).collect();
    let z: f64 = row_sums.iter().sum();
    let per_row: Vec<([f64; 2], f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0; 2];
            let mut kl = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let q = (w / z).max(P_FLOOR);
                let pij = p[i * n + j];
                let mult = (exag * pij - q) * w;
                g[0] += 4.0 * mult * (y[i][0] - y[j][0]);
                g[1] += 4.0 * mult * (y[i][1] - y[j][1]);
                kl += pij * (pij / q).ln();
            }
            (g, kl)
        })
        .collect();
    let kl = per_row.iter().map(|(_, k)| k).sum();
    (per_row.into_iter().map(|(g, _)| g).collect(), kl)
}
