//! Nearest-centroid classification.
//!
//! Each category is represented by the mean of its exemplar embeddings. A
//! response goes to the category whose centroid has the highest cosine
//! similarity; ties go to the category listed first in the codebook.

use std::collections::{BTreeSet, HashSet};

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Codebook, ContentHash, EmbeddingSet, Response};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, ResamplingStats};
use crate::vecmath::{centroid, cosine_similarity, softmax, EmbeddingVector};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifyMode {
    /// All categories compete, including the residual one.
    #[default]
    Selective,
    /// The residual (`is_other`) category is removed from the candidates.
    Exhaustive,
}

impl std::str::FromStr for ClassifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selective" => Ok(Self::Selective),
            "exhaustive" => Ok(Self::Exhaustive),
            other => Err(Error::invalid(format!("unknown classification mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarRef {
    pub response_id: String,
    pub content_hash: ContentHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCentroids {
    pub model_id: String,
    pub dim: usize,
    /// Codebook order is preserved.
    pub centroids: IndexMap<String, EmbeddingVector>,
    pub exemplar_manifest: IndexMap<String, Vec<ExemplarRef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<String>,
}

impl CategoryCentroids {
    pub fn exemplar_counts(&self) -> Vec<usize> {
        self.exemplar_manifest.values().map(Vec::len).collect()
    }

    fn candidates(&self, mode: ClassifyMode) -> Vec<(&String, &EmbeddingVector)> {
        self.centroids
            .iter()
            .filter(|(id, _)| mode == ClassifyMode::Selective || self.other.as_ref() != Some(*id))
            .collect()
    }

    /// Centroids with every vector scaled by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        let mut out = self.clone();
        for v in out.centroids.values_mut() {
            *v = EmbeddingVector::new(v.values().iter().map(|x| x * factor).collect())?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub response_id: String,
    pub category_id: String,
    pub similarity_by_category: IndexMap<String, f64>,
    pub confidence_by_category: IndexMap<String, f64>,
}

pub fn build_centroids(codebook: &Codebook, embeddings: &EmbeddingSet) -> Result<CategoryCentroids> {
    if codebook.categories.is_empty() {
        return Err(Error::config("codebook has no categories"));
    }
    let mut centroids = IndexMap::new();
    let mut manifest = IndexMap::new();
    for cat in &codebook.categories {
        if cat.exemplar_ids.is_empty() {
            return Err(Error::config(format!("category `{}` has no exemplars", cat.id)));
        }
        let vectors = embeddings.resolve(cat.exemplar_ids.iter().map(String::as_str))?;
        centroids.insert(cat.id.clone(), centroid(&vectors)?);
        manifest.insert(
            cat.id.clone(),
            cat.exemplar_ids
                .iter()
                .map(|id| ExemplarRef {
                    response_id: id.clone(),
                    content_hash: embeddings.hash(id).expect("resolved above"),
                })
                .collect(),
        );
    }
    Ok(CategoryCentroids {
        model_id: embeddings.model_id().to_string(),
        dim: embeddings.dim().unwrap_or(0),
        centroids,
        exemplar_manifest: manifest,
        other: codebook.other().map(|c| c.id.clone()),
    })
}

pub fn classify(
    centroids: &CategoryCentroids,
    response_id: &str,
    vector: &EmbeddingVector,
    mode: ClassifyMode,
    temperature: f64,
) -> Result<Assignment> {
    if vector.dim() != centroids.dim {
        return Err(Error::Shape {
            expected: centroids.dim,
            got: vector.dim(),
        });
    }
    let candidates = centroids.candidates(mode);
    if candidates.is_empty() {
        return Err(Error::config("no candidate categories"));
    }
    let mut sims = IndexMap::with_capacity(candidates.len());
    let mut best: Option<(&String, f64)> = None;
    for (id, c) in candidates {
        let s = cosine_similarity(vector, c)?.value();
        // strict comparison keeps the earlier category on ties
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((id, s));
        }
        sims.insert(id.clone(), s);
    }
    let scores: Vec<f64> = sims.values().copied().collect();
    let conf = softmax(&scores, temperature)?;
    Ok(Assignment {
        response_id: response_id.to_string(),
        category_id: best.expect("non-empty candidates").0.clone(),
        confidence_by_category: sims.keys().cloned().zip(conf).collect(),
        similarity_by_category: sims,
    })
}

/// Classifies every response, in order. Missing vectors are reported together.
pub fn classify_all(
    centroids: &CategoryCentroids,
    responses: &[&Response],
    embeddings: &EmbeddingSet,
    mode: ClassifyMode,
    temperature: f64,
) -> Result<Vec<Assignment>> {
    if embeddings.model_id() != centroids.model_id {
        return Err(Error::ModelMismatch(
            centroids.model_id.clone(),
            embeddings.model_id().to_string(),
        ));
    }
    let vectors = embeddings.resolve(responses.iter().map(|r| r.id.as_str()))?;
    responses
        .par_iter()
        .zip(vectors.par_iter())
        .map(|(r, v)| classify(centroids, &r.id, v, mode, temperature))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleOutcome {
    pub runs: Vec<MetricsReport>,
    pub stats: ResamplingStats,
}

/// Repeatedly samples `k` exemplars per category (without replacement, from
/// the codebook's exemplar pool), rebuilds centroids, classifies and scores.
///
/// The whole exemplar pool is held out of scoring in every run, so all runs
/// are scored on the same responses. `categories` fixes the label space of
/// the confusion matrix; responses whose human code is outside it are skipped.
#[allow(clippy::too_many_arguments)]
pub fn resample_evaluate(
    responses: &[&Response],
    codebook: &Codebook,
    embeddings: &EmbeddingSet,
    k_per_category: &IndexMap<String, usize>,
    n_runs: usize,
    seed: u64,
    mode: ClassifyMode,
    temperature: f64,
    categories: &[String],
) -> Result<ResampleOutcome> {
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be positive"));
    }
    for cat in &codebook.categories {
        let k = *k_per_category.get(&cat.id).ok_or_else(|| {
            Error::invalid(format!("no sample size given for category `{}`", cat.id))
        })?;
        if k == 0 || k > cat.exemplar_ids.len() {
            return Err(Error::invalid(format!(
                "category `{}`: k = {k} but the exemplar pool has {}",
                cat.id,
                cat.exemplar_ids.len()
            )));
        }
    }
    if let Some(extra) = k_per_category.keys().find(|c| !codebook.contains(c)) {
        return Err(Error::UnknownCategory(extra.clone()));
    }

    let pool: HashSet<&str> = codebook.exemplar_ids().into_iter().collect();
    let allowed: BTreeSet<&str> = categories.iter().map(String::as_str).collect();
    let scored: Vec<&Response> = responses
        .iter()
        .copied()
        .filter(|r| !pool.contains(r.id.as_str()))
        .filter(|r| r.human_code.as_deref().is_some_and(|c| allowed.contains(c)))
        .collect();
    let truth: Vec<&str> = scored
        .iter()
        .map(|r| r.human_code.as_deref().unwrap())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let mut sampled = codebook.clone();
        for cat in &mut sampled.categories {
            let k = k_per_category[&cat.id];
            let mut pick: Vec<String> = cat.exemplar_ids.choose_multiple(&mut rng, k).cloned().collect();
            // keep pool order so centroid summation order is stable
            pick.sort_by_key(|id| cat.exemplar_ids.iter().position(|e| e == id));
            cat.exemplar_ids = pick;
        }
        let centroids = build_centroids(&sampled, embeddings)?;
        let assigned = classify_all(&centroids, &scored, embeddings, mode, temperature)?;
        let predicted: Vec<&str> = assigned.iter().map(|a| a.category_id.as_str()).collect();
        runs.push(metrics::score(&truth, &predicted, categories)?);
    }
    let values: Vec<_> = runs.iter().map(MetricsReport::values).collect();
    let (mean, std) = metrics::summarize(&values)?;
    Ok(ResampleOutcome {
        runs,
        stats: ResamplingStats {
            n_runs,
            seed,
            k_per_category: k_per_category.clone(),
            mean,
            std,
        },
    })
}
