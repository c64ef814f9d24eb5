//! The pipeline shared by the command-line tool and the HTTP service.
//!
//! Every operation works on an in-memory [`Project`] plus the project
//! directory, which holds the embedding cache, the adapter and the last
//! projection. Callers decide when to persist the project itself, so a
//! failed step never leaves a half-written manifest behind.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterHyperparams, LinearAdapter};
use crate::audit::{self, AuditReport, AuditSummary, CodeSource, Resolution};
use crate::classifier::{self, ClassifyMode};
use crate::corpus::{
    content_hash, import_responses, project_cache_dir, ClassificationRun, Codebook,
    EmbeddingBinding, EmbeddingCache, EmbeddingSet, ImportMapping, Project, Response,
    SourceFormat, MANIFEST_FILE,
};
use crate::embedder::{Embedder, ProviderConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::projection::{self, Projection2D, ProjectionMethod, TsneParams};

pub const ADAPTER_DIR: &str = "adapter";
pub const PROJECTION_FILE: &str = "projection.json";

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

/// Canonical JSON rendering used for every artifact, so that outputs of the
/// CLI and the service compare byte-for-byte.
pub fn render_json<T: Serialize>(value: &T) -> String {
    to_json(value)
}

/// Loads the project in `dir`, or starts an empty one named after the
/// directory when no manifest exists yet.
pub fn open_or_create(dir: &Path) -> Result<Project> {
    if dir.join(MANIFEST_FILE).exists() {
        return Project::load(dir);
    }
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .filter(|n| !n.is_empty())
        .ok_or_else(|| Error::invalid(format!("cannot derive a project id from {}", dir.display())))?;
    Ok(Project::new(id, id))
}

pub fn import_into<R: Read>(
    project: &mut Project,
    source: R,
    format: SourceFormat,
    mapping: &ImportMapping,
) -> Result<usize> {
    let responses = import_responses(source, format, mapping)?;
    let n = responses.len();
    project.add_responses(responses)?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub model_id: String,
    pub instruction: String,
    pub dim: usize,
    pub responses: usize,
    pub cached: usize,
    pub requests: usize,
}

pub fn embed_project(project: &mut Project, dir: &Path, config: ProviderConfig) -> Result<EmbedSummary> {
    let embedder = Embedder::from_config(config)?;
    embed_project_with(project, dir, &embedder)
}

pub fn embed_project_with(project: &mut Project, dir: &Path, embedder: &Embedder) -> Result<EmbedSummary> {
    if project.responses.is_empty() {
        return Err(Error::invalid("project has no responses to embed"));
    }
    let cache = EmbeddingCache::open(project_cache_dir(dir))?;
    let config = embedder.config();
    let texts: Vec<&str> = project.responses.iter().map(|r| r.text.as_str()).collect();
    let cached = cache
        .get_or_pending(&config.model_id, config.instruction(), &texts)?
        .hits
        .len();
    let before = embedder.request_count();
    let vectors = embedder.embed_batch(&texts, Some(&cache))?;
    let binding = EmbeddingBinding {
        model_id: config.model_id.clone(),
        instruction: config.instruction().to_string(),
        dim: vectors[0].dim(),
    };
    let summary = EmbedSummary {
        model_id: binding.model_id.clone(),
        instruction: binding.instruction.clone(),
        dim: binding.dim,
        responses: texts.len(),
        cached,
        requests: embedder.request_count() - before,
    };
    project.set_embedding(binding);
    Ok(summary)
}

/// Base-model vectors for every response, read from the project cache.
pub fn load_embeddings(project: &Project, dir: &Path) -> Result<EmbeddingSet> {
    let binding = project
        .embedding
        .as_ref()
        .ok_or_else(|| Error::invalid("project has no embeddings; run embed first"))?;
    let cache = EmbeddingCache::open(project_cache_dir(dir))?;
    let mut set = EmbeddingSet::new(&binding.model_id);
    let mut missing = Vec::new();
    for r in &project.responses {
        let hash = content_hash(&binding.instruction, &r.text);
        match cache.get(&binding.model_id, &hash)? {
            Some(rec) => set.insert(&binding.model_id, r.id.clone(), rec.vector, hash)?,
            None => missing.push(r.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings(missing));
    }
    Ok(set)
}

pub fn adapter_dir(dir: &Path) -> PathBuf {
    dir.join(ADAPTER_DIR)
}

pub fn load_adapter(project: &Project, dir: &Path) -> Result<LinearAdapter> {
    let binding = project
        .embedding
        .as_ref()
        .ok_or_else(|| Error::invalid("project has no embeddings; run embed first"))?;
    LinearAdapter::load(adapter_dir(dir), &binding.model_id)
}

/// Vectors used for classification and projection: adapted when the
/// project's adapter is active, base otherwise.
pub fn active_embeddings(project: &Project, dir: &Path) -> Result<EmbeddingSet> {
    let base = load_embeddings(project, dir)?;
    if !project.adapter_active {
        return Ok(base);
    }
    let adapter = load_adapter(project, dir)?;
    base.map_vectors(adapter.adapted_model_id(), |v| adapter.apply_one(v))
}

pub fn set_codebook(project: &mut Project, codebook: Codebook) -> Result<()> {
    project.set_codebook(codebook)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifySummary {
    pub mode: ClassifyMode,
    pub temperature: f64,
    pub adapted: bool,
    pub assigned: usize,
    pub counts: IndexMap<String, usize>,
}

pub fn classify_project(
    project: &mut Project,
    dir: &Path,
    mode: ClassifyMode,
    temperature: f64,
) -> Result<ClassifySummary> {
    let embeddings = active_embeddings(project, dir)?;
    let centroids = classifier::build_centroids(&project.codebook, &embeddings)?;
    let responses: Vec<&Response> = project.responses.iter().collect();
    let assignments = classifier::classify_all(&centroids, &responses, &embeddings, mode, temperature)?;
    let mut counts: IndexMap<String, usize> = project.codebook.ids().into_iter().map(|c| (c, 0)).collect();
    for a in &assignments {
        *counts.entry(a.category_id.clone()).or_default() += 1;
    }
    let run = ClassificationRun {
        mode,
        temperature,
        adapted: project.adapter_active,
    };
    let assigned = assignments.len();
    project.set_assignments(assignments, run)?;
    Ok(ClassifySummary {
        mode,
        temperature,
        adapted: project.adapter_active,
        assigned,
        counts,
    })
}

/// Sample sizes for resampled evaluation: a default for every category
/// plus per-category overrides.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub k: Option<usize>,
    #[serde(default)]
    pub k_per_category: IndexMap<String, usize>,
    pub runs: usize,
    pub seed: u64,
}

impl ResampleSpec {
    /// Parses `k=3,runs=20,seed=42`; `k.L=5` overrides one category.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = ResampleSpec {
            runs: 20,
            seed: 42,
            ..Default::default()
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got `{part}`")))?;
            let num: u64 = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("`{key}` needs a non-negative integer, got `{value}`")))?;
            match key.trim() {
                "k" => spec.k = Some(num as usize),
                "runs" => spec.runs = num as usize,
                "seed" => spec.seed = num,
                other => match other.strip_prefix("k.") {
                    Some(cat) if !cat.is_empty() => {
                        spec.k_per_category.insert(cat.to_string(), num as usize);
                    }
                    _ => return Err(Error::invalid(format!("unknown resample key `{other}`"))),
                },
            }
        }
        Ok(spec)
    }

    fn resolve(&self, codebook: &Codebook) -> Result<IndexMap<String, usize>> {
        if let Some(c) = self.k_per_category.keys().find(|c| !codebook.contains(c)) {
            return Err(Error::UnknownCategory(c.clone()));
        }
        codebook
            .categories
            .iter()
            .map(|cat| {
                let k = self
                    .k_per_category
                    .get(&cat.id)
                    .copied()
                    .or(self.k)
                    .ok_or_else(|| Error::invalid(format!("no sample size for category `{}`", cat.id)))?;
                Ok((cat.id.clone(), k))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluateOptions {
    /// Drop responses human-coded with the residual category.
    #[serde(default)]
    pub drop_other: bool,
    /// Leave exemplar responses out of the scored set.
    #[serde(default)]
    pub exclude_exemplars: bool,
    #[serde(default)]
    pub resample: Option<ResampleSpec>,
    /// Mode and temperature for resampling; default to the last run's.
    #[serde(default)]
    pub mode: Option<ClassifyMode>,
    #[serde(default)]
    pub temperature: Option<f64>,
}

fn drop_set(project: &Project, drop_other: bool) -> BTreeSet<String> {
    match (drop_other, project.codebook.other()) {
        (true, Some(o)) => BTreeSet::from([o.id.clone()]),
        _ => BTreeSet::new(),
    }
}

/// Scores predictions against human codes.
pub fn evaluate(project: &Project, dir: &Path, opts: &EvaluateOptions) -> Result<MetricsReport> {
    let drop = drop_set(project, opts.drop_other);
    let view = project.filter_coded(&drop)?;
    let mut categories: Vec<String> = project
        .codebook
        .ids()
        .into_iter()
        .filter(|c| !drop.contains(c))
        .collect();

    if let Some(spec) = &opts.resample {
        let k = spec.resolve(&project.codebook)?;
        let mode = opts
            .mode
            .or(project.classification.as_ref().map(|c| c.mode))
            .unwrap_or_default();
        let temperature = opts
            .temperature
            .or(project.classification.as_ref().map(|c| c.temperature))
            .unwrap_or(classifier::DEFAULT_TEMPERATURE);
        let embeddings = active_embeddings(project, dir)?;
        let outcome = classifier::resample_evaluate(
            &view.responses,
            &project.codebook,
            &embeddings,
            &k,
            spec.runs,
            spec.seed,
            mode,
            temperature,
            &categories,
        )?;
        return resampled_report(outcome);
    }

    if project.assignments.is_empty() {
        return Err(Error::invalid("project has no assignments; run classify first"));
    }
    let exemplars = project.codebook.exemplar_ids();
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for r in &view.responses {
        if opts.exclude_exemplars && exemplars.contains(r.id.as_str()) {
            continue;
        }
        let (Some(code), Some(a)) = (r.human_code.as_deref(), project.assignments.get(&r.id)) else {
            continue;
        };
        truth.push(code);
        predicted.push(a.category_id.as_str());
    }
    if truth.is_empty() {
        return Err(Error::invalid("no responses carry both a human code and an assignment"));
    }
    // a selective run may still predict a dropped category
    for p in &predicted {
        if !categories.iter().any(|c| c == p) {
            categories = project.codebook.ids();
            break;
        }
    }
    metrics::score(&truth, &predicted, &categories)
}

fn resampled_report(outcome: classifier::ResampleOutcome) -> Result<MetricsReport> {
    let first = &outcome.runs[0];
    let k = first.confusion.k();
    let mut counts = vec![vec![0u64; k]; k];
    for run in &outcome.runs {
        for (row, src) in counts.iter_mut().zip(&run.confusion.counts) {
            for (c, s) in row.iter_mut().zip(src) {
                *c += s;
            }
        }
    }
    let n = outcome.runs.len() as f64;
    let per_class_f1 = first
        .per_class_f1
        .keys()
        .map(|c| {
            let mean = outcome.runs.iter().map(|r| r.per_class_f1[c]).sum::<f64>() / n;
            (c.clone(), mean)
        })
        .collect();
    let mean = outcome.stats.mean;
    Ok(MetricsReport {
        n_scored: first.n_scored,
        f1_micro: mean.f1_micro,
        f1_macro: mean.f1_macro,
        f1_weighted: mean.f1_weighted,
        kappa: mean.kappa,
        mcc: mean.mcc,
        per_class_f1,
        confusion: ConfusionMatrix::from_counts(first.confusion.categories.clone(), counts)?,
        resampling: Some(outcome.stats),
    })
}

/// Audits with base-model vectors, so an adapter trained on the codes under
/// review cannot hide their inconsistencies.
pub fn audit_project(
    project: &mut Project,
    dir: &Path,
    threshold: f64,
    code_source: CodeSource,
) -> Result<AuditReport> {
    let embeddings = load_embeddings(project, dir)?;
    let report = audit::run_audit(project, &embeddings, threshold, code_source)?;
    project.set_audit(report.clone());
    Ok(report)
}

pub fn summary(project: &Project) -> Result<Option<AuditSummary>> {
    match &project.audit {
        Some(report) => {
            let batches: Vec<_> = project
                .resolution_log
                .iter()
                .filter(|b| b.revision > report.created_at_revision)
                .cloned()
                .collect();
            audit::audit_summary(report, &batches).map(Some)
        }
        None => Ok(None),
    }
}

pub fn resolve(
    project: &mut Project,
    resolutions: Vec<Resolution>,
    expected_revision: Option<u64>,
) -> Result<Option<AuditSummary>> {
    if resolutions.is_empty() {
        return Err(Error::invalid("no resolutions given"));
    }
    audit::apply_resolutions(project, resolutions, expected_revision)?;
    summary(project)
}

/// Reads resolutions from CSV with columns
/// `response_id,old_code,new_code[,resolver,note]`.
pub fn parse_resolutions_csv<R: Read>(source: R) -> Result<Vec<Resolution>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(source);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Resolution>().enumerate() {
        out.push(row.map_err(|e| Error::Parse {
            line: e.position().map_or(i as u64 + 2, |p| p.line()),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Trains an adapter on the codebook exemplars (labeled by category) with
/// base-model vectors and stores it next to the project. It is not
/// activated; see [`set_adapter_active`].
pub fn train_adapter(project: &Project, dir: &Path, hyperparams: &AdapterHyperparams) -> Result<LinearAdapter> {
    let embeddings = load_embeddings(project, dir)?;
    let mut vectors = Vec::new();
    let mut labeled = Vec::new();
    for cat in &project.codebook.categories {
        for id in &cat.exemplar_ids {
            let v = embeddings
                .get(id)
                .ok_or_else(|| Error::MissingEmbeddings(vec![id.clone()]))?;
            labeled.push((vectors.len(), cat.id.as_str()));
            vectors.push(v.clone());
        }
    }
    if vectors.len() < 2 {
        return Err(Error::invalid("adapter training needs at least two exemplars"));
    }
    let pairs = adapter::generate_pairs(&labeled)?;
    let trained = adapter::train(embeddings.model_id(), &vectors, &pairs, hyperparams)?;
    trained.save(adapter_dir(dir))?;
    Ok(trained)
}

pub fn set_adapter_active(project: &mut Project, dir: &Path, active: bool) -> Result<()> {
    if active {
        load_adapter(project, dir)?;
    }
    project.set_adapter_active(active);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub code: Option<String>,
    pub predicted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub projection: Projection2D,
    pub points: Vec<ProjectionPoint>,
}

pub fn project_2d(
    project: &Project,
    dir: &Path,
    method: ProjectionMethod,
    tsne: &TsneParams,
) -> Result<ProjectionResult> {
    let embeddings = active_embeddings(project, dir)?;
    let vectors: Vec<_> = embeddings
        .resolve(project.responses.iter().map(|r| r.id.as_str()))?
        .into_iter()
        .cloned()
        .collect();
    let projection = match method {
        ProjectionMethod::Pca => projection::pca_2d(&vectors)?,
        ProjectionMethod::Tsne => projection::tsne_2d(&vectors, tsne)?,
    };
    let points = project
        .responses
        .iter()
        .zip(&projection.points)
        .map(|(r, p)| ProjectionPoint {
            id: r.id.clone(),
            x: p[0],
            y: p[1],
            code: r.human_code.clone(),
            predicted: project.assignments.get(&r.id).map(|a| a.category_id.clone()),
        })
        .collect();
    let result = ProjectionResult { projection, points };
    std::fs::write(dir.join(PROJECTION_FILE), to_json(&result))?;
    Ok(result)
}

pub fn load_projection(dir: &Path) -> Result<Option<ProjectionResult>> {
    let path = dir.join(PROJECTION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
}

fn csv_string<F>(write: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> std::result::Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| Error::Invalid(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

pub fn projection_csv(points: &[ProjectionPoint]) -> Result<String> {
    csv_string(|w| {
        w.write_record(["id", "x", "y", "code", "predicted"])?;
        for p in points {
            w.write_record([
                p.id.clone(),
                p.x.to_string(),
                p.y.to_string(),
                p.code.clone().unwrap_or_default(),
                p.predicted.clone().unwrap_or_default(),
            ])?;
        }
        Ok(())
    })
}

/// Assignments in project order, one `confidence_<category>` column each.
pub fn assignments_csv(project: &Project) -> Result<String> {
    let cats = project.codebook.ids();
    csv_string(|w| {
        let mut header = vec!["response_id".to_string(), "category_id".to_string()];
        header.extend(cats.iter().map(|c| format!("confidence_{c}")));
        w.write_record(&header)?;
        for r in &project.responses {
            let Some(a) = project.assignments.get(&r.id) else { continue };
            let mut row = vec![a.response_id.clone(), a.category_id.clone()];
            row.extend(
                cats.iter()
                    .map(|c| a.confidence_by_category.get(c).map(f64::to_string).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        Ok(())
    })
}

pub fn assignments_jsonl(project: &Project) -> Result<String> {
    let mut out = String::new();
    for r in &project.responses {
        if let Some(a) = project.assignments.get(&r.id) {
            out.push_str(&serde_json::to_string(a)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Responses as JSON lines with `id`, `text`, `code` and `metadata`, the
/// same shape [`import_responses`] reads.
pub fn responses_jsonl(project: &Project) -> Result<String> {
    let mut out = String::new();
    for r in &project.responses {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// One row per flag: the response, its code, and its closest conflicting
/// neighbor.
pub fn audit_review_csv(project: &Project, report: &AuditReport) -> Result<String> {
    let text = |id: &str| project.response(id).map(|r| r.text.clone()).unwrap_or_default();
    csv_string(|w| {
        w.write_record([
            "response_id",
            "text",
            "code",
            "neighbor_id",
            "neighbor_text",
            "neighbor_code",
            "distance",
        ])?;
        for f in &report.flags {
            let Some(n) = f.neighbors.first() else { continue };
            w.write_record([
                f.response_id.clone(),
                text(&f.response_id),
                f.code.clone(),
                n.response_id.clone(),
                text(&n.response_id),
                n.code.clone(),
                n.distance.to_string(),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticSpec};

    fn synthetic_project(dir: &Path) -> Project {
        let corpus = generate(&SyntheticSpec::default()).unwrap();
        let mut p = Project::new("synthetic", "Synthetic");
        p.add_responses(corpus.responses).unwrap();
        p.set_codebook(corpus.codebook).unwrap();
        embed_project(&mut p, dir, corpus.provider).unwrap();
        p
    }

    #[test]
    fn resample_spec_parsing() {
        let s = ResampleSpec::parse("k=3,runs=5,seed=9,k.O=2").unwrap();
        assert_eq!(s.k, Some(3));
        assert_eq!(s.runs, 5);
        assert_eq!(s.seed, 9);
        assert_eq!(s.k_per_category["O"], 2);
        assert!(ResampleSpec::parse("k=x").is_err());
        assert!(ResampleSpec::parse("bogus=1").is_err());
    }

    #[test]
    fn evaluate_requires_assignments() {
        let dir = tempfile::tempdir().unwrap();
        let p = synthetic_project(dir.path());
        assert!(evaluate(&p, dir.path(), &EvaluateOptions::default()).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = synthetic_project(dir.path());
        classify_project(&mut p, dir.path(), ClassifyMode::Selective, 1.0).unwrap();
        let codes: Vec<(String, String)> = p
            .responses
            .iter()
            .map(|r| (r.id.clone(), r.human_code.clone().unwrap()))
            .collect();
        for (id, code) in codes {
            p.assignments.get_mut(&id).unwrap().category_id = code;
        }
        let m = evaluate(&p, dir.path(), &EvaluateOptions::default()).unwrap();
        assert_eq!(m.kappa, 1.0);
        assert_eq!(m.f1_micro, 1.0);
    }

    #[test]
    fn embedding_twice_hits_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = synthetic_project(dir.path());
        let corpus = generate(&SyntheticSpec::default()).unwrap();
        let again = embed_project(&mut p, dir.path(), corpus.provider).unwrap();
        assert_eq!(again.cached, p.responses.len());
        assert_eq!(again.requests, 0);
    }

    #[test]
    fn adapter_must_exist_before_activation() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = synthetic_project(dir.path());
        assert!(set_adapter_active(&mut p, dir.path(), true).is_err());
        assert!(!p.adapter_active);
    }

    #[test]
    fn resolutions_csv_round_trip() {
        let body = "response_id,old_code,new_code,resolver,note\nr1,L,P,ana,\"looks, like P\"\nr2,S,S,,\n";
        let rs = parse_resolutions_csv(body.as_bytes()).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs[0].note, "looks, like P");
        assert!(!rs[1].is_reclassification());
        assert!(parse_resolutions_csv("response_id\nr1\n".as_bytes()).is_err());
    }
}
