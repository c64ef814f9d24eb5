//! Survey project data model, ingestion, persistence and the embedding cache.

mod cache;
mod import;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::audit::{AuditReport, CodeSource, ResolutionBatch};
use crate::classifier::{Assignment, ClassifyMode};
use crate::error::{Error, Result};
use crate::vecmath::EmbeddingVector;

pub use cache::{content_hash, ContentHash, EmbeddingCache, EmbeddingRecord, CacheLookup};
pub use import::{import_responses, ImportMapping, SourceFormat};
pub use store::{project_cache_dir, ProjectStore, CACHE_DIR, MANIFEST_FILE, RESPONSES_FILE, SCHEMA_VERSION};

/// One survey answer. `text` is kept byte-for-byte as imported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    pub text: String,
    #[serde(rename = "code", default, skip_serializing_if = "Option::is_none")]
    pub human_code: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Response {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            human_code: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_code(mut self, code: impl Into<String>) -> Self {
        self.human_code = Some(code.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub definition: String,
    #[serde(default)]
    pub exemplar_ids: Vec<String>,
    #[serde(default)]
    pub is_other: bool,
}

/// Ordered categories. The order is also the tie-break order for classification.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub categories: Vec<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_binding: Option<String>,
}

impl Codebook {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let cb = Self {
            categories,
            model_binding: None,
        };
        cb.validate()?;
        Ok(cb)
    }

    /// Checks id uniqueness and the single-residual-category rule.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.categories {
            if c.id.is_empty() {
                return Err(Error::config("category id must be non-empty"));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::config(format!("duplicate category id `{}`", c.id)));
            }
        }
        if self.categories.iter().filter(|c| c.is_other).count() > 1 {
            return Err(Error::config("at most one category may be marked is_other"));
        }
        Ok(())
    }

    /// Checks that every exemplar id names an existing response.
    pub fn validate_against(&self, responses: &[Response]) -> Result<()> {
        self.validate()?;
        let ids: HashSet<&str> = responses.iter().map(|r| r.id.as_str()).collect();
        for c in &self.categories {
            if let Some(missing) = c.exemplar_ids.iter().find(|e| !ids.contains(e.as_str())) {
                return Err(Error::UnknownResponse(missing.clone()));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn other(&self) -> Option<&Category> {
        self.categories.iter().find(|c| c.is_other)
    }

    pub fn exemplar_ids(&self) -> BTreeSet<&str> {
        self.categories
            .iter()
            .flat_map(|c| c.exemplar_ids.iter().map(String::as_str))
            .collect()
    }
}

/// Which embedding model and instruction prefix a project's vectors come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingBinding {
    pub model_id: String,
    pub instruction: String,
    pub dim: usize,
}

/// Settings of the most recent classification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRun {
    pub mode: ClassifyMode,
    pub temperature: f64,
    pub adapted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub responses: Vec<Response>,
    pub codebook: Codebook,
    #[serde(default)]
    pub assignments: IndexMap<String, Assignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditReport>,
    #[serde(default)]
    pub resolution_log: Vec<ResolutionBatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingBinding>,
    #[serde(default)]
    pub adapter_active: bool,
    pub revision: u64,
}

impl Project {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            responses: Vec::new(),
            codebook: Codebook::default(),
            assignments: IndexMap::new(),
            classification: None,
            audit: None,
            resolution_log: Vec::new(),
            embedding: None,
            adapter_active: false,
            revision: 0,
        }
    }

    pub(crate) fn bump(&mut self) {
        self.revision += 1;
    }

    pub fn response(&self, id: &str) -> Option<&Response> {
        self.responses.iter().find(|r| r.id == id)
    }

    /// Fails with [`Error::StaleRevision`] unless `expected` matches.
    pub fn check_revision(&self, expected: Option<u64>) -> Result<()> {
        match expected {
            Some(given) if given != self.revision => Err(Error::StaleRevision {
                given,
                current: self.revision,
            }),
            _ => Ok(()),
        }
    }

    /// Appends responses, rejecting ids that collide with existing ones.
    pub fn add_responses(&mut self, new: Vec<Response>) -> Result<()> {
        let existing: HashSet<&str> = self.responses.iter().map(|r| r.id.as_str()).collect();
        let dups: Vec<String> = new
            .iter()
            .filter(|r| existing.contains(r.id.as_str()))
            .map(|r| r.id.clone())
            .collect();
        if !dups.is_empty() {
            return Err(Error::DuplicateIds(dups));
        }
        self.responses.extend(new);
        self.bump();
        Ok(())
    }

    pub fn set_codebook(&mut self, codebook: Codebook) -> Result<()> {
        codebook.validate_against(&self.responses)?;
        self.codebook = codebook;
        self.bump();
        Ok(())
    }

    pub fn set_assignments(&mut self, assignments: Vec<Assignment>, run: ClassificationRun) -> Result<()> {
        for a in &assignments {
            if self.response(&a.response_id).is_none() {
                return Err(Error::UnknownResponse(a.response_id.clone()));
            }
            if !self.codebook.contains(&a.category_id) {
                return Err(Error::UnknownCategory(a.category_id.clone()));
            }
        }
        self.assignments = assignments
            .into_iter()
            .map(|a| (a.response_id.clone(), a))
            .collect();
        self.classification = Some(run);
        self.bump();
        Ok(())
    }

    pub fn set_audit(&mut self, report: AuditReport) {
        self.audit = Some(report);
        self.bump();
    }

    pub fn set_embedding(&mut self, binding: EmbeddingBinding) {
        self.embedding = Some(binding);
        self.bump();
    }

    pub fn set_adapter_active(&mut self, active: bool) {
        self.adapter_active = active;
        self.bump();
    }

    /// Current code of a response under the given source.
    pub fn code_of(&self, response_id: &str, source: CodeSource) -> Option<&str> {
        match source {
            CodeSource::Human => self.response(response_id)?.human_code.as_deref(),
            CodeSource::Predicted => self
                .assignments
                .get(response_id)
                .map(|a| a.category_id.as_str()),
        }
    }

    /// Read-only view without responses whose human code is in `drop`.
    pub fn filter_coded(&self, drop: &BTreeSet<String>) -> Result<ProjectView<'_>> {
        if let Some(unknown) = drop.iter().find(|c| !self.codebook.contains(c)) {
            return Err(Error::UnknownCategory(unknown.clone()));
        }
        let responses = self
            .responses
            .iter()
            .filter(|r| r.human_code.as_ref().is_none_or(|c| !drop.contains(c)))
            .collect();
        Ok(ProjectView {
            project: self,
            responses,
        })
    }

    pub fn view(&self) -> ProjectView<'_> {
        ProjectView {
            project: self,
            responses: self.responses.iter().collect(),
        }
    }
}

/// Response vectors produced under a single embedding model.
///
/// Inserting a vector from another model or with another dimension fails, so
/// everything downstream can compare vectors from one set freely.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    model_id: String,
    dim: Option<usize>,
    vectors: HashMap<String, (EmbeddingVector, ContentHash)>,
}

impl EmbeddingSet {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            dim: None,
            vectors: HashMap::new(),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(
        &mut self,
        model_id: &str,
        response_id: impl Into<String>,
        vector: EmbeddingVector,
        hash: ContentHash,
    ) -> Result<()> {
        if model_id != self.model_id {
            return Err(Error::ModelMismatch(self.model_id.clone(), model_id.to_string()));
        }
        let expected = *self.dim.get_or_insert(vector.dim());
        if vector.dim() != expected {
            return Err(Error::Shape {
                expected,
                got: vector.dim(),
            });
        }
        self.vectors.insert(response_id.into(), (vector, hash));
        Ok(())
    }

    pub fn get(&self, response_id: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(response_id).map(|(v, _)| v)
    }

    pub fn hash(&self, response_id: &str) -> Option<ContentHash> {
        self.vectors.get(response_id).map(|(_, h)| *h)
    }

    /// Vectors for `ids` in order, or the list of ids without one.
    pub fn resolve<'a, I>(&self, ids: I) -> Result<Vec<&EmbeddingVector>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut found = Vec::new();
        let mut missing = Vec::new();
        for id in ids {
            match self.get(id) {
                Some(v) => found.push(v),
                None => missing.push(id.to_string()),
            }
        }
        if missing.is_empty() {
            Ok(found)
        } else {
            Err(Error::MissingEmbeddings(missing))
        }
    }

    /// Returns a set with `f` applied to every vector, under a new model id.
    pub fn map_vectors<F>(&self, model_id: impl Into<String>, f: F) -> Result<Self>
    where
        F: Fn(&EmbeddingVector) -> Result<EmbeddingVector>,
    {
        let mut out = Self::new(model_id);
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        for k in keys {
            let (v, h) = &self.vectors[k];
            let mapped = f(v)?;
            let model = out.model_id.clone();
            out.insert(&model, k.clone(), mapped, *h)?;
        }
        Ok(out)
    }
}

/// A filtered, borrowed view of a project's responses.
#[derive(Debug, Clone)]
pub struct ProjectView<'a> {
    pub project: &'a Project,
    pub responses: Vec<&'a Response>,
}

impl ProjectView<'_> {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}
