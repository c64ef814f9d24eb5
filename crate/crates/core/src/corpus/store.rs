//! On-disk project layout:
//!
//! ```text
//! <project dir>/
//!   project.json      manifest (schema, codebook, assignments, audit, log, revision)
//!   responses.jsonl   one response per line
//!   cache/            embedding cache shards
//!   adapter.json      optional trained adapter
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ClassificationRun, Codebook, EmbeddingBinding, Project, Response};
use crate::audit::{AuditReport, ResolutionBatch};
use crate::classifier::Assignment;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "project.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const CACHE_DIR: &str = "cache";

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    id: String,
    #[serde(default)]
    name: String,
    codebook: Codebook,
    #[serde(default)]
    assignments: Vec<Assignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classification: Option<ClassificationRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audit: Option<AuditReport>,
    #[serde(default)]
    resolution_log: Vec<ResolutionBatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<EmbeddingBinding>,
    #[serde(default)]
    adapter_active: bool,
    revision: u64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

impl Project {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            schema: SCHEMA_VERSION,
            id: self.id.clone(),
            name: self.name.clone(),
            codebook: self.codebook.clone(),
            assignments: self.assignments.values().cloned().collect(),
            classification: self.classification.clone(),
            audit: self.audit.clone(),
            resolution_log: self.resolution_log.clone(),
            embedding: self.embedding.clone(),
            adapter_active: self.adapter_active,
            revision: self.revision,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        let mut lines = Vec::new();
        for r in &self.responses {
            serde_json::to_writer(&mut lines, r)?;
            lines.push(b'\n');
        }
        write_atomic(&dir.join(RESPONSES_FILE), &lines)?;
        write_atomic(&dir.join(MANIFEST_FILE), &json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::NotFound(format!(
                "no project manifest at {}",
                manifest_path.display()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.schema != SCHEMA_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported project schema {} (expected {SCHEMA_VERSION})",
                manifest.schema
            )));
        }
        let mut responses = Vec::new();
        let path = dir.join(RESPONSES_FILE);
        if path.exists() {
            for (i, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let r: Response = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i as u64 + 1,
                    message: e.to_string(),
                })?;
                responses.push(r);
            }
        }
        let assignments: IndexMap<String, Assignment> = manifest
            .assignments
            .into_iter()
            .map(|a| (a.response_id.clone(), a))
            .collect();
        Ok(Project {
            id: manifest.id,
            name: manifest.name,
            responses,
            codebook: manifest.codebook,
            assignments,
            classification: manifest.classification,
            audit: manifest.audit,
            resolution_log: manifest.resolution_log,
            embedding: manifest.embedding,
            adapter_active: manifest.adapter_active,
            revision: manifest.revision,
        })
    }
}

/// A directory of project directories, one per project id.
#[derive(Debug, Clone)]
pub struct ProjectStore {
    root: PathBuf,
}

impl ProjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, id: &str) -> Result<PathBuf> {
        let valid = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(Error::invalid(format!("invalid project id `{id}`")));
        }
        Ok(self.root.join(id))
    }

    pub fn cache_dir(&self, id: &str) -> Result<PathBuf> {
        Ok(self.project_dir(id)?.join(CACHE_DIR))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.project_dir(id)
            .map(|d| d.join(MANIFEST_FILE).exists())
            .unwrap_or(false)
    }

    pub fn load(&self, id: &str) -> Result<Project> {
        let dir = self.project_dir(id)?;
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::NotFound(format!("project `{id}`")));
        }
        Project::load(dir)
    }

    pub fn save(&self, project: &Project) -> Result<()> {
        project.save(self.project_dir(&project.id)?)
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(MANIFEST_FILE).exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }
}

/// Resolves the cache directory belonging to a project directory.
pub fn project_cache_dir(project_dir: &Path) -> PathBuf {
    project_dir.join(CACHE_DIR)
}
