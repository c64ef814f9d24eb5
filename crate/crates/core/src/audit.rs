//! Semantic-consistency audit of coded responses.
//!
//! Every pair of responses closer than the distance threshold (inclusive)
//! that carries different codes is a conflict edge. Responses with at least
//! one edge are flagged for human review; connected components of the
//! conflict graph are reviewed together. Codes only ever change through
//! explicit [`Resolution`]s.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingSet, Project};
use crate::error::{Error, Result};
use crate::vecmath::{close_pairs_blocked, EmbeddingVector};

pub const DEFAULT_THRESHOLD: f64 = 0.15;
pub const SWEEP_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeSource {
    #[default]
    Human,
    Predicted,
}

impl std::str::FromStr for CodeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(Self::Human),
            "predicted" => Ok(Self::Predicted),
            other => Err(Error::invalid(format!("unknown code source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub response_id: String,
    pub code: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFlag {
    pub response_id: String,
    pub code: String,
    /// Sorted by distance, then id.
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub project_id: String,
    pub threshold: f64,
    pub model_id: String,
    pub code_source: CodeSource,
    /// Sorted by response id.
    pub flags: Vec<AuditFlag>,
    /// Each component sorted by id; components sorted by their first id.
    pub conflict_components: Vec<Vec<String>>,
    pub created_at_revision: u64,
}

impl AuditReport {
    pub fn flagged_ids(&self) -> BTreeSet<&str> {
        self.flags.iter().map(|f| f.response_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub response_id: String,
    pub old_code: String,
    /// Equal to `old_code` when the reviewer confirms the existing code.
    pub new_code: String,
    #[serde(default)]
    pub resolver: String,
    #[serde(default)]
    pub note: String,
}

impl Resolution {
    pub fn is_reclassification(&self) -> bool {
        self.new_code != self.old_code
    }
}

/// One atomic application of resolutions, as kept in the project log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionBatch {
    pub project_id: String,
    /// Project revision after the batch was applied.
    pub revision: u64,
    pub code_source: CodeSource,
    pub resolutions: Vec<Resolution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub flagged: usize,
    pub resolved: usize,
    pub reclassified: usize,
    pub outstanding: usize,
}

/// Conflict edges `(i, j, distance)` with `i < j` over already-coded vectors.
pub fn conflict_edges(
    vectors: &[EmbeddingVector],
    codes: &[&str],
    threshold: f64,
    block_size: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    if vectors.len() != codes.len() {
        return Err(Error::invalid("vectors and codes differ in length"));
    }
    Ok(close_pairs_blocked(vectors, threshold, block_size)?
        .into_iter()
        .filter(|p| codes[p.i] != codes[p.j])
        .map(|p| (p.i, p.j, p.distance))
        .collect())
}

/// Builds the report from response ids, codes and conflict edges.
#[allow(clippy::too_many_arguments)]
pub fn assemble_report(
    project_id: &str,
    model_id: &str,
    threshold: f64,
    code_source: CodeSource,
    revision: u64,
    ids: &[&str],
    codes: &[&str],
    edges: &[(usize, usize, f64)],
) -> AuditReport {
    let mut neighbors: BTreeMap<usize, Vec<Neighbor>> = BTreeMap::new();
    let mut uf = UnionFind::new(ids.len());
    for &(i, j, d) in edges {
        uf.union(i, j);
        for (a, b) in [(i, j), (j, i)] {
            neighbors.entry(a).or_default().push(Neighbor {
                response_id: ids[b].to_string(),
                code: codes[b].to_string(),
                distance: d,
            });
        }
    }
    let mut flags: Vec<AuditFlag> = neighbors
        .into_iter()
        .map(|(i, mut ns)| {
            ns.sort_by(|a, b| {
                a.distance
                    .total_cmp(&b.distance)
                    .then_with(|| a.response_id.cmp(&b.response_id))
            });
            AuditFlag {
                response_id: ids[i].to_string(),
                code: codes[i].to_string(),
                neighbors: ns,
            }
        })
        .collect();
    flags.sort_by(|a, b| a.response_id.cmp(&b.response_id));

    let mut groups: HashMap<usize, Vec<String>> = HashMap::new();
    for &(i, j, _) in edges {
        for x in [i, j] {
            groups.entry(uf.find(x)).or_default().push(ids[x].to_string());
        }
    }
    let mut components: Vec<Vec<String>> = groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g.dedup();
            g
        })
        .collect();
    components.sort();

    AuditReport {
        project_id: project_id.to_string(),
        threshold,
        model_id: model_id.to_string(),
        code_source,
        flags,
        conflict_components: components,
        created_at_revision: revision,
    }
}

/// Exact pairwise audit of every response in the project.
pub fn run_audit(
    project: &Project,
    embeddings: &EmbeddingSet,
    threshold: f64,
    code_source: CodeSource,
) -> Result<AuditReport> {
    if !(threshold > 0.0 && threshold < 2.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 2), got {threshold}"
        )));
    }
    let ids: Vec<&str> = project.responses.iter().map(|r| r.id.as_str()).collect();
    let mut codes = Vec::with_capacity(ids.len());
    let mut missing = Vec::new();
    for id in &ids {
        match project.code_of(id, code_source) {
            Some(c) => codes.push(c),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCodes(missing));
    }
    let vectors: Vec<EmbeddingVector> = embeddings
        .resolve(ids.iter().copied())?
        .into_iter()
        .cloned()
        .collect();
    let edges = conflict_edges(&vectors, &codes, threshold, SWEEP_BLOCK)?;
    Ok(assemble_report(
        &project.id,
        embeddings.model_id(),
        threshold,
        code_source,
        project.revision,
        &ids,
        &codes,
        &edges,
    ))
}

/// Applies reviewer decisions atomically: either every resolution is valid
/// and applied with a single revision bump, or nothing changes.
pub fn apply_resolutions(
    project: &mut Project,
    resolutions: Vec<Resolution>,
    expected_revision: Option<u64>,
) -> Result<()> {
    project.check_revision(expected_revision)?;
    let source = project
        .audit
        .as_ref()
        .map(|a| a.code_source)
        .unwrap_or_default();
    let index: HashMap<&str, usize> = project
        .responses
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    // validate against codes as they evolve through the batch
    let mut current: HashMap<&str, String> = HashMap::new();
    for r in &resolutions {
        if !index.contains_key(r.response_id.as_str()) {
            return Err(Error::UnknownResponse(r.response_id.clone()));
        }
        if !project.codebook.contains(&r.new_code) {
            return Err(Error::UnknownCategory(r.new_code.clone()));
        }
        let code = match current.get(r.response_id.as_str()) {
            Some(c) => Some(c.clone()),
            None => project.code_of(&r.response_id, source).map(str::to_string),
        };
        if code.as_deref() != Some(r.old_code.as_str()) {
            return Err(Error::Integrity(format!(
                "resolution for `{}` expects code `{}`, current code is {}",
                r.response_id,
                r.old_code,
                code.map_or("unset".to_string(), |c| format!("`{c}`"))
            )));
        }
        current.insert(r.response_id.as_str(), r.new_code.clone());
    }
    let updates: Vec<(usize, String)> = current
        .into_iter()
        .map(|(id, code)| (index[id], code))
        .collect();
    for (i, code) in updates {
        match source {
            CodeSource::Human => project.responses[i].human_code = Some(code),
            CodeSource::Predicted => {
                let id = project.responses[i].id.clone();
                if let Some(a) = project.assignments.get_mut(&id) {
                    a.category_id = code;
                }
            }
        }
    }
    project.bump();
    project.resolution_log.push(ResolutionBatch {
        project_id: project.id.clone(),
        revision: project.revision,
        code_source: source,
        resolutions,
    });
    Ok(())
}

/// Counts flagged, resolved, reclassified and outstanding items.
///
/// A conflict edge is settled when both ends now carry the same code, or
/// when both ends have been reviewed (confirmed or reclassified) and still
/// differ. A flag is resolved when all of its edges are settled.
pub fn audit_summary(report: &AuditReport, batches: &[ResolutionBatch]) -> Result<AuditSummary> {
    if let Some(b) = batches.iter().find(|b| b.project_id != report.project_id) {
        return Err(Error::invalid(format!(
            "resolutions belong to project `{}`, report to `{}`",
            b.project_id, report.project_id
        )));
    }
    let mut code: HashMap<&str, &str> = HashMap::new();
    for f in &report.flags {
        code.insert(&f.response_id, &f.code);
        for n in &f.neighbors {
            code.insert(&n.response_id, &n.code);
        }
    }
    let mut reviewed: BTreeSet<&str> = BTreeSet::new();
    let mut reclassified = 0;
    for r in batches.iter().flat_map(|b| &b.resolutions) {
        reviewed.insert(&r.response_id);
        code.insert(&r.response_id, &r.new_code);
        if r.is_reclassification() {
            reclassified += 1;
        }
    }
    let resolved = report
        .flags
        .iter()
        .filter(|f| {
            f.neighbors.iter().all(|n| {
                code[f.response_id.as_str()] == code[n.response_id.as_str()]
                    || (reviewed.contains(f.response_id.as_str())
                        && reviewed.contains(n.response_id.as_str()))
            })
        })
        .count();
    Ok(AuditSummary {
        flagged: report.flags.len(),
        resolved,
        reclassified,
        outstanding: report.flags.len() - resolved,
    })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{content_hash, Category, Codebook, Response};

    fn project(entries: &[(&str, &str)]) -> Project {
        let mut p = Project::new("p", "audit");
        p.responses = entries
            .iter()
            .map(|(id, code)| Response::new(*id, format!("text {id}")).with_code(*code))
            .collect();
        p.codebook = Codebook::new(
            ["L", "P", "S"]
                .iter()
                .map(|c| Category {
                    id: c.to_string(),
                    name: c.to_string(),
                    definition: String::new(),
                    exemplar_ids: vec![],
                    is_other: false,
                })
                .collect(),
        )
        .unwrap();
        p
    }

    fn set(vs: &[(&str, [f32; 2])]) -> EmbeddingSet {
        let mut s = EmbeddingSet::new("m");
        for (id, x) in vs {
            s.insert("m", *id, EmbeddingVector::new(x.to_vec()).unwrap(), content_hash("", id))
                .unwrap();
        }
        s
    }

    fn unit(angle: f64) -> [f32; 2] {
        [angle.cos() as f32, angle.sin() as f32]
    }

    #[test]
    fn single_code_never_flags() {
        let p = project(&[("a", "L"), ("b", "L"), ("c", "L")]);
        let s = set(&[("a", unit(0.0)), ("b", unit(0.01)), ("c", unit(0.02))]);
        for t in [0.01, 0.15, 1.9] {
            assert!(run_audit(&p, &s, t, CodeSource::Human).unwrap().flags.is_empty());
        }
    }

    #[test]
    fn three_response_example() {
        // d(a, b) = 1 - cos(theta) = 0.05
        let theta = (0.95f64).acos();
        let p = project(&[("a", "L"), ("b", "P"), ("c", "L")]);
        let s = set(&[("a", unit(0.0)), ("b", unit(theta)), ("c", unit(2.0))]);
        let r = run_audit(&p, &s, DEFAULT_THRESHOLD, CodeSource::Human).unwrap();
        assert_eq!(r.flagged_ids(), BTreeSet::from(["a", "b"]));
        assert_eq!(r.conflict_components, vec![vec!["a".to_string(), "b".to_string()]]);
        assert!((r.flags[0].neighbors[0].distance - 0.05).abs() < 1e-6);
    }

    #[test]
    fn threshold_is_inclusive() {
        let ids = ["a", "b"];
        let codes = ["L", "P"];
        let vs = vec![
            EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
            EmbeddingVector::new(vec![0.0, 1.0]).unwrap(),
        ];
        let edges = conflict_edges(&vs, &codes, 1.0, 4).unwrap();
        assert_eq!(edges.len(), 1);
        let r = assemble_report("p", "m", 1.0, CodeSource::Human, 0, &ids, &codes, &edges);
        assert_eq!(r.flags.len(), 2);
    }

    #[test]
    fn bad_threshold_and_missing_codes() {
        let mut p = project(&[("a", "L"), ("b", "P")]);
        let s = set(&[("a", unit(0.0)), ("b", unit(0.1))]);
        assert!(run_audit(&p, &s, 0.0, CodeSource::Human).is_err());
        assert!(run_audit(&p, &s, 2.0, CodeSource::Human).is_err());
        p.responses[1].human_code = None;
        assert!(matches!(run_audit(&p, &s, 0.15, CodeSource::Human), Err(Error::MissingCodes(ids)) if ids == ["b"]));
        assert!(matches!(run_audit(&p, &s, 0.15, CodeSource::Predicted), Err(Error::MissingCodes(_))));
    }

    fn res(id: &str, old: &str, new: &str) -> Resolution {
        Resolution {
            response_id: id.into(),
            old_code: old.into(),
            new_code: new.into(),
            resolver: "tester".into(),
            note: String::new(),
        }
    }

    #[test]
    fn empty_and_confirming_resolutions() {
        let mut p = project(&[("a", "L"), ("b", "P")]);
        let before = p.responses.clone();
        apply_resolutions(&mut p, vec![], Some(0)).unwrap();
        assert_eq!(p.revision, 1);
        assert_eq!(p.responses, before);
        assert_eq!(p.resolution_log.len(), 1);
        assert!(p.resolution_log[0].resolutions.is_empty());

        apply_resolutions(&mut p, vec![res("a", "L", "L")], Some(1)).unwrap();
        assert_eq!(p.responses, before);
        assert_eq!(p.revision, 2);
    }

    #[test]
    fn resolutions_are_atomic_and_revision_checked() {
        let mut p = project(&[("a", "L"), ("b", "P")]);
        let err = apply_resolutions(&mut p, vec![res("a", "L", "P"), res("b", "P", "Q")], None);
        assert!(matches!(err, Err(Error::UnknownCategory(_))));
        assert_eq!(p.responses[0].human_code.as_deref(), Some("L"));
        assert_eq!(p.revision, 0);
        assert!(matches!(
            apply_resolutions(&mut p, vec![res("zz", "L", "P")], None),
            Err(Error::UnknownResponse(_))
        ));
        assert!(matches!(
            apply_resolutions(&mut p, vec![res("a", "P", "S")], None),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            apply_resolutions(&mut p, vec![res("a", "L", "P")], Some(7)),
            Err(Error::StaleRevision { given: 7, current: 0 })
        ));
        assert_eq!(p.revision, 0);
    }

    #[test]
    fn reaudit_after_reclassification_clears_flags() {
        let p0 = project(&[("a", "L"), ("b", "P"), ("c", "S"), ("d", "L")]);
        let s = set(&[("a", unit(0.0)), ("b", unit(0.1)), ("c", unit(0.2)), ("d", unit(3.0))]);
        let mut p = p0.clone();
        let r = run_audit(&p, &s, DEFAULT_THRESHOLD, CodeSource::Human).unwrap();
        assert_eq!(r.flagged_ids(), BTreeSet::from(["a", "b", "c"]));
        p.set_audit(r);
        apply_resolutions(&mut p, vec![res("b", "P", "L"), res("c", "S", "L")], None).unwrap();
        let again = run_audit(&p, &s, DEFAULT_THRESHOLD, CodeSource::Human).unwrap();
        assert!(again.flags.is_empty());
    }

    #[test]
    fn summary_counts() {
        let p = project(&[("a", "L"), ("b", "P")]);
        let s = set(&[("a", unit(0.0)), ("b", unit(0.1))]);
        let r = run_audit(&p, &s, DEFAULT_THRESHOLD, CodeSource::Human).unwrap();
        let batch = |rs: Vec<Resolution>| ResolutionBatch {
            project_id: "p".into(),
            revision: 1,
            code_source: CodeSource::Human,
            resolutions: rs,
        };
        let none = audit_summary(&r, &[]).unwrap();
        assert_eq!((none.flagged, none.resolved, none.outstanding), (2, 0, 2));
        let confirmed = audit_summary(&r, &[batch(vec![res("a", "L", "L"), res("b", "P", "P")])]).unwrap();
        assert_eq!((confirmed.resolved, confirmed.reclassified, confirmed.outstanding), (2, 0, 0));
        let half = audit_summary(&r, &[batch(vec![res("a", "L", "L")])]).unwrap();
        assert_eq!(half.resolved, 0);
        let mut foreign = batch(vec![]);
        foreign.project_id = "q".into();
        assert!(audit_summary(&r, &[foreign]).is_err());
    }
}
