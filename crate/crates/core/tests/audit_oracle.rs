use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use qualcode_core::audit::{
    apply_resolutions, audit_summary, conflict_edges, run_audit, CodeSource, Resolution, DEFAULT_THRESHOLD,
};
use qualcode_core::corpus::{content_hash, Category, Codebook, EmbeddingSet, Project, Response};
use qualcode_core::vecmath::cosine_distance;
use qualcode_core::EmbeddingVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const CODES: [&str; 3] = ["A", "B", "C"];

/// Points scattered tightly around a few centers, so many pairs fall under
/// the audit threshold.
fn clustered(n: usize, dim: usize, spread: f64, seed: u64) -> (Vec<EmbeddingVector>, Vec<&'static str>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut vectors = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        let c = &centers[rng.random_range(0..centers.len())];
        let v: Vec<f64> = c
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + spread * z
            })
            .collect();
        vectors.push(EmbeddingVector::from_f64(&v).unwrap());
        codes.push(CODES[rng.random_range(0..CODES.len())]);
    }
    (vectors, codes)
}

/// Independent distance: plain f64 loops, no shared helpers.
fn naive_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.values().iter().zip(b.values()) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    1.0 - (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

fn naive_edges(vectors: &[EmbeddingVector], codes: &[&str], threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d = cosine_distance(&vectors[i], &vectors[j]).unwrap();
            if d <= threshold && codes[i] != codes[j] {
                out.push((i, j, d));
            }
        }
    }
    out
}

fn project_and_set(vectors: &[EmbeddingVector], codes: &[&str]) -> (Project, EmbeddingSet) {
    let mut p = Project::new("audit", "audit");
    let responses: Vec<Response> = codes
        .iter()
        .enumerate()
        .map(|(i, c)| Response::new(format!("r{i:03}"), format!("text {i}")).with_code(*c))
        .collect();
    p.add_responses(responses).unwrap();
    let cats = CODES
        .iter()
        .map(|c| Category {
            id: c.to_string(),
            name: c.to_string(),
            definition: String::new(),
            exemplar_ids: Vec::new(),
            is_other: false,
        })
        .collect();
    p.set_codebook(Codebook::new(cats).unwrap()).unwrap();
    let mut set = EmbeddingSet::new("m");
    for (r, v) in p.responses.iter().zip(vectors) {
        set.insert("m", r.id.clone(), v.clone(), content_hash("", &r.text)).unwrap();
    }
    (p, set)
}

#[test]
fn blocked_sweep_equals_double_loop() {
    for (seed, n) in [(1u64, 2usize), (2, 17), (3, 64), (4, 131), (5, 200)] {
        let (vectors, codes) = clustered(n, 24, 0.12, seed);
        let want = naive_edges(&vectors, &codes, DEFAULT_THRESHOLD);
        for block in [1, 7, 64, 256] {
            let got = conflict_edges(&vectors, &codes, DEFAULT_THRESHOLD, block).unwrap();
            assert_eq!(got, want, "n = {n}, block = {block}");
        }
        if n >= 64 {
            assert!(!want.is_empty(), "fixture should produce conflicts");
        }
    }
}

#[test]
fn distances_agree_with_an_independent_computation() {
    let (vectors, codes) = clustered(150, 32, 0.1, 9);
    for (i, j, d) in conflict_edges(&vectors, &codes, DEFAULT_THRESHOLD, 32).unwrap() {
        assert!((d - naive_distance(&vectors[i], &vectors[j])).abs() < 1e-12);
    }
}

#[test]
fn report_flags_match_the_oracle() {
    let (vectors, codes) = clustered(120, 16, 0.1, 21);
    let (p, set) = project_and_set(&vectors, &codes);
    let report = run_audit(&p, &set, DEFAULT_THRESHOLD, CodeSource::Human).unwrap();
    let mut want: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, j, _) in naive_edges(&vectors, &codes, DEFAULT_THRESHOLD) {
        want.entry(p.responses[i].id.clone()).or_default().insert(p.responses[j].id.clone());
        want.entry(p.responses[j].id.clone()).or_default().insert(p.responses[i].id.clone());
    }
    let got: BTreeMap<String, BTreeSet<String>> = report
        .flags
        .iter()
        .map(|f| {
            (
                f.response_id.clone(),
                f.neighbors.iter().map(|n| n.response_id.clone()).collect(),
            )
        })
        .collect();
    assert_eq!(got, want);
    // every flagged response sits in exactly one component
    let members: Vec<&String> = report.conflict_components.iter().flatten().collect();
    let unique: BTreeSet<&String> = members.iter().copied().collect();
    assert_eq!(members.len(), unique.len());
    assert_eq!(unique.len(), report.flags.len());
}

/// Gives every group of mutually reachable close responses (conflicting or
/// not) its majority code, then re-audits.
#[test]
fn resolving_components_reaches_a_fixpoint() {
    let (vectors, codes) = clustered(180, 16, 0.1, 33);
    let (mut p, set) = project_and_set(&vectors, &codes);
    let report = run_audit(&p, &set, DEFAULT_THRESHOLD, CodeSource::Human).unwrap();
    assert!(!report.flags.is_empty());

    let n = vectors.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if cosine_distance(&vectors[i], &vectors[j]).unwrap() <= DEFAULT_THRESHOLD {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let flagged: BTreeSet<usize> = report
        .flagged_ids()
        .iter()
        .map(|id| p.responses.iter().position(|r| r.id == *id).unwrap())
        .collect();
    let roots: BTreeSet<usize> = flagged.iter().map(|&i| find(&mut parent, i)).collect();
    let mut resolutions = Vec::new();
    for root in roots {
        let members: Vec<usize> = (0..n).filter(|&i| find(&mut parent, i) == root).collect();
        let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
        for &m in &members {
            *tally.entry(codes[m]).or_default() += 1;
        }
        let majority = tally.iter().max_by_key(|(c, k)| (**k, std::cmp::Reverse(**c))).unwrap().0;
        for &m in &members {
            resolutions.push(Resolution {
                response_id: p.responses[m].id.clone(),
                old_code: codes[m].to_string(),
                new_code: majority.to_string(),
                resolver: "test".into(),
                note: String::new(),
            });
        }
    }
    let revision = p.revision;
    apply_resolutions(&mut p, resolutions, Some(revision)).unwrap();
    assert_eq!(p.revision, revision + 1);

    let summary = audit_summary(&report, &p.resolution_log).unwrap();
    assert_eq!(summary.outstanding, 0);
    assert_eq!(summary.resolved, summary.flagged);

    let again = run_audit(&p, &set, DEFAULT_THRESHOLD, CodeSource::Human).unwrap();
    assert!(again.flags.is_empty(), "{} flags remain", again.flags.len());
}

#[test]
fn stale_revision_changes_nothing() {
    let (vectors, codes) = clustered(60, 8, 0.1, 5);
    let (mut p, _) = project_and_set(&vectors, &codes);
    let before = p.clone();
    let r = Resolution {
        response_id: p.responses[0].id.clone(),
        old_code: codes[0].to_string(),
        new_code: "C".into(),
        resolver: String::new(),
        note: String::new(),
    };
    let stale = p.revision + 3;
    let err = apply_resolutions(&mut p, vec![r], Some(stale)).unwrap_err();
    assert_eq!(err.kind(), qualcode_core::ErrorKind::Integrity);
    assert_eq!(p, before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flags_grow_with_the_threshold(seed in any::<u64>(), a in 0.01f64..0.5, b in 0.01f64..0.5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (vectors, codes) = clustered(60, 8, 0.25, seed);
        let (p, set) = project_and_set(&vectors, &codes);
        let small = run_audit(&p, &set, lo, CodeSource::Human).unwrap();
        let large = run_audit(&p, &set, hi, CodeSource::Human).unwrap();
        prop_assert!(small.flagged_ids().is_subset(&large.flagged_ids()));
    }

    #[test]
    fn conflict_relation_is_symmetric(seed in any::<u64>()) {
        let (vectors, codes) = clustered(50, 8, 0.2, seed);
        let (p, set) = project_and_set(&vectors, &codes);
        let report = run_audit(&p, &set, 0.3, CodeSource::Human).unwrap();
        let pairs: BTreeSet<(String, String)> = report
            .flags
            .iter()
            .flat_map(|f| f.neighbors.iter().map(move |n| (f.response_id.clone(), n.response_id.clone())))
            .collect();
        for (a, b) in &pairs {
            prop_assert!(pairs.contains(&(b.clone(), a.clone())));
        }
        for f in &report.flags {
            for n in &f.neighbors {
                prop_assert_ne!(&f.code, &n.code);
                prop_assert!(n.distance <= 0.3);
            }
        }
    }
}
