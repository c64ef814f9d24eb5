//! Generator for the bundled synthetic survey corpus.
//!
//! Responses to a lab-report question ("what could explain the difference
//! between your prediction and your measurement?") are assembled from
//! category keywords and neutral filler. The mock provider's anchor table
//! ties every keyword to its category center plus a keyword-specific
//! direction, so same-category responses cluster. *Other* responses are
//! built from unrelated phrases with their own scattered directions, and a
//! share of them also mention a limitation keyword, so *Other* overlaps
//! *Limitations* the way real residual categories do. A handful of
//! paraphrase pairs carry inconsistent human codes for the audit to find.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterHyperparams;
use crate::corpus::{Category, Codebook, Response};
use crate::embedder::{Anchor, AnchorTable, ProviderConfig};
use crate::error::Result;

pub const DEFAULT_SEED: u64 = 7;
pub const MODEL_ID: &str = "mock/synthetic-64";
pub const DIM: usize = 64;

const LIMITATIONS: &[&str] = &[
    "friction",
    "air resistance",
    "reaction time",
    "stopwatch",
    "ruler was bent",
    "parallax",
    "wind in the room",
    "uneven table",
    "slit and the screen",
    "equipment was old",
];
const PRINCIPLES: &[&str] = &[
    "conservation of energy",
    "newton's second law",
    "momentum is conserved",
    "gravitational acceleration",
    "potential energy",
    "wave interference",
];
const STATISTICS: &[&str] = &[
    "more trials",
    "average of the runs",
    "standard deviation",
    "outliers",
    "sample size",
    "spread of the data",
];
const OTHER: &[&str] = &[
    "i don't know",
    "my lab partner",
    "the instructions were confusing",
    "it was fun",
    "we ran out of time",
    "no idea honestly",
    "the teacher helped",
    "nothing really",
];

const OPENERS: &[&str] = &[
    "", "I think ", "Probably ", "Maybe ", "Mostly ", "We noticed ", "It could be ", "Honestly, ",
    "Our group thinks ", "Most likely ",
];
const CLOSERS: &[&str] = &[
    "", ".", " in the experiment.", " during the lab.", " when we measured.", " I guess.",
    " and that changed the result.", "!",
];

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub limitations: usize,
    pub principles: usize,
    pub statistics: usize,
    pub other: usize,
    /// Exemplar pool size per category.
    pub exemplars: usize,
    /// Paraphrase pairs whose second member gets a conflicting human code.
    pub conflicts: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            limitations: 110,
            principles: 50,
            statistics: 60,
            other: 80,
            exemplars: 12,
            conflicts: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub responses: Vec<Response>,
    pub codebook: Codebook,
    pub provider: ProviderConfig,
    /// The label each response was generated from, before conflicts.
    pub planted: Vec<String>,
}

pub fn anchor_table() -> AnchorTable {
    let mut anchors = Vec::new();
    for (cat, words) in [("L", LIMITATIONS), ("P", PRINCIPLES), ("S", STATISTICS)] {
        for w in words {
            anchors.push(Anchor {
                keyword: w.to_string(),
                centers: vec![(format!("category:{cat}"), 1.0), (format!("keyword:{w}"), 0.6)],
            });
        }
    }
    for w in OTHER {
        anchors.push(Anchor {
            keyword: w.to_string(),
            centers: vec![(format!("keyword:{w}"), 1.0), ("category:O".to_string(), 0.35)],
        });
    }
    AnchorTable {
        anchors,
        noise: 0.45,
    }
}

pub fn provider_config(seed: u64) -> ProviderConfig {
    let mut cfg = ProviderConfig::mock(MODEL_ID, DIM, seed);
    cfg.anchors = Some(anchor_table());
    cfg.batch_size = 32;
    cfg
}

fn sentence(rng: &mut ChaCha8Rng, core: &str) -> String {
    let opener = OPENERS.choose(rng).unwrap();
    let closer = CLOSERS.choose(rng).unwrap();
    let mut text = format!("{opener}{core}{closer}");
    if opener.is_empty() {
        let mut chars = text.chars();
        if let Some(first) = chars.next() {
            text = first.to_uppercase().chain(chars).collect();
        }
    }
    text
}

fn category(id: &str, name: &str, definition: &str, is_other: bool) -> Category {
    Category {
        id: id.into(),
        name: name.into(),
        definition: definition.into(),
        exemplar_ids: Vec::new(),
        is_other,
    }
}

/// Adapter settings used with this corpus: the exemplar pool is small, so a
/// larger step than the library default.
pub fn adapter_hyperparams() -> AdapterHyperparams {
    AdapterHyperparams {
        learning_rate: 0.05,
        epochs: 50,
        ..Default::default()
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items: Vec<(String, String)> = Vec::new();
    for (cat, words, count) in [
        ("L", LIMITATIONS, spec.limitations),
        ("P", PRINCIPLES, spec.principles),
        ("S", STATISTICS, spec.statistics),
    ] {
        for k in 0..count {
            let mut core = words[k % words.len()].to_string();
            // a few responses mention a second, different category
            if rng.random_bool(0.12) {
                let pool = if cat == "L" { STATISTICS } else { LIMITATIONS };
                core = format!("{core} and {}", pool.choose(&mut rng).unwrap());
            }
            items.push((cat.to_string(), sentence(&mut rng, &core)));
        }
    }
    for k in 0..spec.other {
        let mut core = OTHER[k % OTHER.len()].to_string();
        if rng.random_bool(0.4) {
            core = format!("{core}, maybe {}", LIMITATIONS.choose(&mut rng).unwrap());
        }
        items.push(("O".to_string(), sentence(&mut rng, &core)));
    }
    // interleave deterministically so ids do not reveal categories
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }

    let mut planted = Vec::with_capacity(items.len() + spec.conflicts);
    let mut responses = Vec::with_capacity(items.len() + spec.conflicts);
    for (code, text) in &items {
        planted.push(code.clone());
        responses.push(Response::new("", text.clone()).with_code(code.clone()));
    }
    // paraphrases of limitation responses, coded inconsistently
    let l_idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].0 == "L").collect();
    for c in 0..spec.conflicts {
        let src = l_idx[(c * 7 + 3) % l_idx.len()];
        let core = LIMITATIONS[c % LIMITATIONS.len()];
        let text = format!("The {core}, that is what affected it");
        let _ = src;
        planted.push("L".to_string());
        responses.push(Response::new("", text).with_code(if c % 2 == 0 { "P" } else { "S" }));
    }
    let width = responses.len().to_string().len();
    for (i, r) in responses.iter_mut().enumerate() {
        r.id = format!("r{:0width$}", i + 1);
        r.metadata.insert(
            "course".into(),
            if i % 3 == 0 { "advanced" } else { "intro" }.into(),
        );
    }

    let mut cats = vec![
        category("L", "Limitations", "Experimental or equipment limitations explain the discrepancy", false),
        category("P", "Principles", "A physical principle or law explains the discrepancy", false),
        category("S", "Statistics", "Statistical spread or sampling explains the discrepancy", false),
        category("O", "Other", "Anything that does not fit the primary categories", true),
    ];
    for cat in &mut cats {
        cat.exemplar_ids = responses
            .iter()
            .zip(&planted)
            .take(items.len())
            .filter(|(r, p)| **p == cat.id && r.human_code.as_deref() == Some(&cat.id))
            .map(|(r, _)| r.id.clone())
            .take(spec.exemplars)
            .collect();
    }
    Ok(SyntheticCorpus {
        responses,
        codebook: Codebook::new(cats)?,
        provider: provider_config(spec.seed),
        planted,
    })
}

/// CSV body with `id,text,code,course` columns.
pub fn to_csv(responses: &[Response]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "text", "code", "course"])
        .map_err(|e| crate::Error::Invalid(e.to_string()))?;
    for r in responses {
        let course = r.metadata.get("course").map(String::as_str).unwrap_or("");
        w.write_record([
            r.id.as_str(),
            r.text.as_str(),
            r.human_code.as_deref().unwrap_or(""),
            course,
        ])
        .map_err(|e| crate::Error::Invalid(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}
