//! Embedding providers, batching and caching.
//!
//! Vectors are L2-normalized on receipt. Remote providers speak the common
//! `POST {endpoint}/embeddings` JSON protocol; the mock provider is a pure
//! function of its input and is used for tests and the bundled corpus.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{content_hash, EmbeddingCache};
use crate::error::{Error, Result};
use crate::vecmath::EmbeddingVector;

pub const STS_PREFIX: &str = "Instruct: Retrieve semantically similar text \n Query: ";
pub const CLASSIFICATION_PREFIX: &str = "classification: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionPreset {
    #[default]
    None,
    Classification,
    Sts,
}

impl InstructionPreset {
    pub fn prefix(self) -> &'static str {
        match self {
            InstructionPreset::None => "",
            InstructionPreset::Classification => CLASSIFICATION_PREFIX,
            InstructionPreset::Sts => STS_PREFIX,
        }
    }
}

impl std::str::FromStr for InstructionPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "classification" => Ok(Self::Classification),
            "sts" => Ok(Self::Sts),
            other => Err(Error::invalid(format!("unknown instruction preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteHttp,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_backoff_ms: 500,
        }
    }
}

/// Keyword-driven geometry for the mock provider.
///
/// A text containing `keyword` (case-insensitive) is pulled towards each
/// named center by the given weight. Centers are fixed pseudo-random unit
/// vectors derived from their name and the provider seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub keyword: String,
    pub centers: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorTable {
    pub anchors: Vec<Anchor>,
    /// Weight of the per-text random direction added to the anchored sum.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_id: String,
    /// Required for the mock provider; discovered from responses for remote ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<AnchorTable>,
}

fn default_batch_size() -> usize {
    64
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> u64 {
    60
}

impl ProviderConfig {
    pub fn mock(model_id: impl Into<String>, dim: usize, seed: u64) -> Self {
        Self {
            kind: ProviderKind::Mock,
            endpoint: None,
            model_id: model_id.into(),
            dim: Some(dim),
            instruction: None,
            batch_size: default_batch_size(),
            max_concurrent_requests: default_concurrency(),
            retry: RetryPolicy::default(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            seed,
            anchors: None,
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::RemoteHttp,
            endpoint: Some(endpoint.into()),
            dim: None,
            ..Self::mock(model_id, 1, 0)
        }
    }

    /// Replaces the instruction prefix with a preset's.
    pub fn with_instruction(mut self, preset: InstructionPreset) -> Self {
        let prefix = preset.prefix();
        self.instruction = (!prefix.is_empty()).then(|| prefix.to_string());
        self
    }

    pub fn instruction(&self) -> &str {
        self.instruction.as_deref().unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(Error::config("model_id must be non-empty"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_concurrent_requests == 0 {
            return Err(Error::config("max_concurrent_requests must be at least 1"));
        }
        match self.kind {
            ProviderKind::Mock if self.dim.is_none_or(|d| d < 2) => {
                Err(Error::config("mock provider needs dim >= 2"))
            }
            ProviderKind::RemoteHttp if self.endpoint.is_none() => {
                Err(Error::config("remote provider needs an endpoint"))
            }
            _ => Ok(()),
        }
    }
}

/// Failure reported by a provider for one request.
#[derive(Debug, Clone)]
pub enum ProviderError {
    /// Rate limits, server errors, timeouts: worth retrying.
    Retryable(String),
    Fatal(String),
}

/// Something that turns a batch of texts into raw vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(
        &self,
        model_id: &str,
        instruction: &str,
        texts: &[&str],
    ) -> std::result::Result<Vec<Vec<f32>>, ProviderError>;
}

fn text_seed(text: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap()) ^ seed
}

fn gaussian_unit(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(text_seed(text, seed));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Deterministic pseudo-embedding: `dim` standard normals drawn from a
/// ChaCha stream keyed by `hash(text) ^ seed`, then L2-normalized.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector> {
    if dim < 2 {
        return Err(Error::invalid("mock embedding dimension must be at least 2"));
    }
    EmbeddingVector::from_f64(&gaussian_unit(text, dim, seed))
}

const CENTER_SALT: u64 = 0x5eed_c0de_0000_0001;

/// The pure mock provider.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub dim: usize,
    pub seed: u64,
    pub anchors: AnchorTable,
}

impl MockProvider {
    pub fn new(dim: usize, seed: u64, anchors: Option<AnchorTable>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("mock embedding dimension must be at least 2"));
        }
        Ok(Self {
            dim,
            seed,
            anchors: anchors.unwrap_or_default(),
        })
    }

    pub fn center(&self, name: &str) -> Vec<f64> {
        gaussian_unit(&format!("center:{name}"), self.dim, self.seed ^ CENTER_SALT)
    }

    /// Embeds `instruction + text`; anchors match against `text` alone.
    pub fn embed_one(&self, instruction: &str, text: &str) -> Vec<f64> {
        let full = format!("{instruction}{text}");
        let noise = gaussian_unit(&full, self.dim, self.seed);
        let lower = text.to_lowercase();
        let mut v = vec![0.0; self.dim];
        let mut matched = false;
        for anchor in &self.anchors.anchors {
            if !lower.contains(&anchor.keyword.to_lowercase()) {
                continue;
            }
            matched = true;
            for (name, w) in &anchor.centers {
                for (acc, c) in v.iter_mut().zip(self.center(name)) {
                    *acc += w * c;
                }
            }
        }
        if !matched {
            return noise;
        }
        for (acc, n) in v.iter_mut().zip(&noise) {
            *acc += self.anchors.noise * n;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return noise;
        }
        v.into_iter().map(|x| x / norm).collect()
    }
}

impl EmbeddingProvider for MockProvider {
    fn embed(
        &self,
        _model_id: &str,
        instruction: &str,
        texts: &[&str],
    ) -> std::result::Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts
            .iter()
            .map(|t| self.embed_one(instruction, t).into_iter().map(|x| x as f32).collect())
            .collect())
    }
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: Vec<String>,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// Client for `POST {endpoint}/embeddings`.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpProvider {
    pub fn new(config: &ProviderConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .as_deref()
            .ok_or_else(|| Error::config("remote provider needs an endpoint"))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::config(format!("http client: {e}")))?;
        let api_key = config
            .api_key_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok());
        Ok(Self {
            client,
            url: format!("{}/embeddings", endpoint.trim_end_matches('/')),
            api_key,
        })
    }
}

impl EmbeddingProvider for HttpProvider {
    fn embed(
        &self,
        model_id: &str,
        instruction: &str,
        texts: &[&str],
    ) -> std::result::Result<Vec<Vec<f32>>, ProviderError> {
        let body = EmbeddingsRequest {
            model: model_id,
            input: texts.iter().map(|t| format!("{instruction}{t}")).collect(),
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| ProviderError::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Fatal(format!("HTTP {status}")));
        }
        let parsed: EmbeddingsResponse = resp
            .json()
            .map_err(|e| ProviderError::Fatal(format!("malformed response: {e}")))?;
        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for d in parsed.data {
            let slot = out
                .get_mut(d.index)
                .ok_or_else(|| ProviderError::Fatal(format!("index {} out of range", d.index)))?;
            *slot = Some(d.embedding);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| ProviderError::Fatal(format!("missing index {i}"))))
            .collect()
    }
}

/// Batches texts over a provider, consulting the cache first.
pub struct Embedder {
    config: ProviderConfig,
    provider: Box<dyn EmbeddingProvider>,
    requests: AtomicUsize,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder").field("config", &self.config).finish()
    }
}

impl Embedder {
    pub fn from_config(config: ProviderConfig) -> Result<Self> {
        config.validate()?;
        let provider: Box<dyn EmbeddingProvider> = match config.kind {
            ProviderKind::Mock => Box::new(MockProvider::new(
                config.dim.unwrap_or(0),
                config.seed,
                config.anchors.clone(),
            )?),
            ProviderKind::RemoteHttp => Box::new(HttpProvider::new(&config)?),
        };
        Ok(Self::with_provider(config, provider))
    }

    pub fn with_provider(config: ProviderConfig, provider: Box<dyn EmbeddingProvider>) -> Self {
        Self {
            config,
            provider,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Provider calls issued so far, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn call_with_retry(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let policy = &self.config.retry;
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            self.requests.fetch_add(1, Ordering::SeqCst);
            match self
                .provider
                .embed(&self.config.model_id, self.config.instruction(), texts)
            {
                Ok(v) => return Ok(v),
                Err(ProviderError::Retryable(msg)) if attempts <= policy.max_retries => {
                    let base = policy.base_backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    let jitter = rand::rng().random_range(0..=base / 2 + 1);
                    log::warn!("embedding request failed ({msg}); retry {attempts} in {}ms", base + jitter);
                    std::thread::sleep(Duration::from_millis(base + jitter));
                }
                Err(ProviderError::Retryable(message)) | Err(ProviderError::Fatal(message)) => {
                    return Err(Error::Transport { attempts, message })
                }
            }
        }
    }

    /// Embeds `texts`, preserving order. Cached vectors are reused without
    /// provider calls; fresh ones are normalized and written to the cache.
    pub fn embed_batch(
        &self,
        texts: &[&str],
        cache: Option<&EmbeddingCache>,
    ) -> Result<Vec<EmbeddingVector>> {
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(Error::invalid(format!("text {i} is empty")));
        }
        let model_id = &self.config.model_id;
        let instruction = self.config.instruction();
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let misses: Vec<usize> = match cache {
            Some(c) => {
                let lookup = c.get_or_pending(model_id, instruction, texts)?;
                for (i, rec) in lookup.hits {
                    out[i] = Some(rec.vector);
                }
                lookup.misses
            }
            None => (0..texts.len()).collect(),
        };

        let batches: Vec<&[usize]> = misses.chunks(self.config.batch_size).collect();
        let results: Mutex<Vec<Option<Result<Vec<Vec<f32>>>>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.config.max_concurrent_requests.min(batches.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let b = next.fetch_add(1, Ordering::SeqCst);
                    if b >= batches.len() {
                        break;
                    }
                    let batch_texts: Vec<&str> = batches[b].iter().map(|&i| texts[i]).collect();
                    let res = self.call_with_retry(&batch_texts);
                    let failed = res.is_err();
                    results.lock().unwrap()[b] = Some(res);
                    if failed {
                        // stop handing out further batches
                        next.store(batches.len(), Ordering::SeqCst);
                    }
                });
            }
        });

        let mut fresh = Vec::new();
        let mut dim = cache.and_then(|c| c.dim_of(model_id)).or(self.config.dim);
        for (b, res) in results.into_inner().unwrap().into_iter().enumerate() {
            let Some(res) = res else { continue };
            let vectors = res?;
            if vectors.len() != batches[b].len() {
                return Err(Error::Integrity(format!(
                    "provider returned {} vectors for {} texts",
                    vectors.len(),
                    batches[b].len()
                )));
            }
            for (&i, raw) in batches[b].iter().zip(vectors) {
                let expected = *dim.get_or_insert(raw.len());
                if raw.len() != expected {
                    return Err(Error::Integrity(format!(
                        "dimension drift: text {i} embedded with dim {}, expected {expected}",
                        raw.len()
                    )));
                }
                let v = EmbeddingVector::new(raw)?.normalized()?;
                fresh.push((content_hash(instruction, texts[i]), v.clone()));
                out[i] = Some(v);
            }
        }
        if out.iter().any(Option::is_none) {
            return Err(Error::Transport {
                attempts: 0,
                message: "embedding aborted before all batches completed".into(),
            });
        }
        if let Some(c) = cache {
            c.put(model_id, true, &fresh)?;
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }
}
