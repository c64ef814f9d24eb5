//! The remote provider against a local server speaking the embeddings
//! protocol.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use qualcode_core::corpus::EmbeddingCache;
use qualcode_core::embedder::{mock_embed, Embedder, ProviderConfig, RetryPolicy};
use qualcode_core::ErrorKind;
use serde_json::{json, Value};

const DIM: usize = 16;

#[derive(Default)]
struct Server {
    requests: AtomicUsize,
    /// Statuses to return before answering normally.
    failures: Mutex<Vec<u16>>,
    /// Returned for every request once `failures` is empty, when set.
    always: Option<u16>,
    seen_inputs: Mutex<Vec<String>>,
    seen_auth: Mutex<Vec<String>>,
}

async fn embeddings(
    State(server): State<Arc<Server>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    server.requests.fetch_add(1, Ordering::SeqCst);
    if let Some(auth) = headers.get("authorization") {
        server.seen_auth.lock().unwrap().push(auth.to_str().unwrap().to_string());
    }
    if let Some(code) = server.failures.lock().unwrap().pop() {
        return (StatusCode::from_u16(code).unwrap(), Json(json!({"error": "injected"})));
    }
    if let Some(code) = server.always {
        return (StatusCode::from_u16(code).unwrap(), Json(json!({"error": "injected"})));
    }
    let inputs: Vec<String> = body["input"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    server.seen_inputs.lock().unwrap().extend(inputs.iter().cloned());
    // answer in reverse order so the client has to use the indices
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .rev()
        .map(|(i, text)| {
            let v = mock_embed(text, DIM, 0).unwrap();
            let scaled: Vec<f32> = v.values().iter().map(|x| x * 3.0).collect();
            json!({"index": i, "embedding": scaled})
        })
        .collect();
    (StatusCode::OK, Json(json!({"object": "list", "data": data, "model": body["model"]})))
}

/// Starts a server on its own runtime thread and returns its base URL.
fn spawn(server: Arc<Server>) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let app = Router::new().route("/v1/embeddings", post(embeddings)).with_state(server);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}/v1", rx.recv().unwrap())
}

fn config(url: &str) -> ProviderConfig {
    let mut cfg = ProviderConfig::remote(url, "remote/test");
    cfg.retry = RetryPolicy {
        max_retries: 3,
        base_backoff_ms: 1,
    };
    cfg
}

#[test]
fn cold_cache_run_issues_one_request_per_batch() {
    let server = Arc::new(Server::default());
    let url = spawn(server.clone());
    let texts: Vec<String> = (0..2899).map(|i| format!("response number {i}")).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let embedder = Embedder::from_config(config(&url)).unwrap();
    let cache = EmbeddingCache::in_memory();
    let vectors = embedder.embed_batch(&refs, Some(&cache)).unwrap();
    assert_eq!(vectors.len(), 2899);
    assert_eq!(embedder.request_count(), 46);
    assert_eq!(server.requests.load(Ordering::SeqCst), 46);
    for (t, v) in refs.iter().zip(&vectors).step_by(97) {
        assert_eq!(v.dim(), DIM);
        assert!((v.norm() - 1.0).abs() < 1e-6);
        let want = mock_embed(t, DIM, 0).unwrap();
        for (a, b) in v.values().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    // warm cache: no further requests, identical vectors
    let again = embedder.embed_batch(&refs, Some(&cache)).unwrap();
    assert_eq!(again, vectors);
    assert_eq!(server.requests.load(Ordering::SeqCst), 46);
}

#[test]
fn rate_limits_and_server_errors_are_retried() {
    let server = Arc::new(Server {
        failures: Mutex::new(vec![503, 429]),
        ..Default::default()
    });
    let url = spawn(server.clone());
    let embedder = Embedder::from_config(config(&url)).unwrap();
    let vectors = embedder.embed_batch(&["a", "b", "c"], None).unwrap();
    assert_eq!(vectors.len(), 3);
    assert_eq!(server.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_failure_reports_attempts() {
    let server = Arc::new(Server {
        always: Some(500),
        ..Default::default()
    });
    let url = spawn(server.clone());
    let err = Embedder::from_config(config(&url))
        .unwrap()
        .embed_batch(&["a"], None)
        .unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Transport);
    assert!(matches!(err, qualcode_core::Error::Transport { attempts: 4, .. }), "{err:?}");
}

#[test]
fn client_errors_are_not_retried() {
    let server = Arc::new(Server {
        always: Some(400),
        ..Default::default()
    });
    let url = spawn(server.clone());
    let err = Embedder::from_config(config(&url))
        .unwrap()
        .embed_batch(&["a"], None)
        .unwrap_err();
    assert!(matches!(err, qualcode_core::Error::Transport { attempts: 1, .. }), "{err:?}");
    assert_eq!(server.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn instruction_prefix_and_api_key_are_sent() {
    let server = Arc::new(Server::default());
    let url = spawn(server.clone());
    let var = "QUALCODE_TEST_REMOTE_KEY";
    std::env::set_var(var, "sekret");
    let mut cfg = config(&url);
    cfg.instruction = Some("classification: ".into());
    cfg.api_key_env = Some(var.into());
    Embedder::from_config(cfg).unwrap().embed_batch(&["Air resistance"], None).unwrap();
    assert_eq!(*server.seen_inputs.lock().unwrap(), vec!["classification: Air resistance".to_string()]);
    assert_eq!(*server.seen_auth.lock().unwrap(), vec!["Bearer sekret".to_string()]);
}
