//! HTTP front end for the coding engine.
//!
//! All endpoints live under `/api/v1`. Long-running steps (embedding,
//! audit, adapter training, projection) run as background jobs that clients
//! poll at `/api/v1/jobs/{id}`; everything else answers synchronously.
//! Mutations of one project are serialized by a per-project lock and only
//! persisted when the whole step succeeds.

mod api;
pub mod error;
pub mod jobs;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::Router;
use qualcode_core::corpus::{Project, ProjectStore};
use qualcode_core::embedder::ProviderConfig;
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;
use tower_http::services::{ServeDir, ServeFile};

pub use error::{ApiError, ErrorBody, ServeError};
pub use jobs::{Job, JobKind, JobRegistry, JobState};

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub store: PathBuf,
    /// Used by embed requests that do not carry their own provider.
    pub provider: Option<ProviderConfig>,
    /// Built UI bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Jobs allowed to run at once.
    pub workers: usize,
}

impl ServeConfig {
    pub fn new(addr: SocketAddr, store: impl Into<PathBuf>) -> Self {
        Self {
            addr,
            store: store.into(),
            provider: None,
            ui_dir: None,
            workers: 2,
        }
    }
}

pub struct AppState {
    store: ProjectStore,
    provider: Option<ProviderConfig>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    jobs: JobRegistry,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: &ServeConfig) -> Result<Self, ServeError> {
        Ok(Self {
            store: ProjectStore::open(&config.store)?,
            provider: config.provider.clone(),
            locks: Mutex::new(HashMap::new()),
            jobs: JobRegistry::default(),
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
        })
    }

    pub fn jobs(&self) -> &JobRegistry {
        &self.jobs
    }

    fn project_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table poisoned")
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    /// Runs `f` on a loaded project under its lock. Returns the result and
    /// the project revision.
    async fn read<T, F>(&self, id: &str, f: F) -> Result<(T, u64), ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Project, &Path) -> qualcode_core::Result<T> + Send + 'static,
    {
        let lock = self.project_lock(id);
        let _guard = lock.lock().await;
        let store = self.store.clone();
        let id = id.to_string();
        tokio::task::spawn_blocking(move || -> qualcode_core::Result<(T, u64)> {
            let dir = store.project_dir(&id)?;
            let project = store.load(&id)?;
            let out = f(&project, &dir)?;
            Ok((out, project.revision))
        })
        .await?
        .map_err(ApiError::from)
    }

    /// Load, check the revision, apply `f`, save. Nothing is written when
    /// any step fails.
    async fn mutate<T, F>(&self, id: &str, expected: Option<u64>, f: F) -> Result<(T, u64), ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&mut Project, &Path) -> qualcode_core::Result<T> + Send + 'static,
    {
        let lock = self.project_lock(id);
        let _guard = lock.lock().await;
        let store = self.store.clone();
        let id = id.to_string();
        tokio::task::spawn_blocking(move || -> qualcode_core::Result<(T, u64)> {
            let dir = store.project_dir(&id)?;
            let mut project = store.load(&id)?;
            project.check_revision(expected)?;
            let before = project.revision;
            let out = f(&mut project, &dir)?;
            if project.revision != before {
                store.save(&project)?;
            }
            Ok((out, project.revision))
        })
        .await?
        .map_err(ApiError::from)
    }
}

/// The full application: API, CORS and static UI.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let mut app = api::routes(state);
    if let Some(dir) = ui_dir {
        let index = dir.join("index.html");
        app = app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)));
    } else {
        app = app.fallback(api::root);
    }
    app.layer(CorsLayer::permissive())
}

/// Builds the router for `config`.
pub fn app(config: &ServeConfig) -> Result<Router, ServeError> {
    let state = Arc::new(AppState::new(config)?);
    Ok(router(state, config.ui_dir.as_deref()))
}

/// Binds and serves until interrupted.
pub async fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let app = app(&config)?;
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.addr.to_string(),
            source,
        })?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
