//! HTTP inference service under `/api/v1`.

pub mod api;
pub mod registry;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use tokio::sync::Semaphore;

pub use registry::{ModelFormat, RegisteredModel, Registry, RegistryEntry};

use crate::{Error, Result};

pub const ENV_REGISTRY: &str = "CYSTONET_REGISTRY";
pub const ENV_PORT: &str = "CYSTONET_PORT";
pub const ENV_WORKERS: &str = "CYSTONET_WORKERS";
pub const DEFAULT_PORT: u16 = 8080;
/// Upload size cap per request.
pub const MAX_BODY_BYTES: usize = 64 << 20;

/// Shared handler state. The registry slot is empty while models load and
/// is never mutated afterwards.
#[derive(Clone)]
pub struct AppState {
    registry: Arc<RwLock<Option<Arc<Registry>>>>,
    pub(crate) workers: Arc<Semaphore>,
    audit_dir: Option<PathBuf>,
    audit_seq: Arc<AtomicU64>,
}

impl AppState {
    pub fn loading(workers: usize) -> Self {
        Self {
            registry: Arc::new(RwLock::new(None)),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            audit_dir: None,
            audit_seq: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn loaded(registry: Registry, workers: usize) -> Self {
        let st = Self::loading(workers);
        st.install(registry);
        st
    }

    /// Keeps a copy of every upload in `dir`. Off by default.
    pub fn with_audit(mut self, dir: Option<PathBuf>) -> Self {
        self.audit_dir = dir;
        self
    }

    pub fn install(&self, registry: Registry) {
        *self.registry.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(registry));
    }

    pub fn registry(&self) -> Option<Arc<Registry>> {
        self.registry.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub(crate) fn audit(&self, uploads: &[(&str, &[u8])]) {
        let Some(dir) = &self.audit_dir else { return };
        for (name, bytes) in uploads {
            let n = self.audit_seq.fetch_add(1, Ordering::Relaxed);
            let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect();
            let path = dir.join(format!("{n:06}_{safe}"));
            if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, bytes)) {
                log::warn!("audit write to {} failed: {e}", path.display());
            }
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/health", get(api::health))
        .route("/api/v1/classify", post(api::classify))
        .route("/api/v1/segment", post(api::segment))
        .route("/api/v1/subtype", post(api::subtype))
        .route("/api/v1/explain", post(api::explain))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServeConfig {
    pub registry: PathBuf,
    pub host: String,
    pub port: u16,
    pub workers: usize,
    pub audit_dir: Option<PathBuf>,
}

impl ServeConfig {
    /// Reads the registry path, port and worker count from the environment;
    /// `registry` wins over the environment when given.
    pub fn from_env(registry: Option<PathBuf>) -> Result<Self> {
        let registry = registry
            .or_else(|| std::env::var_os(ENV_REGISTRY).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("no registry given and {ENV_REGISTRY} is unset")))?;
        let parse = |key: &str| -> Result<Option<usize>> {
            match std::env::var(key) {
                Ok(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("{key}='{v}' is not a non-negative integer"))),
                Err(_) => Ok(None),
            }
        };
        let port = parse(ENV_PORT)?.map(|p| p as u16).unwrap_or(DEFAULT_PORT);
        let workers = parse(ENV_WORKERS)?.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
        Ok(Self { registry, host: "127.0.0.1".into(), port, workers: workers.max(1), audit_dir: None })
    }
}

/// Binds, loads the registry in the background (health reports "loading"
/// until done) and serves until ctrl-c.
pub async fn run(cfg: ServeConfig) -> Result<()> {
    let state = AppState::loading(cfg.workers).with_audit(cfg.audit_dir.clone());
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(format!("tcp://{addr}"), e))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|e| Error::io("listener", e))?);
    let path = cfg.registry.clone();
    let loader = state.clone();
    let loaded = tokio::task::spawn_blocking(move || Registry::load(&path).map(|r| loader.install(r)));
    let app = router(state);
    let server = axum::serve(listener, app).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    let server = tokio::spawn(async move { server.await });
    match loaded.await {
        Ok(Ok(())) => log::info!("registry loaded"),
        Ok(Err(e)) => {
            server.abort();
            return Err(e);
        }
        Err(e) => {
            server.abort();
            return Err(Error::Config(format!("registry loader panicked: {e}")));
        }
    }
    server
        .await
        .map_err(|e| Error::Config(format!("server task failed: {e}")))?
        .map_err(|e| Error::io("server", e))
}
