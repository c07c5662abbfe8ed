//! HTTPS storage endpoint with third-party-copy (pull mode).
//!
//! Serves GET (with byte ranges), HEAD, PUT, DELETE and COPY. A COPY asks
//! this endpoint to fetch `Source:` over one or more parallel ranged GETs
//! and stream perf markers back to the requesting client while it runs.

mod copy;
mod service;

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use hyper_util::rt::TokioIo;
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tokio::task::JoinHandle;
use tokio_rustls::TlsAcceptor;
use tokio_util::sync::CancellationToken;

use crate::ca::{CertAuthority, HostCredential};
use crate::http::HttpsClient;
use crate::storage::{Storage, StorageBackend, StorageError};
use crate::tls::{self, TlsError};

pub use copy::stripe_ranges;

pub const DEFAULT_MARKER_PERIOD: Duration = Duration::from_secs(5);
pub const DEFAULT_MAX_SESSIONS: usize = 64;
pub const DEFAULT_STRIPE_RETRIES: u32 = 2;
/// Status text returned when the session limit is reached.
pub const TOO_MANY_TRANSFERS: &str = "too many transfers";

const LOG_CAPACITY: usize = 65_536;

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("bad credential: {0}")]
    Credential(#[from] TlsError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("storage: {0}")]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub listen: SocketAddr,
    pub storage: StorageBackend,
    pub credential: HostCredential,
    pub trust: CertAuthority,
    pub require_client_cert: bool,
    pub marker_period: Duration,
    pub max_sessions: usize,
    pub stripe_retries: u32,
}

impl EndpointConfig {
    pub fn new(listen: SocketAddr, credential: HostCredential, trust: CertAuthority) -> Self {
        Self {
            listen,
            storage: StorageBackend::memory(),
            credential,
            trust,
            require_client_cert: false,
            marker_period: DEFAULT_MARKER_PERIOD,
            max_sessions: DEFAULT_MAX_SESSIONS,
            stripe_retries: DEFAULT_STRIPE_RETRIES,
        }
    }

    fn validate(&self) -> Result<(), EndpointError> {
        if self.marker_period.is_zero() {
            return Err(EndpointError::Config("marker period must be positive".into()));
        }
        if self.max_sessions == 0 {
            return Err(EndpointError::Config("max_sessions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", content = "reason", rename_all = "lowercase")]
pub enum SessionState {
    Running,
    Succeeded,
    Failed(String),
}

/// Snapshot of one COPY session.
#[derive(Debug, Clone, Serialize)]
pub struct TransferSession {
    pub session_id: String,
    pub source_url: String,
    pub dest_path: String,
    /// Streams asked for in `X-Number-Of-Streams`.
    pub requested_streams: u32,
    /// Stripes actually used; never more than the object size in bytes.
    pub stream_count: u32,
    pub stripe_bytes: Vec<u64>,
    pub state: SessionState,
    pub started_at: DateTime<Utc>,
    pub ended_at: Option<DateTime<Utc>>,
}

/// One request served, as seen by this endpoint.
#[derive(Debug, Clone, Serialize)]
pub struct AccessRecord {
    pub at: DateTime<Utc>,
    pub method: String,
    pub path: String,
    /// Inclusive byte range actually served for a ranged GET.
    pub range: Option<(u64, u64)>,
    pub status: u16,
}

pub(crate) struct SessionSlot {
    session_id: String,
    source_url: String,
    dest_path: String,
    requested_streams: u32,
    started_at: DateTime<Utc>,
    inner: Mutex<SlotInner>,
}

struct SlotInner {
    stripes: Vec<Arc<AtomicU64>>,
    state: SessionState,
    ended_at: Option<DateTime<Utc>>,
}

impl SessionSlot {
    fn snapshot(&self) -> TransferSession {
        let inner = self.inner.lock().unwrap();
        TransferSession {
            session_id: self.session_id.clone(),
            source_url: self.source_url.clone(),
            dest_path: self.dest_path.clone(),
            requested_streams: self.requested_streams,
            stream_count: inner.stripes.len() as u32,
            stripe_bytes: inner.stripes.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
            state: inner.state.clone(),
            started_at: self.started_at,
            ended_at: inner.ended_at,
        }
    }

    fn set_stripes(&self, stripes: Vec<Arc<AtomicU64>>) {
        self.inner.lock().unwrap().stripes = stripes;
    }

    fn finish(&self, state: SessionState) {
        let mut inner = self.inner.lock().unwrap();
        inner.state = state;
        inner.ended_at = Some(Utc::now());
    }
}

pub(crate) struct EndpointState {
    storage: Storage,
    client: HttpsClient,
    marker_period: Duration,
    stripe_retries: u32,
    permits: Arc<Semaphore>,
    max_sessions: usize,
    sessions: Mutex<VecDeque<Arc<SessionSlot>>>,
    access: Mutex<VecDeque<AccessRecord>>,
}

fn push_bounded<T>(log: &Mutex<VecDeque<T>>, item: T) {
    let mut log = log.lock().unwrap();
    if log.len() == LOG_CAPACITY {
        log.pop_front();
    }
    log.push_back(item);
}

impl EndpointState {
    fn log_access(&self, method: &str, path: &str, range: Option<(u64, u64)>, status: u16) {
        push_bounded(
            &self.access,
            AccessRecord {
                at: Utc::now(),
                method: method.to_string(),
                path: path.to_string(),
                range,
                status,
            },
        );
    }

    fn open_session(&self, source_url: &str, dest_path: &str, requested: u32) -> Arc<SessionSlot> {
        let slot = Arc::new(SessionSlot {
            session_id: uuid::Uuid::new_v4().to_string(),
            source_url: source_url.to_string(),
            dest_path: dest_path.to_string(),
            requested_streams: requested,
            started_at: Utc::now(),
            inner: Mutex::new(SlotInner {
                stripes: Vec::new(),
                state: SessionState::Running,
                ended_at: None,
            }),
        });
        push_bounded(&self.sessions, slot.clone());
        slot
    }
}

/// A running endpoint. Dropping the handle does not stop it; call
/// [`EndpointHandle::shutdown`].
pub struct EndpointHandle {
    local_addr: SocketAddr,
    state: Arc<EndpointState>,
    cancel: CancellationToken,
    task: JoinHandle<()>,
}

impl EndpointHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// `https://127.0.0.1:<port>` style base for object URLs.
    pub fn base_url(&self, host: &str) -> String {
        format!("https://{host}:{}", self.local_addr.port())
    }

    pub fn storage(&self) -> &Storage {
        &self.state.storage
    }

    pub fn sessions(&self) -> Vec<TransferSession> {
        self.state
            .sessions
            .lock()
            .unwrap()
            .iter()
            .map(|s| s.snapshot())
            .collect()
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.state.access.lock().unwrap().iter().cloned().collect()
    }

    pub fn clear_logs(&self) {
        self.state.sessions.lock().unwrap().clear();
        self.state.access.lock().unwrap().clear();
    }

    /// Number of COPY sessions currently holding a slot.
    pub fn active_sessions(&self) -> usize {
        self.state.max_sessions - self.state.permits.available_permits()
    }

    pub async fn shutdown(self) {
        self.cancel.cancel();
        let _ = self.task.await;
    }

    /// Resolves when the endpoint stops (e.g. on shutdown).
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

/// Binds, then serves TLS connections until shut down.
pub async fn serve(config: EndpointConfig) -> Result<EndpointHandle, EndpointError> {
    config.validate()?;
    let server_tls = tls::server_config(&config.credential, &config.trust, config.require_client_cert)?;
    let client_tls = tls::client_config(&config.trust, Some(&config.credential))?;
    let storage = Storage::open(&config.storage)?;
    let listener = TcpListener::bind(config.listen)
        .await
        .map_err(|source| EndpointError::Bind {
            addr: config.listen,
            source,
        })?;
    let local_addr = listener.local_addr().map_err(|source| EndpointError::Bind {
        addr: config.listen,
        source,
    })?;

    let state = Arc::new(EndpointState {
        storage,
        client: HttpsClient::new(client_tls),
        marker_period: config.marker_period,
        stripe_retries: config.stripe_retries,
        permits: Arc::new(Semaphore::new(config.max_sessions)),
        max_sessions: config.max_sessions,
        sessions: Mutex::new(VecDeque::new()),
        access: Mutex::new(VecDeque::new()),
    });
    let cancel = CancellationToken::new();
    let acceptor = TlsAcceptor::from(server_tls);
    let task = tokio::spawn(accept_loop(listener, acceptor, state.clone(), cancel.clone()));
    tracing::info!(%local_addr, "endpoint listening");
    Ok(EndpointHandle {
        local_addr,
        state,
        cancel,
        task,
    })
}

async fn accept_loop(
    listener: TcpListener,
    acceptor: TlsAcceptor,
    state: Arc<EndpointState>,
    cancel: CancellationToken,
) {
    loop {
        let (tcp, peer) = tokio::select! {
            _ = cancel.cancelled() => break,
            accepted = listener.accept() => match accepted {
                Ok(pair) => pair,
                Err(e) => {
                    tracing::warn!("accept failed: {e}");
                    continue;
                }
            },
        };
        tcp.set_nodelay(true).ok();
        let acceptor = acceptor.clone();
        let state = state.clone();
        let cancel = cancel.clone();
        tokio::spawn(async move {
            let tls = match acceptor.accept(tcp).await {
                Ok(tls) => tls,
                Err(e) => {
                    tracing::debug!(%peer, "TLS handshake rejected: {e}");
                    return;
                }
            };
            let svc = hyper::service::service_fn(move |req| service::handle(state.clone(), req));
            let conn = hyper::server::conn::http1::Builder::new().serve_connection(TokioIo::new(tls), svc);
            tokio::select! {
                res = conn => if let Err(e) = res {
                    tracing::debug!(%peer, "connection ended: {e}");
                },
                _ = cancel.cancelled() => {}
            }
        });
    }
}
