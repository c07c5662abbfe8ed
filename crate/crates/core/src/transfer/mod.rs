//! Client side of third-party copy plus the preliminary benchmarks:
//! local copy saturation, raw TCP throughput and RTT probes.

mod https_tpc;
mod localbench;
mod probe;
mod raw_stream;

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use hyper::header;
use hyper::{Method, Request, StatusCode};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::digest::Digest;
use crate::http::{self, HttpsClient};
use crate::markers::PerfMarker;

pub use crate::markers::parse_perf_markers;
pub use https_tpc::HttpsTpcAdapter;
pub use localbench::{local_copy_benchmark, LocalBenchError};
pub use probe::{measure_rtt, raw_throughput_probe, serve_probe, ProbeError, ProbeHandle};
pub use raw_stream::RawStreamAdapter;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("invalid transfer spec: {0}")]
    InvalidSpec(String),
    #[error("unknown adapter {0:?}")]
    UnknownAdapter(String),
    #[error("{0}")]
    Source(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub source_url: Url,
    /// COPY target: destination endpoint plus destination path.
    pub dest_url: Url,
    pub stream_count: u32,
    pub file_size_bytes: u64,
    pub verify_digest: bool,
    #[serde(with = "secs")]
    pub timeout: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl TransferSpec {
    pub fn new(source_url: Url, dest_url: Url, stream_count: u32, file_size_bytes: u64) -> Self {
        Self {
            source_url,
            dest_url,
            stream_count,
            file_size_bytes,
            verify_digest: false,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        if self.stream_count == 0 {
            return Err(TransferError::InvalidSpec(
                "stream_count must be at least 1".into(),
            ));
        }
        if self.timeout.is_zero() {
            return Err(TransferError::InvalidSpec("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum TransferStatus {
    Succeeded,
    Failed(String),
}

impl TransferStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, TransferStatus::Succeeded)
    }
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub spec: TransferSpec,
    pub bytes_transferred: u64,
    pub started_at: Instant,
    pub ended_at: Instant,
    pub duration_s: f64,
    pub status: TransferStatus,
    pub markers: Vec<PerfMarker>,
}

impl TransferResult {
    pub(crate) fn finish(
        spec: TransferSpec,
        started_at: Instant,
        bytes_transferred: u64,
        status: TransferStatus,
        markers: Vec<PerfMarker>,
    ) -> Self {
        let ended_at = Instant::now();
        Self {
            spec,
            bytes_transferred,
            started_at,
            ended_at,
            duration_s: ended_at.duration_since(started_at).as_secs_f64(),
            status,
            markers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AdapterCapabilities {
    pub multi_stream: bool,
    pub third_party: bool,
}

/// A transfer protocol the orchestrator can drive.
#[async_trait]
pub trait ProtocolAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> AdapterCapabilities;
    /// Runs one transfer. Protocol-level problems come back as a failed
    /// result; this never hangs past `spec.timeout`.
    async fn transfer(&self, spec: &TransferSpec) -> TransferResult;
}

/// Runs `spec` with `adapter` after validating it.
pub async fn tpc_transfer(
    adapter: &dyn ProtocolAdapter,
    spec: &TransferSpec,
) -> Result<TransferResult, TransferError> {
    spec.validate()?;
    Ok(adapter.transfer(spec).await)
}

/// Adapter registry used by the orchestrator and the CLI.
pub fn adapter_by_name(name: &str, client: HttpsClient) -> Result<Arc<dyn ProtocolAdapter>, TransferError> {
    match name {
        HttpsTpcAdapter::NAME => Ok(Arc::new(HttpsTpcAdapter::new(client))),
        RawStreamAdapter::NAME => Ok(Arc::new(RawStreamAdapter::new(client))),
        other => Err(TransferError::UnknownAdapter(other.to_string())),
    }
}

/// Size and (optionally) adler32 of a remote object, from a HEAD request.
pub async fn head_object(
    client: &HttpsClient,
    url: &Url,
    want_digest: bool,
) -> Result<(u64, Option<Digest>), TransferError> {
    let mut req = Request::builder().method(Method::HEAD);
    if want_digest {
        req = req.header("want-digest", "adler32");
    }
    let resp = client
        .send(url, req, http::empty())
        .await
        .map_err(|e| TransferError::Source(format!("source {url} unreachable: {e}")))?;
    if resp.status() != StatusCode::OK {
        return Err(TransferError::Source(format!(
            "source {url} answered HEAD with {}",
            resp.status()
        )));
    }
    let size = resp
        .headers()
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TransferError::Source(format!("source {url} sent no content length")))?;
    let digest = resp
        .headers()
        .get("digest")
        .and_then(|v| v.to_str().ok())
        .and_then(Digest::from_header_value);
    if want_digest && digest.is_none() {
        return Err(TransferError::Source(format!(
            "source {url} sent no adler32 digest"
        )));
    }
    Ok((size, digest))
}
