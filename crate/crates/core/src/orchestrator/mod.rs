//! The measurement driver: mesh configuration, per-pair measurements,
//! sweeps over every ordered pair, the recurring schedule, the results
//! store and grouped statistics over it.

mod aggregate;
mod config;
mod schedule;
mod staging;
mod store;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Barrier;
use tokio::task::JoinSet;
use url::Url;

use crate::transfer::{self, ProtocolAdapter, TransferResult, TransferSpec, DEFAULT_TIMEOUT};

pub use aggregate::{aggregate, latency_bucket, AggregateError, GroupId, GroupKey, GroupStats};
pub use config::{
    EndpointSpec, MeshConfig, DEFAULT_CONCURRENCY, DEFAULT_FILE_SIZE, DEFAULT_INTERVAL_HOURS,
    DEFAULT_STREAM_SETTINGS,
};
pub use schedule::{run_schedule, ScheduleSummary};
pub use staging::{dest_path, source_path, HttpStaging};
pub use store::{CampaignStore, StoreError, STORE_FORMAT};

/// RTT samples taken per measurement; the median is recorded.
pub const RTT_SAMPLES: usize = 5;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid mesh configuration: {0}")]
    Config(String),
    #[error("unknown adapter {0:?}")]
    UnknownAdapter(String),
    #[error("staging test files on {endpoint}: {reason}")]
    Staging { endpoint: String, reason: String },
    #[error("all {count} transfers failed; first failure: {first}")]
    AllFailed { count: usize, first: String },
    #[error("RTT probe {source_name} -> {destination}: {reason}")]
    Latency {
        source_name: String,
        destination: String,
        reason: String,
    },
    #[error("no endpoint in the mesh is reachable")]
    NoReachableEndpoints,
    #[error("results store: {0}")]
    Store(#[from] StoreError),
    #[error("{0}")]
    Setup(String),
}

/// One pairwise measurement: `concurrency` simultaneous transfers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub source: String,
    pub destination: String,
    pub adapter: String,
    pub stream_count: u32,
    pub concurrency: u32,
    pub file_size_bytes: u64,
    /// `(successes * size * 8) / mean(duration) / 1e9`.
    pub throughput_gbps: f64,
    pub rtt_ms: f64,
    /// Durations of the successful transfers only.
    pub transfer_durations_s: Vec<f64>,
    pub failures: u32,
    pub timestamp: DateTime<Utc>,
    /// Successful bytes over first-start to last-end wall time; kept for
    /// analysis of stragglers, not used by reports.
    #[serde(default)]
    pub wall_clock_gbps: f64,
}

/// Throughput in Gbps of `durations.len()` transfers of `file_size_bytes`
/// each, using the mean duration. `None` for an empty list.
pub fn throughput_gbps(file_size_bytes: u64, durations: &[f64]) -> Option<f64> {
    if durations.is_empty() {
        return None;
    }
    let n = durations.len() as f64;
    let mean = durations.iter().sum::<f64>() / n;
    Some(n * file_size_bytes as f64 * 8.0 / mean / 1e9)
}

/// Where test files come from and where copies go.
#[async_trait]
pub trait Staging: Send + Sync {
    /// Makes sure `count` distinct test files of `size` exist on `endpoint`
    /// and returns their URLs.
    async fn stage_sources(
        &self,
        endpoint: &EndpointSpec,
        size: u64,
        count: usize,
    ) -> Result<Vec<Url>, String>;
    /// Removes destination copies after a measurement.
    async fn cleanup(&self, urls: &[Url]);
    /// Whether `endpoint` answers at all.
    async fn reachable(&self, endpoint: &EndpointSpec) -> bool;
}

#[async_trait]
pub trait LatencyProbe: Send + Sync {
    async fn rtt_ms(&self, source: &EndpointSpec, destination: &EndpointSpec) -> Result<f64, String>;
}

/// Application-level echo to the source endpoint's probe responder.
pub struct EchoLatency {
    pub samples: usize,
}

#[async_trait]
impl LatencyProbe for EchoLatency {
    async fn rtt_ms(&self, source: &EndpointSpec, _destination: &EndpointSpec) -> Result<f64, String> {
        transfer::measure_rtt(&source.probe_address, self.samples)
            .await
            .map_err(|e| e.to_string())
    }
}

/// A failed pair within a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepError {
    pub source: String,
    pub destination: String,
    pub adapter: String,
    pub stream_count: u32,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub measurements: Vec<Measurement>,
    pub errors: Vec<SweepError>,
}

/// Everything needed to run measurements: adapters by name, staging and
/// the latency probe.
pub struct Harness {
    adapters: BTreeMap<String, Arc<dyn ProtocolAdapter>>,
    staging: Arc<dyn Staging>,
    latency: Arc<dyn LatencyProbe>,
    pub transfer_timeout: Duration,
    pub verify_digest: bool,
}

impl Harness {
    pub fn new(staging: Arc<dyn Staging>, latency: Arc<dyn LatencyProbe>) -> Self {
        Self {
            adapters: BTreeMap::new(),
            staging,
            latency,
            transfer_timeout: DEFAULT_TIMEOUT,
            verify_digest: false,
        }
    }

    pub fn with_adapter(mut self, adapter: Arc<dyn ProtocolAdapter>) -> Self {
        self.adapters.insert(adapter.name().to_string(), adapter);
        self
    }

    /// Builds the HTTPS client, adapters, staging and echo probe a mesh
    /// configuration asks for.
    pub fn from_config(config: &MeshConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let client = config.https_client()?;
        let mut harness = Harness::new(
            Arc::new(HttpStaging::new(client.clone())),
            Arc::new(EchoLatency { samples: RTT_SAMPLES }),
        );
        for name in &config.adapters {
            let adapter = transfer::adapter_by_name(name, client.clone())
                .map_err(|_| OrchestratorError::UnknownAdapter(name.clone()))?;
            harness = harness.with_adapter(adapter);
        }
        harness.transfer_timeout = Duration::from_secs_f64(config.transfer_timeout_s);
        harness.verify_digest = config.verify_digest;
        Ok(harness)
    }

    /// Runs `concurrency` transfers from `source` to `destination` at once
    /// and condenses them into one [`Measurement`].
    pub async fn run_measurement(
        &self,
        source: &EndpointSpec,
        destination: &EndpointSpec,
        adapter: &str,
        stream_count: u32,
        concurrency: u32,
        file_size_bytes: u64,
    ) -> Result<Measurement, OrchestratorError> {
        if source.name == destination.name {
            return Err(OrchestratorError::Config(
                "source and destination must differ".into(),
            ));
        }
        if concurrency == 0 || stream_count == 0 || file_size_bytes == 0 {
            return Err(OrchestratorError::Config(
                "concurrency, stream count and file size must be positive".into(),
            ));
        }
        let adapter = self
            .adapters
            .get(adapter)
            .cloned()
            .ok_or_else(|| OrchestratorError::UnknownAdapter(adapter.to_string()))?;

        let sources = self
            .staging
            .stage_sources(source, file_size_bytes, concurrency as usize)
            .await
            .map_err(|reason| OrchestratorError::Staging {
                endpoint: source.name.clone(),
                reason,
            })?;
        let dests: Vec<Url> = (0..concurrency as usize)
            .map(|i| destination.object_url(&dest_path(&source.name, i)))
            .collect::<Result<_, _>>()?;

        let barrier = Arc::new(Barrier::new(concurrency as usize));
        let mut tasks = JoinSet::new();
        for (i, (src, dst)) in sources.into_iter().zip(dests.iter().cloned()).enumerate() {
            let mut spec = TransferSpec::new(src, dst, stream_count, file_size_bytes);
            spec.timeout = self.transfer_timeout;
            spec.verify_digest = self.verify_digest;
            let (adapter, barrier) = (adapter.clone(), barrier.clone());
            tasks.spawn(async move {
                barrier.wait().await;
                (i, adapter.transfer(&spec).await)
            });
        }
        let mut results: Vec<Option<TransferResult>> = vec![None; concurrency as usize];
        while let Some(joined) = tasks.join_next().await {
            let (i, result) = joined.map_err(|e| OrchestratorError::Setup(format!("transfer task: {e}")))?;
            results[i] = Some(result);
        }
        let results: Vec<TransferResult> = results.into_iter().flatten().collect();
        let measurement = summarize(
            source,
            destination,
            adapter.name(),
            stream_count,
            concurrency,
            file_size_bytes,
            &results,
        );
        self.staging.cleanup(&dests).await;
        let mut measurement = measurement?;

        measurement.rtt_ms =
            self.latency
                .rtt_ms(source, destination)
                .await
                .map_err(|reason| OrchestratorError::Latency {
                    source_name: source.name.clone(),
                    destination: destination.name.clone(),
                    reason,
                })?;
        Ok(measurement)
    }

    /// One measurement per ordered pair, adapter and stream setting, in
    /// that nesting order. Failed pairs are reported, not fatal; a store
    /// write failure is.
    pub async fn run_mesh_sweep(
        &self,
        config: &MeshConfig,
        store: Option<&CampaignStore>,
    ) -> Result<SweepReport, OrchestratorError> {
        config.validate()?;
        let mut any_up = false;
        for endpoint in &config.endpoints {
            if self.staging.reachable(endpoint).await {
                any_up = true;
            } else {
                tracing::warn!(endpoint = %endpoint.name, "endpoint unreachable");
            }
        }
        if !any_up {
            return Err(OrchestratorError::NoReachableEndpoints);
        }
        let mut report = SweepReport::default();
        for src in &config.endpoints {
            for dst in &config.endpoints {
                if src.name == dst.name {
                    continue;
                }
                for adapter in &config.adapters {
                    for &streams in &config.stream_settings {
                        let outcome = self
                            .run_measurement(
                                src,
                                dst,
                                adapter,
                                streams,
                                config.concurrency,
                                config.file_size_bytes,
                            )
                            .await;
                        match outcome {
                            Ok(m) => {
                                tracing::info!(
                                    source = %m.source, destination = %m.destination, adapter = %m.adapter,
                                    streams = m.stream_count, gbps = m.throughput_gbps, failures = m.failures,
                                    "measurement"
                                );
                                if let Some(store) = store {
                                    store.append(&m)?;
                                }
                                report.measurements.push(m);
                            }
                            Err(e) => {
                                tracing::warn!(source = %src.name, destination = %dst.name, %adapter, streams, "measurement failed: {e}");
                                report.errors.push(SweepError {
                                    source: src.name.clone(),
                                    destination: dst.name.clone(),
                                    adapter: adapter.clone(),
                                    stream_count: streams,
                                    reason: e.to_string(),
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(report)
    }

    /// Sweeps now and then every `interval` until `stop` fires (or once).
    /// A sweep that overruns causes the missed start times to be skipped.
    pub async fn schedule_campaign(
        &self,
        config: &MeshConfig,
        once: bool,
        stop: tokio_util::sync::CancellationToken,
    ) -> Result<ScheduleSummary, OrchestratorError> {
        let store = CampaignStore::open(&config.results_path)?;
        let interval = Duration::from_secs_f64(config.interval_hours * 3600.0);
        run_schedule(interval, once, stop, || async {
            let report = self.run_mesh_sweep(config, Some(&store)).await?;
            tracing::info!(
                measurements = report.measurements.len(),
                errors = report.errors.len(),
                "sweep finished"
            );
            Ok::<(), OrchestratorError>(())
        })
        .await
    }
}

fn summarize(
    source: &EndpointSpec,
    destination: &EndpointSpec,
    adapter: &str,
    stream_count: u32,
    concurrency: u32,
    file_size_bytes: u64,
    results: &[TransferResult],
) -> Result<Measurement, OrchestratorError> {
    let ok: Vec<&TransferResult> = results.iter().filter(|r| r.status.is_success()).collect();
    let failures = results.len() - ok.len();
    for r in results {
        if let transfer::TransferStatus::Failed(reason) = &r.status {
            tracing::warn!(source = %r.spec.source_url, "transfer failed: {reason}");
        }
    }
    let durations: Vec<f64> = ok.iter().map(|r| r.duration_s).collect();
    let Some(throughput) = throughput_gbps(file_size_bytes, &durations) else {
        let first = results
            .iter()
            .find_map(|r| match &r.status {
                transfer::TransferStatus::Failed(reason) => Some(reason.clone()),
                _ => None,
            })
            .unwrap_or_default();
        return Err(OrchestratorError::AllFailed {
            count: results.len(),
            first,
        });
    };
    let first_start = ok.iter().map(|r| r.started_at).min().expect("nonempty");
    let last_end = ok.iter().map(|r| r.ended_at).max().expect("nonempty");
    let wall = last_end.duration_since(first_start).as_secs_f64();
    let wall_clock_gbps = if wall > 0.0 {
        ok.len() as f64 * file_size_bytes as f64 * 8.0 / wall / 1e9
    } else {
        0.0
    };
    Ok(Measurement {
        source: source.name.clone(),
        destination: destination.name.clone(),
        adapter: adapter.to_string(),
        stream_count,
        concurrency,
        file_size_bytes,
        throughput_gbps: throughput,
        rtt_ms: 0.0,
        transfer_durations_s: durations,
        failures: failures as u32,
        timestamp: Utc::now(),
        wall_clock_gbps,
    })
}
