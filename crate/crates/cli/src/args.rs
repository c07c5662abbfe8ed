use std::net::SocketAddr;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use tpcbench_core::storage::StorageBackend;
use url::Url;

#[derive(Debug, Parser)]
#[command(
    name = "tpcbench",
    version,
    about = "Benchmark HTTPS third-party-copy transfers"
)]
pub struct Cli {
    /// Log filter, e.g. `info` or `tpcbench_core=debug`. Overrides RUST_LOG.
    #[arg(long, global = true)]
    pub log: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test certificate authority.
    #[command(subcommand)]
    Ca(CaCommand),
    /// Run an HTTPS TPC endpoint.
    #[command(subcommand)]
    Endpoint(EndpointCommand),
    /// RTT and raw TCP throughput probes.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Ask a destination endpoint to pull one file from a source.
    Transfer(TransferArgs),
    /// Concurrent local copies to find the storage ceiling.
    Localbench(LocalbenchArgs),
    /// Latency and bandwidth shaping relay.
    #[command(subcommand)]
    Shaper(ShaperCommand),
    /// Run measurement sweeps over a mesh of endpoints.
    Orchestrate(OrchestrateArgs),
    /// Reports over a results store.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Debug, Subcommand)]
pub enum CaCommand {
    /// Create a self-signed CA and write ca.crt and ca.key.
    Init {
        #[arg(long)]
        subject: String,
        #[arg(long)]
        days: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Issue a host credential signed by the CA in --ca.
    Issue {
        /// Directory holding ca.crt and ca.key.
        #[arg(long)]
        ca: PathBuf,
        /// DNS name or IP address; repeat for more.
        #[arg(long = "host", required = true)]
        hosts: Vec<String>,
        #[arg(long)]
        days: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EndpointCommand {
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: std::net::IpAddr,
    /// `memory` or `disk:<root>`.
    #[arg(long, default_value = "memory", value_parser = parse_storage)]
    pub storage: StorageBackend,
    #[arg(long)]
    pub cert: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    /// CA certificate used to verify client certificates.
    #[arg(long)]
    pub ca: PathBuf,
    #[arg(long)]
    pub mutual_tls: bool,
    /// Seconds between performance markers.
    #[arg(long, default_value_t = 5.0)]
    pub marker_period: f64,
    #[arg(long, default_value_t = 64)]
    pub max_sessions: usize,
    /// Also answer RTT and throughput probes on this port.
    #[arg(long)]
    pub probe_port: Option<u16>,
}

#[derive(Debug, Subcommand)]
pub enum ProbeCommand {
    /// Median application-level echo RTT in milliseconds.
    Rtt {
        #[arg(long)]
        peer: String,
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
    /// Bulk TCP throughput in Gbps.
    Throughput {
        #[arg(long)]
        peer: String,
        #[arg(long, default_value_t = 1)]
        streams: usize,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Answer probes.
    Serve {
        #[arg(long)]
        listen: SocketAddr,
    },
}

/// Trust and identity for talking to endpoints.
#[derive(Debug, Args)]
pub struct TlsArgs {
    /// CA certificate the endpoints chain to.
    #[arg(long)]
    pub ca: PathBuf,
    /// Client certificate, for endpoints that require mutual TLS.
    #[arg(long, requires = "key")]
    pub cert: Option<PathBuf>,
    #[arg(long, requires = "cert")]
    pub key: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub source: Url,
    #[arg(long)]
    pub dest: Url,
    #[arg(long, default_value_t = 1)]
    pub streams: u32,
    /// Compare source and destination adler32 digests.
    #[arg(long)]
    pub verify: bool,
    #[arg(long, default_value = "https-tpc")]
    pub adapter: String,
    #[arg(long, default_value_t = 300.0)]
    pub timeout_s: f64,
    #[command(flatten)]
    pub tls: TlsArgs,
}

#[derive(Debug, Args)]
pub struct LocalbenchArgs {
    #[arg(long)]
    pub concurrency: usize,
    /// Bytes per file.
    #[arg(long)]
    pub size: u64,
    /// `memory` or `disk:<root>`.
    #[arg(long, default_value = "memory", value_parser = parse_storage)]
    pub backend: StorageBackend,
}

#[derive(Debug, Subcommand)]
pub enum ShaperCommand {
    Run(ShaperArgs),
}

#[derive(Debug, Args)]
pub struct ShaperArgs {
    #[arg(long)]
    pub listen: SocketAddr,
    #[arg(long)]
    pub forward: String,
    #[arg(long, default_value_t = 0.0)]
    pub rtt_ms: f64,
    #[arg(long)]
    pub bw_bps: Option<u64>,
    #[arg(long)]
    pub per_connection: bool,
    /// Emulated receive window per connection and direction.
    #[arg(long)]
    pub window_bytes: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OrchestrateArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub once: bool,
    /// Overrides interval_hours from the mesh file.
    #[arg(long)]
    pub interval_hours: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Source x destination HTML grid.
    Grid {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long)]
        streams: Option<u32>,
        #[arg(long, default_value_t = tpcbench_core::report::DEFAULT_GOOD_GBPS)]
        good: f64,
        #[arg(long, default_value_t = tpcbench_core::report::DEFAULT_WARN_GBPS)]
        warn: f64,
        /// RFC 3339 start of the time window.
        #[arg(long)]
        since: Option<DateTime<Utc>>,
        #[arg(long)]
        until: Option<DateTime<Utc>>,
    },
    /// Throughput against RTT as CSV.
    Latency {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        bucket_ms: f64,
    },
    /// Single- against multi-stream means for one adapter.
    Streams {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        adapter: String,
    },
}

fn parse_storage(s: &str) -> Result<StorageBackend, String> {
    s.parse()
}
