//! Desk-scale benchmarking of HTTPS third-party-copy transfers.

pub mod ca;
pub mod digest;
pub mod endpoint;
pub mod http;
pub mod lab;
pub mod markers;
pub mod orchestrator;
pub mod report;
pub mod shaper;
pub mod storage;
pub mod testdata;
pub mod tls;
pub mod transfer;

pub use ca::{create_authority, issue_host_credential, verify_chain, CertAuthority, HostCredential};
pub use digest::Digest;
pub use endpoint::{serve, EndpointConfig, EndpointHandle};
pub use markers::{parse_perf_markers, PerfMarker, Terminal};
pub use orchestrator::{CampaignStore, Harness, Measurement, MeshConfig};
pub use shaper::{predict_throughput, start_relay, ShaperConfig};
pub use storage::{Storage, StorageBackend};
pub use transfer::{ProtocolAdapter, TransferResult, TransferSpec, TransferStatus};
