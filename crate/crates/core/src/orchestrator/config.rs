use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use url::Url;

use super::OrchestratorError;
use crate::ca::{CertAuthority, HostCredential};
use crate::http::HttpsClient;
use crate::tls;
use crate::transfer::HttpsTpcAdapter;

pub const DEFAULT_STREAM_SETTINGS: [u32; 2] = [8, 1];
pub const DEFAULT_CONCURRENCY: u32 = 11;
pub const DEFAULT_FILE_SIZE: u64 = 1_000_000_000;
pub const DEFAULT_INTERVAL_HOURS: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub name: String,
    /// `https://host:port`, the endpoint's object namespace root.
    pub base_url: Url,
    /// `host:port` of the endpoint's probe responder.
    pub probe_address: String,
}

impl EndpointSpec {
    pub fn object_url(&self, path: &str) -> Result<Url, OrchestratorError> {
        self.base_url
            .join(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: bad object path {path:?}: {e}", self.name)))
    }
}

fn default_adapters() -> Vec<String> {
    vec![HttpsTpcAdapter::NAME.to_string()]
}
fn default_streams() -> Vec<u32> {
    DEFAULT_STREAM_SETTINGS.to_vec()
}
fn default_concurrency() -> u32 {
    DEFAULT_CONCURRENCY
}
fn default_size() -> u64 {
    DEFAULT_FILE_SIZE
}
fn default_interval() -> f64 {
    DEFAULT_INTERVAL_HOURS
}
fn default_results() -> PathBuf {
    PathBuf::from("results.jsonl")
}
fn default_timeout() -> f64 {
    crate::transfer::DEFAULT_TIMEOUT.as_secs_f64()
}

/// Mesh configuration, read from JSON. Everything but `endpoints` and
/// `ca_cert` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub endpoints: Vec<EndpointSpec>,
    #[serde(default = "default_adapters")]
    pub adapters: Vec<String>,
    #[serde(default = "default_streams")]
    pub stream_settings: Vec<u32>,
    #[serde(default = "default_concurrency")]
    pub concurrency: u32,
    #[serde(default = "default_size")]
    pub file_size_bytes: u64,
    #[serde(default = "default_interval")]
    pub interval_hours: f64,
    #[serde(default = "default_results")]
    pub results_path: PathBuf,
    /// CA certificate every endpoint's certificate chains to.
    pub ca_cert: PathBuf,
    /// Optional client identity, needed when endpoints require mutual TLS.
    #[serde(default)]
    pub client_cert: Option<PathBuf>,
    #[serde(default)]
    pub client_key: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub transfer_timeout_s: f64,
    #[serde(default)]
    pub verify_digest: bool,
}

impl MeshConfig {
    /// The defaults for everything but the endpoints and trust root.
    pub fn new(endpoints: Vec<EndpointSpec>, ca_cert: impl Into<PathBuf>) -> Self {
        Self {
            endpoints,
            adapters: default_adapters(),
            stream_settings: default_streams(),
            concurrency: DEFAULT_CONCURRENCY,
            file_size_bytes: DEFAULT_FILE_SIZE,
            interval_hours: DEFAULT_INTERVAL_HOURS,
            results_path: default_results(),
            ca_cert: ca_cert.into(),
            client_cert: None,
            client_key: None,
            transfer_timeout_s: default_timeout(),
            verify_digest: false,
        }
    }

    /// Reads a JSON config; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let mut config: MeshConfig = serde_json::from_str(&text)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.results_path);
        resolve(&mut config.ca_cert);
        config.client_cert.as_mut().map(resolve);
        config.client_key.as_mut().map(resolve);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.endpoints.len() < 2 {
            return bad("at least two endpoints are required");
        }
        let mut names: Vec<&str> = self.endpoints.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.endpoints.len() {
            return bad("endpoint names must be unique");
        }
        if self.endpoints.iter().any(|e| e.name.is_empty()) {
            return bad("endpoint names must not be empty");
        }
        if self.adapters.is_empty() {
            return bad("at least one adapter is required");
        }
        if self.stream_settings.is_empty() || self.stream_settings.contains(&0) {
            return bad("stream_settings must be nonempty and every entry >= 1");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1");
        }
        if self.file_size_bytes == 0 {
            return bad("file_size_bytes must be at least 1");
        }
        if !(self.interval_hours.is_finite() && self.interval_hours > 0.0) {
            return bad("interval_hours must be positive");
        }
        if !(self.transfer_timeout_s.is_finite() && self.transfer_timeout_s > 0.0) {
            return bad("transfer_timeout_s must be positive");
        }
        if self.client_cert.is_some() != self.client_key.is_some() {
            return bad("client_cert and client_key go together");
        }
        Ok(())
    }

    pub fn https_client(&self) -> Result<HttpsClient, OrchestratorError> {
        let setup = |e: &dyn std::fmt::Display| OrchestratorError::Setup(e.to_string());
        let trust = CertAuthority::load_trust(&self.ca_cert).map_err(|e| setup(&e))?;
        let identity = match (&self.client_cert, &self.client_key) {
            (Some(c), Some(k)) => Some(HostCredential::load(c, k).map_err(|e| setup(&e))?),
            _ => None,
        };
        let tls = tls::client_config(&trust, identity.as_ref()).map_err(|e| setup(&e))?;
        Ok(HttpsClient::new(tls))
    }
}
