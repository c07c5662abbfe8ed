//! One-machine test bed: a throwaway CA, a credential for the loopback
//! host, and helpers to start endpoints on ephemeral ports. Used by the
//! integration tests, the benches and the CLI's self-contained demos.

use std::net::SocketAddr;

use thiserror::Error;
use url::Url;

use crate::ca::{self, CaError, CertAuthority, HostCredential};
use crate::endpoint::{self, EndpointConfig, EndpointError, EndpointHandle};
use crate::http::HttpsClient;
use crate::storage::StorageBackend;
use crate::tls::{self, TlsError};

/// Host name every lab endpoint is reached by.
pub const LAB_HOST: &str = "127.0.0.1";

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Ca(#[from] CaError),
    #[error(transparent)]
    Tls(#[from] TlsError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
}

pub struct Lab {
    pub ca: CertAuthority,
    pub credential: HostCredential,
    /// Client that trusts the lab CA and presents the lab credential.
    pub client: HttpsClient,
}

impl Lab {
    pub fn new() -> Result<Self, LabError> {
        let ca = ca::create_authority("CN=tpcbench lab CA,O=tpcbench", 30)?;
        let credential =
            ca::issue_host_credential(&ca, &[LAB_HOST.to_string(), "localhost".to_string()], 30)?;
        let client = HttpsClient::new(tls::client_config(&ca, Some(&credential))?);
        Ok(Self {
            ca,
            credential,
            client,
        })
    }

    /// Endpoint config on an ephemeral loopback port with the given storage.
    pub fn endpoint_config(&self, storage: StorageBackend) -> EndpointConfig {
        let listen: SocketAddr = (std::net::Ipv4Addr::LOCALHOST, 0).into();
        let mut config = EndpointConfig::new(listen, self.credential.clone(), self.ca.clone());
        config.storage = storage;
        config
    }

    pub async fn endpoint(&self, storage: StorageBackend) -> Result<EndpointHandle, LabError> {
        Ok(endpoint::serve(self.endpoint_config(storage)).await?)
    }
}

/// `https://127.0.0.1:<port><path>`.
pub fn url_for(addr: SocketAddr, path: &str) -> Url {
    Url::parse(&format!("https://{LAB_HOST}:{}{path}", addr.port())).expect("valid lab URL")
}
