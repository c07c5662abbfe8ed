//! Minimal HTTPS/1.1 client: one TLS connection per request stream, so
//! every stripe of a transfer is its own TCP flow.

use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use http_body_util::combinators::BoxBody;
use http_body_util::{BodyExt, Empty, Full};
use hyper::body::Incoming;
use hyper::client::conn::http1::SendRequest;
use hyper::{Request, Response};
use hyper_util::rt::TokioIo;
use rustls::ClientConfig;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio_rustls::TlsConnector;
use url::Url;

use crate::tls;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;
pub type Body = BoxBody<Bytes, BoxError>;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("invalid URL {0:?}: {1}")]
    Url(String, String),
    #[error("connect to {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("connect to {0}: timed out")]
    ConnectTimeout(String),
    #[error("TLS handshake with {addr}: {source}")]
    Handshake {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("TLS: {0}")]
    Tls(#[from] tls::TlsError),
    #[error("HTTP: {0}")]
    Hyper(#[from] hyper::Error),
    #[error("request build: {0}")]
    Request(#[from] hyper::http::Error),
}

pub fn empty() -> Body {
    Empty::<Bytes>::new().map_err(|never| match never {}).boxed()
}

pub fn full(data: impl Into<Bytes>) -> Body {
    Full::new(data.into()).map_err(|never| match never {}).boxed()
}

/// `host:port` of an https URL.
pub fn authority(url: &Url) -> Result<(String, u16), HttpError> {
    if url.scheme() != "https" {
        return Err(HttpError::Url(url.to_string(), "scheme must be https".into()));
    }
    let host = url
        .host_str()
        .ok_or_else(|| HttpError::Url(url.to_string(), "missing host".into()))?;
    let port = url.port_or_known_default().unwrap_or(443);
    Ok((
        host.trim_start_matches('[').trim_end_matches(']').to_string(),
        port,
    ))
}

/// Path plus query, as sent on the request line.
pub fn request_target(url: &Url) -> String {
    match url.query() {
        Some(q) => format!("{}?{q}", url.path()),
        None => url.path().to_string(),
    }
}

#[derive(Clone)]
pub struct HttpsClient {
    tls: Arc<ClientConfig>,
}

impl HttpsClient {
    pub fn new(tls: Arc<ClientConfig>) -> Self {
        Self { tls }
    }

    /// Opens a fresh TLS connection to the URL's authority.
    pub async fn connect(&self, url: &Url) -> Result<SendRequest<Body>, HttpError> {
        let (host, port) = authority(url)?;
        let addr = format!("{host}:{port}");
        let tcp = match tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect((host.as_str(), port))).await
        {
            Ok(Ok(tcp)) => tcp,
            Ok(Err(source)) => return Err(HttpError::Connect { addr, source }),
            Err(_) => return Err(HttpError::ConnectTimeout(addr)),
        };
        tcp.set_nodelay(true).ok();
        let server_name = tls::server_name(&host)?;
        let stream = TlsConnector::from(self.tls.clone())
            .connect(server_name, tcp)
            .await
            .map_err(|source| HttpError::Handshake {
                addr: addr.clone(),
                source,
            })?;
        let (sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await?;
        tokio::spawn(async move {
            if let Err(e) = conn.await {
                tracing::debug!(%addr, "client connection closed: {e}");
            }
        });
        Ok(sender)
    }

    /// Sends one request on a new connection. The request target and
    /// `Host` header are filled in from `url`.
    pub async fn send(
        &self,
        url: &Url,
        request: hyper::http::request::Builder,
        body: Body,
    ) -> Result<Response<Incoming>, HttpError> {
        let mut sender = self.connect(url).await?;
        let host = match url.port() {
            Some(p) => format!("{}:{p}", url.host_str().unwrap_or_default()),
            None => url.host_str().unwrap_or_default().to_string(),
        };
        let req: Request<Body> = request
            .uri(request_target(url))
            .header(hyper::header::HOST, host)
            .body(body)?;
        Ok(sender.send_request(req).await?)
    }
}
