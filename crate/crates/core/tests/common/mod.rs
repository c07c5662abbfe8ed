#![allow(dead_code)]

use bytes::Bytes;
use http_body_util::BodyExt;
use hyper::header::HeaderMap;
use hyper::{Method, Request, StatusCode};
use tpcbench_core::digest::Digest;
use tpcbench_core::endpoint::EndpointHandle;
use tpcbench_core::http::{self, HttpsClient};
use tpcbench_core::lab::{url_for, Lab};
use tpcbench_core::orchestrator::{EndpointSpec, MeshConfig};
use tpcbench_core::shaper::{start_relay, RelayHandle, ShaperConfig};
use tpcbench_core::storage::StorageBackend;
use tpcbench_core::transfer::{serve_probe, ProbeHandle};
use url::Url;

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
    pub trailers: Option<HeaderMap>,
}

impl Reply {
    pub fn digest(&self) -> Option<Digest> {
        self.headers
            .get("digest")
            .or_else(|| self.trailers.as_ref().and_then(|t| t.get("digest")))
            .and_then(|v| v.to_str().ok())
            .and_then(Digest::from_header_value)
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

pub async fn request(
    client: &HttpsClient,
    url: &Url,
    builder: hyper::http::request::Builder,
    body: Bytes,
) -> Reply {
    let resp = client
        .send(url, builder, http::full(body))
        .await
        .unwrap_or_else(|e| panic!("request to {url} failed: {e}"));
    let status = resp.status();
    let headers = resp.headers().clone();
    let collected = resp.into_body().collect().await.expect("response body");
    let trailers = collected.trailers().cloned();
    Reply {
        status,
        headers,
        body: collected.to_bytes(),
        trailers,
    }
}

pub async fn get(client: &HttpsClient, url: &Url, range: Option<&str>) -> Reply {
    let mut b = Request::builder().method(Method::GET);
    if let Some(r) = range {
        b = b.header("range", r);
    }
    request(client, url, b, Bytes::new()).await
}

pub async fn put(client: &HttpsClient, url: &Url, data: impl Into<Bytes>) -> Reply {
    request(client, url, Request::builder().method(Method::PUT), data.into()).await
}

pub async fn copy(client: &HttpsClient, dest: &Url, source: &Url, streams: u32, want_digest: bool) -> Reply {
    let mut b = Request::builder()
        .method(Method::from_bytes(b"COPY").unwrap())
        .header("source", source.as_str())
        .header("x-number-of-streams", streams.to_string());
    if want_digest {
        b = b.header("want-digest", "adler32").header("te", "trailers");
    }
    request(client, dest, b, Bytes::new()).await
}

pub fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

/// Independent adler32 for cross-checking.
pub fn oracle_adler32(data: &[u8]) -> Digest {
    let mut a = adler2::Adler32::new();
    a.write_slice(data);
    Digest(a.checksum())
}

pub struct MeshNode {
    pub name: String,
    pub endpoint: EndpointHandle,
    pub probe: ProbeHandle,
    /// Relays in front of the endpoint and the probe, when shaped.
    pub relays: Vec<RelayHandle>,
}

/// A set of loopback endpoints, each with its own probe responder, plus a
/// mesh config that points at them.
pub struct TestMesh {
    pub lab: Lab,
    pub dir: tempfile::TempDir,
    pub nodes: Vec<MeshNode>,
    pub config: MeshConfig,
}

impl TestMesh {
    pub fn node(&self, name: &str) -> &MeshNode {
        self.nodes.iter().find(|n| n.name == name).expect("known node")
    }

    pub async fn shutdown(self) {
        for node in self.nodes {
            for relay in node.relays {
                relay.shutdown().await;
            }
            node.endpoint.shutdown().await;
            node.probe.shutdown().await;
        }
    }
}

/// Starts one endpoint per name. With `rtt_ms`, each endpoint and probe
/// sits behind a relay that adds that round trip.
pub async fn test_mesh(names: &[&str], rtt_ms: Option<f64>) -> TestMesh {
    let lab = Lab::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    lab.ca.export(dir.path()).unwrap();
    let (cert, key) = lab.credential.export(dir.path()).unwrap();
    let mut nodes = Vec::new();
    let mut specs = Vec::new();
    for name in names {
        let endpoint = lab.endpoint(StorageBackend::memory()).await.unwrap();
        let probe = serve_probe("127.0.0.1:0".parse().unwrap()).await.unwrap();
        let mut relays = Vec::new();
        let (mut ep_addr, mut probe_addr) = (endpoint.local_addr(), probe.local_addr());
        if let Some(rtt) = rtt_ms {
            for addr in [&mut ep_addr, &mut probe_addr] {
                let relay = start_relay(ShaperConfig::new(
                    "127.0.0.1:0".parse().unwrap(),
                    addr.to_string(),
                    rtt,
                ))
                .await
                .unwrap();
                *addr = relay.local_addr();
                relays.push(relay);
            }
        }
        specs.push(EndpointSpec {
            name: name.to_string(),
            base_url: url_for(ep_addr, "/"),
            probe_address: probe_addr.to_string(),
        });
        nodes.push(MeshNode {
            name: name.to_string(),
            endpoint,
            probe,
            relays,
        });
    }
    let mut config = MeshConfig::new(specs, dir.path().join("ca.crt"));
    config.client_cert = Some(cert);
    config.client_key = Some(key);
    config.results_path = dir.path().join("results.jsonl");
    TestMesh {
        lab,
        dir,
        nodes,
        config,
    }
}
