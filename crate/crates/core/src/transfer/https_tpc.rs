use std::collections::BTreeMap;
use std::time::Instant;

use async_trait::async_trait;
use http_body_util::BodyExt;
use hyper::{Method, Request, StatusCode};

use super::{
    head_object, AdapterCapabilities, ProtocolAdapter, TransferResult, TransferSpec, TransferStatus,
};
use crate::digest::Digest;
use crate::http::{self, HttpsClient};
use crate::markers::{MarkerEvent, MarkerParser, PerfMarker, Terminal};

/// HTTPS third-party copy in pull mode: one COPY to the destination, which
/// fetches from the source itself. Payload bytes never reach this client.
#[derive(Clone)]
pub struct HttpsTpcAdapter {
    client: HttpsClient,
}

impl HttpsTpcAdapter {
    pub const NAME: &'static str = "https-tpc";

    pub fn new(client: HttpsClient) -> Self {
        Self { client }
    }
}

/// Bytes moved so far: the latest count per stripe, summed.
fn bytes_from_markers(markers: &[PerfMarker]) -> u64 {
    let mut latest: BTreeMap<u32, u64> = BTreeMap::new();
    for m in markers {
        latest.insert(m.stripe_index, m.stripe_bytes_transferred);
    }
    latest.values().sum()
}

struct Outcome {
    markers: Vec<PerfMarker>,
    status: TransferStatus,
}

impl HttpsTpcAdapter {
    async fn run(&self, spec: &TransferSpec, markers: &mut Vec<PerfMarker>) -> Result<(), String> {
        let source_digest = if spec.verify_digest {
            head_object(&self.client, &spec.source_url, true)
                .await
                .map_err(|e| e.to_string())?
                .1
        } else {
            None
        };

        let mut req = Request::builder()
            .method(Method::from_bytes(b"COPY").expect("valid method"))
            .header("source", spec.source_url.as_str())
            .header("x-number-of-streams", spec.stream_count.to_string());
        if spec.verify_digest {
            req = req.header("want-digest", "adler32").header("te", "trailers");
        }
        let resp = self
            .client
            .send(&spec.dest_url, req, http::empty())
            .await
            .map_err(|e| format!("destination {} unreachable: {e}", spec.dest_url))?;
        let status = resp.status();
        let mut body = resp.into_body();
        if status != StatusCode::CREATED {
            let text = body
                .collect()
                .await
                .map(|b| String::from_utf8_lossy(&b.to_bytes()).trim().to_string())
                .unwrap_or_default();
            return Err(format!("destination answered COPY with {status}: {text}"));
        }

        let mut parser = MarkerParser::new();
        let mut terminal = None;
        let mut trailer_digest = None;
        while let Some(frame) = body.frame().await {
            let frame = frame.map_err(|e| format!("marker stream broken: {e}"))?;
            match frame.into_data() {
                Ok(data) => {
                    for event in parser.feed(&data).map_err(|e| e.to_string())? {
                        match event {
                            MarkerEvent::Marker(m) => markers.push(m),
                            MarkerEvent::Terminal(t) => terminal = Some(t),
                        }
                    }
                }
                Err(frame) => {
                    if let Ok(trailers) = frame.into_trailers() {
                        trailer_digest = trailers
                            .get("digest")
                            .and_then(|v| v.to_str().ok())
                            .and_then(Digest::from_header_value);
                    }
                }
            }
        }
        parser.finish().map_err(|e| e.to_string())?;
        match terminal {
            Some(Terminal::Success) => {}
            Some(Terminal::Failure(reason)) => return Err(reason),
            None => return Err("marker stream ended without a terminal line".into()),
        }

        let moved = bytes_from_markers(markers);
        if moved != spec.file_size_bytes {
            return Err(format!(
                "markers report {moved} bytes, expected {}",
                spec.file_size_bytes
            ));
        }
        if let Some(expected) = source_digest {
            match trailer_digest {
                Some(actual) if actual == expected => {}
                Some(actual) => {
                    return Err(format!(
                        "digest mismatch: source {expected}, destination {actual}"
                    ))
                }
                None => return Err("destination sent no digest trailer".into()),
            }
        }
        Ok(())
    }

    async fn attempt(&self, spec: &TransferSpec) -> Outcome {
        let mut markers = Vec::new();
        let status = match tokio::time::timeout(spec.timeout, self.run(spec, &mut markers)).await {
            Ok(Ok(())) => TransferStatus::Succeeded,
            Ok(Err(reason)) => TransferStatus::Failed(reason),
            Err(_) => TransferStatus::Failed(format!("timed out after {:.1} s", spec.timeout.as_secs_f64())),
        };
        Outcome { markers, status }
    }
}

#[async_trait]
impl ProtocolAdapter for HttpsTpcAdapter {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn capabilities(&self) -> AdapterCapabilities {
        AdapterCapabilities {
            multi_stream: true,
            third_party: true,
        }
    }

    async fn transfer(&self, spec: &TransferSpec) -> TransferResult {
        let started = Instant::now();
        let outcome = self.attempt(spec).await;
        let bytes = match outcome.status {
            TransferStatus::Succeeded => spec.file_size_bytes,
            TransferStatus::Failed(_) => bytes_from_markers(&outcome.markers),
        };
        TransferResult::finish(spec.clone(), started, bytes, outcome.status, outcome.markers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marker(stripe_index: u32, bytes: u64) -> PerfMarker {
        PerfMarker {
            timestamp: 0,
            stripe_index,
            stripe_bytes_transferred: bytes,
            total_stripe_count: 2,
        }
    }

    #[test]
    fn latest_marker_per_stripe_counts() {
        let markers = [marker(0, 10), marker(1, 5), marker(0, 40), marker(1, 60)];
        assert_eq!(bytes_from_markers(&markers), 100);
        assert_eq!(bytes_from_markers(&[]), 0);
    }
}
