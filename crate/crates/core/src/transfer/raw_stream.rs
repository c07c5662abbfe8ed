use std::pin::Pin;
use std::task::{Context, Poll};
use std::time::Instant;

use async_trait::async_trait;
use bytes::Bytes;
use http_body_util::BodyExt;
use hyper::body::Frame;
use hyper::{Method, Request, StatusCode};
use tokio::sync::mpsc;

use super::{
    head_object, AdapterCapabilities, ProtocolAdapter, TransferResult, TransferSpec, TransferStatus,
};
use crate::digest::{Adler32, Digest};
use crate::http::{self, BoxError, HttpsClient};

/// Two-party baseline: this client GETs the source and PUTs the bytes to
/// the destination on a single stream, so payload flows through it.
#[derive(Clone)]
pub struct RawStreamAdapter {
    client: HttpsClient,
}

impl RawStreamAdapter {
    pub const NAME: &'static str = "raw-stream";

    pub fn new(client: HttpsClient) -> Self {
        Self { client }
    }
}

struct ChannelBody(mpsc::Receiver<Result<Bytes, BoxError>>);

impl hyper::body::Body for ChannelBody {
    type Data = Bytes;
    type Error = BoxError;

    fn poll_frame(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
    ) -> Poll<Option<Result<Frame<Bytes>, BoxError>>> {
        self.0.poll_recv(cx).map(|r| r.map(|r| r.map(Frame::data)))
    }
}

impl RawStreamAdapter {
    async fn run(&self, spec: &TransferSpec, moved: &mut u64) -> Result<(), String> {
        let source_digest = if spec.verify_digest {
            head_object(&self.client, &spec.source_url, true)
                .await
                .map_err(|e| e.to_string())?
                .1
        } else {
            None
        };
        let resp = self
            .client
            .send(
                &spec.source_url,
                Request::builder().method(Method::GET),
                http::empty(),
            )
            .await
            .map_err(|e| format!("source {} unreachable: {e}", spec.source_url))?;
        if resp.status() != StatusCode::OK {
            return Err(format!("source answered GET with {}", resp.status()));
        }
        let mut source_body = resp.into_body();

        let (tx, rx) = mpsc::channel::<Result<Bytes, BoxError>>(16);
        let put = {
            let client = self.client.clone();
            let url = spec.dest_url.clone();
            let len = spec.file_size_bytes;
            async move {
                let req = Request::builder()
                    .method(Method::PUT)
                    .header(hyper::header::CONTENT_LENGTH, len);
                let resp = client
                    .send(&url, req, BodyExt::boxed(ChannelBody(rx)))
                    .await
                    .map_err(|e| format!("destination {url} unreachable: {e}"))?;
                if !resp.status().is_success() {
                    return Err(format!("destination answered PUT with {}", resp.status()));
                }
                Ok(())
            }
        };
        let pump = async {
            let mut digest = Adler32::new();
            while let Some(frame) = source_body.frame().await {
                let frame = frame.map_err(|e| format!("source body: {e}"))?;
                if let Ok(data) = frame.into_data() {
                    digest.update(&data);
                    *moved += data.len() as u64;
                    if tx.send(Ok(data)).await.is_err() {
                        return Err("destination closed the upload".to_string());
                    }
                }
            }
            drop(tx);
            Ok(digest.finish())
        };
        let (pumped, put) = tokio::join!(pump, put);
        let digest: Digest = pumped?;
        put?;
        if *moved != spec.file_size_bytes {
            return Err(format!("moved {moved} bytes, expected {}", spec.file_size_bytes));
        }
        if let Some(expected) = source_digest {
            if digest != expected {
                return Err(format!("digest mismatch: source {expected}, received {digest}"));
            }
        }
        Ok(())
    }
}

#[async_trait]
impl ProtocolAdapter for RawStreamAdapter {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn capabilities(&self) -> AdapterCapabilities {
        AdapterCapabilities {
            multi_stream: false,
            third_party: false,
        }
    }

    async fn transfer(&self, spec: &TransferSpec) -> TransferResult {
        let started = Instant::now();
        let mut moved = 0;
        let status = match tokio::time::timeout(spec.timeout, self.run(spec, &mut moved)).await {
            Ok(Ok(())) => TransferStatus::Succeeded,
            Ok(Err(reason)) => TransferStatus::Failed(reason),
            Err(_) => TransferStatus::Failed(format!("timed out after {:.1} s", spec.timeout.as_secs_f64())),
        };
        TransferResult::finish(spec.clone(), started, moved, status, Vec::new())
    }
}
