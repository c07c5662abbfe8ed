//! Pull-mode third-party copy: the destination fetches from `Source:`.

use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use http_body_util::BodyExt;
use hyper::body::Frame;
use hyper::header::{self, HeaderMap, HeaderValue};
use hyper::{Method, Request, Response, StatusCode};
use tokio::sync::mpsc;
use tokio::task::JoinSet;
use url::Url;

use super::service::{self, text, DIGEST, SOURCE, STREAMS, WANT_DIGEST};
use super::{EndpointState, SessionSlot, SessionState, TOO_MANY_TRANSFERS};
use crate::digest::Digest;
use crate::http::{self, Body, BoxError, HttpsClient};
use crate::markers::{PerfMarker, Terminal, CONTENT_TYPE};
use crate::storage::{ObjectPath, Segment, StripeSink};

// A stripe that delivers nothing for this long counts as failed.
const STRIPE_IDLE_TIMEOUT: Duration = Duration::from_secs(60);
const RETRY_BACKOFF: Duration = Duration::from_millis(200);

/// Splits `[0, size)` into at most `streams` contiguous `(start, len)`
/// ranges; the first `size % n` ranges are one byte longer. Never yields
/// an empty range, so fewer than `streams` ranges come back when
/// `size < streams`.
pub fn stripe_ranges(size: u64, streams: u32) -> Vec<(u64, u64)> {
    let n = u64::from(streams.max(1)).min(size);
    if n == 0 {
        return Vec::new();
    }
    let base = size / n;
    let extra = size % n;
    let mut start = 0;
    (0..n)
        .map(|i| {
            let len = base + u64::from(i < extra);
            let range = (start, len);
            start += len;
            range
        })
        .collect()
}

struct ChannelBody {
    rx: mpsc::Receiver<Frame<Bytes>>,
}

impl hyper::body::Body for ChannelBody {
    type Data = Bytes;
    type Error = BoxError;

    fn poll_frame(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
    ) -> Poll<Option<Result<Frame<Bytes>, BoxError>>> {
        self.rx.poll_recv(cx).map(|frame| frame.map(Ok))
    }
}

pub(super) async fn handle_copy(
    state: Arc<EndpointState>,
    dest: ObjectPath,
    headers: &HeaderMap,
) -> Response<Body> {
    let Some(source) = headers.get(SOURCE).and_then(|v| v.to_str().ok()) else {
        return text(
            StatusCode::BAD_REQUEST,
            "missing Source header (only pull mode is supported)",
        );
    };
    let source_url = match Url::parse(source) {
        Ok(u) if u.scheme() == "https" => u,
        Ok(_) => return text(StatusCode::BAD_REQUEST, "Source must be an https URL"),
        Err(e) => return text(StatusCode::BAD_REQUEST, format!("bad Source URL: {e}")),
    };
    let streams = match headers
        .get(STREAMS)
        .map(|v| v.to_str().ok().and_then(|s| s.trim().parse::<u32>().ok()))
    {
        None => 1,
        Some(Some(n)) if n >= 1 => n,
        Some(_) => {
            return text(
                StatusCode::BAD_REQUEST,
                "X-Number-Of-Streams must be an integer >= 1",
            )
        }
    };
    let want_digest = service::wants_adler32(headers);

    let Ok(permit) = state.permits.clone().try_acquire_owned() else {
        return text(StatusCode::SERVICE_UNAVAILABLE, TOO_MANY_TRANSFERS);
    };
    let slot = state.open_session(source_url.as_str(), &dest.to_string(), streams);
    tracing::info!(session = %slot.session_id, source = %source_url, dest = %dest, streams, "COPY started");

    let (tx, rx) = mpsc::channel(64);
    tokio::spawn(async move {
        let _permit = permit;
        let outcome = pull(&state, &slot, &dest, &source_url, streams, want_digest, &tx).await;
        let (terminal, digest) = match outcome {
            Ok(digest) => {
                slot.finish(SessionState::Succeeded);
                (Terminal::Success, digest)
            }
            Err(reason) => {
                tracing::warn!(session = %slot.session_id, "COPY failed: {reason}");
                slot.finish(SessionState::Failed(reason.clone()));
                (Terminal::Failure(reason), None)
            }
        };
        let _ = tx.send(Frame::data(Bytes::from(terminal.encode()))).await;
        if let Some(d) = digest {
            let mut trailers = HeaderMap::new();
            trailers.insert(DIGEST, HeaderValue::from_str(&d.header_value()).unwrap());
            let _ = tx.send(Frame::trailers(trailers)).await;
        }
    });

    let mut resp = Response::new(BodyExt::boxed(ChannelBody { rx }));
    *resp.status_mut() = StatusCode::CREATED;
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static(CONTENT_TYPE));
    if want_digest {
        resp.headers_mut()
            .insert(header::TRAILER, HeaderValue::from_static("Digest"));
    }
    resp
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

async fn send_markers(tx: &mpsc::Sender<Frame<Bytes>>, counters: &[Arc<AtomicU64>]) {
    let total = counters.len() as u32;
    let timestamp = unix_now();
    let mut text = String::new();
    for (i, c) in counters.iter().enumerate() {
        text.push_str(
            &PerfMarker {
                timestamp,
                stripe_index: i as u32,
                stripe_bytes_transferred: c.load(Ordering::Acquire),
                total_stripe_count: total,
            }
            .encode(),
        );
    }
    // The requesting client may have gone away; the copy still completes.
    let _ = tx.send(Frame::data(Bytes::from(text))).await;
}

struct SourceInfo {
    size: u64,
    digest: Option<Digest>,
}

async fn probe_source(client: &HttpsClient, source: &Url, want_digest: bool) -> Result<SourceInfo, String> {
    let mut req = Request::builder().method(Method::HEAD);
    if want_digest {
        req = req.header(WANT_DIGEST, "adler32");
    }
    let resp = client
        .send(source, req, http::empty())
        .await
        .map_err(|e| format!("source {source} unreachable: {e}"))?;
    if resp.status() != StatusCode::OK {
        return Err(format!("source {source} answered HEAD with {}", resp.status()));
    }
    let size = resp
        .headers()
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .ok_or_else(|| format!("source {source} did not report a content length"))?;
    let digest = if want_digest {
        let d = resp
            .headers()
            .get(DIGEST)
            .and_then(|v| v.to_str().ok())
            .and_then(Digest::from_header_value)
            .ok_or_else(|| format!("source {source} did not return an adler32 digest"))?;
        Some(d)
    } else {
        None
    };
    Ok(SourceInfo { size, digest })
}

async fn pull(
    state: &Arc<EndpointState>,
    slot: &SessionSlot,
    dest: &ObjectPath,
    source: &Url,
    streams: u32,
    want_digest: bool,
    tx: &mpsc::Sender<Frame<Bytes>>,
) -> Result<Option<Digest>, String> {
    let info = probe_source(&state.client, source, want_digest).await?;
    let ranges = stripe_ranges(info.size, streams);
    let counters: Vec<Arc<AtomicU64>> = ranges.iter().map(|_| Arc::new(AtomicU64::new(0))).collect();
    slot.set_stripes(counters.clone());

    let staged = state
        .storage
        .stage(dest)
        .await
        .map_err(|e| format!("cannot stage {dest}: {e}"))?;
    let mut stripes = JoinSet::new();
    for (index, (&(start, len), counter)) in ranges.iter().zip(&counters).enumerate() {
        let sink = staged
            .sink(start, Some(len))
            .await
            .map_err(|e| format!("cannot stage {dest}: {e}"))?;
        let job = StripeJob {
            client: state.client.clone(),
            source: source.clone(),
            index,
            start,
            len,
            whole_object: ranges.len() == 1,
            counter: counter.clone(),
            retries: state.stripe_retries,
        };
        stripes.spawn(async move { job.run(sink).await.map(|segment| (index, segment)) });
    }

    let mut segments: Vec<Option<Segment>> = ranges.iter().map(|_| None).collect();
    let period = state.marker_period;
    let mut ticker = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    loop {
        tokio::select! {
            _ = ticker.tick() => send_markers(tx, &counters).await,
            joined = stripes.join_next() => match joined {
                None => break,
                Some(Ok(Ok((index, segment)))) => segments[index] = Some(segment),
                Some(Ok(Err(reason))) => {
                    stripes.abort_all();
                    return Err(reason);
                }
                Some(Err(e)) => {
                    stripes.abort_all();
                    return Err(format!("stripe task failed: {e}"));
                }
            },
        }
    }
    if !counters.is_empty() {
        send_markers(tx, &counters).await;
    }

    let segments: Vec<Segment> = segments
        .into_iter()
        .map(|s| s.expect("every stripe finished"))
        .collect();
    staged
        .commit(segments)
        .await
        .map_err(|e| format!("cannot store {dest}: {e}"))?;

    if let Some(expected) = info.digest {
        let actual = state
            .storage
            .digest(dest)
            .await
            .map_err(|e| format!("cannot digest {dest}: {e}"))?;
        if actual != expected {
            let _ = state.storage.delete(dest).await;
            return Err(format!(
                "digest mismatch: source adler32={expected} destination adler32={actual}"
            ));
        }
        return Ok(Some(actual));
    }
    Ok(None)
}

struct StripeJob {
    client: HttpsClient,
    source: Url,
    index: usize,
    start: u64,
    len: u64,
    whole_object: bool,
    counter: Arc<AtomicU64>,
    retries: u32,
}

impl StripeJob {
    async fn run(self, mut sink: StripeSink) -> Result<Segment, String> {
        let end = self.start + self.len - 1;
        let mut attempt = 0;
        loop {
            match self.fetch(&mut sink).await {
                Ok(()) => break,
                Err(e) if attempt < self.retries => {
                    attempt += 1;
                    tracing::debug!(stripe = self.index, attempt, "stripe retry: {e}");
                    tokio::time::sleep(RETRY_BACKOFF * attempt).await;
                }
                Err(e) => {
                    return Err(format!(
                        "stripe {} (bytes {}-{end}) from {}: {e} after {attempt} retries",
                        self.index, self.start, self.source
                    ))
                }
            }
        }
        sink.finish()
            .await
            .map_err(|e| format!("stripe {}: {e}", self.index))
    }

    /// One attempt, resuming after whatever earlier attempts delivered.
    async fn fetch(&self, sink: &mut StripeSink) -> Result<(), String> {
        let done = self.counter.load(Ordering::Acquire);
        if done == self.len {
            return Ok(());
        }
        let first = self.start + done;
        let last = self.start + self.len - 1;
        let ranged = !(self.whole_object && done == 0);
        let mut req = Request::builder().method(Method::GET);
        if ranged {
            req = req.header(header::RANGE, format!("bytes={first}-{last}"));
        }
        let resp = self
            .client
            .send(&self.source, req, http::empty())
            .await
            .map_err(|e| e.to_string())?;
        let expected_status = if ranged {
            StatusCode::PARTIAL_CONTENT
        } else {
            StatusCode::OK
        };
        if resp.status() != expected_status {
            return Err(format!("GET answered {}", resp.status()));
        }
        if ranged {
            let content_range = resp
                .headers()
                .get(header::CONTENT_RANGE)
                .and_then(|v| v.to_str().ok())
                .unwrap_or_default();
            if !content_range.starts_with(&format!("bytes {first}-{last}/")) {
                return Err(format!("unexpected Content-Range {content_range:?}"));
            }
        }
        let mut body = resp.into_body();
        loop {
            let frame = match tokio::time::timeout(STRIPE_IDLE_TIMEOUT, body.frame()).await {
                Err(_) => return Err("source stalled".into()),
                Ok(None) => break,
                Ok(Some(Err(e))) => return Err(format!("body: {e}")),
                Ok(Some(Ok(frame))) => frame,
            };
            if let Ok(data) = frame.into_data() {
                sink.write(&data).await.map_err(|e| e.to_string())?;
                self.counter.fetch_add(data.len() as u64, Ordering::AcqRel);
            }
        }
        let got = self.counter.load(Ordering::Acquire);
        if got != self.len {
            return Err(format!("short body: {got} of {} bytes", self.len));
        }
        Ok(())
    }
}
