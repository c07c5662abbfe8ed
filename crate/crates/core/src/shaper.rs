//! Transparent TCP relay that adds round-trip delay and bandwidth caps,
//! standing in for a WAN link on one machine.
//!
//! Each direction of a relayed connection is a reader and a writer joined
//! by a queue. The reader takes a chunk (at most 64 KiB) off the socket,
//! pays the token bucket, and queues it with a release time of now plus
//! half the RTT. The writer forwards chunks at their release time.
//!
//! With `window_bytes` set, a direction may hold at most that many bytes
//! between read and acknowledgement, and the credit for a chunk comes back
//! half an RTT after it was written, the way a TCP receive window limits a
//! flow to roughly one window per round trip.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Semaphore};
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

pub const CHUNK: usize = 64 * 1024;
pub const REFILL_TICK: Duration = Duration::from_millis(10);
// Without an emulated window, bound what one direction may buffer.
const QUEUE_LIMIT: u64 = 32 << 20;
const BURST: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum ShaperError {
    #[error("invalid shaper configuration: {0}")]
    Config(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShaperConfig {
    pub listen: SocketAddr,
    /// `host:port` every accepted connection is relayed to.
    pub forward: String,
    pub rtt_ms: f64,
    pub bandwidth_cap_bps: Option<u64>,
    /// Cap each connection separately instead of all of them together.
    pub per_connection: bool,
    /// Emulated per-connection, per-direction receive window.
    pub window_bytes: Option<u64>,
}

impl ShaperConfig {
    pub fn new(listen: SocketAddr, forward: impl Into<String>, rtt_ms: f64) -> Self {
        Self {
            listen,
            forward: forward.into(),
            rtt_ms,
            bandwidth_cap_bps: None,
            per_connection: false,
            window_bytes: None,
        }
    }

    pub fn validate(&self) -> Result<(), ShaperError> {
        if !self.rtt_ms.is_finite() || self.rtt_ms < 0.0 {
            return Err(ShaperError::Config("rtt_ms must be a finite value >= 0".into()));
        }
        if self.bandwidth_cap_bps == Some(0) {
            return Err(ShaperError::Config("bandwidth cap must be positive".into()));
        }
        if self.window_bytes == Some(0) {
            return Err(ShaperError::Config("window must be positive".into()));
        }
        if self.window_bytes.is_some_and(|w| w > u64::from(u32::MAX >> 3)) {
            return Err(ShaperError::Config("window too large".into()));
        }
        Ok(())
    }

    fn one_way_delay(&self) -> Duration {
        Duration::from_secs_f64(self.rtt_ms / 2.0 / 1e3)
    }
}

/// Token bucket over bytes with 10 ms refill ticks. Takers may run into
/// debt and then sleep it off, so a large chunk never starves.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<BucketState>,
}

#[derive(Debug)]
struct BucketState {
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    /// `bits_per_second` > 0. Burst is 100 ms worth of the rate.
    pub fn new(bits_per_second: u64) -> Self {
        let rate = bits_per_second as f64 / 8.0;
        let burst = rate * BURST.as_secs_f64();
        Self {
            rate,
            burst,
            state: Mutex::new(BucketState {
                tokens: burst,
                last: Instant::now(),
            }),
        }
    }

    /// Debits `bytes`, then waits until the bucket is out of debt.
    pub async fn take(&self, bytes: usize) {
        let wait = {
            let mut s = self.state.lock().unwrap();
            let now = Instant::now();
            let ticks = (now.duration_since(s.last).as_nanos() / REFILL_TICK.as_nanos()) as u32;
            if ticks > 0 {
                s.last += REFILL_TICK * ticks;
                s.tokens =
                    (s.tokens + self.rate * REFILL_TICK.as_secs_f64() * f64::from(ticks)).min(self.burst);
            }
            s.tokens -= bytes as f64;
            if s.tokens >= 0.0 {
                None
            } else {
                let ticks = (-s.tokens / (self.rate * REFILL_TICK.as_secs_f64())).ceil() as u32;
                Some(s.last + REFILL_TICK * ticks)
            }
        };
        if let Some(at) = wait {
            tokio::time::sleep_until(at).await;
        }
    }
}

/// Closed-form flow model: `min(cap, n * W * 8 / rtt)` in Gbps. An RTT of
/// zero leaves only the cap (infinite when uncapped).
pub fn predict_throughput(stream_count: u32, rtt_ms: f64, window_bytes: u64, cap_bps: Option<f64>) -> f64 {
    let cap = cap_bps.map_or(f64::INFINITY, |c| c / 1e9);
    if rtt_ms <= 0.0 {
        return cap;
    }
    let window_term = f64::from(stream_count) * window_bytes as f64 * 8.0 / (rtt_ms / 1e3) / 1e9;
    window_term.min(cap)
}

/// A running relay.
pub struct RelayHandle {
    local_addr: SocketAddr,
    cancel: CancellationToken,
    active: Arc<AtomicUsize>,
    task: JoinHandle<()>,
}

impl RelayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn active_connections(&self) -> usize {
        self.active.load(Ordering::Relaxed)
    }

    /// Severs every relayed connection and stops accepting new ones, as if
    /// the link went down.
    pub fn kill(&self) {
        self.cancel.cancel();
    }

    pub async fn shutdown(self) {
        self.kill();
        let _ = self.task.await;
    }

    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

struct Shared {
    config: ShaperConfig,
    upstream: Option<Arc<TokenBucket>>,
    downstream: Option<Arc<TokenBucket>>,
    active: Arc<AtomicUsize>,
}

/// Binds `config.listen` and relays connections to `config.forward`.
pub async fn start_relay(config: ShaperConfig) -> Result<RelayHandle, ShaperError> {
    config.validate()?;
    let listener = TcpListener::bind(config.listen)
        .await
        .map_err(|source| ShaperError::Bind {
            addr: config.listen,
            source,
        })?;
    let local_addr = listener.local_addr().map_err(|source| ShaperError::Bind {
        addr: config.listen,
        source,
    })?;
    let aggregate = |cfg: &ShaperConfig| match (cfg.bandwidth_cap_bps, cfg.per_connection) {
        (Some(cap), false) => Some(Arc::new(TokenBucket::new(cap))),
        _ => None,
    };
    let active = Arc::new(AtomicUsize::new(0));
    let shared = Arc::new(Shared {
        upstream: aggregate(&config),
        downstream: aggregate(&config),
        config,
        active: active.clone(),
    });
    let cancel = CancellationToken::new();
    let token = cancel.clone();
    tracing::info!(%local_addr, forward = %shared.config.forward, rtt_ms = shared.config.rtt_ms, "relay listening");
    let task = tokio::spawn(async move {
        loop {
            let (inbound, peer) = tokio::select! {
                _ = token.cancelled() => break,
                accepted = listener.accept() => match accepted {
                    Ok(pair) => pair,
                    Err(e) => {
                        tracing::warn!("relay accept failed: {e}");
                        continue;
                    }
                },
            };
            let shared = shared.clone();
            let conn_cancel = token.child_token();
            tokio::spawn(async move {
                shared.active.fetch_add(1, Ordering::Relaxed);
                relay_connection(inbound, peer, &shared, conn_cancel).await;
                shared.active.fetch_sub(1, Ordering::Relaxed);
            });
        }
    });
    Ok(RelayHandle {
        local_addr,
        cancel,
        active,
        task,
    })
}

async fn relay_connection(inbound: TcpStream, peer: SocketAddr, shared: &Shared, cancel: CancellationToken) {
    let cfg = &shared.config;
    let outbound = tokio::select! {
        _ = cancel.cancelled() => return,
        res = TcpStream::connect(cfg.forward.as_str()) => match res {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(%peer, forward = %cfg.forward, "relay cannot reach forward target: {e}");
                return;
            }
        },
    };
    inbound.set_nodelay(true).ok();
    outbound.set_nodelay(true).ok();
    let per_conn = |cap: Option<u64>| match (cap, cfg.per_connection) {
        (Some(cap), true) => Some(Arc::new(TokenBucket::new(cap))),
        _ => None,
    };
    let up_bucket = shared
        .upstream
        .clone()
        .or_else(|| per_conn(cfg.bandwidth_cap_bps));
    let down_bucket = shared
        .downstream
        .clone()
        .or_else(|| per_conn(cfg.bandwidth_cap_bps));
    let (in_rd, in_wr) = inbound.into_split();
    let (out_rd, out_wr) = outbound.into_split();
    let delay = cfg.one_way_delay();
    let up = Direction {
        bucket: up_bucket,
        delay,
        window: cfg.window_bytes,
    };
    let down = Direction {
        bucket: down_bucket,
        delay,
        window: cfg.window_bytes,
    };
    let run = async { tokio::try_join!(up.pump(in_rd, out_wr), down.pump(out_rd, in_wr)) };
    tokio::select! {
        _ = cancel.cancelled() => tracing::debug!(%peer, "relay connection killed"),
        res = run => if let Err(e) = res {
            tracing::debug!(%peer, "relay connection ended: {e}");
        },
    }
}

struct Direction {
    bucket: Option<Arc<TokenBucket>>,
    delay: Duration,
    window: Option<u64>,
}

impl Direction {
    async fn pump(&self, mut rd: OwnedReadHalf, mut wr: OwnedWriteHalf) -> std::io::Result<()> {
        let limit = self.window.unwrap_or(QUEUE_LIMIT) as usize;
        let chunk = CHUNK.min(limit);
        let credit = Arc::new(Semaphore::new(limit));
        let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, Bytes)>();
        let (ack_tx, mut ack_rx) = mpsc::unbounded_channel::<(Instant, usize)>();

        let reader = async {
            let mut buf = vec![0u8; chunk];
            loop {
                credit
                    .acquire_many(chunk as u32)
                    .await
                    .expect("credit semaphore never closes")
                    .forget();
                let n = match rd.read(&mut buf).await {
                    Ok(n) => n,
                    Err(e) => {
                        drop(tx);
                        return Err(e);
                    }
                };
                credit.add_permits(chunk - n);
                if n == 0 {
                    break;
                }
                if let Some(bucket) = &self.bucket {
                    bucket.take(n).await;
                }
                if tx
                    .send((Instant::now() + self.delay, Bytes::copy_from_slice(&buf[..n])))
                    .is_err()
                {
                    break;
                }
            }
            drop(tx);
            Ok(())
        };
        let writer = async {
            while let Some((at, data)) = rx.recv().await {
                tokio::time::sleep_until(at).await;
                wr.write_all(&data).await?;
                if self.window.is_some() {
                    let _ = ack_tx.send((Instant::now() + self.delay, data.len()));
                } else {
                    credit.add_permits(data.len());
                }
            }
            drop(ack_tx);
            wr.shutdown().await
        };
        let acks = async {
            while let Some((at, n)) = ack_rx.recv().await {
                tokio::time::sleep_until(at).await;
                credit.add_permits(n);
            }
            Ok(())
        };
        tokio::try_join!(reader, writer, acks).map(|_| ())
    }
}
