//! Probe responder plus the RTT and raw-throughput probes that talk to it.
//!
//! Wire protocol (plain TCP, not TLS). The client's first byte picks a mode:
//! - `E`: echo. Every 8-byte ping is written straight back.
//! - `T`: throughput. Frames of a u32 big-endian length followed by that
//!   many bytes; a zero length ends the run and the responder answers with
//!   u64 bytes received and u64 nanoseconds between the mode byte and the
//!   end frame, both big-endian.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use rand::RngCore;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::{JoinHandle, JoinSet};
use tokio_util::sync::CancellationToken;

const MODE_ECHO: u8 = b'E';
const MODE_THROUGHPUT: u8 = b'T';
const FRAME: usize = 64 * 1024;
const MAX_FRAME: u32 = 16 << 20;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("at least {min} samples are required, got {got}")]
    Samples { min: usize, got: usize },
    #[error("stream count must be at least 1")]
    Streams,
    #[error("duration must be positive")]
    Duration,
    #[error("cannot reach probe peer {peer}: {source}")]
    Connect {
        peer: String,
        #[source]
        source: std::io::Error,
    },
    #[error("probe I/O with {peer}: {source}")]
    Io {
        peer: String,
        #[source]
        source: std::io::Error,
    },
    #[error("probe peer {0} sent a bad reply")]
    Protocol(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

pub struct ProbeHandle {
    local_addr: SocketAddr,
    cancel: CancellationToken,
    task: JoinHandle<()>,
}

impl ProbeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub async fn shutdown(self) {
        self.cancel.cancel();
        let _ = self.task.await;
    }

    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

/// Starts a probe responder.
pub async fn serve_probe(listen: SocketAddr) -> Result<ProbeHandle, ProbeError> {
    let listener = TcpListener::bind(listen)
        .await
        .map_err(|source| ProbeError::Bind { addr: listen, source })?;
    let local_addr = listener
        .local_addr()
        .map_err(|source| ProbeError::Bind { addr: listen, source })?;
    let cancel = CancellationToken::new();
    let token = cancel.clone();
    let task = tokio::spawn(async move {
        let mut conns = JoinSet::new();
        loop {
            tokio::select! {
                _ = token.cancelled() => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        conns.spawn(async move {
                            if let Err(e) = respond(stream).await {
                                tracing::debug!(%peer, "probe connection: {e}");
                            }
                        });
                    }
                    Err(e) => tracing::warn!("probe accept failed: {e}"),
                },
                Some(_) = conns.join_next(), if !conns.is_empty() => {}
            }
        }
        conns.abort_all();
    });
    Ok(ProbeHandle {
        local_addr,
        cancel,
        task,
    })
}

async fn respond(mut stream: TcpStream) -> std::io::Result<()> {
    stream.set_nodelay(true).ok();
    let mode = stream.read_u8().await?;
    let started = Instant::now();
    match mode {
        MODE_ECHO => {
            let mut ping = [0u8; 8];
            loop {
                match stream.read_exact(&mut ping).await {
                    Ok(_) => stream.write_all(&ping).await?,
                    Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
                    Err(e) => return Err(e),
                }
            }
        }
        MODE_THROUGHPUT => {
            let mut received = 0u64;
            let mut buf = vec![0u8; FRAME];
            loop {
                let len = stream.read_u32().await?;
                if len == 0 {
                    break;
                }
                if len > MAX_FRAME {
                    return Err(std::io::Error::other("frame too large"));
                }
                let mut left = len as usize;
                while left > 0 {
                    let take = left.min(buf.len());
                    stream.read_exact(&mut buf[..take]).await?;
                    left -= take;
                }
                received += u64::from(len);
            }
            let elapsed = started.elapsed().as_nanos() as u64;
            stream.write_u64(received).await?;
            stream.write_u64(elapsed).await?;
            stream.flush().await
        }
        other => Err(std::io::Error::other(format!("unknown probe mode {other:#x}"))),
    }
}

async fn connect(peer: &str) -> Result<TcpStream, ProbeError> {
    let stream = TcpStream::connect(peer)
        .await
        .map_err(|source| ProbeError::Connect {
            peer: peer.to_string(),
            source,
        })?;
    stream.set_nodelay(true).ok();
    Ok(stream)
}

fn io_err(peer: &str) -> impl Fn(std::io::Error) -> ProbeError + '_ {
    move |source| ProbeError::Io {
        peer: peer.to_string(),
        source,
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median application-level echo round trip to `peer`, in milliseconds.
pub async fn measure_rtt(peer: &str, samples: usize) -> Result<f64, ProbeError> {
    if samples < 3 {
        return Err(ProbeError::Samples { min: 3, got: samples });
    }
    let mut stream = connect(peer).await?;
    let err = io_err(peer);
    stream.write_u8(MODE_ECHO).await.map_err(&err)?;
    let mut rtts = Vec::with_capacity(samples);
    let mut reply = [0u8; 8];
    for seq in 0..samples as u64 {
        let ping = seq.to_be_bytes();
        let sent = Instant::now();
        stream.write_all(&ping).await.map_err(&err)?;
        stream.read_exact(&mut reply).await.map_err(&err)?;
        let rtt = sent.elapsed();
        if reply != ping {
            return Err(ProbeError::Protocol(peer.to_string()));
        }
        rtts.push(rtt.as_secs_f64() * 1e3);
    }
    Ok(median(rtts))
}

async fn push_stream(peer: String, deadline: Instant) -> Result<(u64, Duration), ProbeError> {
    let mut stream = connect(&peer).await?;
    let err = io_err(&peer);
    let mut payload = vec![0u8; FRAME];
    rand::thread_rng().fill_bytes(&mut payload);
    let mut frame = Vec::with_capacity(FRAME + 4);
    frame.extend_from_slice(&(FRAME as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    stream.write_u8(MODE_THROUGHPUT).await.map_err(&err)?;
    while Instant::now() < deadline {
        stream.write_all(&frame).await.map_err(&err)?;
    }
    stream.write_u32(0).await.map_err(&err)?;
    stream.flush().await.map_err(&err)?;
    let received = stream.read_u64().await.map_err(&err)?;
    let nanos = stream.read_u64().await.map_err(&err)?;
    Ok((received, Duration::from_nanos(nanos)))
}

/// Pushes generated bytes over `stream_count` TCP connections for about
/// `duration` and returns the aggregate rate in Gbps. Bytes are counted
/// and timed at the receiver, so data still sitting in socket buffers
/// when the sender stops is not credited early.
pub async fn raw_throughput_probe(
    peer: &str,
    stream_count: usize,
    duration: Duration,
) -> Result<f64, ProbeError> {
    if stream_count == 0 {
        return Err(ProbeError::Streams);
    }
    if duration.is_zero() {
        return Err(ProbeError::Duration);
    }
    let deadline = Instant::now() + duration;
    let mut tasks = JoinSet::new();
    for _ in 0..stream_count {
        tasks.spawn(push_stream(peer.to_string(), deadline));
    }
    let mut total = 0u64;
    let mut longest = Duration::ZERO;
    while let Some(joined) = tasks.join_next().await {
        let (bytes, elapsed) = joined.map_err(|e| ProbeError::Protocol(format!("{peer}: {e}")))??;
        total += bytes;
        longest = longest.max(elapsed);
    }
    if longest.is_zero() {
        return Err(ProbeError::Protocol(peer.to_string()));
    }
    Ok(total as f64 * 8.0 / longest.as_secs_f64() / 1e9)
}
