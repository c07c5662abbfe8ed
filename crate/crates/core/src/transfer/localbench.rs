use std::time::Instant;

use thiserror::Error;
use tokio::io::AsyncReadExt;
use tokio::sync::Barrier;
use tokio::task::JoinSet;

use crate::storage::{ObjectBody, ObjectPath, Storage, StorageBackend, StorageError, StorageKind};

const COPY_BUFFER: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum LocalBenchError {
    #[error("concurrency must be at least 1")]
    Concurrency,
    #[error("file size must be at least 1 byte")]
    Size,
    #[error("insufficient memory: need {needed} bytes, {available} available")]
    InsufficientMemory { needed: u64, available: u64 },
    #[error("storage: {0}")]
    Storage(#[from] StorageError),
    #[error("copy task failed: {0}")]
    Task(String),
}

/// `MemAvailable` from /proc/meminfo, in bytes, where the platform has it.
fn available_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

async fn copy_one(src: Storage, dst: Storage, path: ObjectPath) -> Result<u64, StorageError> {
    let read = src.read(&path, None).await?;
    let staged = dst.stage(&path).await?;
    let mut sink = staged.sink(0, Some(read.len)).await?;
    match read.body {
        ObjectBody::Memory(bytes) => {
            for chunk in bytes.chunks(COPY_BUFFER) {
                sink.write(chunk).await?;
            }
        }
        ObjectBody::File { file, len } => {
            let mut file = file.take(len);
            let mut buf = vec![0u8; COPY_BUFFER];
            loop {
                let n = file.read(&mut buf).await?;
                if n == 0 {
                    break;
                }
                sink.write(&buf[..n]).await?;
            }
        }
    }
    let segment = sink.finish().await?;
    staged.commit(vec![segment]).await?;
    Ok(read.len)
}

/// Runs `concurrency` simultaneous in-process copies of distinct
/// `file_size_bytes` objects between two storage areas and returns the
/// aggregate rate in Gbps (total bits / wall clock).
pub async fn local_copy_benchmark(
    concurrency: usize,
    file_size_bytes: u64,
    backend: &StorageBackend,
) -> Result<f64, LocalBenchError> {
    if concurrency == 0 {
        return Err(LocalBenchError::Concurrency);
    }
    if file_size_bytes == 0 {
        return Err(LocalBenchError::Size);
    }
    let (src_cfg, dst_cfg) = match &backend.kind {
        StorageKind::Memory => {
            // Sources plus copies, and the copy buffer each sink grows.
            let needed = file_size_bytes
                .saturating_mul(concurrency as u64)
                .saturating_mul(2);
            if let Some(available) = available_memory() {
                if needed > available {
                    return Err(LocalBenchError::InsufficientMemory { needed, available });
                }
            }
            (StorageBackend::memory(), StorageBackend::memory())
        }
        StorageKind::Disk { root } => (
            StorageBackend::disk(root.join("localbench-src")),
            StorageBackend::disk(root.join("localbench-dst")),
        ),
    };
    for cfg in [&src_cfg, &dst_cfg] {
        if let StorageKind::Disk { root } = &cfg.kind {
            std::fs::create_dir_all(root).map_err(StorageError::from)?;
        }
    }
    let src = Storage::open(&src_cfg)?;
    let dst = Storage::open(&dst_cfg)?;

    let mut paths = Vec::with_capacity(concurrency);
    for i in 0..concurrency {
        let path = ObjectPath::parse(&format!("/localbench/file-{i}"))?;
        src.generate_test_file(&path, file_size_bytes, i as u64).await?;
        paths.push(path);
    }

    let barrier = std::sync::Arc::new(Barrier::new(concurrency + 1));
    let mut tasks = JoinSet::new();
    for path in paths.iter().cloned() {
        let (src, dst, barrier) = (src.clone(), dst.clone(), barrier.clone());
        tasks.spawn(async move {
            barrier.wait().await;
            copy_one(src, dst, path).await
        });
    }
    barrier.wait().await;
    let start = Instant::now();
    let mut total = 0u64;
    let mut failure = None;
    while let Some(joined) = tasks.join_next().await {
        match joined {
            Ok(Ok(n)) => total += n,
            Ok(Err(e)) => failure = Some(LocalBenchError::Storage(e)),
            Err(e) => failure = Some(LocalBenchError::Task(e.to_string())),
        }
    }
    let elapsed = start.elapsed().as_secs_f64();

    for path in &paths {
        let _ = src.delete(path).await;
        let _ = dst.delete(path).await;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(total as f64 * 8.0 / elapsed / 1e9)
}
