//! Object storage behind an endpoint: an in-memory namespace or a directory.
//!
//! Writers stage into private buffers (memory) or a staging file (disk) and
//! publish with a single swap or rename, so readers observe either the old
//! or the new object, never a mix. The namespace map is the only shared
//! structure; payload bytes are copied outside of any lock.

use std::collections::HashMap;
use std::fmt;
use std::io::SeekFrom;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use bytes::Bytes;
use thiserror::Error;
use tokio::fs::File;
use tokio::io::{AsyncSeekExt, AsyncWriteExt};

use crate::digest::{Adler32, Digest};
use crate::testdata::TestPattern;

const STAGING_DIR: &str = ".tpcbench-staging";
const READ_CHUNK: usize = 256 * 1024;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("path {0:?} escapes the storage root or is not a valid object path")]
    InvalidPath(String),
    #[error("object {0:?} not found")]
    NotFound(String),
    #[error("range {start}-{end} not satisfiable for object of {size} bytes")]
    RangeNotSatisfiable { start: u64, end: u64, size: u64 },
    #[error("storage capacity of {capacity} bytes exceeded")]
    CapacityExceeded { capacity: u64 },
    #[error("size must be at least one byte")]
    EmptyObject,
    #[error("staged write exceeded its declared range")]
    Overrun,
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// A validated, root-relative object path such as `data/file-01`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectPath(String);

impl ObjectPath {
    pub fn parse(raw: &str) -> Result<Self, StorageError> {
        let invalid = || StorageError::InvalidPath(raw.to_string());
        if raw.contains('\0') || raw.contains('\\') {
            return Err(invalid());
        }
        let mut parts = Vec::new();
        for segment in raw.split('/') {
            match segment {
                "" | "." => continue,
                ".." => return Err(invalid()),
                s => parts.push(s),
            }
        }
        if parts.is_empty() || parts[0] == STAGING_DIR {
            return Err(invalid());
        }
        Ok(Self(parts.join("/")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageKind {
    Memory,
    Disk { root: PathBuf },
}

/// Storage selection for an endpoint: `memory` or `disk:<root>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageBackend {
    pub kind: StorageKind,
    pub capacity_bytes: Option<u64>,
}

impl StorageBackend {
    pub fn memory() -> Self {
        Self {
            kind: StorageKind::Memory,
            capacity_bytes: None,
        }
    }

    pub fn disk(root: impl Into<PathBuf>) -> Self {
        Self {
            kind: StorageKind::Disk { root: root.into() },
            capacity_bytes: None,
        }
    }

    pub fn with_capacity(mut self, bytes: u64) -> Self {
        self.capacity_bytes = Some(bytes);
        self
    }
}

impl FromStr for StorageBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "memory" {
            return Ok(Self::memory());
        }
        match s.strip_prefix("disk:") {
            Some(root) if !root.is_empty() => Ok(Self::disk(root)),
            _ => Err(format!("expected `memory` or `disk:<root>`, got {s:?}")),
        }
    }
}

/// Body of a read: either a slice of an in-memory object or a positioned
/// file handle with a byte budget.
pub enum ObjectBody {
    Memory(Bytes),
    File { file: File, len: u64 },
}

pub struct ObjectRead {
    pub total_size: u64,
    pub offset: u64,
    pub len: u64,
    pub body: ObjectBody,
}

#[derive(Clone)]
pub struct Storage {
    inner: Arc<Inner>,
}

struct Inner {
    backend: Backend,
    capacity: Option<u64>,
    used: Mutex<u64>,
}

enum Backend {
    Memory(RwLock<HashMap<ObjectPath, Bytes>>),
    Disk(PathBuf),
}

impl fmt::Debug for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.inner.backend {
            Backend::Memory(_) => write!(f, "Storage(memory)"),
            Backend::Disk(root) => write!(f, "Storage(disk:{})", root.display()),
        }
    }
}

fn dir_size(path: &Path) -> std::io::Result<u64> {
    let mut total = 0;
    for entry in std::fs::read_dir(path)? {
        let entry = entry?;
        let meta = entry.metadata()?;
        if meta.is_dir() {
            total += dir_size(&entry.path())?;
        } else {
            total += meta.len();
        }
    }
    Ok(total)
}

impl Storage {
    pub fn open(config: &StorageBackend) -> Result<Self, StorageError> {
        let (backend, used) = match &config.kind {
            StorageKind::Memory => (Backend::Memory(RwLock::new(HashMap::new())), 0),
            StorageKind::Disk { root } => {
                std::fs::create_dir_all(root)?;
                let root = root.canonicalize()?;
                let staging = root.join(STAGING_DIR);
                if staging.exists() {
                    std::fs::remove_dir_all(&staging)?;
                }
                std::fs::create_dir_all(&staging)?;
                let used = dir_size(&root)?;
                (Backend::Disk(root), used)
            }
        };
        Ok(Self {
            inner: Arc::new(Inner {
                backend,
                capacity: config.capacity_bytes,
                used: Mutex::new(used),
            }),
        })
    }

    pub fn memory() -> Self {
        Self::open(&StorageBackend::memory()).expect("memory storage cannot fail to open")
    }

    pub fn is_memory(&self) -> bool {
        matches!(self.inner.backend, Backend::Memory(_))
    }

    fn disk_path(root: &Path, path: &ObjectPath) -> PathBuf {
        root.join(path.as_str())
    }

    pub async fn size(&self, path: &ObjectPath) -> Result<u64, StorageError> {
        match &self.inner.backend {
            Backend::Memory(map) => map
                .read()
                .unwrap()
                .get(path)
                .map(|b| b.len() as u64)
                .ok_or_else(|| StorageError::NotFound(path.to_string())),
            Backend::Disk(root) => match tokio::fs::metadata(Self::disk_path(root, path)).await {
                Ok(meta) if meta.is_file() => Ok(meta.len()),
                Ok(_) => Err(StorageError::NotFound(path.to_string())),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    Err(StorageError::NotFound(path.to_string()))
                }
                Err(e) => Err(e.into()),
            },
        }
    }

    pub async fn exists(&self, path: &ObjectPath) -> bool {
        self.size(path).await.is_ok()
    }

    /// Reads the whole object, or the inclusive range `[start, end]`.
    /// `end` is clamped to the last byte.
    pub async fn read(
        &self,
        path: &ObjectPath,
        range: Option<(u64, u64)>,
    ) -> Result<ObjectRead, StorageError> {
        let resolve = |size: u64| -> Result<(u64, u64), StorageError> {
            match range {
                None => Ok((0, size)),
                Some((start, end)) => {
                    if start >= size || end < start {
                        return Err(StorageError::RangeNotSatisfiable { start, end, size });
                    }
                    let end = end.min(size - 1);
                    Ok((start, end - start + 1))
                }
            }
        };
        match &self.inner.backend {
            Backend::Memory(map) => {
                let data = map
                    .read()
                    .unwrap()
                    .get(path)
                    .cloned()
                    .ok_or_else(|| StorageError::NotFound(path.to_string()))?;
                let size = data.len() as u64;
                let (offset, len) = resolve(size)?;
                Ok(ObjectRead {
                    total_size: size,
                    offset,
                    len,
                    body: ObjectBody::Memory(data.slice(offset as usize..(offset + len) as usize)),
                })
            }
            Backend::Disk(root) => {
                let mut file = match File::open(Self::disk_path(root, path)).await {
                    Ok(f) => f,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                        return Err(StorageError::NotFound(path.to_string()))
                    }
                    Err(e) => return Err(e.into()),
                };
                let meta = file.metadata().await?;
                if !meta.is_file() {
                    return Err(StorageError::NotFound(path.to_string()));
                }
                let size = meta.len();
                let (offset, len) = resolve(size)?;
                file.seek(SeekFrom::Start(offset)).await?;
                Ok(ObjectRead {
                    total_size: size,
                    offset,
                    len,
                    body: ObjectBody::File { file, len },
                })
            }
        }
    }

    /// Convenience: whole object as one buffer.
    pub async fn read_all(&self, path: &ObjectPath) -> Result<Bytes, StorageError> {
        let read = self.read(path, None).await?;
        match read.body {
            ObjectBody::Memory(b) => Ok(b),
            ObjectBody::File { mut file, len } => {
                use tokio::io::AsyncReadExt;
                let mut buf = Vec::with_capacity(len as usize);
                file.read_to_end(&mut buf).await?;
                Ok(Bytes::from(buf))
            }
        }
    }

    pub async fn delete(&self, path: &ObjectPath) -> Result<(), StorageError> {
        let freed = match &self.inner.backend {
            Backend::Memory(map) => map
                .write()
                .unwrap()
                .remove(path)
                .map(|b| b.len() as u64)
                .ok_or_else(|| StorageError::NotFound(path.to_string()))?,
            Backend::Disk(root) => {
                let full = Self::disk_path(root, path);
                let size = self.size(path).await?;
                tokio::fs::remove_file(full).await?;
                size
            }
        };
        let mut used = self.inner.used.lock().unwrap();
        *used = used.saturating_sub(freed);
        Ok(())
    }

    /// Starts a staged write of an object. Nothing is visible at `path`
    /// until [`Staged::commit`].
    pub async fn stage(&self, path: &ObjectPath) -> Result<Staged, StorageError> {
        let temp = match &self.inner.backend {
            Backend::Memory(_) => None,
            Backend::Disk(root) => {
                let temp = root
                    .join(STAGING_DIR)
                    .join(uuid::Uuid::new_v4().simple().to_string());
                File::create(&temp).await?;
                Some(temp)
            }
        };
        Ok(Staged {
            storage: self.clone(),
            path: path.clone(),
            temp,
            committed: false,
        })
    }

    /// Rejects objects that could never fit. The exact check, which
    /// accounts for what an overwrite frees, happens at commit.
    fn check_object_fits(&self, len: u64) -> Result<(), StorageError> {
        match self.inner.capacity {
            Some(capacity) if len > capacity => Err(StorageError::CapacityExceeded { capacity }),
            _ => Ok(()),
        }
    }

    /// Adler32 of an object, computed off the async executor.
    pub async fn digest(&self, path: &ObjectPath) -> Result<Digest, StorageError> {
        match &self.inner.backend {
            Backend::Memory(_) => {
                let data = self.read_all(path).await?;
                Ok(tokio::task::spawn_blocking(move || Digest::of(&data))
                    .await
                    .expect("digest task panicked"))
            }
            Backend::Disk(root) => {
                self.size(path).await?;
                let full = Self::disk_path(root, path);
                tokio::task::spawn_blocking(move || -> std::io::Result<Digest> {
                    use std::io::Read;
                    let mut file = std::fs::File::open(full)?;
                    let mut state = Adler32::new();
                    let mut buf = vec![0u8; READ_CHUNK];
                    loop {
                        let n = file.read(&mut buf)?;
                        if n == 0 {
                            break;
                        }
                        state.update(&buf[..n]);
                    }
                    Ok(state.finish())
                })
                .await
                .expect("digest task panicked")
                .map_err(Into::into)
            }
        }
    }

    /// Writes `size_bytes` of seeded pseudo-random content at `path` and
    /// returns its digest.
    pub async fn generate_test_file(
        &self,
        path: &ObjectPath,
        size_bytes: u64,
        seed: u64,
    ) -> Result<Digest, StorageError> {
        if size_bytes == 0 {
            return Err(StorageError::EmptyObject);
        }
        self.check_object_fits(size_bytes)?;
        let staged = self.stage(path).await?;
        let mut sink = staged.sink(0, Some(size_bytes)).await?;
        let mut state = Adler32::new();
        for chunk in TestPattern::new(size_bytes, seed) {
            state.update(&chunk);
            sink.write(&chunk).await?;
        }
        let segment = sink.finish().await?;
        staged.commit(vec![segment]).await?;
        Ok(state.finish())
    }

    pub async fn put_bytes(&self, path: &ObjectPath, data: Bytes) -> Result<(), StorageError> {
        let staged = self.stage(path).await?;
        let mut sink = staged.sink(0, None).await?;
        sink.write(&data).await?;
        let segment = sink.finish().await?;
        staged.commit(vec![segment]).await
    }

    /// Every object path currently stored, sorted.
    pub async fn list(&self) -> Result<Vec<ObjectPath>, StorageError> {
        match &self.inner.backend {
            Backend::Memory(map) => {
                let mut keys: Vec<_> = map.read().unwrap().keys().cloned().collect();
                keys.sort();
                Ok(keys)
            }
            Backend::Disk(root) => {
                let root = root.clone();
                tokio::task::spawn_blocking(move || {
                    fn walk(root: &Path, dir: &Path, out: &mut Vec<ObjectPath>) -> std::io::Result<()> {
                        for entry in std::fs::read_dir(dir)? {
                            let entry = entry?;
                            let path = entry.path();
                            if entry.file_type()?.is_dir() {
                                if path.file_name().is_some_and(|n| n == STAGING_DIR) {
                                    continue;
                                }
                                walk(root, &path, out)?;
                            } else if let Ok(rel) = path.strip_prefix(root) {
                                if let Ok(p) = ObjectPath::parse(&rel.to_string_lossy()) {
                                    out.push(p);
                                }
                            }
                        }
                        Ok(())
                    }
                    let mut out = Vec::new();
                    walk(&root, &root, &mut out)?;
                    out.sort();
                    Ok(out)
                })
                .await
                .expect("list task panicked")
            }
        }
    }
}

/// An in-progress object write. Dropping without commit discards it.
pub struct Staged {
    storage: Storage,
    path: ObjectPath,
    temp: Option<PathBuf>,
    committed: bool,
}

/// Writer for one contiguous region of a staged object, starting at
/// `offset`. Independent sinks can be driven concurrently.
pub struct StripeSink {
    storage: Storage,
    limit: Option<u64>,
    written: u64,
    target: SinkTarget,
}

enum SinkTarget {
    Memory(Vec<u8>),
    Disk(File),
}

/// A finished stripe, handed back to [`Staged::commit`].
pub struct Segment {
    len: u64,
    data: Option<Vec<u8>>,
}

impl Segment {
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl StripeSink {
    pub async fn write(&mut self, data: &[u8]) -> Result<(), StorageError> {
        let n = data.len() as u64;
        if let Some(limit) = self.limit {
            if self.written + n > limit {
                return Err(StorageError::Overrun);
            }
        }
        self.storage.check_object_fits(self.written + n)?;
        match &mut self.target {
            SinkTarget::Memory(buf) => buf.extend_from_slice(data),
            SinkTarget::Disk(file) => file.write_all(data).await?,
        }
        self.written += n;
        Ok(())
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub async fn finish(self) -> Result<Segment, StorageError> {
        match self.target {
            SinkTarget::Memory(buf) => Ok(Segment {
                len: self.written,
                data: Some(buf),
            }),
            SinkTarget::Disk(mut file) => {
                file.flush().await?;
                Ok(Segment {
                    len: self.written,
                    data: None,
                })
            }
        }
    }
}

impl Staged {
    pub fn path(&self) -> &ObjectPath {
        &self.path
    }

    /// Opens a sink for the region starting at `offset`; `len`, when
    /// given, bounds how much may be written.
    pub async fn sink(&self, offset: u64, len: Option<u64>) -> Result<StripeSink, StorageError> {
        let target = match &self.temp {
            None => SinkTarget::Memory(Vec::with_capacity(len.unwrap_or(0) as usize)),
            Some(temp) => {
                let mut file = tokio::fs::OpenOptions::new().write(true).open(temp).await?;
                file.seek(SeekFrom::Start(offset)).await?;
                SinkTarget::Disk(file)
            }
        };
        Ok(StripeSink {
            storage: self.storage.clone(),
            limit: len,
            written: 0,
            target,
        })
    }

    /// Publishes the object. Memory segments are concatenated in the
    /// given order; disk segments were already written in place.
    pub async fn commit(mut self, segments: Vec<Segment>) -> Result<(), StorageError> {
        let total: u64 = segments.iter().map(|s| s.len).sum();
        let previous = self.storage.size(&self.path).await.unwrap_or(0);
        {
            let used = *self.storage.inner.used.lock().unwrap();
            if let Some(capacity) = self.storage.inner.capacity {
                if used.saturating_sub(previous) + total > capacity {
                    return Err(StorageError::CapacityExceeded { capacity });
                }
            }
        }
        match (&self.storage.inner.backend, &self.temp) {
            (Backend::Memory(map), _) => {
                let data = if segments.len() == 1 {
                    Bytes::from(segments.into_iter().next().unwrap().data.unwrap_or_default())
                } else {
                    let mut buf = Vec::with_capacity(total as usize);
                    for segment in segments {
                        buf.extend_from_slice(&segment.data.unwrap_or_default());
                    }
                    Bytes::from(buf)
                };
                map.write().unwrap().insert(self.path.clone(), data);
            }
            (Backend::Disk(root), Some(temp)) => {
                let file = tokio::fs::OpenOptions::new().write(true).open(temp).await?;
                file.set_len(total).await?;
                drop(file);
                let dest = Storage::disk_path(root, &self.path);
                if let Some(parent) = dest.parent() {
                    tokio::fs::create_dir_all(parent).await?;
                }
                tokio::fs::rename(temp, &dest).await?;
            }
            (Backend::Disk(_), None) => unreachable!("disk staging always has a temp file"),
        }
        self.committed = true;
        let mut used = self.storage.inner.used.lock().unwrap();
        *used = used.saturating_sub(previous) + total;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            if let Some(temp) = &self.temp {
                let _ = std::fs::remove_file(temp);
            }
        }
    }
}
