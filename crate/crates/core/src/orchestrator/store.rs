use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use serde_json::json;
use thiserror::Error;

use super::Measurement;

/// Version tag of the header line written at the top of a new store.
pub const STORE_FORMAT: u32 = 1;
const HEADER_KEY: &str = "tpcbench_store";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Append-only JSON-lines file of [`Measurement`]s. The first line of a new
/// file is a metadata header recording how source objects are chosen.
pub struct CampaignStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl CampaignStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if file.metadata().map_err(io)?.len() == 0 {
            let header = json!({
                HEADER_KEY: STORE_FORMAT,
                "source_objects": "distinct",
                "note": "each measurement copies `concurrency` distinct seeded source files",
                "created": Utc::now().to_rfc3339(),
            });
            writeln!(file, "{header}").map_err(io)?;
            file.flush().map_err(io)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one record as a single line. Appends are serialized.
    pub fn append(&self, m: &Measurement) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(m).expect("measurement serializes");
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes())
            .and_then(|()| file.flush())
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })
    }

    pub fn load(&self) -> Result<Vec<Measurement>, StoreError> {
        Self::read(&self.path)
    }

    /// Every record in the file at `path`, in append order.
    pub fn read(path: &Path) -> Result<Vec<Measurement>, StoreError> {
        let file = File::open(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| StoreError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| StoreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if value.get(HEADER_KEY).is_some() {
                continue;
            }
            out.push(serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?);
        }
        Ok(out)
    }
}
