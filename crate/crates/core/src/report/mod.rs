//! Reports over stored measurements: the source/destination grid, the
//! throughput-versus-latency curves and the single- versus multi-stream
//! comparison. All are pure functions of their input.

mod grid;

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;
use thiserror::Error;

use crate::orchestrator::{aggregate, AggregateError, GroupKey, Measurement};

pub use grid::{
    render_grid, ColorClass, GridCell, GridReport, GridSelector, Thresholds, DEFAULT_GOOD_GBPS,
    DEFAULT_WARN_GBPS,
};

pub const LATENCY_CSV_HEADER: &str = "series,bucket_ms,mean_gbps,count";

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no {class} measurements for adapter {adapter:?}")]
    MissingClass { class: &'static str, adapter: String },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyPoint {
    /// Lower edge of the bucket: `floor(rtt / width) * width`.
    pub bucket_ms: f64,
    pub mean_gbps: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencySeries {
    pub label: String,
    pub adapter: String,
    pub stream_count: u32,
    /// Strictly increasing in `bucket_ms`.
    pub points: Vec<LatencyPoint>,
}

pub fn series_label(adapter: &str, stream_count: u32) -> String {
    format!("{adapter}/{stream_count}")
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Mean throughput per latency bucket, one series per adapter and stream
/// count, plus the same numbers as CSV. Values come straight from
/// [`aggregate`] with the same grouping.
pub fn latency_curve(
    measurements: &[Measurement],
    bucket_width_ms: f64,
) -> Result<(Vec<LatencySeries>, String), ReportError> {
    let mut csv = String::from(LATENCY_CSV_HEADER);
    csv.push('\n');
    if measurements.is_empty() {
        return Ok((Vec::new(), csv));
    }
    let stats = aggregate(
        measurements,
        &[GroupKey::Adapter, GroupKey::StreamCount, GroupKey::LatencyBucket],
        bucket_width_ms,
    )?;
    let mut series: BTreeMap<(String, u32), Vec<LatencyPoint>> = BTreeMap::new();
    for s in stats {
        let adapter = s.group.adapter.expect("grouped by adapter");
        let streams = s.group.stream_count.expect("grouped by stream count");
        let bucket = s.group.latency_bucket.expect("grouped by latency");
        series.entry((adapter, streams)).or_default().push(LatencyPoint {
            bucket_ms: bucket as f64 * bucket_width_ms,
            mean_gbps: s.mean_gbps,
            count: s.count,
        });
    }
    let series: Vec<LatencySeries> = series
        .into_iter()
        .map(|((adapter, stream_count), points)| LatencySeries {
            label: series_label(&adapter, stream_count),
            adapter,
            stream_count,
            points,
        })
        .collect();
    for s in &series {
        for p in &s.points {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                csv_field(&s.label),
                p.bucket_ms,
                p.mean_gbps,
                p.count
            );
        }
    }
    Ok((series, csv))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamComparison {
    pub adapter: String,
    pub mean_single_gbps: f64,
    pub mean_multi_gbps: f64,
    pub single_count: usize,
    pub multi_count: usize,
    /// `100 * (single - multi) / multi`.
    pub advantage_percent: f64,
}

/// Single-stream (stream_count 1) against multi-stream (> 1) means for
/// one adapter.
pub fn compare_streams(measurements: &[Measurement], adapter: &str) -> Result<StreamComparison, ReportError> {
    let of_adapter = measurements.iter().filter(|m| m.adapter == adapter);
    let (single, multi): (Vec<Measurement>, Vec<Measurement>) =
        of_adapter.cloned().partition(|m| m.stream_count == 1);
    let missing = |class| ReportError::MissingClass {
        class,
        adapter: adapter.to_string(),
    };
    if single.is_empty() {
        return Err(missing("single-stream"));
    }
    if multi.is_empty() {
        return Err(missing("multi-stream"));
    }
    let single_stats = &aggregate(&single, &[], 1.0)?[0];
    let multi_stats = &aggregate(&multi, &[], 1.0)?[0];
    let (s, m) = (single_stats.mean_gbps, multi_stats.mean_gbps);
    Ok(StreamComparison {
        adapter: adapter.to_string(),
        mean_single_gbps: s,
        mean_multi_gbps: m,
        single_count: single_stats.count,
        multi_count: multi_stats.count,
        advantage_percent: 100.0 * (s - m) / m,
    })
}
