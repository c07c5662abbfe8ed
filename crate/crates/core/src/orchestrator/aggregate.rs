use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Measurement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Adapter,
    StreamCount,
    LatencyBucket,
    Source,
    Destination,
}

/// The grouping values of one group; keys not grouped on are `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct GroupId {
    pub adapter: Option<String>,
    pub stream_count: Option<u32>,
    pub latency_bucket: Option<i64>,
    pub source: Option<String>,
    pub destination: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub group: GroupId,
    pub mean_gbps: f64,
    pub count: usize,
    /// Population standard deviation.
    pub stddev_gbps: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("no measurements to aggregate")]
    Empty,
    #[error("latency bucket width must be positive, got {0}")]
    BucketWidth(f64),
}

/// `floor(rtt_ms / width_ms)`.
pub fn latency_bucket(rtt_ms: f64, width_ms: f64) -> i64 {
    (rtt_ms / width_ms).floor() as i64
}

/// Groups measurements by `keys` and reports mean, count and population
/// standard deviation of `throughput_gbps` per group, ordered by group.
pub fn aggregate(
    measurements: &[Measurement],
    keys: &[GroupKey],
    bucket_width_ms: f64,
) -> Result<Vec<GroupStats>, AggregateError> {
    if measurements.is_empty() {
        return Err(AggregateError::Empty);
    }
    if keys.contains(&GroupKey::LatencyBucket) && !(bucket_width_ms.is_finite() && bucket_width_ms > 0.0) {
        return Err(AggregateError::BucketWidth(bucket_width_ms));
    }
    let mut groups: BTreeMap<GroupId, Vec<f64>> = BTreeMap::new();
    for m in measurements {
        let mut id = GroupId::default();
        for key in keys {
            match key {
                GroupKey::Adapter => id.adapter = Some(m.adapter.clone()),
                GroupKey::StreamCount => id.stream_count = Some(m.stream_count),
                GroupKey::LatencyBucket => {
                    id.latency_bucket = Some(latency_bucket(m.rtt_ms, bucket_width_ms))
                }
                GroupKey::Source => id.source = Some(m.source.clone()),
                GroupKey::Destination => id.destination = Some(m.destination.clone()),
            }
        }
        groups.entry(id).or_default().push(m.throughput_gbps);
    }
    Ok(groups
        .into_iter()
        .map(|(group, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            GroupStats {
                group,
                mean_gbps: mean,
                count: values.len(),
                stddev_gbps: var.sqrt(),
            }
        })
        .collect())
}
