use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::orchestrator::Measurement;

pub const DEFAULT_GOOD_GBPS: f64 = 20.0;
pub const DEFAULT_WARN_GBPS: f64 = 5.0;

const CELL_W: usize = 96;
const CELL_H: usize = 44;
const LABEL_W: usize = 140;
const LABEL_H: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub good_gbps: f64,
    pub warn_gbps: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            good_gbps: DEFAULT_GOOD_GBPS,
            warn_gbps: DEFAULT_WARN_GBPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorClass {
    Good,
    Warn,
    Bad,
    Missing,
}

impl ColorClass {
    /// Boundaries are inclusive: exactly `good_gbps` is good.
    pub fn classify(value: Option<f64>, t: &Thresholds) -> Self {
        match value {
            None => ColorClass::Missing,
            Some(v) if v >= t.good_gbps => ColorClass::Good,
            Some(v) if v >= t.warn_gbps => ColorClass::Warn,
            Some(_) => ColorClass::Bad,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColorClass::Good => "good",
            ColorClass::Warn => "warn",
            ColorClass::Bad => "bad",
            ColorClass::Missing => "missing",
        }
    }

    fn fill(self) -> &'static str {
        match self {
            ColorClass::Good => "#3a9d4a",
            ColorClass::Warn => "#e0b526",
            ColorClass::Bad => "#c8413b",
            ColorClass::Missing => "#d9d9d9",
        }
    }
}

/// Which measurements feed the grid. `None` fields match everything; the
/// time window is inclusive at both ends.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GridSelector {
    pub adapter: Option<String>,
    pub stream_count: Option<u32>,
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
}

impl GridSelector {
    pub fn matches(&self, m: &Measurement) -> bool {
        self.adapter.as_ref().map_or(true, |a| *a == m.adapter)
            && self.stream_count.map_or(true, |s| s == m.stream_count)
            && self.since.map_or(true, |t| m.timestamp >= t)
            && self.until.map_or(true, |t| m.timestamp <= t)
    }

    fn describe(&self) -> String {
        let adapter = self.adapter.as_deref().unwrap_or("all adapters");
        let streams = self
            .stream_count
            .map_or("all stream counts".to_string(), |s| format!("{s} stream(s)"));
        let mut text = format!("{adapter}, {streams}");
        if let Some(t) = self.since {
            let _ = write!(text, ", from {}", t.to_rfc3339());
        }
        if let Some(t) = self.until {
            let _ = write!(text, ", until {}", t.to_rfc3339());
        }
        text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub throughput_gbps: Option<f64>,
    pub color_class: ColorClass,
    pub timestamp: Option<DateTime<Utc>>,
}

/// Source (rows) by destination (columns) grid of the latest throughput.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    pub cells: Vec<Vec<GridCell>>,
    pub thresholds: Thresholds,
    pub selector: GridSelector,
}

impl GridReport {
    /// Labels are every endpoint named by a selected measurement, sorted;
    /// each cell holds the latest selected measurement for its pair (ties
    /// go to the later record in input order).
    pub fn build(measurements: &[Measurement], thresholds: Thresholds, selector: GridSelector) -> Self {
        let selected: Vec<&Measurement> = measurements.iter().filter(|m| selector.matches(m)).collect();
        let labels: Vec<String> = selected
            .iter()
            .flat_map(|m| [m.source.clone(), m.destination.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut latest: BTreeMap<(&str, &str), &Measurement> = BTreeMap::new();
        for m in &selected {
            let key = (m.source.as_str(), m.destination.as_str());
            match latest.get(&key) {
                Some(prev) if prev.timestamp > m.timestamp => {}
                _ => {
                    latest.insert(key, m);
                }
            }
        }
        let cells = labels
            .iter()
            .map(|src| {
                labels
                    .iter()
                    .map(|dst| {
                        let m = (src != dst)
                            .then(|| latest.get(&(src.as_str(), dst.as_str())))
                            .flatten();
                        let value = m.map(|m| m.throughput_gbps);
                        GridCell {
                            throughput_gbps: value,
                            color_class: ColorClass::classify(value, &thresholds),
                            timestamp: m.map(|m| m.timestamp),
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            row_labels: labels.clone(),
            column_labels: labels,
            cells,
            thresholds,
            selector,
        }
    }

    pub fn populated(&self) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|c| c.throughput_gbps.is_some())
            .count()
    }

    pub fn to_html(&self) -> String {
        let mut out = String::new();
        out.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
        out.push_str("<title>TPC throughput grid</title>\n<style>\n");
        out.push_str("body{font-family:sans-serif;margin:24px;color:#222}\n");
        out.push_str(
            "svg text{font-size:12px}\n.legend span{display:inline-block;padding:2px 8px;margin-right:6px}\n",
        );
        out.push_str("</style>\n</head>\n<body>\n<h1>TPC throughput grid</h1>\n");
        let _ = writeln!(out, "<p>Selection: {}.</p>", escape(&self.selector.describe()));
        if self.row_labels.is_empty() {
            out.push_str("<p class=\"empty\">no data</p>\n</body>\n</html>\n");
            return out;
        }
        let t = self.thresholds;
        let _ = writeln!(
            out,
            "<p class=\"legend\"><span style=\"background:{}\">good &gt;= {} Gbps</span><span style=\"background:{}\">warn &gt;= {} Gbps</span><span style=\"background:{}\">bad</span><span style=\"background:{}\">no data</span></p>",
            ColorClass::Good.fill(),
            t.good_gbps,
            ColorClass::Warn.fill(),
            t.warn_gbps,
            ColorClass::Bad.fill(),
            ColorClass::Missing.fill()
        );
        let n = self.row_labels.len();
        let width = LABEL_W + n * CELL_W + 10;
        let height = LABEL_H + n * CELL_H + 10;
        let _ = writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
        );
        let _ = writeln!(
            out,
            "<text x=\"4\" y=\"{}\" font-weight=\"bold\">source \\ destination</text>",
            LABEL_H - 8
        );
        for (j, label) in self.column_labels.iter().enumerate() {
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                LABEL_W + j * CELL_W + CELL_W / 2,
                LABEL_H - 24,
                escape(label)
            );
        }
        for (i, row) in self.cells.iter().enumerate() {
            let y = LABEL_H + i * CELL_H;
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                LABEL_W - 8,
                y + CELL_H / 2 + 4,
                escape(&self.row_labels[i])
            );
            for (j, cell) in row.iter().enumerate() {
                let x = LABEL_W + j * CELL_W;
                let title = match (cell.throughput_gbps, cell.timestamp) {
                    (Some(v), Some(ts)) => format!(
                        "{} to {}: {v} Gbps at {}",
                        self.row_labels[i],
                        self.column_labels[j],
                        ts.to_rfc3339()
                    ),
                    _ => format!("{} to {}: no data", self.row_labels[i], self.column_labels[j]),
                };
                let _ = writeln!(
                    out,
                    "<g class=\"cell {}\" data-source=\"{}\" data-destination=\"{}\"><title>{}</title><rect x=\"{x}\" y=\"{y}\" width=\"{}\" height=\"{}\" fill=\"{}\" stroke=\"#ffffff\" stroke-width=\"2\"/>",
                    cell.color_class.as_str(),
                    escape(&self.row_labels[i]),
                    escape(&self.column_labels[j]),
                    escape(&title),
                    CELL_W,
                    CELL_H,
                    cell.color_class.fill()
                );
                if let Some(v) = cell.throughput_gbps {
                    let _ = writeln!(
                        out,
                        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v:.2}</text>",
                        x + CELL_W / 2,
                        y + CELL_H / 2 + 4
                    );
                }
                out.push_str("</g>\n");
            }
        }
        out.push_str("</svg>\n</body>\n</html>\n");
        out
    }
}

/// Renders the grid as a standalone HTML document with inline SVG. The
/// output depends only on the arguments.
pub fn render_grid(measurements: &[Measurement], thresholds: Thresholds, selector: GridSelector) -> String {
    GridReport::build(measurements, thresholds, selector).to_html()
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}
