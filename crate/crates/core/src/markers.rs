//! Performance-marker stream carried in a COPY response body.
//!
//! ```text
//! Perf Marker
//! Timestamp: <unix-seconds>
//! Stripe Index: <i>
//! Stripe Bytes Transferred: <b>
//! Total Stripe Count: <k>
//! End
//! ```
//!
//! Zero or more blocks are followed by exactly one terminal line,
//! `success: Created` or `failure: <reason>`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONTENT_TYPE: &str = "text/perf-marker-stream";
pub const SUCCESS_LINE: &str = "success: Created\n";

const MAX_LINE: usize = 4096;

const HEADER: &str = "Perf Marker";
const FIELDS: [&str; 4] = [
    "Timestamp: ",
    "Stripe Index: ",
    "Stripe Bytes Transferred: ",
    "Total Stripe Count: ",
];
const END: &str = "End";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfMarker {
    pub timestamp: u64,
    pub stripe_index: u32,
    pub stripe_bytes_transferred: u64,
    pub total_stripe_count: u32,
}

impl PerfMarker {
    pub fn encode(&self) -> String {
        format!(
            "{HEADER}\nTimestamp: {}\nStripe Index: {}\nStripe Bytes Transferred: {}\nTotal Stripe Count: {}\n{END}\n",
            self.timestamp, self.stripe_index, self.stripe_bytes_transferred, self.total_stripe_count
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum Terminal {
    Success,
    Failure(String),
}

impl Terminal {
    pub fn encode(&self) -> String {
        match self {
            Terminal::Success => SUCCESS_LINE.to_string(),
            Terminal::Failure(reason) => format!("failure: {}\n", sanitize_reason(reason)),
        }
    }
}

/// Failure reasons must stay on one line.
pub fn sanitize_reason(reason: &str) -> String {
    let one_line: String = reason
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    if one_line.trim().is_empty() {
        "unspecified error".to_string()
    } else {
        one_line
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed perf-marker stream at byte {offset}: {message}")]
pub struct MarkerParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MarkerEvent {
    Marker(PerfMarker),
    Terminal(Terminal),
}

#[derive(Debug, Clone, Copy)]
enum State {
    Idle,
    Field(usize),
    ExpectEnd,
    Done,
}

/// Incremental parser; feed body chunks as they arrive.
#[derive(Debug)]
pub struct MarkerParser {
    pending: Vec<u8>,
    // Offset of `pending[0]` in the whole stream.
    offset: usize,
    state: State,
    block_start: usize,
    values: [u64; 4],
}

impl Default for MarkerParser {
    fn default() -> Self {
        Self::new()
    }
}

impl MarkerParser {
    pub fn new() -> Self {
        Self {
            pending: Vec::new(),
            offset: 0,
            state: State::Idle,
            block_start: 0,
            values: [0; 4],
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.state, State::Done)
    }

    fn error(offset: usize, message: impl Into<String>) -> MarkerParseError {
        MarkerParseError {
            offset,
            message: message.into(),
        }
    }

    pub fn feed(&mut self, data: &[u8]) -> Result<Vec<MarkerEvent>, MarkerParseError> {
        self.pending.extend_from_slice(data);
        let mut events = Vec::new();
        let mut start = 0;
        while let Some(pos) = self.pending[start..].iter().position(|&b| b == b'\n') {
            let line_offset = self.offset + start;
            let raw = &self.pending[start..start + pos];
            let line = std::str::from_utf8(raw)
                .map_err(|_| Self::error(line_offset, "line is not valid UTF-8"))?
                .to_owned();
            start += pos + 1;
            if let Some(event) = self.line(&line, line_offset)? {
                events.push(event);
            }
        }
        self.pending.drain(..start);
        self.offset += start;
        if self.pending.len() > MAX_LINE {
            return Err(Self::error(self.offset, "line too long"));
        }
        Ok(events)
    }

    fn line(&mut self, line: &str, at: usize) -> Result<Option<MarkerEvent>, MarkerParseError> {
        match self.state {
            State::Done => Err(Self::error(at, "data after terminal line")),
            State::Idle => {
                if line == HEADER {
                    self.state = State::Field(0);
                    self.block_start = at;
                    Ok(None)
                } else if line == "success: Created" {
                    self.state = State::Done;
                    Ok(Some(MarkerEvent::Terminal(Terminal::Success)))
                } else if let Some(reason) = line.strip_prefix("failure: ") {
                    self.state = State::Done;
                    Ok(Some(MarkerEvent::Terminal(Terminal::Failure(reason.to_string()))))
                } else {
                    Err(Self::error(at, format!("unexpected line {line:?}")))
                }
            }
            State::Field(i) => {
                let prefix = FIELDS[i];
                let value = line
                    .strip_prefix(prefix)
                    .ok_or_else(|| Self::error(at, format!("expected `{}`", prefix.trim_end())))?;
                if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(Self::error(at, format!("bad integer {value:?}")));
                }
                self.values[i] = value
                    .parse()
                    .map_err(|_| Self::error(at, format!("integer out of range {value:?}")))?;
                self.state = if i + 1 < FIELDS.len() {
                    State::Field(i + 1)
                } else {
                    State::ExpectEnd
                };
                Ok(None)
            }
            State::ExpectEnd => {
                if line != END {
                    return Err(Self::error(at, "expected `End`"));
                }
                self.state = State::Idle;
                let [timestamp, index, bytes, count] = self.values;
                let (Ok(stripe_index), Ok(total_stripe_count)) = (u32::try_from(index), u32::try_from(count))
                else {
                    return Err(Self::error(self.block_start, "stripe numbers out of range"));
                };
                if total_stripe_count == 0 || stripe_index >= total_stripe_count {
                    return Err(Self::error(
                        self.block_start,
                        format!("stripe index {stripe_index} not below stripe count {total_stripe_count}"),
                    ));
                }
                Ok(Some(MarkerEvent::Marker(PerfMarker {
                    timestamp,
                    stripe_index,
                    stripe_bytes_transferred: bytes,
                    total_stripe_count,
                })))
            }
        }
    }

    /// Call at end of stream.
    pub fn finish(&self) -> Result<(), MarkerParseError> {
        if !self.pending.is_empty() {
            return Err(Self::error(self.offset, "unterminated line"));
        }
        match self.state {
            State::Done => Ok(()),
            State::Idle => Err(Self::error(self.offset, "stream ended without terminal line")),
            State::Field(_) | State::ExpectEnd => Err(Self::error(
                self.block_start,
                "stream ended inside a marker block",
            )),
        }
    }
}

/// Parses a complete COPY response body.
pub fn parse_perf_markers(body: &[u8]) -> Result<(Vec<PerfMarker>, Terminal), MarkerParseError> {
    let mut parser = MarkerParser::new();
    let mut markers = Vec::new();
    let mut terminal = None;
    for event in parser.feed(body)? {
        match event {
            MarkerEvent::Marker(m) => markers.push(m),
            MarkerEvent::Terminal(t) => terminal = Some(t),
        }
    }
    parser.finish()?;
    Ok((markers, terminal.expect("finish() guarantees a terminal")))
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::Success => write!(f, "success"),
            Terminal::Failure(reason) => write!(f, "failure: {reason}"),
        }
    }
}
