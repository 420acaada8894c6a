//! CAN 2.0 frame ingestion and byte-pair decomposition.
//!
//! Two text formats are understood:
//!
//! - candump logs: `(TIMESTAMP) CHANNEL AID#HEXDATA`, with `AID#R` for remote
//!   frames and 8-digit AIDs for extended frames.
//! - CSV: `timestamp,aid_hex,data_hex`, header row optional.
//!
//! A frame payload is zero padded to 8 bytes and split into four 16-bit
//! signals, one per consecutive byte pair. The first wire byte of a pair is
//! the high-order byte.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CodecError;

/// Largest standard (11-bit) arbitration ID plus one.
pub const STANDARD_AID_LIMIT: u32 = 1 << 11;
/// Largest extended (29-bit) arbitration ID plus one.
pub const EXTENDED_AID_LIMIT: u32 = 1 << 29;

const CAN_ERR_FLAG: u32 = 0x2000_0000;
const MAX_PAYLOAD: usize = 8;

/// One timestamped CAN data frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CanFrame {
    /// Seconds since capture start.
    pub timestamp: f64,
    pub aid: u32,
    pub extended: bool,
    payload: [u8; MAX_PAYLOAD],
    len: u8,
    pub channel: String,
}

impl CanFrame {
    pub fn new(timestamp: f64, aid: u32, payload: &[u8], channel: impl Into<String>) -> Result<Self, CodecError> {
        let extended = aid >= STANDARD_AID_LIMIT;
        Self::with_format(timestamp, aid, extended, payload, channel)
    }

    pub fn with_format(
        timestamp: f64,
        aid: u32,
        extended: bool,
        payload: &[u8],
        channel: impl Into<String>,
    ) -> Result<Self, CodecError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(CodecError::PayloadTooLong(payload.len()));
        }
        let limit = if extended {
            EXTENDED_AID_LIMIT
        } else {
            STANDARD_AID_LIMIT
        };
        if aid >= limit {
            return Err(CodecError::AidOutOfRange { aid, extended });
        }
        if !(timestamp.is_finite() && timestamp >= 0.0) {
            return Err(CodecError::BadTimestamp(timestamp.to_string()));
        }
        let mut buf = [0u8; MAX_PAYLOAD];
        buf[..payload.len()].copy_from_slice(payload);
        Ok(Self {
            timestamp,
            aid,
            extended,
            payload: buf,
            len: payload.len() as u8,
            channel: channel.into(),
        })
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload[..self.len as usize]
    }

    /// Payload right-padded with zeros to 8 bytes.
    pub fn padded_payload(&self) -> [u8; MAX_PAYLOAD] {
        self.payload
    }

    /// Replace the value carried by one byte pair, padding the payload to 8
    /// bytes if the pair lies beyond the current length.
    pub fn set_pair(&mut self, pair_index: u8, value: u16) {
        let i = 2 * pair_index as usize;
        let [hi, lo] = value.to_be_bytes();
        self.payload[i] = hi;
        self.payload[i + 1] = lo;
        self.len = self.len.max(i as u8 + 2);
    }
}

/// Identity of one byte-pair signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BytePairId {
    pub aid: u32,
    pub pair_index: u8,
}

impl BytePairId {
    pub fn new(aid: u32, pair_index: u8) -> Self {
        assert!(pair_index < 4, "pair index {pair_index} out of range");
        Self { aid, pair_index }
    }
}

impl fmt::Display for BytePairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03X}:{}", self.aid, self.pair_index)
    }
}

impl FromStr for BytePairId {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CodecError::MalformedLine(s.to_string());
        let (aid, idx) = s.split_once(':').ok_or_else(bad)?;
        let aid = u32::from_str_radix(aid, 16).map_err(|_| bad())?;
        let pair_index: u8 = idx.parse().map_err(|_| bad())?;
        if pair_index > 3 || aid >= EXTENDED_AID_LIMIT {
            return Err(bad());
        }
        Ok(Self { aid, pair_index })
    }
}

impl Serialize for BytePairId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BytePairId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A 16-bit byte-pair value.
pub type BytePairValue = u16;

/// Split a frame into its four byte-pair signals.
pub fn decompose(frame: &CanFrame) -> [(BytePairId, BytePairValue); 4] {
    let p = frame.padded_payload();
    std::array::from_fn(|i| {
        (
            BytePairId {
                aid: frame.aid,
                pair_index: i as u8,
            },
            u16::from_be_bytes([p[2 * i], p[2 * i + 1]]),
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    #[default]
    Candump,
    Csv,
}

impl FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "candump" => Ok(Self::Candump),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown log format {other:?} (expected candump or csv)")),
        }
    }
}

/// Outcome of parsing one log line.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Data(CanFrame),
    Remote,
    ErrorFrame,
    /// Blank line, comment, or CSV header.
    Ignored,
}

pub fn parse_log_line(line: &str, format: LogFormat) -> Result<Record, CodecError> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(Record::Ignored);
    }
    match format {
        LogFormat::Candump => parse_candump(line),
        LogFormat::Csv => parse_csv(line),
    }
}

fn parse_candump(line: &str) -> Result<Record, CodecError> {
    let malformed = || CodecError::MalformedLine(line.to_string());
    let rest = line.strip_prefix('(').ok_or_else(malformed)?;
    let (ts, rest) = rest.split_once(')').ok_or_else(malformed)?;
    let timestamp = parse_timestamp(ts)?;
    let mut fields = rest.split_whitespace();
    let channel = fields.next().ok_or_else(malformed)?;
    let body = fields.next().ok_or_else(malformed)?;
    // candump -l may append a direction flag; anything more is not ours
    if fields.nth(1).is_some() {
        return Err(malformed());
    }
    let (aid_hex, data) = body.split_once('#').ok_or_else(malformed)?;
    if data.starts_with('#') {
        // CAN FD
        return Err(malformed());
    }
    if aid_hex.is_empty() || aid_hex.len() > 8 {
        return Err(malformed());
    }
    let raw = u32::from_str_radix(aid_hex, 16).map_err(|_| CodecError::BadHex(aid_hex.into()))?;
    if raw & CAN_ERR_FLAG != 0 {
        return Ok(Record::ErrorFrame);
    }
    if data.eq_ignore_ascii_case("r") || data.starts_with(['R', 'r']) {
        return Ok(Record::Remote);
    }
    let extended = aid_hex.len() > 3;
    let payload = parse_hex_payload(data)?;
    CanFrame::with_format(timestamp, raw, extended, &payload, channel).map(Record::Data)
}

fn parse_csv(line: &str) -> Result<Record, CodecError> {
    let malformed = || CodecError::MalformedLine(line.to_string());
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(malformed());
    }
    if fields[0].eq_ignore_ascii_case("timestamp") {
        return Ok(Record::Ignored);
    }
    let timestamp = parse_timestamp(fields[0])?;
    let aid_hex = fields[1]
        .strip_prefix("0x")
        .or_else(|| fields[1].strip_prefix("0X"))
        .unwrap_or(fields[1]);
    if aid_hex.is_empty() || aid_hex.len() > 8 {
        return Err(malformed());
    }
    let aid = u32::from_str_radix(aid_hex, 16).map_err(|_| CodecError::BadHex(aid_hex.into()))?;
    let payload = parse_hex_payload(fields[2])?;
    CanFrame::new(timestamp, aid, &payload, "csv").map(Record::Data)
}

fn parse_timestamp(s: &str) -> Result<f64, CodecError> {
    let t: f64 = s.trim().parse().map_err(|_| CodecError::BadTimestamp(s.to_string()))?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(CodecError::BadTimestamp(s.to_string()));
    }
    Ok(t)
}

fn parse_hex_payload(data: &str) -> Result<Vec<u8>, CodecError> {
    if data.len() > 2 * MAX_PAYLOAD {
        return Err(CodecError::PayloadTooLong(data.len().div_ceil(2)));
    }
    if !data.len().is_multiple_of(2) {
        return Err(CodecError::BadHex(data.to_string()));
    }
    (0..data.len())
        .step_by(2)
        .map(|i| {
            data.get(i..i + 2)
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| CodecError::BadHex(data.to_string()))
        })
        .collect()
}

pub fn format_log_line(frame: &CanFrame, format: LogFormat) -> String {
    let data: String = frame.payload().iter().map(|b| format!("{b:02X}")).collect();
    match format {
        LogFormat::Candump => {
            let aid = if frame.extended {
                format!("{:08X}", frame.aid)
            } else {
                format!("{:03X}", frame.aid)
            };
            format!("({:.6}) {} {}#{}", frame.timestamp, frame.channel, aid, data)
        }
        LogFormat::Csv => format!("{},{:X},{}", frame.timestamp, frame.aid, data),
    }
}

/// Counters kept while reading a log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub data_frames: usize,
    pub remote_frames: usize,
    pub error_frames: usize,
    pub ignored_lines: usize,
}

/// Parse a whole log from a reader. The returned frames are stably sorted by
/// timestamp; remote and error frames are counted and dropped.
pub fn read_log<R: BufRead>(reader: R, format: LogFormat) -> Result<(Vec<CanFrame>, IngestStats), CodecError> {
    let mut frames = Vec::new();
    let mut stats = IngestStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CodecError::Io(e.to_string()))?;
        match parse_log_line(&line, format).map_err(|e| e.at_line(lineno + 1))? {
            Record::Data(f) => {
                stats.data_frames += 1;
                frames.push(f);
            }
            Record::Remote => stats.remote_frames += 1,
            Record::ErrorFrame => stats.error_frames += 1,
            Record::Ignored => stats.ignored_lines += 1,
        }
    }
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok((frames, stats))
}

pub fn read_log_file(path: &Path, format: LogFormat) -> Result<(Vec<CanFrame>, IngestStats), CodecError> {
    let file = File::open(path).map_err(|e| CodecError::Io(format!("{}: {e}", path.display())))?;
    read_log(BufReader::new(file), format)
}
