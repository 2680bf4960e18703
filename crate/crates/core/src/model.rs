//! Domain types shared by every stage, plus the on-disk formats they load from:
//! call-record JSONL, complaint-style CSV and the RCEM embedding matrix.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::points::Points;

pub const MILLIS_PER_DAY: i64 = 86_400_000;

/// RCEM magic bytes.
pub const RCEM_MAGIC: &[u8; 4] = b"RCEM";
pub const RCEM_VERSION: u32 = 1;
const RCEM_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: duplicate call_id `{call_id}`")]
    DuplicateCallId { line: usize, call_id: String },
    #[error("line {line}: record `{call_id}` has feed_id `{found}`, expected `{expected}`")]
    FeedMismatch {
        line: usize,
        call_id: String,
        expected: String,
        found: String,
    },
    #[error("record `{call_id}`: {reason}")]
    InvalidRecord { call_id: String, reason: String },
    #[error("feed contains no records and no header window")]
    EmptyFeed,
    #[error("embedding file has bad magic {0:02x?}, expected \"RCEM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported RCEM version {0}")]
    UnsupportedVersion(u32),
    #[error("embedding payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("embedding payload has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("embedding shape {count}x{dim} overflows addressable memory")]
    ShapeOverflow { count: u32, dim: u32 },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("embedding data length {len} does not match {count} rows of dim {dim}")]
    ShapeMismatch {
        len: usize,
        count: usize,
        dim: usize,
    },
    #[error("sidecar lists {actual} ids, header says {expected}")]
    SidecarMismatch { expected: usize, actual: usize },
    #[error("embedding row {row} (`{id}`) is all zero")]
    ZeroRow { row: usize, id: String },
    #[error("embedding row {row} (`{id}`) has a non-finite entry")]
    NonFinite { row: usize, id: String },
    #[error("embedding row id `{0}` is duplicated or empty")]
    BadRowId(String),
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, ModelError::Io { .. })
    }
}

/// UTC instant with millisecond precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Timestamp(dt.timestamp_millis())
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp_millis(self.0).unwrap_or(DateTime::<Utc>::MIN_UTC)
    }

    /// Days since the epoch, floored.
    pub fn day_index(self) -> i64 {
        self.0.div_euclid(MILLIS_PER_DAY)
    }

    pub fn date(self) -> NaiveDate {
        self.to_datetime().date_naive()
    }

    pub fn plus_millis(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }

    /// Whole days elapsed from `earlier` to `self`, floored.
    pub fn whole_days_since(self, earlier: Timestamp) -> i64 {
        (self.0 - earlier.0).div_euclid(MILLIS_PER_DAY)
    }

    /// Accepts RFC 3339 / ISO-8601 strings or a bare integer of epoch milliseconds.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(ms) = s.parse::<i64>() {
            return Some(Timestamp(ms));
        }
        DateTime::parse_from_rfc3339(s)
            .ok()
            .map(|dt| Timestamp(dt.with_timezone(&Utc).timestamp_millis()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(
            &self
                .to_datetime()
                .to_rfc3339_opts(SecondsFormat::Millis, true),
        )
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Millis(i64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Millis(ms) => Ok(Timestamp(ms)),
            Repr::Text(s) => Timestamp::parse(&s)
                .ok_or_else(|| de::Error::custom(format!("invalid UTC timestamp `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SipAttempt {
    pub invite_time: Timestamp,
}

impl SipAttempt {
    pub fn at(invite_time: Timestamp) -> Self {
        SipAttempt { invite_time }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttestationLevel {
    A,
    B,
    C,
    Unsigned,
}

impl AttestationLevel {
    pub const ALL: [AttestationLevel; 4] = [
        AttestationLevel::A,
        AttestationLevel::B,
        AttestationLevel::C,
        AttestationLevel::Unsigned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttestationLevel::A => "A",
            AttestationLevel::B => "B",
            AttestationLevel::C => "C",
            AttestationLevel::Unsigned => "unsigned",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AttestationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttestationLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(AttestationLevel::A),
            "b" => Ok(AttestationLevel::B),
            "c" => Ok(AttestationLevel::C),
            "unsigned" | "none" | "" => Ok(AttestationLevel::Unsigned),
            other => Err(format!("unknown attestation level `{other}`")),
        }
    }
}

impl Serialize for AttestationLevel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AttestationLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// One observed call and the SIP INVITEs that set it up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_id: String,
    pub feed_id: String,
    pub caller_id_raw: String,
    #[serde(default)]
    pub called_number_raw: String,
    pub attempts: Vec<SipAttempt>,
    pub attestation: AttestationLevel,
    #[serde(default)]
    pub answered: bool,
    /// Unanswered calls frequently omit a duration; absent means 0.
    #[serde(default)]
    pub total_duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voiced_duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    /// Row in the companion embedding matrix; linked by [`join_embeddings`], never serialized.
    #[serde(skip)]
    pub embedding_row: Option<usize>,
}

impl CallRecord {
    pub fn first_attempt(&self) -> Timestamp {
        self.attempts[0].invite_time
    }

    pub fn last_attempt(&self) -> Timestamp {
        self.attempts[self.attempts.len() - 1].invite_time
    }

    /// Sorts attempts and checks the record invariants.
    pub fn normalize(&mut self) -> Result<(), ModelError> {
        let invalid = |reason: &str| ModelError::InvalidRecord {
            call_id: self.call_id.clone(),
            reason: reason.to_string(),
        };
        if self.call_id.is_empty() {
            return Err(invalid("empty call_id"));
        }
        if self.attempts.is_empty() {
            return Err(invalid("attempts must not be empty"));
        }
        if !self.total_duration_s.is_finite() || self.total_duration_s < 0.0 {
            return Err(invalid(
                "total_duration_s must be a finite non-negative number",
            ));
        }
        if let Some(v) = self.voiced_duration_s {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(
                    "voiced_duration_s must be a finite non-negative number",
                ));
            }
            if v > self.total_duration_s {
                return Err(invalid("voiced_duration_s exceeds total_duration_s"));
            }
        }
        self.attempts.sort();
        Ok(())
    }
}

/// All records observed by one vantage point.
#[derive(Debug, Clone, PartialEq)]
pub struct Feed {
    pub feed_id: String,
    pub records: Vec<CallRecord>,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
}

impl Feed {
    /// Builds a feed whose window spans the records' attempts.
    pub fn from_records(
        feed_id: impl Into<String>,
        mut records: Vec<CallRecord>,
    ) -> Result<Self, ModelError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter_mut().enumerate() {
            r.normalize()?;
            if !seen.insert(r.call_id.clone()) {
                return Err(ModelError::DuplicateCallId {
                    line: i + 1,
                    call_id: r.call_id.clone(),
                });
            }
        }
        let (start, end) = attempt_span(&records).ok_or(ModelError::EmptyFeed)?;
        Ok(Feed {
            feed_id: feed_id.into(),
            records,
            window_start: start,
            window_end: end,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record_index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.call_id.as_str(), i))
            .collect()
    }

    /// Same feed restricted to the given records, keeping the original window.
    pub fn with_records(&self, records: Vec<CallRecord>) -> Feed {
        Feed {
            feed_id: self.feed_id.clone(),
            records,
            window_start: self.window_start,
            window_end: self.window_end,
        }
    }
}

fn attempt_span(records: &[CallRecord]) -> Option<(Timestamp, Timestamp)> {
    let start = records.iter().map(CallRecord::first_attempt).min()?;
    let end = records.iter().map(CallRecord::last_attempt).max()?;
    Some((start, end))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Jsonl,
    Csv,
}

impl RecordFormat {
    /// Guesses from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => RecordFormat::Csv,
            _ => RecordFormat::Jsonl,
        }
    }
}

/// Optional first JSONL line: `{"feed_header": {"feed_id": .., "window_start": .., "window_end": ..}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeedHeader {
    feed_id: String,
    window_start: Timestamp,
    window_end: Timestamp,
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    feed_header: &'a FeedHeader,
}

pub fn load_call_records(path: &Path, format: RecordFormat) -> Result<Feed, ModelError> {
    match format {
        RecordFormat::Jsonl => load_jsonl(path),
        RecordFormat::Csv => load_complaint_csv(path),
    }
}

fn load_jsonl(path: &Path) -> Result<Feed, ModelError> {
    let file = fs::File::open(path).map_err(|e| ModelError::io(path, e))?;
    let mut header: Option<FeedHeader> = None;
    let mut records: Vec<CallRecord> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ModelError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| ModelError::Parse {
                line: line_no,
                field: "-".into(),
                message: e.to_string(),
            })?;
        if let Some(h) = value.get("feed_header") {
            if !records.is_empty() || header.is_some() {
                return Err(ModelError::Parse {
                    line: line_no,
                    field: "feed_header".into(),
                    message: "header must be the first line".into(),
                });
            }
            header = Some(parse_value(h.clone(), line_no)?);
            continue;
        }
        let mut record: CallRecord = parse_value(value, line_no)?;
        record.normalize().map_err(|e| match e {
            ModelError::InvalidRecord { reason, .. } => ModelError::Parse {
                line: line_no,
                field: reason_field(&reason).into(),
                message: reason,
            },
            other => other,
        })?;
        let expected = header
            .as_ref()
            .map(|h| h.feed_id.as_str())
            .or_else(|| records.first().map(|r| r.feed_id.as_str()));
        if let Some(expected) = expected {
            if expected != record.feed_id {
                return Err(ModelError::FeedMismatch {
                    line: line_no,
                    call_id: record.call_id,
                    expected: expected.to_string(),
                    found: record.feed_id,
                });
            }
        }
        if !seen.insert(record.call_id.clone()) {
            return Err(ModelError::DuplicateCallId {
                line: line_no,
                call_id: record.call_id,
            });
        }
        records.push(record);
    }

    match header {
        Some(h) => {
            for r in &records {
                if r.first_attempt() < h.window_start || r.last_attempt() > h.window_end {
                    return Err(ModelError::InvalidRecord {
                        call_id: r.call_id.clone(),
                        reason: "attempt outside the header window".into(),
                    });
                }
            }
            Ok(Feed {
                feed_id: h.feed_id,
                records,
                window_start: h.window_start,
                window_end: h.window_end,
            })
        }
        None => {
            let (start, end) = attempt_span(&records).ok_or(ModelError::EmptyFeed)?;
            Ok(Feed {
                feed_id: records[0].feed_id.clone(),
                records,
                window_start: start,
                window_end: end,
            })
        }
    }
}

fn reason_field(reason: &str) -> &'static str {
    if reason.starts_with("attempts") {
        "attempts"
    } else if reason.starts_with("voiced") {
        "voiced_duration_s"
    } else if reason.starts_with("total") {
        "total_duration_s"
    } else {
        "call_id"
    }
}

fn parse_value<T: serde::de::DeserializeOwned>(
    value: serde_json::Value,
    line: usize,
) -> Result<T, ModelError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        // serde reports a missing key at the parent path; pull the name out of the message
        let field = if path == "." {
            inner
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| path.clone())
        } else {
            path
        };
        ModelError::Parse {
            line,
            field,
            message: inner,
        }
    })
}

#[derive(Debug, Deserialize)]
struct ComplaintRow {
    caller_id: String,
    timestamp: String,
    #[serde(default)]
    #[allow(dead_code)]
    category: Option<String>,
    #[serde(default)]
    called_number: Option<String>,
    #[serde(default)]
    call_id: Option<String>,
    #[serde(default)]
    feed_id: Option<String>,
}

/// Complaint-style CSV (`caller_id,timestamp[,category,...]`): one synthesized attempt per row.
fn load_complaint_csv(path: &Path) -> Result<Feed, ModelError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let default_feed = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("feed")
        .to_string();

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(row_idx + 2);
        let parsed: ComplaintRow = row.deserialize(Some(&headers)).map_err(|e| {
            let field = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err
                    .field()
                    .and_then(|i| headers.get(i as usize))
                    .map(str::to_string),
                _ => None,
            };
            ModelError::Parse {
                line,
                field: field.unwrap_or_else(|| "-".into()),
                message: e.to_string(),
            }
        })?;
        let ts = Timestamp::parse(&parsed.timestamp).ok_or_else(|| ModelError::Parse {
            line,
            field: "timestamp".into(),
            message: format!("invalid UTC timestamp `{}`", parsed.timestamp),
        })?;
        let feed_id = parsed.feed_id.unwrap_or_else(|| default_feed.clone());
        let call_id = parsed
            .call_id
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("{feed_id}-{:07}", row_idx + 1));
        if !seen.insert(call_id.clone()) {
            return Err(ModelError::DuplicateCallId { line, call_id });
        }
        records.push(CallRecord {
            call_id,
            feed_id,
            caller_id_raw: parsed.caller_id,
            called_number_raw: parsed.called_number.unwrap_or_default(),
            attempts: vec![SipAttempt::at(ts)],
            attestation: AttestationLevel::Unsigned,
            answered: false,
            total_duration_s: 0.0,
            voiced_duration_s: None,
            transcript: None,
            language: None,
            embedding_row: None,
        });
    }
    let (start, end) = attempt_span(&records).ok_or(ModelError::EmptyFeed)?;
    let feed_id = records[0].feed_id.clone();
    Ok(Feed {
        feed_id,
        records,
        window_start: start,
        window_end: end,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> ModelError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ModelError::io(path, io),
        other => ModelError::Parse {
            line,
            field: "-".into(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes the feed as JSONL with a leading header line carrying the window.
pub fn write_call_records(feed: &Feed, path: &Path) -> Result<(), ModelError> {
    let file = fs::File::create(path).map_err(|e| ModelError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = FeedHeader {
        feed_id: feed.feed_id.clone(),
        window_start: feed.window_start,
        window_end: feed.window_end,
    };
    let io = |e: std::io::Error| ModelError::io(path, e);
    serde_json::to_writer(
        &mut w,
        &HeaderLine {
            feed_header: &header,
        },
    )
    .map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for r in &feed.records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Row-major float32 matrix of audio embeddings, one row per call.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    row_ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, row_ids: Vec<String>) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::ZeroDim);
        }
        if data.len() != row_ids.len() * dim {
            return Err(ModelError::ShapeMismatch {
                len: data.len(),
                count: row_ids.len(),
                dim,
            });
        }
        let mut seen = HashSet::with_capacity(row_ids.len());
        for id in &row_ids {
            if id.is_empty() || !seen.insert(id.as_str()) {
                return Err(ModelError::BadRowId(id.clone()));
            }
        }
        for (row, (values, id)) in data.chunks_exact(dim).zip(&row_ids).enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    row,
                    id: id.clone(),
                });
            }
            if values.iter().all(|v| *v == 0.0) {
                return Err(ModelError::ZeroRow {
                    row,
                    id: id.clone(),
                });
            }
        }
        Ok(EmbeddingMatrix { dim, data, row_ids })
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            dim: dim.max(1),
            data: Vec::new(),
            row_ids: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn points(&self) -> Points<'_> {
        Points::new(&self.data, self.dim)
    }

    /// Rows in the given order, as a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            ids.push(self.row_ids[r].clone());
        }
        EmbeddingMatrix {
            dim: self.dim,
            data,
            row_ids: ids,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::io(path, e))?;
    if bytes.len() < RCEM_HEADER_LEN {
        return Err(ModelError::Truncated {
            expected: RCEM_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
    if &magic != RCEM_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != RCEM_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let (count, dim) = (word(8), word(12));
    if dim == 0 {
        return Err(ModelError::ZeroDim);
    }
    let payload_len = (count as usize)
        .checked_mul(dim as usize)
        .and_then(|n| n.checked_mul(4))
        .filter(|n| n.checked_add(RCEM_HEADER_LEN).is_some())
        .ok_or(ModelError::ShapeOverflow { count, dim })?;
    let payload = &bytes[RCEM_HEADER_LEN..];
    if payload.len() < payload_len {
        return Err(ModelError::Truncated {
            expected: payload_len,
            actual: payload.len(),
        });
    }
    if payload.len() > payload_len {
        return Err(ModelError::TrailingBytes(payload.len() - payload_len));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();

    let ids_path = sidecar_path(path);
    let text = fs::read_to_string(&ids_path).map_err(|e| ModelError::io(&ids_path, e))?;
    let row_ids: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect();
    if row_ids.len() != count as usize {
        return Err(ModelError::SidecarMismatch {
            expected: count as usize,
            actual: row_ids.len(),
        });
    }
    EmbeddingMatrix::new(dim as usize, data, row_ids)
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::io(path, e);
    let mut buf = Vec::with_capacity(RCEM_HEADER_LEN + m.data.len() * 4);
    buf.extend_from_slice(RCEM_MAGIC);
    buf.extend_from_slice(&RCEM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.count() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io)?;
    let ids_path = sidecar_path(path);
    let mut ids = String::new();
    for id in &m.row_ids {
        ids.push_str(id);
        ids.push('\n');
    }
    fs::write(&ids_path, ids).map_err(|e| ModelError::io(&ids_path, e))
}

/// Links records to matrix rows by call_id. Returns the linked feed and one
/// warning per matrix row whose id matches no record.
pub fn join_embeddings(feed: &Feed, m: &EmbeddingMatrix) -> (Feed, Vec<String>) {
    let rows: HashMap<&str, usize> = m
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut out = feed.clone();
    let mut linked = HashSet::new();
    for r in &mut out.records {
        r.embedding_row = rows.get(r.call_id.as_str()).copied();
        if r.embedding_row.is_some() {
            linked.insert(r.call_id.clone());
        }
    }
    let warnings = m
        .row_ids
        .iter()
        .filter(|id| !linked.contains(id.as_str()))
        .map(|id| {
            format!(
                "embedding row `{id}` matches no record in feed `{}`",
                feed.feed_id
            )
        })
        .collect();
    (out, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMember {
    pub call_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub first_attempt: Timestamp,
}

/// Calls from one feed that play the same audio message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub campaign_id: String,
    pub feed_id: String,
    pub members: Vec<CampaignMember>,
    #[serde(default)]
    pub representative_transcripts: Vec<String>,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
}

impl Campaign {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn member_call_ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.call_id.as_str())
    }
}

/// Reads a JSON array of campaigns, or an object holding one under `campaigns`.
pub fn load_campaigns(path: &Path) -> Result<Vec<Campaign>, ModelError> {
    let text = fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| ModelError::Parse {
        line: e.line(),
        field: String::new(),
        message: e.to_string(),
    })?;
    let (list, prefix) = match value {
        serde_json::Value::Object(mut obj) => match obj.remove("campaigns") {
            Some(list) => (list, "campaigns"),
            None => {
                return Err(ModelError::Parse {
                    line: 0,
                    field: "campaigns".into(),
                    message: "missing field".into(),
                })
            }
        },
        other => (other, ""),
    };
    serde_path_to_error::deserialize(list).map_err(|e| {
        let path = e.path().to_string();
        ModelError::Parse {
            line: 0,
            field: match (prefix, path.as_str()) {
                ("", _) => path.clone(),
                (p, ".") => p.to_string(),
                (p, _) => format!("{p}.{path}"),
            },
            message: e.into_inner().to_string(),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn line(id: &str, attempts: &[&str]) -> String {
        serde_json::json!({
            "call_id": id, "feed_id": "obs", "caller_id_raw": "9198675309",
            "called_number_raw": "9195550000", "attempts": attempts,
            "attestation": "A", "answered": true, "total_duration_s": 30.0
        })
        .to_string()
    }

    #[test]
    fn loads_three_records_with_derived_window() {
        let dir = tempfile::tempdir().unwrap();
        let body = [
            line("c1", &["2024-01-02T00:00:00Z"]),
            line("c2", &["2024-01-01T00:00:00.250Z"]),
            line("c3", &["2024-01-05T12:00:00Z"]),
        ]
        .join("\n");
        let feed = load_call_records(&write(&dir, "f.jsonl", &body), RecordFormat::Jsonl).unwrap();
        assert_eq!(feed.len(), 3);
        assert_eq!(feed.feed_id, "obs");
        assert_eq!(feed.window_start.to_string(), "2024-01-01T00:00:00.250Z");
        assert_eq!(feed.window_end.to_string(), "2024-01-05T12:00:00.000Z");
    }

    #[test]
    fn out_of_order_attempts_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let body = line("c1", &["2024-01-01T00:00:10Z", "2024-01-01T00:00:00Z"]);
        let feed = load_call_records(&write(&dir, "f.jsonl", &body), RecordFormat::Jsonl).unwrap();
        let a = &feed.records[0].attempts;
        assert!(a[0].invite_time < a[1].invite_time);
    }

    #[test]
    fn duplicate_call_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = [
            line("c1", &["2024-01-01T00:00:00Z"]),
            line("c1", &["2024-01-01T00:01:00Z"]),
        ]
        .join("\n");
        let err =
            load_call_records(&write(&dir, "f.jsonl", &body), RecordFormat::Jsonl).unwrap_err();
        assert!(
            matches!(err, ModelError::DuplicateCallId { line: 2, .. }),
            "{err}"
        );
    }

    #[test]
    fn malformed_line_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad: serde_json::Value =
            serde_json::from_str(&line("c2", &["2024-01-01T00:00:00Z"])).unwrap();
        bad.as_object_mut().unwrap().remove("caller_id_raw");
        let body = format!("{}\n{}", line("c1", &["2024-01-01T00:00:00Z"]), bad);
        let err =
            load_call_records(&write(&dir, "f.jsonl", &body), RecordFormat::Jsonl).unwrap_err();
        match err {
            ModelError::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "caller_id_raw");
            }
            other => panic!("unexpected {other}"),
        }

        let body = line("c1", &["yesterday"]);
        let err =
            load_call_records(&write(&dir, "g.jsonl", &body), RecordFormat::Jsonl).unwrap_err();
        match err {
            ModelError::Parse { line, field, .. } => {
                assert_eq!(line, 1);
                assert!(field.starts_with("attempts"), "{field}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn header_window_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"feed_header":{"feed_id":"obs","window_start":"2024-01-01T00:00:00Z","window_end":"2024-02-01T00:00:00Z"}}"#;
        let ok = format!("{header}\n{}", line("c1", &["2024-01-10T00:00:00Z"]));
        let feed = load_call_records(&write(&dir, "a.jsonl", &ok), RecordFormat::Jsonl).unwrap();
        assert_eq!(feed.window_end.to_string(), "2024-02-01T00:00:00.000Z");
        let bad = format!("{header}\n{}", line("c1", &["2024-03-10T00:00:00Z"]));
        assert!(load_call_records(&write(&dir, "b.jsonl", &bad), RecordFormat::Jsonl).is_err());
    }

    #[test]
    fn voiced_longer_than_total_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&line("c1", &["2024-01-01T00:00:00Z"])).unwrap();
        v["voiced_duration_s"] = serde_json::json!(45.0);
        let err = load_call_records(&write(&dir, "f.jsonl", &v.to_string()), RecordFormat::Jsonl)
            .unwrap_err();
        assert!(matches!(err, ModelError::Parse { ref field, .. } if field == "voiced_duration_s"));
    }

    #[test]
    fn complaint_csv_synthesizes_one_attempt_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "ftc.csv",
            "caller_id,timestamp,category\n(919) 867-5309,2024-01-01T10:00:00Z,Imposter\n8005550123,1704103200000,\n",
        );
        let feed = load_call_records(&p, RecordFormat::Csv).unwrap();
        assert_eq!(feed.feed_id, "ftc");
        assert_eq!(feed.len(), 2);
        assert_eq!(feed.records[1].attempts.len(), 1);
        assert_eq!(feed.records[0].attestation, AttestationLevel::Unsigned);
        assert_eq!(feed.records[0].call_id, "ftc-0000001");
    }

    #[test]
    fn complaint_csv_bad_timestamp_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "ftc.csv", "caller_id,timestamp\n9198675309,soon\n");
        let err = load_call_records(&p, RecordFormat::Csv).unwrap_err();
        assert!(
            matches!(err, ModelError::Parse { line: 2, ref field, .. } if field == "timestamp")
        );
    }

    fn matrix(ids: &[&str], dim: usize) -> EmbeddingMatrix {
        let data = (0..ids.len() * dim).map(|i| (i % 7) as f32 + 0.5).collect();
        EmbeddingMatrix::new(dim, data, ids.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn rcem_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.rcem");
        let m = matrix(&["a", "b"], 768);
        write_embeddings(&m, &p).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert_eq!((back.count(), back.dim()), (2, 768));
        assert_eq!(back, m);
    }

    #[test]
    fn rcem_empty_matrix_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.rcem");
        write_embeddings(&EmbeddingMatrix::empty(768), &p).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim(), 768);
    }

    #[test]
    fn rcem_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.rcem");
        let m = matrix(&["a", "b"], 4);
        write_embeddings(&m, &p).unwrap();
        let full = fs::read(&p).unwrap();

        fs::write(&p, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            load_embeddings(&p),
            Err(ModelError::Truncated { .. })
        ));

        let mut bad = full.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_embeddings(&p), Err(ModelError::BadMagic(_))));

        let mut big = full[..16].to_vec();
        big[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        big[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        fs::write(&p, &big).unwrap();
        let err = load_embeddings(&p).unwrap_err();
        assert!(
            matches!(
                err,
                ModelError::ShapeOverflow { .. } | ModelError::Truncated { .. }
            ),
            "{err}"
        );

        fs::write(&p, &full).unwrap();
        fs::write(sidecar_path(&p), "a\n").unwrap();
        assert!(matches!(
            load_embeddings(&p),
            Err(ModelError::SidecarMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn zero_row_rejected() {
        let err = EmbeddingMatrix::new(2, vec![1.0, 0.0, 0.0, 0.0], vec!["a".into(), "b".into()])
            .unwrap_err();
        assert!(matches!(err, ModelError::ZeroRow { row: 1, .. }));
    }

    fn feed_of(ids: &[&str]) -> Feed {
        let records = ids
            .iter()
            .enumerate()
            .map(|(i, id)| CallRecord {
                call_id: id.to_string(),
                feed_id: "obs".into(),
                caller_id_raw: "9198675309".into(),
                called_number_raw: String::new(),
                attempts: vec![SipAttempt::at(Timestamp::from_millis(i as i64 * 1000))],
                attestation: AttestationLevel::B,
                answered: true,
                total_duration_s: 10.0,
                voiced_duration_s: None,
                transcript: None,
                language: None,
                embedding_row: None,
            })
            .collect();
        Feed::from_records("obs", records).unwrap()
    }

    #[test]
    fn join_links_known_rows_and_warns_on_strays() {
        let feed = feed_of(&["c1", "c2", "c3"]);
        let m = matrix(&["c3", "c1", "x9"], 3);
        let (joined, warnings) = join_embeddings(&feed, &m);
        let rows: Vec<_> = joined.records.iter().map(|r| r.embedding_row).collect();
        assert_eq!(rows, vec![Some(1), None, Some(0)]);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("x9"));

        let (again, _) = join_embeddings(&joined, &m);
        assert_eq!(again, joined);

        let (unchanged, w) = join_embeddings(&feed, &EmbeddingMatrix::empty(3));
        assert_eq!(unchanged, feed);
        assert!(w.is_empty());
    }

    #[test]
    fn campaigns_load_bare_or_wrapped() {
        let dir = tempfile::tempdir().unwrap();
        let one = r#"{"campaign_id":"k","feed_id":"f","members":[{"call_id":"c1","first_attempt":5}],"first_seen":5,"last_seen":5}"#;
        let bare = write(&dir, "bare.json", &format!("[{one}]"));
        let wrapped = write(
            &dir,
            "wrapped.json",
            &format!(r#"{{"schema_version":1,"campaigns":[{one}]}}"#),
        );
        let a = load_campaigns(&bare).unwrap();
        assert_eq!(a, load_campaigns(&wrapped).unwrap());
        assert_eq!(a[0].members[0].call_id, "c1");

        let missing = write(&dir, "missing.json", r#"{"schema_version":1}"#);
        assert!(matches!(
            load_campaigns(&missing),
            Err(ModelError::Parse { .. })
        ));
        let bad = write(&dir, "bad.json", r#"{"campaigns":[{"campaign_id":3}]}"#);
        match load_campaigns(&bad) {
            Err(ModelError::Parse { field, .. }) => {
                assert!(field.starts_with("campaigns"), "{field}")
            }
            other => panic!("{other:?}"),
        }
    }
}
