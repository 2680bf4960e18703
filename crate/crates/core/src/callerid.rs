//! Caller-ID normalization and per-feed number indexes.
//!
//! A [`FeedIndex`] stores every valid caller ID of a feed in a digit trie, so a
//! lookup walks at most 15 nodes regardless of how many numbers are stored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CallRecord, Feed, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    TooShort,
    TooLong,
    BadNanpPattern,
    NonNumeric,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvalidReason::TooShort => "too-short",
            InvalidReason::TooLong => "too-long",
            InvalidReason::BadNanpPattern => "bad-nanp-pattern",
            InvalidReason::NonNumeric => "non-numeric",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid caller id `{raw}`: {reason}")]
pub struct InvalidNumber {
    pub raw: String,
    pub reason: InvalidReason,
}

#[derive(Debug, Error)]
pub enum CallerIdError {
    #[error("target feed is empty")]
    EmptyTarget,
    #[error("feeds share no numbers")]
    NoSharedNumbers,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `+` followed by 8 to 15 digits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct E164Number(String);

// Two-digit ITU country codes; codes starting with 1 or 7 have one digit, all others three.
const TWO_DIGIT_CODES: &[&str] = &[
    "20", "27", "30", "31", "32", "33", "34", "36", "39", "40", "41", "43", "44", "45", "46", "47",
    "48", "49", "51", "52", "53", "54", "55", "56", "57", "58", "60", "61", "62", "63", "64", "65",
    "66", "81", "82", "84", "86", "90", "91", "92", "93", "94", "95", "98",
];

impl E164Number {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Digits without the leading `+`.
    pub fn digits(&self) -> &str {
        &self.0[1..]
    }

    pub fn country_code(&self) -> &str {
        let d = self.digits();
        let len = match d.as_bytes()[0] {
            b'1' | b'7' => 1,
            _ if TWO_DIGIT_CODES.contains(&&d[..2]) => 2,
            _ => 3,
        };
        &d[..len]
    }

    pub fn is_nanp(&self) -> bool {
        self.country_code() == "1"
    }
}

impl fmt::Display for E164Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn nanp_pattern(ten: &[u8]) -> bool {
    ten.len() == 10 && (b'2'..=b'9').contains(&ten[0]) && (b'2'..=b'9').contains(&ten[3])
}

/// Normalizes a raw caller ID, assuming the NANP for numbers without a `+`.
/// A `011` international prefix is read as `+`.
pub fn normalize_to_e164(raw: &str) -> Result<E164Number, InvalidNumber> {
    let fail = |reason| InvalidNumber {
        raw: raw.to_string(),
        reason,
    };
    let trimmed = raw.trim();
    if trimmed.chars().any(char::is_alphabetic) {
        return Err(fail(InvalidReason::NonNumeric));
    }
    let digits: Vec<u8> = trimmed.bytes().filter(u8::is_ascii_digit).collect();
    if digits.is_empty() {
        return Err(fail(InvalidReason::NonNumeric));
    }
    let (plus, digits) = if trimmed.starts_with('+') {
        (true, &digits[..])
    } else if digits.starts_with(b"011") && digits.len() > 11 {
        (true, &digits[3..])
    } else {
        (false, &digits[..])
    };
    let nanp = |ten: &[u8]| {
        if nanp_pattern(ten) {
            Ok(E164Number(format!(
                "+1{}",
                std::str::from_utf8(ten).unwrap()
            )))
        } else {
            Err(fail(InvalidReason::BadNanpPattern))
        }
    };
    if plus {
        if digits.len() < 8 {
            return Err(fail(InvalidReason::TooShort));
        }
        if digits.len() > 15 {
            return Err(fail(InvalidReason::TooLong));
        }
        if digits[0] == b'0' {
            return Err(fail(InvalidReason::BadNanpPattern));
        }
        if digits[0] == b'1' {
            return match digits.len() {
                11 => nanp(&digits[1..]),
                n if n < 11 => Err(fail(InvalidReason::TooShort)),
                _ => Err(fail(InvalidReason::TooLong)),
            };
        }
        return Ok(E164Number(format!(
            "+{}",
            std::str::from_utf8(digits).unwrap()
        )));
    }
    match digits.len() {
        n if n < 10 => Err(fail(InvalidReason::TooShort)),
        10 => nanp(digits),
        11 if digits[0] == b'1' => nanp(&digits[1..]),
        11 => Err(fail(InvalidReason::BadNanpPattern)),
        _ => Err(fail(InvalidReason::TooLong)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumberStats {
    pub number: E164Number,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
    pub count: u64,
}

const NO_ENTRY: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct TrieNode {
    children: [u32; 10],
    entry: u32,
}

impl TrieNode {
    const EMPTY: TrieNode = TrieNode {
        children: [0; 10],
        entry: NO_ENTRY,
    };
}

/// Valid caller IDs of one feed with first/last sighting and occurrence count.
#[derive(Debug, Clone)]
pub struct FeedIndex {
    feed_id: String,
    window_start: Timestamp,
    window_end: Timestamp,
    // node 0 is the root; a child index of 0 means absent
    nodes: Vec<TrieNode>,
    entries: Vec<NumberStats>,
    total_events: u64,
    invalid: BTreeMap<InvalidReason, u64>,
}

impl FeedIndex {
    pub fn new(feed_id: impl Into<String>, window_start: Timestamp, window_end: Timestamp) -> Self {
        FeedIndex {
            feed_id: feed_id.into(),
            window_start,
            window_end,
            nodes: vec![TrieNode::EMPTY],
            entries: Vec::new(),
            total_events: 0,
            invalid: BTreeMap::new(),
        }
    }

    pub fn feed_id(&self) -> &str {
        &self.feed_id
    }

    pub fn window(&self) -> (Timestamp, Timestamp) {
        (self.window_start, self.window_end)
    }

    /// Records one sighting spanning `[first, last]`.
    pub fn insert(&mut self, number: &E164Number, first: Timestamp, last: Timestamp) {
        self.total_events += 1;
        let mut node = 0usize;
        for b in number.digits().bytes() {
            let d = (b - b'0') as usize;
            let next = self.nodes[node].children[d];
            node = if next == 0 {
                self.nodes.push(TrieNode::EMPTY);
                let idx = self.nodes.len() - 1;
                self.nodes[node].children[d] = idx as u32;
                idx
            } else {
                next as usize
            };
        }
        match self.nodes[node].entry {
            NO_ENTRY => {
                self.nodes[node].entry = self.entries.len() as u32;
                self.entries.push(NumberStats {
                    number: number.clone(),
                    first_seen: first,
                    last_seen: last,
                    count: 1,
                });
            }
            e => {
                let s = &mut self.entries[e as usize];
                s.first_seen = s.first_seen.min(first);
                s.last_seen = s.last_seen.max(last);
                s.count += 1;
            }
        }
    }

    pub fn record_invalid(&mut self, reason: InvalidReason) {
        self.total_events += 1;
        *self.invalid.entry(reason).or_insert(0) += 1;
    }

    /// Exact lookup by digit string, with or without the leading `+`.
    pub fn get(&self, number: &str) -> Option<&NumberStats> {
        let digits = number.strip_prefix('+').unwrap_or(number);
        let mut node = 0usize;
        for b in digits.bytes() {
            if !b.is_ascii_digit() {
                return None;
            }
            let next = self.nodes[node].children[(b - b'0') as usize];
            if next == 0 {
                return None;
            }
            node = next as usize;
        }
        match self.nodes[node].entry {
            NO_ENTRY => None,
            e => Some(&self.entries[e as usize]),
        }
    }

    pub fn contains(&self, number: &str) -> bool {
        self.get(number).is_some()
    }

    /// Number of distinct valid numbers.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All sightings, valid or not.
    pub fn total_events(&self) -> u64 {
        self.total_events
    }

    pub fn invalid_count(&self) -> u64 {
        self.invalid.values().sum()
    }

    pub fn invalid_by_reason(&self) -> &BTreeMap<InvalidReason, u64> {
        &self.invalid
    }

    /// Stored numbers in insertion order.
    pub fn entries(&self) -> &[NumberStats] {
        &self.entries
    }

    pub fn nanp_count(&self) -> usize {
        self.entries.iter().filter(|e| e.number.is_nanp()).count()
    }
}

pub fn index_records<'a>(
    feed_id: &str,
    window: (Timestamp, Timestamp),
    records: impl IntoIterator<Item = &'a CallRecord>,
) -> FeedIndex {
    let mut idx = FeedIndex::new(feed_id, window.0, window.1);
    for r in records {
        match normalize_to_e164(&r.caller_id_raw) {
            Ok(n) => idx.insert(&n, r.first_attempt(), r.last_attempt()),
            Err(e) => idx.record_invalid(e.reason),
        }
    }
    idx
}

pub fn index_feed(feed: &Feed) -> FeedIndex {
    index_records(
        &feed.feed_id,
        (feed.window_start, feed.window_end),
        &feed.records,
    )
}

/// Indexes only the records whose first attempt falls inside `[start, end]`;
/// the index window becomes that interval.
pub fn index_feed_within(feed: &Feed, start: Timestamp, end: Timestamp) -> FeedIndex {
    index_records(
        &feed.feed_id,
        (start, end),
        feed.records
            .iter()
            .filter(|r| (start..=end).contains(&r.first_attempt())),
    )
}

/// Intersection of two closed windows, if any.
pub fn window_intersection(
    a: (Timestamp, Timestamp),
    b: (Timestamp, Timestamp),
) -> Option<(Timestamp, Timestamp)> {
    let start = a.0.max(b.0);
    let end = a.1.min(b.1);
    (start <= end).then_some((start, end))
}

/// Calendar days touched by a closed window.
fn calendar_days(w: Option<(Timestamp, Timestamp)>) -> i64 {
    w.map_or(0, |(s, e)| e.day_index() - s.day_index() + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub feed_a: String,
    pub feed_b: String,
    pub nanp_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_start: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_end: Option<Timestamp>,
    pub window_days: i64,
    pub total_events_a: u64,
    pub total_events_b: u64,
    pub unique_valid_a: usize,
    pub unique_valid_b: usize,
    pub overlap_unique: usize,
    pub first_seen_wins_a: usize,
    pub first_seen_wins_b: usize,
}

fn considered(idx: &FeedIndex, nanp_only: bool) -> impl Iterator<Item = &NumberStats> {
    idx.entries
        .iter()
        .filter(move |e| !nanp_only || e.number.is_nanp())
}

/// Shared-number counts between two indexes. First-seen ties go to the feed with
/// the smaller id (to `a` when the ids are equal).
pub fn feed_overlap(a: &FeedIndex, b: &FeedIndex, nanp_only: bool) -> OverlapReport {
    let window = window_intersection(a.window(), b.window());
    let a_wins_ties = a.feed_id <= b.feed_id;
    let (mut overlap, mut wins_a, mut wins_b) = (0, 0, 0);
    for ea in considered(a, nanp_only) {
        if let Some(eb) = b.get(ea.number.digits()) {
            overlap += 1;
            let a_first = match ea.first_seen.cmp(&eb.first_seen) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => a_wins_ties,
            };
            if a_first {
                wins_a += 1;
            } else {
                wins_b += 1;
            }
        }
    }
    OverlapReport {
        feed_a: a.feed_id.clone(),
        feed_b: b.feed_id.clone(),
        nanp_only,
        window_start: window.map(|w| w.0),
        window_end: window.map(|w| w.1),
        window_days: calendar_days(window),
        total_events_a: a.total_events,
        total_events_b: b.total_events,
        unique_valid_a: considered(a, nanp_only).count(),
        unique_valid_b: considered(b, nanp_only).count(),
        overlap_unique: overlap,
        first_seen_wins_a: wins_a,
        first_seen_wins_b: wins_b,
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BlocklistMode<'a> {
    /// Target calls whose caller ID appears anywhere in the source index.
    Cross(&'a FeedIndex),
    /// Target calls whose caller ID appeared in a strictly earlier call of the same feed.
    SameFeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlocklistResult {
    pub mode: String,
    pub considered_calls: usize,
    pub blocked_calls: usize,
    pub block_rate: f64,
    /// Blocked flag per target record, in input order.
    #[serde(skip)]
    pub blocked: Vec<bool>,
}

/// Fraction of target calls a caller-ID blocklist would have stopped. Calls
/// with invalid caller IDs stay in the denominator unless `exclude_invalid`.
pub fn blocklist_effectiveness(
    mode: BlocklistMode<'_>,
    target: &[CallRecord],
    exclude_invalid: bool,
) -> Result<BlocklistResult, CallerIdError> {
    let numbers: Vec<Option<E164Number>> = target
        .iter()
        .map(|r| normalize_to_e164(&r.caller_id_raw).ok())
        .collect();
    let mut blocked = vec![false; target.len()];
    let mode_name = match mode {
        BlocklistMode::Cross(source) => {
            for (flag, n) in blocked.iter_mut().zip(&numbers) {
                *flag = n.as_ref().is_some_and(|n| source.contains(n.digits()));
            }
            "cross"
        }
        BlocklistMode::SameFeed => {
            let mut order: Vec<usize> = (0..target.len()).collect();
            order.sort_by_key(|&i| target[i].first_attempt());
            let mut first_seen: HashMap<&str, Timestamp> = HashMap::new();
            for &i in &order {
                let Some(n) = &numbers[i] else { continue };
                let t = target[i].first_attempt();
                match first_seen.get(n.digits()) {
                    Some(&seen) => blocked[i] = seen < t,
                    None => {
                        first_seen.insert(n.digits(), t);
                    }
                }
            }
            "same"
        }
    };
    let considered = if exclude_invalid {
        numbers.iter().filter(|n| n.is_some()).count()
    } else {
        target.len()
    };
    if considered == 0 {
        return Err(CallerIdError::EmptyTarget);
    }
    let blocked_calls = blocked.iter().filter(|&&b| b).count();
    Ok(BlocklistResult {
        mode: mode_name.to_string(),
        considered_calls: considered,
        blocked_calls,
        block_rate: blocked_calls as f64 / considered as f64,
        blocked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstSeenReport {
    pub feed_a: String,
    pub feed_b: String,
    pub shared_numbers: usize,
    /// Calendar-day difference `first_seen_a - first_seen_b` to number count.
    pub histogram: BTreeMap<i64, usize>,
    pub median_days: f64,
}

pub fn first_seen_comparison(
    a: &FeedIndex,
    b: &FeedIndex,
    nanp_only: bool,
) -> Result<FirstSeenReport, CallerIdError> {
    let mut diffs: Vec<i64> = considered(a, nanp_only)
        .filter_map(|ea| {
            b.get(ea.number.digits())
                .map(|eb| ea.first_seen.day_index() - eb.first_seen.day_index())
        })
        .collect();
    if diffs.is_empty() {
        return Err(CallerIdError::NoSharedNumbers);
    }
    diffs.sort_unstable();
    let mut histogram = BTreeMap::new();
    for &d in &diffs {
        *histogram.entry(d).or_insert(0) += 1;
    }
    let n = diffs.len();
    let median_days = if n % 2 == 1 {
        diffs[n / 2] as f64
    } else {
        (diffs[n / 2 - 1] + diffs[n / 2]) as f64 / 2.0
    };
    Ok(FirstSeenReport {
        feed_a: a.feed_id.clone(),
        feed_b: b.feed_id.clone(),
        shared_numbers: n,
        histogram,
        median_days,
    })
}

/// One heatmap cell: share of `row_feed`'s unique numbers also seen in `col_feed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub row_feed: String,
    pub col_feed: String,
    pub overlap_unique: usize,
    pub row_unique: usize,
    pub overlap_fraction: f64,
}

pub fn heatmap_cells(report: &OverlapReport) -> [HeatmapCell; 2] {
    let cell = |row: &str, col: &str, row_unique: usize| HeatmapCell {
        row_feed: row.to_string(),
        col_feed: col.to_string(),
        overlap_unique: report.overlap_unique,
        row_unique,
        overlap_fraction: if row_unique == 0 {
            0.0
        } else {
            report.overlap_unique as f64 / row_unique as f64
        },
    };
    [
        cell(&report.feed_a, &report.feed_b, report.unique_valid_a),
        cell(&report.feed_b, &report.feed_a, report.unique_valid_b),
    ]
}

pub fn write_heatmap_csv(path: &Path, cells: &[HeatmapCell]) -> Result<(), CallerIdError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CallerIdError::Io {
            path: path.display().to_string(),
            source,
        },
        other => CallerIdError::Io {
            path: path.display().to_string(),
            source: io::Error::other(format!("{other:?}")),
        },
    })?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush().map_err(|source| CallerIdError::Io {
        path: path.display().to_string(),
        source,
    })
}
