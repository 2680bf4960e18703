//! Callback numbers spoken inside call audio, and how long each stays in use.
//!
//! Extraction works on runs: maximal stretches of digit groups and digit words
//! joined only by whitespace or the separators `- . ( ) , +`. Any other word or
//! symbol ends a run.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callerid::{normalize_to_e164, E164Number};
use crate::model::{Campaign, Timestamp};

/// Inserted between concatenated transcripts so no run crosses the join.
pub const BOUNDARY_SENTINEL: &str = " | ";

const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

static TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[0-9]+|[^\W\d_]+|[-.(),+]|\S").expect("static regex"));

#[derive(Debug, Error, PartialEq)]
pub enum CallbackError {
    #[error("no callback hits to summarize")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallbackKind {
    Digit,
    Vocalized,
}

/// A number found in one transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallbackCandidate {
    pub number: E164Number,
    pub kind: CallbackKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallbackHit {
    pub number: E164Number,
    pub kind: CallbackKind,
    pub campaign_id: String,
    pub call_id: String,
    pub observed_at: Timestamp,
}

fn digit_word(w: &str) -> Option<u8> {
    let lower = w.to_ascii_lowercase();
    if lower == "oh" {
        return Some(0);
    }
    DIGIT_WORDS
        .iter()
        .position(|d| *d == lower)
        .map(|i| i as u8)
}

struct Run {
    digits: String,
    vocalized: bool,
}

fn runs(transcript: &str) -> Vec<Run> {
    let mut out = Vec::new();
    let mut cur = Run {
        digits: String::new(),
        vocalized: false,
    };
    let mut flush = |cur: &mut Run| {
        if !cur.digits.is_empty() {
            out.push(std::mem::replace(
                cur,
                Run {
                    digits: String::new(),
                    vocalized: false,
                },
            ));
        }
    };
    for m in TOKEN.find_iter(transcript) {
        let tok = m.as_str();
        if tok.bytes().all(|b| b.is_ascii_digit()) {
            cur.digits.push_str(tok);
        } else if let Some(d) = digit_word(tok) {
            cur.digits.push((b'0' + d) as char);
            cur.vocalized = true;
        } else if !matches!(tok, "-" | "." | "(" | ")" | "," | "+") {
            flush(&mut cur);
        }
    }
    flush(&mut cur);
    out
}

/// A run is a candidate when it has 10 digits, or 11 starting with 1.
fn candidate(digits: &str) -> Option<&str> {
    match digits.len() {
        10 => Some(digits),
        11 if digits.starts_with('1') => Some(digits),
        _ => None,
    }
}

/// Valid NANP numbers in a transcript, first occurrence of each, in text order.
pub fn extract_callback_numbers(transcript: &str) -> Vec<CallbackCandidate> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for run in runs(transcript) {
        let found = candidate(&run.digits)
            .and_then(|c| normalize_to_e164(c).ok())
            .filter(E164Number::is_nanp);
        if let Some(number) = found {
            if seen.insert(number.clone()) {
                out.push(CallbackCandidate {
                    number,
                    kind: if run.vocalized {
                        CallbackKind::Vocalized
                    } else {
                        CallbackKind::Digit
                    },
                });
            }
        }
    }
    out
}

/// Reads a number digit by digit ("eight four four ..."), dropping a leading `+1`.
pub fn spell_number(number: &str) -> String {
    let digits = number.strip_prefix("+1").unwrap_or(number);
    digits
        .bytes()
        .filter(u8::is_ascii_digit)
        .map(|b| DIGIT_WORDS[(b - b'0') as usize])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Hits for every member transcript, in campaign then member order.
pub fn campaign_callback_hits(campaigns: &[Campaign]) -> Vec<CallbackHit> {
    campaigns
        .par_iter()
        .flat_map_iter(|c| {
            c.members.iter().flat_map(move |m| {
                m.transcript
                    .as_deref()
                    .map(extract_callback_numbers)
                    .unwrap_or_default()
                    .into_iter()
                    .map(move |cand| CallbackHit {
                        number: cand.number,
                        kind: cand.kind,
                        campaign_id: c.campaign_id.clone(),
                        call_id: m.call_id.clone(),
                        observed_at: m.first_attempt,
                    })
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumberLifetime {
    pub number: E164Number,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
    pub lifetime_days: i64,
    pub hits: usize,
    pub campaigns: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LifetimeBuckets {
    pub under_one_day: usize,
    pub one_day_to_one_year: usize,
    pub over_one_year: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeSummary {
    pub numbers: usize,
    pub mean_days: f64,
    /// Population standard deviation.
    pub stddev_days: f64,
    pub buckets: LifetimeBuckets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeReport {
    pub summary: LifetimeSummary,
    pub per_number: Vec<NumberLifetime>,
}

/// Lifetime in whole days between first and last sighting of each number.
pub fn callback_lifetimes(hits: &[CallbackHit]) -> Result<LifetimeReport, CallbackError> {
    if hits.is_empty() {
        return Err(CallbackError::Empty);
    }
    let mut per: BTreeMap<&E164Number, (Timestamp, Timestamp, usize, BTreeSet<&str>)> =
        BTreeMap::new();
    for h in hits {
        let e = per
            .entry(&h.number)
            .or_insert((h.observed_at, h.observed_at, 0, BTreeSet::new()));
        e.0 = e.0.min(h.observed_at);
        e.1 = e.1.max(h.observed_at);
        e.2 += 1;
        e.3.insert(&h.campaign_id);
    }
    let per_number: Vec<NumberLifetime> = per
        .into_iter()
        .map(|(n, (first, last, count, campaigns))| NumberLifetime {
            number: n.clone(),
            first_seen: first,
            last_seen: last,
            lifetime_days: last.whole_days_since(first),
            hits: count,
            campaigns: campaigns.into_iter().map(str::to_string).collect(),
        })
        .collect();
    let days: Vec<f64> = per_number.iter().map(|p| p.lifetime_days as f64).collect();
    let n = days.len() as f64;
    let mean = days.iter().sum::<f64>() / n;
    let var = days.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let mut buckets = LifetimeBuckets::default();
    for p in &per_number {
        match p.lifetime_days {
            d if d < 1 => buckets.under_one_day += 1,
            d if d <= 365 => buckets.one_day_to_one_year += 1,
            _ => buckets.over_one_year += 1,
        }
    }
    Ok(LifetimeReport {
        summary: LifetimeSummary {
            numbers: per_number.len(),
            mean_days: mean,
            stddev_days: var.sqrt(),
            buckets,
        },
        per_number,
    })
}
