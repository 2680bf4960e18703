//! Signaling-level analytics: voicemail injection from SIP INVITE timing,
//! attestation and volume series, linear trends and language mix.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AttestationLevel, CallRecord, Campaign, Feed, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("multi_attempt_window_s must be > 0, got {0}")]
    InvalidWindow(f64),
    #[error("campaign_fraction_threshold must satisfy 0 < t <= 1, got {0}")]
    InvalidFraction(f64),
    #[error("campaign {campaign} references unknown call `{call_id}` in feed `{feed_id}`")]
    UnknownCall {
        campaign: String,
        feed_id: String,
        call_id: String,
    },
    #[error("trend needs >= 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("trend x values have zero variance")]
    DegenerateX,
    #[error("non-finite value in trend input")]
    NonFinite,
    #[error("unknown bucket `{0}` (expected day or month)")]
    UnknownBucket(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Day,
    #[default]
    Month,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Day => "day",
            Bucket::Month => "month",
        })
    }
}

impl FromStr for Bucket {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "day" => Ok(Bucket::Day),
            "month" => Ok(Bucket::Month),
            other => Err(SignalError::UnknownBucket(other.to_string())),
        }
    }
}

impl Bucket {
    /// Consecutive integer index of the bucket holding `t`.
    pub fn index(self, t: Timestamp) -> i64 {
        match self {
            Bucket::Day => t.day_index(),
            Bucket::Month => {
                let d = t.date();
                d.year() as i64 * 12 + d.month0() as i64
            }
        }
    }

    pub fn label(self, index: i64) -> String {
        match self {
            Bucket::Day => {
                let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date");
                (epoch + chrono::Duration::days(index))
                    .format("%Y-%m-%d")
                    .to_string()
            }
            Bucket::Month => format!(
                "{:04}-{:02}",
                index.div_euclid(12),
                index.rem_euclid(12) + 1
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub multi_attempt_window_s: f64,
    /// A campaign is flagged when its multi-attempt fraction is strictly above this.
    pub campaign_fraction_threshold: f64,
    pub trend_bucket: Bucket,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            multi_attempt_window_s: 15.0,
            campaign_fraction_threshold: 0.90,
            trend_bucket: Bucket::Month,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.multi_attempt_window_s > 0.0 && self.multi_attempt_window_s.is_finite()) {
            return Err(SignalError::InvalidWindow(self.multi_attempt_window_s));
        }
        let f = self.campaign_fraction_threshold;
        if !(f > 0.0 && f <= 1.0) {
            return Err(SignalError::InvalidFraction(f));
        }
        Ok(())
    }

    fn window_ms(&self) -> i64 {
        (self.multi_attempt_window_s * 1000.0).round() as i64
    }
}

/// True when two consecutive INVITEs are at most the window apart.
pub fn detect_multi_attempt(record: &CallRecord, cfg: &SignalConfig) -> bool {
    let w = cfg.window_ms();
    record
        .attempts
        .windows(2)
        .any(|p| p[1].invite_time.millis() - p[0].invite_time.millis() <= w)
}

/// Records addressable by `(feed_id, call_id)`.
#[derive(Debug, Default)]
pub struct RecordIndex<'a> {
    map: HashMap<(&'a str, &'a str), &'a CallRecord>,
}

impl<'a> RecordIndex<'a> {
    pub fn from_feeds(feeds: impl IntoIterator<Item = &'a Feed>) -> Self {
        let mut map = HashMap::new();
        for f in feeds {
            for r in &f.records {
                map.insert((f.feed_id.as_str(), r.call_id.as_str()), r);
            }
        }
        RecordIndex { map }
    }

    pub fn get(&self, feed_id: &str, call_id: &str) -> Option<&'a CallRecord> {
        self.map.get(&(feed_id, call_id)).copied()
    }

    fn member_records(&self, c: &Campaign) -> Result<Vec<&'a CallRecord>, SignalError> {
        c.members
            .iter()
            .map(|m| {
                self.get(&c.feed_id, &m.call_id)
                    .ok_or_else(|| SignalError::UnknownCall {
                        campaign: c.campaign_id.clone(),
                        feed_id: c.feed_id.clone(),
                        call_id: m.call_id.clone(),
                    })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignVoicemail {
    pub campaign_id: String,
    pub feed_id: String,
    pub calls: usize,
    pub multi_attempt_calls: usize,
    pub multi_attempt_fraction: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoicemailReport {
    pub multi_attempt_window_s: f64,
    pub campaign_fraction_threshold: f64,
    pub campaigns_total: usize,
    /// Campaigns with at least one multi-attempt call, flagged or not.
    pub candidates: Vec<CampaignVoicemail>,
    pub flagged: Vec<String>,
}

pub fn voicemail_injection_campaigns(
    campaigns: &[Campaign],
    records: &RecordIndex<'_>,
    cfg: &SignalConfig,
) -> Result<VoicemailReport, SignalError> {
    cfg.validate()?;
    let mut candidates = Vec::new();
    for c in campaigns {
        let members = records.member_records(c)?;
        let multi = members
            .iter()
            .filter(|r| detect_multi_attempt(r, cfg))
            .count();
        if multi == 0 {
            continue;
        }
        let fraction = multi as f64 / members.len() as f64;
        candidates.push(CampaignVoicemail {
            campaign_id: c.campaign_id.clone(),
            feed_id: c.feed_id.clone(),
            calls: members.len(),
            multi_attempt_calls: multi,
            multi_attempt_fraction: fraction,
            flagged: fraction > cfg.campaign_fraction_threshold,
        });
    }
    candidates.sort_by(|a, b| a.campaign_id.cmp(&b.campaign_id));
    let flagged = candidates
        .iter()
        .filter(|c| c.flagged)
        .map(|c| c.campaign_id.clone())
        .collect();
    Ok(VoicemailReport {
        multi_attempt_window_s: cfg.multi_attempt_window_s,
        campaign_fraction_threshold: cfg.campaign_fraction_threshold,
        campaigns_total: campaigns.len(),
        candidates,
        flagged,
    })
}

/// Merges feeds that log each INVITE as its own row: rows with the same caller
/// and callee whose gap to the previous row is within the window become one
/// record. The merged record keeps the first row's call_id and attestation and
/// takes outcome fields (answered, durations, transcript, language) from the last row.
pub fn merge_split_attempts(records: Vec<CallRecord>, cfg: &SignalConfig) -> Vec<CallRecord> {
    let w = cfg.window_ms();
    let mut groups: BTreeMap<(String, String), Vec<CallRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.caller_id_raw.clone(), r.called_number_raw.clone()))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for (_, mut rows) in groups {
        rows.sort_by(|a, b| (a.first_attempt(), &a.call_id).cmp(&(b.first_attempt(), &b.call_id)));
        let mut rows = rows.into_iter();
        let mut cur = rows.next().expect("groups are non-empty");
        for r in rows {
            if r.first_attempt().millis() - cur.last_attempt().millis() <= w {
                cur.attempts.extend(r.attempts);
                cur.attempts.sort();
                cur.answered = r.answered;
                cur.total_duration_s = r.total_duration_s;
                cur.voiced_duration_s = r.voiced_duration_s;
                cur.transcript = r.transcript;
                cur.language = r.language;
            } else {
                out.push(std::mem::replace(&mut cur, r));
            }
        }
        out.push(cur);
    }
    out.sort_by(|a, b| (a.first_attempt(), &a.call_id).cmp(&(b.first_attempt(), &b.call_id)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttestationPoint {
    pub bucket: String,
    pub index: i64,
    pub total: u64,
    /// Counts, or fractions of `total` when normalized.
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub unsigned: f64,
}

impl AttestationPoint {
    pub fn get(&self, level: AttestationLevel) -> f64 {
        match level {
            AttestationLevel::A => self.a,
            AttestationLevel::B => self.b,
            AttestationLevel::C => self.c,
            AttestationLevel::Unsigned => self.unsigned,
        }
    }
}

fn bucket_range<T: Default + Clone>(
    records: &[CallRecord],
    bucket: Bucket,
) -> Option<(i64, Vec<T>)> {
    let lo = records
        .iter()
        .map(|r| bucket.index(r.first_attempt()))
        .min()?;
    let hi = records
        .iter()
        .map(|r| bucket.index(r.first_attempt()))
        .max()?;
    Some((lo, vec![T::default(); (hi - lo + 1) as usize]))
}

/// Attestation tallies per bucket of first attempt, zero-filled between the first and last bucket.
pub fn attestation_series(
    records: &[CallRecord],
    bucket: Bucket,
    normalized: bool,
) -> Vec<AttestationPoint> {
    let Some((lo, mut tallies)) = bucket_range::<[u64; 4]>(records, bucket) else {
        return Vec::new();
    };
    for r in records {
        tallies[(bucket.index(r.first_attempt()) - lo) as usize][r.attestation.index()] += 1;
    }
    tallies
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let total: u64 = t.iter().sum();
            let scale = |x: u64| {
                if !normalized {
                    x as f64
                } else if total == 0 {
                    0.0
                } else {
                    x as f64 / total as f64
                }
            };
            let index = lo + i as i64;
            AttestationPoint {
                bucket: bucket.label(index),
                index,
                total,
                a: scale(t[AttestationLevel::A.index()]),
                b: scale(t[AttestationLevel::B.index()]),
                c: scale(t[AttestationLevel::C.index()]),
                unsigned: scale(t[AttestationLevel::Unsigned.index()]),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumePoint {
    pub bucket: String,
    pub index: i64,
    pub calls: u64,
}

pub fn volume_series(records: &[CallRecord], bucket: Bucket) -> Vec<VolumePoint> {
    let Some((lo, mut counts)) = bucket_range::<u64>(records, bucket) else {
        return Vec::new();
    };
    for r in records {
        counts[(bucket.index(r.first_attempt()) - lo) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, calls)| VolumePoint {
            bucket: bucket.label(lo + i as i64),
            index: lo + i as i64,
            calls,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope * x + intercept`. Constant `y` gives
/// slope 0 and R² 0.
pub fn linear_trend(points: &[(f64, f64)]) -> Result<TrendSummary, SignalError> {
    let n = points.len();
    if n < 2 {
        return Err(SignalError::TooFewPoints(n));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(SignalError::NonFinite);
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(SignalError::DegenerateX);
    }
    if points.iter().all(|p| p.1 == points[0].1) {
        return Ok(TrendSummary {
            n,
            slope: 0.0,
            intercept: points[0].1,
            r_squared: 0.0,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    Ok(TrendSummary {
        n,
        slope,
        intercept,
        r_squared: (1.0 - ss_res / syy).clamp(0.0, 1.0),
    })
}

/// Trend over a volume series, x being the bucket offset from the first bucket.
pub fn volume_trend(series: &[VolumePoint]) -> Result<TrendSummary, SignalError> {
    let base = series.first().map_or(0, |p| p.index);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .map(|p| ((p.index - base) as f64, p.calls as f64))
        .collect();
    linear_trend(&pts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageShare {
    pub calls: usize,
    pub campaigns: usize,
    /// Share of clustered calls.
    pub fraction: f64,
}

pub const UNKNOWN_LANGUAGE: &str = "unknown";

/// Language mix over clustered calls. Each campaign counts once, under its
/// majority language (ties go to the lexicographically smallest tag).
pub fn language_distribution(
    campaigns: &[Campaign],
    records: &RecordIndex<'_>,
) -> Result<BTreeMap<String, LanguageShare>, SignalError> {
    let mut calls: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_campaign: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for c in campaigns {
        let mut local: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records.member_records(c)? {
            let lang = r
                .language
                .as_deref()
                .filter(|l| !l.is_empty())
                .unwrap_or(UNKNOWN_LANGUAGE);
            *local.entry(lang).or_insert(0) += 1;
            *calls.entry(lang.to_string()).or_insert(0) += 1;
            total += 1;
        }
        // reverse ascending order so max_by_key's last-wins keeps the smallest tag
        if let Some((lang, _)) = local.iter().rev().max_by_key(|(_, n)| **n) {
            *per_campaign.entry(lang.to_string()).or_insert(0) += 1;
        }
    }
    Ok(calls
        .into_iter()
        .map(|(lang, n)| {
            let share = LanguageShare {
                calls: n,
                campaigns: per_campaign.get(&lang).copied().unwrap_or(0),
                fraction: n as f64 / total as f64,
            };
            (lang, share)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CampaignMember, SipAttempt, MILLIS_PER_DAY};
    use proptest::prelude::*;

    fn rec(id: &str, attempts_ms: &[i64]) -> CallRecord {
        CallRecord {
            call_id: id.into(),
            feed_id: "f".into(),
            caller_id_raw: "+19198675309".into(),
            called_number_raw: "+12025550100".into(),
            attempts: attempts_ms
                .iter()
                .map(|&t| SipAttempt::at(Timestamp::from_millis(t)))
                .collect(),
            attestation: AttestationLevel::Unsigned,
            answered: false,
            total_duration_s: 0.0,
            voiced_duration_s: None,
            transcript: None,
            language: None,
            embedding_row: None,
        }
    }

    fn campaign(id: &str, members: &[&CallRecord]) -> Campaign {
        Campaign {
            campaign_id: id.into(),
            feed_id: "f".into(),
            members: members
                .iter()
                .map(|r| CampaignMember {
                    call_id: r.call_id.clone(),
                    transcript: None,
                    first_attempt: r.first_attempt(),
                })
                .collect(),
            representative_transcripts: vec![],
            first_seen: Timestamp::from_millis(0),
            last_seen: Timestamp::from_millis(0),
        }
    }

    #[test]
    fn multi_attempt_examples() {
        let cfg = SignalConfig::default();
        assert!(detect_multi_attempt(&rec("a", &[0, 10_000]), &cfg));
        assert!(detect_multi_attempt(&rec("a", &[0, 15_000]), &cfg));
        assert!(!detect_multi_attempt(&rec("a", &[0, 20_000]), &cfg));
        assert!(!detect_multi_attempt(&rec("a", &[0]), &cfg));
        assert!(detect_multi_attempt(&rec("a", &[0, 60_000, 61_000]), &cfg));
    }

    fn campaign_feed(id: &str, multi: usize, total: usize) -> (Feed, Campaign) {
        let recs: Vec<CallRecord> = (0..total)
            .map(|i| {
                let t = i as i64 * 100_000;
                if i < multi {
                    rec(&format!("{id}-{i}"), &[t, t + 5_000])
                } else {
                    rec(&format!("{id}-{i}"), &[t])
                }
            })
            .collect();
        let feed = Feed::from_records("f", recs).unwrap();
        let refs: Vec<&CallRecord> = feed.records.iter().collect();
        let c = campaign(id, &refs);
        (feed, c)
    }

    #[test]
    fn strict_ninety_percent_rule() {
        let (f10, c10) = campaign_feed("ten", 10, 10);
        let (f9, c9) = campaign_feed("nine", 9, 10);
        let (f0, c0) = campaign_feed("none", 0, 10);
        let mut all = f10.records.clone();
        all.extend(f9.records.clone());
        all.extend(f0.records.clone());
        let feed = Feed::from_records("f", all).unwrap();
        let idx = RecordIndex::from_feeds([&feed]);
        let r =
            voicemail_injection_campaigns(&[c10, c9, c0], &idx, &SignalConfig::default()).unwrap();
        assert_eq!(r.flagged, vec!["ten".to_string()]);
        assert_eq!(r.candidates.len(), 2);
        assert_eq!(r.campaigns_total, 3);
        let nine = r
            .candidates
            .iter()
            .find(|c| c.campaign_id == "nine")
            .unwrap();
        assert_eq!(nine.multi_attempt_fraction, 0.9);
        assert!(!nine.flagged);
    }

    #[test]
    fn unknown_member_is_an_error() {
        let (feed, mut c) = campaign_feed("x", 1, 2);
        c.members[0].call_id = "ghost".into();
        let idx = RecordIndex::from_feeds([&feed]);
        assert!(matches!(
            voicemail_injection_campaigns(&[c], &idx, &SignalConfig::default()),
            Err(SignalError::UnknownCall { .. })
        ));
    }

    #[test]
    fn merge_rule() {
        let cfg = SignalConfig::default();
        let mut b = rec("b", &[12_000]);
        b.answered = true;
        b.total_duration_s = 30.0;
        let merged = merge_split_attempts(vec![b, rec("a", &[0]), rec("c", &[200_000])], &cfg);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].call_id, "a");
        assert_eq!(merged[0].attempts.len(), 2);
        assert!(merged[0].answered);
        assert!(detect_multi_attempt(&merged[0], &cfg));
        let mut other = rec("d", &[1_000]);
        other.called_number_raw = "+13125550100".into();
        assert_eq!(
            merge_split_attempts(vec![rec("a", &[0]), other], &cfg).len(),
            2
        );
    }

    #[test]
    fn attestation_one_day() {
        let mut v = Vec::new();
        for (i, level) in [
            AttestationLevel::A,
            AttestationLevel::A,
            AttestationLevel::B,
            AttestationLevel::Unsigned,
        ]
        .into_iter()
        .enumerate()
        {
            let mut r = rec(&i.to_string(), &[i as i64 * 1000]);
            r.attestation = level;
            v.push(r);
        }
        let s = attestation_series(&v, Bucket::Day, true);
        assert_eq!(s.len(), 1);
        assert_eq!(
            (s[0].a, s[0].b, s[0].c, s[0].unsigned),
            (0.5, 0.25, 0.0, 0.25)
        );
        assert_eq!(s[0].bucket, "1970-01-01");
        assert!(attestation_series(&[], Bucket::Day, true).is_empty());
    }

    #[test]
    fn series_zero_fill_and_month_labels() {
        let v = vec![rec("a", &[0]), rec("b", &[3 * MILLIS_PER_DAY])];
        let s = attestation_series(&v, Bucket::Day, true);
        assert_eq!(s.len(), 4);
        assert_eq!(s[1].total, 0);
        assert_eq!(s[1].unsigned, 0.0);
        let vol = volume_series(
            &[rec("a", &[0]), rec("b", &[70 * MILLIS_PER_DAY])],
            Bucket::Month,
        );
        let labels: Vec<_> = vol.iter().map(|p| p.bucket.as_str()).collect();
        assert_eq!(labels, ["1970-01", "1970-02", "1970-03"]);
        assert_eq!(vol.iter().map(|p| p.calls).collect::<Vec<_>>(), [1, 0, 1]);
        assert_eq!(Bucket::Month.label(2024 * 12 + 11), "2024-12");
    }

    #[test]
    fn trend_examples() {
        let pts: Vec<(f64, f64)> = (0..10).map(|x| (x as f64, 2.0 * x as f64 + 1.0)).collect();
        let t = linear_trend(&pts).unwrap();
        assert_eq!((t.slope, t.intercept, t.r_squared), (2.0, 1.0, 1.0));
        let flat: Vec<(f64, f64)> = (0..5).map(|x| (x as f64, 3.7)).collect();
        let t = linear_trend(&flat).unwrap();
        assert_eq!((t.slope, t.intercept, t.r_squared), (0.0, 3.7, 0.0));
        assert_eq!(
            linear_trend(&[(1.0, 1.0)]),
            Err(SignalError::TooFewPoints(1))
        );
        assert_eq!(
            linear_trend(&[(1.0, 1.0), (1.0, 2.0)]),
            Err(SignalError::DegenerateX)
        );
    }

    #[test]
    fn trend_matches_normal_equations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(3..60);
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    (
                        i as f64,
                        -3.0 * i as f64 + 40.0 + rng.random_range(-5.0..5.0),
                    )
                })
                .collect();
            // solve [n sx; sx sxx] [b; m] = [sy; sxy] by Cramer's rule
            let nf = n as f64;
            let sx: f64 = pts.iter().map(|p| p.0).sum();
            let sy: f64 = pts.iter().map(|p| p.1).sum();
            let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
            let det = nf * sxx - sx * sx;
            let m = (nf * sxy - sx * sy) / det;
            let b = (sxx * sy - sx * sxy) / det;
            let t = linear_trend(&pts).unwrap();
            assert!((t.slope - m).abs() < 1e-12, "{} vs {m}", t.slope);
            assert!((t.intercept - b).abs() < 1e-12, "{} vs {b}", t.intercept);
            let ybar = sy / nf;
            let ss_res: f64 = pts.iter().map(|p| (p.1 - m * p.0 - b).powi(2)).sum();
            let ss_tot: f64 = pts.iter().map(|p| (p.1 - ybar).powi(2)).sum();
            assert!((t.r_squared - (1.0 - ss_res / ss_tot)).abs() < 1e-12);
        }
    }

    #[test]
    fn language_examples() {
        let mut recs = Vec::new();
        for (i, l) in ["en", "en", "en", "es"].iter().enumerate() {
            let mut r = rec(&format!("r{i}"), &[i as i64]);
            r.language = Some(l.to_string());
            recs.push(r);
        }
        let feed = Feed::from_records("f", recs).unwrap();
        let idx = RecordIndex::from_feeds([&feed]);
        let r = &feed.records;
        let cs = vec![
            campaign("c1", &[&r[0], &r[1], &r[2]]),
            campaign("c2", &[&r[3]]),
        ];
        let d = language_distribution(&cs, &idx).unwrap();
        assert_eq!(d["en"].fraction, 0.75);
        assert_eq!(d["es"].fraction, 0.25);
        assert_eq!((d["en"].campaigns, d["es"].campaigns), (1, 1));

        let tie = vec![campaign("c", &[&r[3], &r[0]])];
        let d = language_distribution(&tie, &idx).unwrap();
        assert_eq!((d["en"].campaigns, d["es"].campaigns), (1, 0));

        let bare = Feed::from_records("f", vec![rec("u", &[0])]).unwrap();
        let idx = RecordIndex::from_feeds([&bare]);
        let d = language_distribution(&[campaign("c", &[&bare.records[0]])], &idx).unwrap();
        assert_eq!(d[UNKNOWN_LANGUAGE].fraction, 1.0);
    }

    proptest! {
        #[test]
        fn multi_attempt_translation_invariant(
            gaps in prop::collection::vec(0i64..40_000, 0..5),
            shift in -1_000_000_000i64..1_000_000_000,
        ) {
            let mut t = 1_700_000_000_000i64;
            let mut times = vec![t];
            for g in gaps { t += g; times.push(t); }
            let shifted: Vec<i64> = times.iter().map(|x| x + shift).collect();
            let cfg = SignalConfig::default();
            prop_assert_eq!(
                detect_multi_attempt(&rec("a", &times), &cfg),
                detect_multi_attempt(&rec("a", &shifted), &cfg)
            );
        }

        #[test]
        fn normalized_fractions_sum_to_one(
            calls in prop::collection::vec((0i64..10 * MILLIS_PER_DAY, 0usize..4), 1..80)
        ) {
            let recs: Vec<CallRecord> = calls.iter().enumerate().map(|(i, (t, l))| {
                let mut r = rec(&i.to_string(), &[*t]);
                r.attestation = AttestationLevel::ALL[*l];
                r
            }).collect();
            for p in attestation_series(&recs, Bucket::Day, true) {
                let s = p.a + p.b + p.c + p.unsigned;
                if p.total > 0 {
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                } else {
                    prop_assert_eq!(s, 0.0);
                }
            }
        }

        #[test]
        fn slope_scales_with_affine_values(
            ys in prop::collection::vec(-100.0f64..100.0, 3..30),
            a in -50.0f64..50.0,
            b in 0.1f64..10.0,
        ) {
            let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, y)| (i as f64, *y)).collect();
            let moved: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (*x, a + b * y)).collect();
            let t = linear_trend(&pts).unwrap();
            let u = linear_trend(&moved).unwrap();
            prop_assert!((u.slope - b * t.slope).abs() <= 1e-9 * (1.0 + t.slope.abs() * b));
            prop_assert!((0.0..=1.0).contains(&t.r_squared));
        }

        #[test]
        fn adding_multi_attempt_call_never_unflags(multi in 0usize..12, total_extra in 0usize..3) {
            let total = multi + total_extra;
            prop_assume!(total > 0);
            let (f1, c1) = campaign_feed("c", multi, total);
            let (f2, c2) = campaign_feed("c", multi + 1, total + 1);
            let cfg = SignalConfig::default();
            let flagged = |f: &Feed, c: Campaign| {
                let idx = RecordIndex::from_feeds([f]);
                !voicemail_injection_campaigns(&[c], &idx, &cfg).unwrap().flagged.is_empty()
            };
            let before = flagged(&f1, c1);
            let after = flagged(&f2, c2);
            prop_assert!(!before || after);
        }
    }
}
