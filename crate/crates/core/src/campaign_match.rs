//! Cross-feed campaign comparison on tokenized transcripts.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Campaign;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("empty comparison")]
    EmptyComparison,
    #[error("threshold must satisfy 0 < t <= 1, got {0}")]
    InvalidThreshold(f64),
    #[error("representatives_per_campaign must be >= 1")]
    NoRepresentatives,
    #[error("feed `{0}` appears on both sides of the comparison")]
    SameFeed(String),
    #[error("unknown {kind} `{value}`")]
    UnknownName { kind: &'static str, value: String },
}

/// Lowercase letter-only words.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize(transcript: &str) -> TokenSequence {
    TokenSequence(
        transcript
            .split_whitespace()
            .filter(|w| !w.chars().any(|c| c.is_numeric()))
            .map(|w| {
                w.chars()
                    .filter(|c| c.is_alphabetic())
                    .flat_map(char::to_lowercase)
                    .collect::<String>()
            })
            .filter(|w| !w.is_empty())
            .collect(),
    )
}

pub fn jaccard_similarity(a: &TokenSequence, b: &TokenSequence) -> Result<f64, MatchError> {
    if a.is_empty() && b.is_empty() {
        return Err(MatchError::EmptyComparison);
    }
    let sa: HashSet<&str> = a.0.iter().map(String::as_str).collect();
    let sb: HashSet<&str> = b.0.iter().map(String::as_str).collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LcsDenominator {
    #[default]
    Min,
    Max,
    Mean,
}

impl fmt::Display for LcsDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LcsDenominator::Min => "min",
            LcsDenominator::Max => "max",
            LcsDenominator::Mean => "mean",
        })
    }
}

impl FromStr for LcsDenominator {
    type Err = MatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(LcsDenominator::Min),
            "max" => Ok(LcsDenominator::Max),
            "mean" => Ok(LcsDenominator::Mean),
            other => Err(MatchError::UnknownName {
                kind: "lcs denominator",
                value: other.to_string(),
            }),
        }
    }
}

/// Length of the longest common subsequence.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn lcs_similarity(
    a: &TokenSequence,
    b: &TokenSequence,
    denominator: LcsDenominator,
) -> Result<f64, MatchError> {
    if a.is_empty() || b.is_empty() {
        return Err(MatchError::EmptyComparison);
    }
    let l = lcs_length(&a.0, &b.0) as f64;
    let (x, y) = (a.len() as f64, b.len() as f64);
    let d = match denominator {
        LcsDenominator::Min => x.min(y),
        LcsDenominator::Max => x.max(y),
        LcsDenominator::Mean => (x + y) / 2.0,
    };
    Ok(l / d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    Jaccard,
    Lcs,
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMetric::Jaccard => "jaccard",
            SimilarityMetric::Lcs => "lcs",
        })
    }
}

impl FromStr for SimilarityMetric {
    type Err = MatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jaccard" => Ok(SimilarityMetric::Jaccard),
            "lcs" => Ok(SimilarityMetric::Lcs),
            other => Err(MatchError::UnknownName {
                kind: "similarity metric",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub threshold: f64,
    pub representatives_per_campaign: usize,
    pub sampling_seed: u64,
    pub min_tokens: usize,
    pub lcs_denominator: LcsDenominator,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            threshold: 0.90,
            representatives_per_campaign: 1,
            sampling_seed: 0,
            min_tokens: 5,
            lcs_denominator: LcsDenominator::Min,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(MatchError::InvalidThreshold(self.threshold));
        }
        if self.representatives_per_campaign == 0 {
            return Err(MatchError::NoRepresentatives);
        }
        Ok(())
    }

    pub fn similarity(
        &self,
        metric: SimilarityMetric,
        a: &TokenSequence,
        b: &TokenSequence,
    ) -> Result<f64, MatchError> {
        match metric {
            SimilarityMetric::Jaccard => jaccard_similarity(a, b),
            SimilarityMetric::Lcs => lcs_similarity(a, b, self.lcs_denominator),
        }
    }
}

fn campaign_rng(seed: u64, campaign_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(campaign_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Seeded sample of eligible transcripts, in member order. Members are
/// considered in call_id order so input ordering does not change the pick.
/// Falls back to `representative_transcripts` when no member carries a transcript.
pub fn select_representatives(campaign: &Campaign, cfg: &MatchConfig) -> Vec<String> {
    let mut members: Vec<_> = campaign
        .members
        .iter()
        .filter_map(|m| m.transcript.as_deref().map(|t| (m.call_id.as_str(), t)))
        .collect();
    let pool: Vec<&str> = if members.is_empty() {
        campaign
            .representative_transcripts
            .iter()
            .map(String::as_str)
            .collect()
    } else {
        members.sort_unstable();
        members.into_iter().map(|(_, t)| t).collect()
    };
    let eligible: Vec<&str> = pool
        .into_iter()
        .filter(|t| tokenize(t).len() >= cfg.min_tokens)
        .collect();
    let take = cfg.representatives_per_campaign.min(eligible.len());
    let mut rng = campaign_rng(cfg.sampling_seed, &campaign.campaign_id);
    let mut idx = rand::seq::index::sample(&mut rng, eligible.len(), take).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| eligible[i].to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interactivity {
    Static,
    Interactive,
    Unmatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub campaign_a: String,
    pub campaign_b: String,
    pub feed_a: String,
    pub feed_b: String,
    pub metric: SimilarityMetric,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interactivity: Option<Interactivity>,
}

/// Similarities for every eligible cross-feed pair, row-major over `rows` x `cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub metric: SimilarityMetric,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols.len() + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub pairs: Vec<MatchPair>,
    pub matrix: SimilarityMatrix,
    /// Campaign ids left out because no member had a usable transcript.
    pub excluded: Vec<String>,
    pub warnings: Vec<String>,
}

struct Prepared<'a> {
    campaign: &'a Campaign,
    reps: Vec<TokenSequence>,
}

fn prepare<'a>(
    campaigns: &'a [Campaign],
    cfg: &MatchConfig,
    excluded: &mut Vec<String>,
    warnings: &mut Vec<String>,
) -> Vec<Prepared<'a>> {
    let mut out = Vec::new();
    for c in campaigns {
        let reps: Vec<TokenSequence> = select_representatives(c, cfg)
            .iter()
            .map(|t| tokenize(t))
            .collect();
        if reps.is_empty() {
            warnings.push(format!(
                "campaign {} has no transcript with >= {} tokens; excluded from matching",
                c.campaign_id, cfg.min_tokens
            ));
            excluded.push(c.campaign_id.clone());
        } else {
            out.push(Prepared { campaign: c, reps });
        }
    }
    out.sort_by(|x, y| x.campaign.campaign_id.cmp(&y.campaign.campaign_id));
    out
}

/// Compares every campaign of `side_a` with every campaign of `side_b` and
/// keeps pairs whose best representative similarity reaches the threshold.
pub fn match_campaigns(
    side_a: &[Campaign],
    side_b: &[Campaign],
    metric: SimilarityMetric,
    cfg: &MatchConfig,
) -> Result<MatchOutcome, MatchError> {
    cfg.validate()?;
    let feeds_a: BTreeSet<&str> = side_a.iter().map(|c| c.feed_id.as_str()).collect();
    if let Some(shared) = side_b.iter().find(|c| feeds_a.contains(c.feed_id.as_str())) {
        return Err(MatchError::SameFeed(shared.feed_id.clone()));
    }
    let mut excluded = Vec::new();
    let mut warnings = Vec::new();
    let a = prepare(side_a, cfg, &mut excluded, &mut warnings);
    let b = prepare(side_b, cfg, &mut excluded, &mut warnings);

    let values: Vec<f64> = a
        .par_iter()
        .flat_map_iter(|x| {
            b.iter().map(move |y| {
                let mut best = 0.0f64;
                for ra in &x.reps {
                    for rb in &y.reps {
                        // representatives are non-empty, so neither metric can fail
                        let s = cfg.similarity(metric, ra, rb).unwrap_or(0.0);
                        best = best.max(s);
                    }
                }
                best
            })
        })
        .collect();

    let mut pairs = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let s = values[i * b.len() + j];
            if s >= cfg.threshold {
                pairs.push(MatchPair {
                    campaign_a: x.campaign.campaign_id.clone(),
                    campaign_b: y.campaign.campaign_id.clone(),
                    feed_a: x.campaign.feed_id.clone(),
                    feed_b: y.campaign.feed_id.clone(),
                    metric,
                    similarity: s,
                    interactivity: None,
                });
            }
        }
    }
    Ok(MatchOutcome {
        pairs,
        matrix: SimilarityMatrix {
            metric,
            rows: a.iter().map(|p| p.campaign.campaign_id.clone()).collect(),
            cols: b.iter().map(|p| p.campaign.campaign_id.clone()).collect(),
            values,
        },
        excluded,
        warnings,
    })
}

/// Static when matched under Jaccard, interactive when matched only under
/// LCS, unmatched otherwise. Keyed by campaign id over all given campaigns.
pub fn classify_interactivity<'a>(
    campaigns: impl IntoIterator<Item = &'a Campaign>,
    jaccard_pairs: &[MatchPair],
    lcs_pairs: &[MatchPair],
) -> BTreeMap<String, Interactivity> {
    let ids = |pairs: &[MatchPair]| -> HashSet<String> {
        pairs
            .iter()
            .flat_map(|p| [p.campaign_a.clone(), p.campaign_b.clone()])
            .collect()
    };
    let jac = ids(jaccard_pairs);
    let lcs = ids(lcs_pairs);
    campaigns
        .into_iter()
        .map(|c| {
            let class = if jac.contains(&c.campaign_id) {
                Interactivity::Static
            } else if lcs.contains(&c.campaign_id) {
                Interactivity::Interactive
            } else {
                Interactivity::Unmatched
            };
            (c.campaign_id.clone(), class)
        })
        .collect()
}

/// Labels each pair: static if the same pair was matched under Jaccard, interactive otherwise.
pub fn annotate_pairs(pairs: &mut [MatchPair], jaccard_pairs: &[MatchPair]) {
    let jac: HashSet<(&str, &str)> = jaccard_pairs
        .iter()
        .map(|p| (p.campaign_a.as_str(), p.campaign_b.as_str()))
        .collect();
    for p in pairs.iter_mut() {
        let key = (p.campaign_a.as_str(), p.campaign_b.as_str());
        p.interactivity = Some(if jac.contains(&key) {
            Interactivity::Static
        } else {
            Interactivity::Interactive
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedOverlap {
    pub feed_id: String,
    pub campaigns: usize,
    pub campaigns_matched: usize,
    pub campaign_fraction: f64,
    pub calls: usize,
    pub calls_matched: usize,
    pub call_fraction: f64,
}

/// Per-feed share of campaigns and calls that appear in at least one pair.
pub fn overlap_summary<'a>(
    campaigns: impl IntoIterator<Item = &'a Campaign>,
    pairs: &[MatchPair],
) -> Vec<FeedOverlap> {
    let matched: HashSet<&str> = pairs
        .iter()
        .flat_map(|p| [p.campaign_a.as_str(), p.campaign_b.as_str()])
        .collect();
    let mut per_feed: BTreeMap<&str, (usize, usize, usize, usize)> = BTreeMap::new();
    for c in campaigns {
        let e = per_feed.entry(c.feed_id.as_str()).or_default();
        e.0 += 1;
        e.2 += c.size();
        if matched.contains(c.campaign_id.as_str()) {
            e.1 += 1;
            e.3 += c.size();
        }
    }
    let frac = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    per_feed
        .into_iter()
        .map(|(feed, (n, nm, calls, cm))| FeedOverlap {
            feed_id: feed.to_string(),
            campaigns: n,
            campaigns_matched: nm,
            campaign_fraction: frac(nm, n),
            calls,
            calls_matched: cm,
            call_fraction: frac(cm, calls),
        })
        .collect()
}

/// Tallies campaigns per interactivity class.
pub fn interactivity_counts(
    classes: &BTreeMap<String, Interactivity>,
) -> HashMap<Interactivity, usize> {
    let mut out = HashMap::new();
    for c in classes.values() {
        *out.entry(*c).or_insert(0) += 1;
    }
    out
}
