//! One function per analysis stage. Each takes loaded inputs, writes its
//! outputs under `prefix` in the run directory and returns what later stages need.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};
use robokit_core::callback::{
    callback_lifetimes, campaign_callback_hits, CallbackHit, LifetimeReport,
};
use robokit_core::callerid::{
    blocklist_effectiveness, feed_overlap, first_seen_comparison, heatmap_cells, index_feed,
    index_feed_within, window_intersection, BlocklistMode, BlocklistResult, FeedIndex,
    FirstSeenReport, OverlapReport,
};
use robokit_core::campaign_match::{
    annotate_pairs, classify_interactivity, interactivity_counts, match_campaigns, overlap_summary,
    FeedOverlap, Interactivity, MatchPair, SimilarityMetric,
};
use robokit_core::cluster::{
    campaigns_from_labels, hdbscan, ClusterAssignment, ClusterParams, Metric,
};
use robokit_core::cluster_eval::{add_truth_scores, evaluate, truth_clusters, EvalReport};
use robokit_core::model::{
    load_call_records, load_campaigns, load_embeddings, CallRecord, Campaign, EmbeddingMatrix,
    Feed, RecordFormat, Timestamp,
};
use robokit_core::preprocess::{
    filter_calls, measure_feed_audio, summarize, EnergyVad, FilterPolicy, RetentionSummary,
};
use robokit_core::signals::{
    attestation_series, language_distribution, voicemail_injection_campaigns, volume_series,
    volume_trend, AttestationPoint, Bucket, LanguageShare, RecordIndex, SignalConfig, TrendSummary,
    VoicemailReport, VolumePoint,
};
use serde::{Deserialize, Serialize};

use crate::args::{FilterOpts, MatchOpts};
use crate::output::OutDir;

pub fn read_feed(path: &Path) -> Result<Feed> {
    load_call_records(path, RecordFormat::from_path(path))
        .with_context(|| format!("reading feed {}", path.display()))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    load_embeddings(path).with_context(|| format!("reading embeddings {}", path.display()))
}

pub fn read_campaigns(path: &Path) -> Result<Vec<Campaign>> {
    load_campaigns(path).with_context(|| format!("reading campaigns {}", path.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct TruthRow {
    call_id: String,
    campaign: Option<String>,
}

/// call_id to true campaign (`None` for outliers).
pub fn read_truth(path: &Path) -> Result<HashMap<String, Option<String>>> {
    Ok(read_jsonl::<TruthRow>(path)?
        .into_iter()
        .map(|r| (r.call_id, r.campaign))
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRow {
    pub call_id: String,
    pub label: i64,
    /// Stability of the row's cluster; absent for outliers.
    #[serde(default)]
    pub stability: Option<f64>,
    #[serde(default)]
    pub outlier_score: Option<f64>,
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    read_jsonl(path)
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

#[derive(Serialize)]
struct DiscardRow<'a> {
    call_id: &'a str,
    reason: &'static str,
    record: &'a CallRecord,
}

#[derive(Serialize)]
struct PreprocessReport<'a> {
    feed_id: &'a str,
    policy: FilterPolicy,
    #[serde(flatten)]
    summary: &'a RetentionSummary,
    warnings: Vec<String>,
}

pub struct Preprocessed {
    pub retained: Feed,
    pub summary: RetentionSummary,
}

pub fn preprocess(
    feed: &Feed,
    opts: &FilterOpts,
    out: &mut OutDir,
    prefix: &str,
) -> Result<Preprocessed> {
    let policy = opts.policy();
    policy.validate()?;
    let (measured, warnings) = match &opts.wav_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("wav directory {} not found", dir.display()),
                )
                .into());
            }
            measure_feed_audio(feed, dir, &EnergyVad::default(), opts.channel)
        }
        None => (feed.clone(), Vec::new()),
    };
    let outcome = filter_calls(&measured, &policy);
    let summary = summarize(&measured, &outcome, &policy);
    let retained = measured.with_records(outcome.retained.clone());

    out.feed(&join(prefix, "retained.jsonl"), &retained)?;
    out.jsonl(
        &join(prefix, "discarded.jsonl"),
        outcome.discarded.iter().map(|(r, reason)| DiscardRow {
            call_id: &r.call_id,
            reason: reason.as_str(),
            record: r,
        }),
    )?;
    out.json(
        &join(prefix, "preprocess.json"),
        "preprocess",
        &PreprocessReport {
            feed_id: &feed.feed_id,
            policy,
            summary: &summary,
            warnings,
        },
    )?;
    Ok(Preprocessed { retained, summary })
}

#[derive(Serialize)]
struct CampaignsReport<'a> {
    feed_id: &'a str,
    params: ClusterParams,
    rows: usize,
    n_clusters: usize,
    n_outliers: usize,
    clustered_fraction: f64,
    /// Records with no embedding row; they are not clustered.
    records_without_embedding: usize,
    /// Embedding rows naming no record of the feed; they are ignored.
    embedding_rows_unmatched: usize,
    campaigns: &'a [Campaign],
    outliers: &'a [String],
}

pub struct Clustered {
    /// Embedding rows that were clustered, in matrix order.
    pub matrix: EmbeddingMatrix,
    pub assignment: ClusterAssignment,
    pub campaigns: Vec<Campaign>,
}

pub fn cluster(
    feed: &Feed,
    embeddings: &EmbeddingMatrix,
    params: &ClusterParams,
    out: &mut OutDir,
    prefix: &str,
) -> Result<Clustered> {
    params.validate()?;
    let ids: HashSet<&str> = feed.records.iter().map(|r| r.call_id.as_str()).collect();
    let rows: Vec<usize> = (0..embeddings.count())
        .filter(|&i| ids.contains(embeddings.row_ids()[i].as_str()))
        .collect();
    if rows.is_empty() && !feed.is_empty() {
        bail!(
            "no embedding row matches a record of feed `{}`",
            feed.feed_id
        );
    }
    let matrix = embeddings.select_rows(&rows);
    let assignment = hdbscan(matrix.points(), params)?;
    let set = campaigns_from_labels(feed, matrix.row_ids(), &assignment)?;

    let label_rows: Vec<LabelRow> = matrix
        .row_ids()
        .iter()
        .zip(&assignment.labels)
        .zip(&assignment.outlier_scores)
        .map(|((id, &label), &score)| LabelRow {
            call_id: id.clone(),
            label,
            stability: (label >= 0).then(|| assignment.stabilities[label as usize]),
            outlier_score: Some(score),
        })
        .collect();
    out.jsonl(&join(prefix, "labels.jsonl"), &label_rows)?;
    out.csv(&join(prefix, "labels.csv"), &label_rows)?;

    let n = assignment.labels.len();
    out.json(
        &join(prefix, "campaigns.json"),
        "campaigns",
        &CampaignsReport {
            feed_id: &feed.feed_id,
            params: *params,
            rows: n,
            n_clusters: assignment.n_clusters,
            n_outliers: assignment.n_outliers(),
            clustered_fraction: if n == 0 {
                0.0
            } else {
                (n - assignment.n_outliers()) as f64 / n as f64
            },
            records_without_embedding: feed.len() - rows.len(),
            embedding_rows_unmatched: embeddings.count() - rows.len(),
            campaigns: &set.campaigns,
            outliers: &set.outliers,
        },
    )?;
    Ok(Clustered {
        matrix,
        assignment,
        campaigns: set.campaigns,
    })
}

/// Rows of `embeddings` in the order of `ids`.
pub fn rows_for(embeddings: &EmbeddingMatrix, ids: &[&str]) -> Result<EmbeddingMatrix> {
    let index: HashMap<&str, usize> = embeddings
        .row_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let rows = ids
        .iter()
        .map(|id| {
            index
                .get(id)
                .copied()
                .with_context(|| format!("call `{id}` has no embedding row"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(embeddings.select_rows(&rows))
}

pub fn evaluate_labels(
    matrix: &EmbeddingMatrix,
    labels: &[i64],
    metric: Metric,
    truth: Option<&HashMap<String, Option<String>>>,
    out: &mut OutDir,
    prefix: &str,
) -> Result<EvalReport> {
    let mut report = evaluate(matrix.points(), labels, metric)?;
    if let Some(truth) = truth {
        let clusters = truth_clusters(labels, matrix.row_ids(), truth)?;
        add_truth_scores(&mut report, &clusters)?;
    }
    out.json(&join(prefix, "evaluation.json"), "evaluation", &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct MetricMatches {
    pairs: usize,
    overlap: Vec<FeedOverlap>,
}

#[derive(Serialize)]
struct MatchReport<'a> {
    threshold: f64,
    lcs_denominator: String,
    representatives_per_campaign: usize,
    sampling_seed: u64,
    jaccard: MetricMatches,
    lcs: MetricMatches,
    interactivity_counts: BTreeMap<Interactivity, usize>,
    interactivity: &'a BTreeMap<String, Interactivity>,
    excluded: Vec<String>,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchSummary {
    pub jaccard_pairs: usize,
    pub lcs_pairs: usize,
    pub interactive_pairs: usize,
}

pub fn match_feeds(
    a: &[Campaign],
    b: &[Campaign],
    opts: &MatchOpts,
    seed: u64,
    out: &mut OutDir,
    prefix: &str,
) -> Result<MatchSummary> {
    let cfg = opts.config(seed);
    let mut jac = match_campaigns(a, b, SimilarityMetric::Jaccard, &cfg)?;
    let mut lcs = match_campaigns(a, b, SimilarityMetric::Lcs, &cfg)?;
    let jac_pairs = jac.pairs.clone();
    annotate_pairs(&mut jac.pairs, &jac_pairs);
    annotate_pairs(&mut lcs.pairs, &jac_pairs);
    let classes = classify_interactivity(a.iter().chain(b), &jac.pairs, &lcs.pairs);
    let all = || a.iter().chain(b);

    let pairs: Vec<&MatchPair> = jac.pairs.iter().chain(&lcs.pairs).collect();
    out.jsonl(&join(prefix, "match_pairs.jsonl"), &pairs)?;
    out.csv(&join(prefix, "match_pairs.csv"), &pairs)?;

    let mut excluded = jac.excluded.clone();
    excluded.sort();
    excluded.dedup();
    let mut warnings = jac.warnings.clone();
    warnings.sort();
    warnings.dedup();
    let summary = MatchSummary {
        jaccard_pairs: jac.pairs.len(),
        lcs_pairs: lcs.pairs.len(),
        interactive_pairs: lcs
            .pairs
            .iter()
            .filter(|p| p.interactivity == Some(Interactivity::Interactive))
            .count(),
    };
    out.json(
        &join(prefix, "match.json"),
        "match",
        &MatchReport {
            threshold: cfg.threshold,
            lcs_denominator: cfg.lcs_denominator.to_string(),
            representatives_per_campaign: cfg.representatives_per_campaign,
            sampling_seed: cfg.sampling_seed,
            jaccard: MetricMatches {
                pairs: jac.pairs.len(),
                overlap: overlap_summary(all(), &jac.pairs),
            },
            lcs: MetricMatches {
                pairs: lcs.pairs.len(),
                overlap: overlap_summary(all(), &lcs.pairs),
            },
            interactivity_counts: interactivity_counts(&classes).into_iter().collect(),
            interactivity: &classes,
            excluded,
            warnings,
        },
    )?;
    Ok(summary)
}

#[derive(Serialize)]
struct CallbackReport<'a> {
    hits: usize,
    digit_hits: usize,
    vocalized_hits: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    lifetimes: Option<&'a LifetimeReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

#[derive(Serialize)]
struct LifetimeRow<'a> {
    number: &'a str,
    first_seen: Timestamp,
    last_seen: Timestamp,
    lifetime_days: i64,
    hits: usize,
    campaigns: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CallbackSummary {
    pub hits: usize,
    pub numbers: usize,
}

/// Copies transcripts from `feeds` into campaign members that lack one.
pub fn fill_transcripts(campaigns: &mut [Campaign], feeds: &[Feed]) {
    let index = RecordIndex::from_feeds(feeds);
    for c in campaigns {
        for m in &mut c.members {
            if m.transcript.is_none() {
                m.transcript = index
                    .get(&c.feed_id, &m.call_id)
                    .and_then(|r| r.transcript.clone());
            }
        }
    }
}

pub fn callbacks(
    campaigns: &[Campaign],
    out: &mut OutDir,
    prefix: &str,
) -> Result<CallbackSummary> {
    let hits: Vec<CallbackHit> = campaign_callback_hits(campaigns);
    out.jsonl(&join(prefix, "callback_hits.jsonl"), &hits)?;
    out.csv(&join(prefix, "callback_hits.csv"), &hits)?;
    let lifetimes = callback_lifetimes(&hits).ok();
    let rows: Vec<LifetimeRow> = lifetimes
        .iter()
        .flat_map(|l| &l.per_number)
        .map(|p| LifetimeRow {
            number: p.number.as_str(),
            first_seen: p.first_seen,
            last_seen: p.last_seen,
            lifetime_days: p.lifetime_days,
            hits: p.hits,
            campaigns: p.campaigns.join(";"),
        })
        .collect();
    out.csv(&join(prefix, "callback_lifetimes.csv"), &rows)?;
    let count = |kind| hits.iter().filter(|h| h.kind == kind).count();
    out.json(
        &join(prefix, "callbacks.json"),
        "callbacks",
        &CallbackReport {
            hits: hits.len(),
            digit_hits: count(robokit_core::callback::CallbackKind::Digit),
            vocalized_hits: count(robokit_core::callback::CallbackKind::Vocalized),
            lifetimes: lifetimes.as_ref(),
            notes: if lifetimes.is_none() {
                vec!["no callback numbers found".into()]
            } else {
                Vec::new()
            },
        },
    )?;
    Ok(CallbackSummary {
        hits: hits.len(),
        numbers: rows.len(),
    })
}

pub fn voicemail(
    campaigns: &[Campaign],
    feeds: &[Feed],
    cfg: &SignalConfig,
    out: &mut OutDir,
    prefix: &str,
) -> Result<VoicemailReport> {
    let index = RecordIndex::from_feeds(feeds);
    let report = voicemail_injection_campaigns(campaigns, &index, cfg)?;
    out.csv(&join(prefix, "voicemail.csv"), &report.candidates)?;
    out.json(&join(prefix, "voicemail.json"), "voicemail", &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct FeedTrends {
    feed_id: String,
    calls: usize,
    volume: Vec<VolumePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    volume_trend: Option<TrendSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    volume_trend_note: Option<String>,
    attestation: Vec<AttestationPoint>,
    attestation_share: Vec<AttestationPoint>,
}

#[derive(Serialize)]
struct TrendsReport {
    bucket: Bucket,
    feeds: Vec<FeedTrends>,
    #[serde(skip_serializing_if = "Option::is_none")]
    languages: Option<BTreeMap<String, LanguageShare>>,
}

#[derive(Serialize)]
struct AttestationRow<'a> {
    feed_id: &'a str,
    bucket: &'a str,
    total: u64,
    #[serde(rename = "A")]
    a: f64,
    #[serde(rename = "B")]
    b: f64,
    #[serde(rename = "C")]
    c: f64,
    unsigned: f64,
}

#[derive(Serialize)]
struct VolumeRow<'a> {
    feed_id: &'a str,
    bucket: &'a str,
    calls: u64,
}

pub fn trends(
    feeds: &[Feed],
    campaigns: Option<&[Campaign]>,
    bucket: Bucket,
    out: &mut OutDir,
    prefix: &str,
) -> Result<()> {
    let per_feed: Vec<FeedTrends> = feeds
        .iter()
        .map(|f| {
            let volume = volume_series(&f.records, bucket);
            let (volume_trend, volume_trend_note) = match volume_trend(&volume) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            FeedTrends {
                feed_id: f.feed_id.clone(),
                calls: f.len(),
                volume,
                volume_trend,
                volume_trend_note,
                attestation: attestation_series(&f.records, bucket, false),
                attestation_share: attestation_series(&f.records, bucket, true),
            }
        })
        .collect();
    let languages = match campaigns {
        Some(c) => Some(language_distribution(c, &RecordIndex::from_feeds(feeds))?),
        None => None,
    };

    let att_rows: Vec<AttestationRow> = per_feed
        .iter()
        .flat_map(|f| {
            f.attestation.iter().map(move |p| AttestationRow {
                feed_id: &f.feed_id,
                bucket: &p.bucket,
                total: p.total,
                a: p.a,
                b: p.b,
                c: p.c,
                unsigned: p.unsigned,
            })
        })
        .collect();
    out.csv(&join(prefix, "attestation.csv"), &att_rows)?;
    let vol_rows: Vec<VolumeRow> = per_feed
        .iter()
        .flat_map(|f| {
            f.volume.iter().map(move |p| VolumeRow {
                feed_id: &f.feed_id,
                bucket: &p.bucket,
                calls: p.calls,
            })
        })
        .collect();
    out.csv(&join(prefix, "volume.csv"), &vol_rows)?;
    out.json(
        &join(prefix, "trends.json"),
        "trends",
        &TrendsReport {
            bucket,
            feeds: per_feed,
            languages,
        },
    )
}

#[derive(Serialize)]
struct Blocklists {
    a_blocks_b: Option<BlocklistResult>,
    b_blocks_a: Option<BlocklistResult>,
    same_feed_a: Option<BlocklistResult>,
    same_feed_b: Option<BlocklistResult>,
}

#[derive(Serialize)]
struct CallerIdReport<'a> {
    /// True when both feeds were cut to their common observation window.
    window_restricted: bool,
    overlap: &'a OverlapReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    first_seen: Option<FirstSeenReport>,
    blocklist: Blocklists,
    invalid_a: BTreeMap<String, u64>,
    invalid_b: BTreeMap<String, u64>,
}

fn invalid_tally(idx: &FeedIndex) -> BTreeMap<String, u64> {
    idx.invalid_by_reason()
        .iter()
        .map(|(reason, n)| (reason.to_string(), *n))
        .collect()
}

/// Caller-ID overlap over the feeds' common window, or over whole feeds when
/// their windows are disjoint.
pub fn callerid_overlap(
    a: &Feed,
    b: &Feed,
    nanp_only: bool,
    out: &mut OutDir,
    prefix: &str,
) -> Result<OverlapReport> {
    let window = window_intersection(
        (a.window_start, a.window_end),
        (b.window_start, b.window_end),
    );
    let (idx_a, idx_b, recs_a, recs_b): (_, _, Vec<CallRecord>, Vec<CallRecord>) = match window {
        Some((s, e)) => {
            let within = |f: &Feed| {
                f.records
                    .iter()
                    .filter(|r| (s..=e).contains(&r.first_attempt()))
                    .cloned()
                    .collect()
            };
            (
                index_feed_within(a, s, e),
                index_feed_within(b, s, e),
                within(a),
                within(b),
            )
        }
        None => (
            index_feed(a),
            index_feed(b),
            a.records.clone(),
            b.records.clone(),
        ),
    };
    let overlap = feed_overlap(&idx_a, &idx_b, nanp_only);
    let first_seen = first_seen_comparison(&idx_a, &idx_b, nanp_only).ok();
    let blocklist = Blocklists {
        a_blocks_b: blocklist_effectiveness(BlocklistMode::Cross(&idx_a), &recs_b, false).ok(),
        b_blocks_a: blocklist_effectiveness(BlocklistMode::Cross(&idx_b), &recs_a, false).ok(),
        same_feed_a: blocklist_effectiveness(BlocklistMode::SameFeed, &recs_a, false).ok(),
        same_feed_b: blocklist_effectiveness(BlocklistMode::SameFeed, &recs_b, false).ok(),
    };
    out.csv(&join(prefix, "heatmap.csv"), heatmap_cells(&overlap))?;
    out.json(
        &join(prefix, "callerid_overlap.json"),
        "callerid-overlap",
        &CallerIdReport {
            window_restricted: window.is_some(),
            overlap: &overlap,
            first_seen,
            blocklist,
            invalid_a: invalid_tally(&idx_a),
            invalid_b: invalid_tally(&idx_b),
        },
    )?;
    Ok(overlap)
}
