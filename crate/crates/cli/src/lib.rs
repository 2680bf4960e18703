//! Command-line front end. `run` executes one parsed command; `exit_code`
//! maps its failure to the process status (1 validation, 2 I/O).

pub mod args;
pub mod output;
pub mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use robokit_core::model::{Campaign, Feed};
use robokit_core::synth::{generate_corpus, write_corpus, SynthConfig};
use serde::Serialize;

use crate::args::{
    CallbacksArgs, CallerIdArgs, Cli, ClusterArgs, Command, EvaluateArgs, MatchArgs, PipelineArgs,
    PreprocessArgs, SynthArgs, TrendsArgs, VoicemailArgs,
};
use crate::output::OutDir;
use crate::stages::*;

pub const THREADS_ENV: &str = "ROBOKIT_THREADS";

/// Caps the global rayon pool from `ROBOKIT_THREADS` when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// 2 when any error in the chain is an I/O failure, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let io = err.chain().any(|cause| {
        cause.is::<std::io::Error>()
            || cause
                .downcast_ref::<csv::Error>()
                .is_some_and(csv::Error::is_io_error)
    });
    if io {
        2
    } else {
        1
    }
}

/// The error chain joined by ": ", skipping causes whose text a preceding
/// message already ends with.
pub fn render_error(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let config = serde_json::to_value(&cli.command).context("serializing configuration")?;
    let name = cli.command.name();
    match &cli.command {
        Command::Synth(a) => synth(a, name, config),
        Command::Preprocess(a) => preprocess_cmd(a, name, config),
        Command::Cluster(a) => cluster_cmd(a, name, config),
        Command::Evaluate(a) => evaluate_cmd(a, name, config),
        Command::Match(a) => match_cmd(a, name, config),
        Command::Callbacks(a) => callbacks_cmd(a, name, config),
        Command::CalleridOverlap(a) => callerid_cmd(a, name, config),
        Command::Voicemail(a) => voicemail_cmd(a, name, config),
        Command::Trends(a) => trends_cmd(a, name, config),
        Command::Pipeline(a) => pipeline(a, name, config),
    }
}

fn inputs<const N: usize>(pairs: [(&str, Vec<&Path>); N]) -> BTreeMap<String, Vec<PathBuf>> {
    pairs
        .into_iter()
        .filter(|(_, paths)| !paths.is_empty())
        .map(|(k, paths)| {
            (
                k.to_string(),
                paths.into_iter().map(Path::to_path_buf).collect(),
            )
        })
        .collect()
}

fn many(paths: &[PathBuf]) -> Vec<&Path> {
    paths.iter().map(PathBuf::as_path).collect()
}

fn opt(path: &Option<PathBuf>) -> Vec<&Path> {
    path.iter().map(PathBuf::as_path).collect()
}

fn synth(a: &SynthArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading synth config {}", path.display()))?;
            serde_json::from_str::<SynthConfig>(&text)
                .with_context(|| format!("parsing synth config {}", path.display()))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(seed => seed, n_feeds => n_feeds, n_campaigns => n_campaigns, n_outliers => n_outliers,
         dim => dim, noise_sigma => embedding_noise_sigma, interactive_fraction => interactive_fraction);
    cfg.validate()?;
    let corpus = generate_corpus(&cfg)?;
    let mut out = OutDir::create(&a.out_dir)?;
    let files = write_corpus(&corpus, out.root())?;
    for f in &files {
        out.note_written(&f.records);
        out.note_written(&robokit_core::model::sidecar_path(&f.embeddings));
        out.note_written(&f.embeddings);
        out.note_written(&f.truth_labels);
    }
    out.note_written(&out.root().join("truth.json"));
    #[derive(Serialize)]
    struct SynthReport<'a> {
        config: &'a SynthConfig,
        feeds: Vec<FeedCounts<'a>>,
    }
    #[derive(Serialize)]
    struct FeedCounts<'a> {
        feed_id: &'a str,
        calls: usize,
        campaigns: usize,
    }
    let feeds = corpus
        .feeds
        .iter()
        .map(|sf| FeedCounts {
            feed_id: &sf.feed.feed_id,
            calls: sf.feed.len(),
            campaigns: corpus
                .truth
                .campaigns
                .iter()
                .filter(|c| c.feed_id == sf.feed.feed_id)
                .count(),
        })
        .collect();
    out.json(
        "synth.json",
        "synth",
        &SynthReport {
            config: &cfg,
            feeds,
        },
    )?;
    out.finish(name, config, inputs([("config", opt(&a.config))]))
}

fn preprocess_cmd(a: &PreprocessArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let feed = read_feed(&a.feed)?;
    let mut out = OutDir::create(&a.out_dir)?;
    preprocess(&feed, &a.filter, &mut out, "")?;
    out.finish(
        name,
        config,
        inputs([("feed", vec![&a.feed]), ("wav_dir", opt(&a.filter.wav_dir))]),
    )
}

fn cluster_cmd(a: &ClusterArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let feed = read_feed(&a.feed)?;
    let embeddings = read_embeddings(&a.embeddings)?;
    let mut out = OutDir::create(&a.out_dir)?;
    cluster(&feed, &embeddings, &a.cluster.params(), &mut out, "")?;
    out.finish(
        name,
        config,
        inputs([("feed", vec![&a.feed]), ("embeddings", vec![&a.embeddings])]),
    )
}

fn evaluate_cmd(a: &EvaluateArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let embeddings = read_embeddings(&a.embeddings)?;
    let labels = read_labels(&a.labels)?;
    let truth = a.truth.as_deref().map(read_truth).transpose()?;
    let ids: Vec<&str> = labels.iter().map(|l| l.call_id.as_str()).collect();
    let matrix = rows_for(&embeddings, &ids)?;
    let label_values: Vec<i64> = labels.iter().map(|l| l.label).collect();
    let mut out = OutDir::create(&a.out_dir)?;
    evaluate_labels(
        &matrix,
        &label_values,
        a.metric,
        truth.as_ref(),
        &mut out,
        "",
    )?;
    out.finish(
        name,
        config,
        inputs([
            ("embeddings", vec![&a.embeddings]),
            ("labels", vec![&a.labels]),
            ("truth", opt(&a.truth)),
        ]),
    )
}

fn match_cmd(a: &MatchArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let side_a = read_campaigns(&a.campaigns)?;
    let side_b = read_campaigns(&a.campaigns_b)?;
    let mut out = OutDir::create(&a.out_dir)?;
    match_feeds(&side_a, &side_b, &a.matching, a.seed, &mut out, "")?;
    out.finish(
        name,
        config,
        inputs([
            ("campaigns", vec![&a.campaigns]),
            ("campaigns_b", vec![&a.campaigns_b]),
        ]),
    )
}

fn read_all_campaigns(paths: &[PathBuf]) -> Result<Vec<Campaign>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_campaigns(p)?);
    }
    Ok(all)
}

fn read_all_feeds(paths: &[PathBuf]) -> Result<Vec<Feed>> {
    let feeds = paths
        .iter()
        .map(|p| read_feed(p))
        .collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<&str> = feeds.iter().map(|f| f.feed_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("feed `{}` given more than once", w[0]);
    }
    Ok(feeds)
}

fn callbacks_cmd(a: &CallbacksArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let mut campaigns = read_all_campaigns(&a.campaigns)?;
    let feeds = read_all_feeds(&a.feed)?;
    fill_transcripts(&mut campaigns, &feeds);
    let mut out = OutDir::create(&a.out_dir)?;
    callbacks(&campaigns, &mut out, "")?;
    out.finish(
        name,
        config,
        inputs([("campaigns", many(&a.campaigns)), ("feed", many(&a.feed))]),
    )
}

fn callerid_cmd(a: &CallerIdArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let feeds = read_all_feeds(&[a.feed.clone(), a.feed_b.clone()])?;
    let mut out = OutDir::create(&a.out_dir)?;
    callerid_overlap(&feeds[0], &feeds[1], a.nanp_only, &mut out, "")?;
    out.finish(
        name,
        config,
        inputs([("feed", vec![&a.feed]), ("feed_b", vec![&a.feed_b])]),
    )
}

fn voicemail_cmd(a: &VoicemailArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let feeds = read_all_feeds(&a.feed)?;
    let campaigns = read_all_campaigns(&a.campaigns)?;
    let mut out = OutDir::create(&a.out_dir)?;
    voicemail(&campaigns, &feeds, &a.signals.config(), &mut out, "")?;
    out.finish(
        name,
        config,
        inputs([("feed", many(&a.feed)), ("campaigns", many(&a.campaigns))]),
    )
}

fn trends_cmd(a: &TrendsArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let feeds = read_all_feeds(&a.feed)?;
    let campaigns = if a.campaigns.is_empty() {
        None
    } else {
        Some(read_all_campaigns(&a.campaigns)?)
    };
    let mut out = OutDir::create(&a.out_dir)?;
    trends(&feeds, campaigns.as_deref(), a.bucket, &mut out, "")?;
    out.finish(
        name,
        config,
        inputs([("feed", many(&a.feed)), ("campaigns", many(&a.campaigns))]),
    )
}

#[derive(Serialize)]
struct FeedSummary {
    feed_id: String,
    calls: usize,
    retained: usize,
    retention_rate: f64,
    clustered_rows: usize,
    clusters: usize,
    outliers: usize,
    silhouette: Option<f64>,
    calinski_harabasz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster_perfection: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intra_cluster_precision: Option<f64>,
}

#[derive(Serialize)]
struct PipelineReport {
    seed: u64,
    feeds: Vec<FeedSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matching: Option<MatchSummary>,
    callbacks: CallbackSummary,
    voicemail_flagged: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    callerid_overlap_unique: Option<usize>,
    notes: Vec<String>,
}

fn safe_dir_name(feed_id: &str) -> Result<&str> {
    let ok = !feed_id.is_empty()
        && !feed_id.starts_with('.')
        && feed_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        bail!("feed id `{feed_id}` cannot name an output directory (use [A-Za-z0-9._-])");
    }
    Ok(feed_id)
}

fn pipeline(a: &PipelineArgs, name: &str, config: serde_json::Value) -> Result<()> {
    let mut sources = vec![(&a.feed, &a.embeddings, a.truth.as_ref())];
    if let (Some(f), Some(e)) = (&a.feed_b, &a.embeddings_b) {
        sources.push((f, e, a.truth_b.as_ref()));
    }
    // validate every configuration before touching the output directory
    a.filter.policy().validate()?;
    a.cluster.params().validate()?;
    a.matching.config(a.seed).validate()?;
    a.signals.config().validate()?;

    let mut loaded = Vec::new();
    for (feed_path, emb_path, truth_path) in &sources {
        let feed = read_feed(feed_path)?;
        let embeddings = read_embeddings(emb_path)?;
        let truth = truth_path.map(|p| read_truth(p)).transpose()?;
        loaded.push((feed, embeddings, truth));
    }
    if loaded.len() == 2 && loaded[0].0.feed_id == loaded[1].0.feed_id {
        bail!("both feeds have id `{}`", loaded[0].0.feed_id);
    }

    let mut out = OutDir::create(&a.out_dir)?;
    let mut retained_feeds = Vec::new();
    let mut per_feed_campaigns: Vec<Vec<Campaign>> = Vec::new();
    let mut summaries = Vec::new();
    let mut notes = Vec::new();
    for (feed, embeddings, truth) in &loaded {
        let dir = safe_dir_name(&feed.feed_id)?;
        let pre = preprocess(feed, &a.filter, &mut out, dir)?;
        let clustered = cluster(
            &pre.retained,
            embeddings,
            &a.cluster.params(),
            &mut out,
            dir,
        )?;
        let eval = evaluate_labels(
            &clustered.matrix,
            &clustered.assignment.labels,
            a.cluster.metric,
            truth.as_ref(),
            &mut out,
            dir,
        )?;
        notes.extend(eval.notes.iter().map(|n| format!("{}: {n}", feed.feed_id)));
        summaries.push(FeedSummary {
            feed_id: feed.feed_id.clone(),
            calls: feed.len(),
            retained: pre.summary.retained,
            retention_rate: pre.summary.retention_rate,
            clustered_rows: clustered.assignment.labels.len(),
            clusters: clustered.assignment.n_clusters,
            outliers: clustered.assignment.n_outliers(),
            silhouette: eval.silhouette,
            calinski_harabasz: eval.calinski_harabasz,
            cluster_perfection: eval.cluster_perfection,
            intra_cluster_precision: eval.intra_cluster_precision,
        });
        retained_feeds.push(pre.retained);
        per_feed_campaigns.push(clustered.campaigns);
    }

    let matching = if per_feed_campaigns.len() == 2 {
        Some(match_feeds(
            &per_feed_campaigns[0],
            &per_feed_campaigns[1],
            &a.matching,
            a.seed,
            &mut out,
            "",
        )?)
    } else {
        notes.push("single feed: cross-feed matching and caller-ID overlap skipped".into());
        None
    };
    let campaigns: Vec<Campaign> = per_feed_campaigns.into_iter().flatten().collect();
    let callback_summary = callbacks(&campaigns, &mut out, "")?;
    let signal_cfg = a.signals.config();
    let vm = voicemail(&campaigns, &retained_feeds, &signal_cfg, &mut out, "")?;
    trends(
        &retained_feeds,
        Some(&campaigns),
        a.signals.bucket,
        &mut out,
        "",
    )?;
    let overlap = if retained_feeds.len() == 2 {
        Some(callerid_overlap(
            &loaded[0].0,
            &loaded[1].0,
            a.nanp_only,
            &mut out,
            "",
        )?)
    } else {
        None
    };

    out.json(
        "pipeline.json",
        "pipeline",
        &PipelineReport {
            seed: a.seed,
            feeds: summaries,
            matching,
            callbacks: callback_summary,
            voicemail_flagged: vm.flagged,
            callerid_overlap_unique: overlap.map(|o| o.overlap_unique),
            notes,
        },
    )?;
    out.finish(
        name,
        config,
        inputs([
            ("feed", vec![&a.feed]),
            ("embeddings", vec![&a.embeddings]),
            ("feed_b", opt(&a.feed_b)),
            ("embeddings_b", opt(&a.embeddings_b)),
            ("truth", opt(&a.truth)),
            ("truth_b", opt(&a.truth_b)),
        ]),
    )
}
