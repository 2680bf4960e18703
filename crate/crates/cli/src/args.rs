use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use robokit_core::campaign_match::{LcsDenominator, MatchConfig};
use robokit_core::cluster::{ClusterParams, Metric};
use robokit_core::preprocess::FilterPolicy;
use robokit_core::signals::{Bucket, SignalConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "robokit",
    version,
    about = "Robocall campaign analysis toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
    /// Apply the voiced-audio and transcript-length retention gate.
    Preprocess(PreprocessArgs),
    /// Cluster calls into campaigns with HDBSCAN.
    Cluster(ClusterArgs),
    /// Score a clustering (silhouette, Calinski-Harabasz, optional truth scores).
    Evaluate(EvaluateArgs),
    /// Match campaigns across two feeds by transcript similarity.
    Match(MatchArgs),
    /// Extract callback numbers from campaign transcripts and measure their lifetimes.
    Callbacks(CallbacksArgs),
    /// Compare caller IDs seen by two feeds.
    CalleridOverlap(CallerIdArgs),
    /// Flag campaigns that look like voicemail injection.
    Voicemail(VoicemailArgs),
    /// Emit attestation, volume and language series.
    Trends(TrendsArgs),
    /// Run preprocess, cluster, evaluate, match, callbacks, voicemail and trends end to end.
    Pipeline(PipelineArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Preprocess(_) => "preprocess",
            Command::Cluster(_) => "cluster",
            Command::Evaluate(_) => "evaluate",
            Command::Match(_) => "match",
            Command::Callbacks(_) => "callbacks",
            Command::CalleridOverlap(_) => "callerid-overlap",
            Command::Voicemail(_) => "voicemail",
            Command::Trends(_) => "trends",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON file with generator settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_feeds: Option<usize>,
    #[arg(long)]
    pub n_campaigns: Option<usize>,
    #[arg(long)]
    pub n_outliers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub interactive_fraction: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FilterOpts {
    #[arg(long, default_value_t = 5.0)]
    pub min_voiced_s: f64,
    #[arg(long, default_value_t = 0.10)]
    pub min_voiced_fraction: f64,
    #[arg(long, default_value_t = 30)]
    pub min_transcript_chars: usize,
    /// Directory of `<call_id>.wav` files to measure voiced audio from.
    #[arg(long)]
    pub wav_dir: Option<PathBuf>,
    /// Channel of multi-channel recordings to analyse.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
}

impl FilterOpts {
    pub fn policy(&self) -> FilterPolicy {
        FilterPolicy {
            min_voiced_s: self.min_voiced_s,
            min_voiced_fraction: self.min_voiced_fraction,
            min_transcript_chars: self.min_transcript_chars,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub feed: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub filter: FilterOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClusterOpts {
    #[arg(long, default_value_t = 5)]
    pub min_cluster_size: usize,
    #[arg(long, default_value_t = 5)]
    pub min_samples: usize,
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
    /// Rows with a higher GLOSH outlier score are labelled -1; 1.0 disables the cutoff.
    #[arg(long, default_value_t = 0.9)]
    pub max_outlier_score: f64,
}

impl ClusterOpts {
    pub fn params(&self) -> ClusterParams {
        ClusterParams {
            min_cluster_size: self.min_cluster_size,
            min_samples: self.min_samples,
            metric: self.metric,
            max_outlier_score: self.max_outlier_score,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub feed: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub cluster: ClusterOpts,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Labels JSONL written by `cluster`.
    #[arg(long)]
    pub labels: PathBuf,
    /// JSONL of `{"call_id", "campaign"}` with `campaign: null` for true outliers.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MatchOpts {
    #[arg(long, default_value_t = 0.90)]
    pub threshold: f64,
    #[arg(long, default_value_t = LcsDenominator::Min)]
    pub lcs_denominator: LcsDenominator,
    /// Transcripts sampled per campaign; the best pair decides a match.
    #[arg(long, default_value_t = 1)]
    pub representatives: usize,
    #[arg(long, default_value_t = 5)]
    pub min_tokens: usize,
}

impl MatchOpts {
    pub fn config(&self, seed: u64) -> MatchConfig {
        MatchConfig {
            threshold: self.threshold,
            representatives_per_campaign: self.representatives,
            sampling_seed: seed,
            min_tokens: self.min_tokens,
            lcs_denominator: self.lcs_denominator,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MatchArgs {
    /// Campaign JSON of the first feed.
    #[arg(long)]
    pub campaigns: PathBuf,
    /// Campaign JSON of the second feed.
    #[arg(long)]
    pub campaigns_b: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub matching: MatchOpts,
}

#[derive(Debug, Args, Serialize)]
pub struct CallbacksArgs {
    /// Campaign JSON; repeat for several feeds.
    #[arg(long, required = true)]
    pub campaigns: Vec<PathBuf>,
    /// Feed records supplying transcripts that campaign members lack; repeatable.
    #[arg(long)]
    pub feed: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CallerIdArgs {
    #[arg(long)]
    pub feed: PathBuf,
    #[arg(long)]
    pub feed_b: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Count only NANP numbers.
    #[arg(long)]
    pub nanp_only: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SignalOpts {
    /// Two INVITEs at most this many seconds apart make a multi-attempt call.
    #[arg(long, default_value_t = 15.0)]
    pub window_s: f64,
    /// A campaign is flagged when its multi-attempt share is strictly above this.
    #[arg(long, default_value_t = 0.90)]
    pub campaign_fraction: f64,
    #[arg(long, default_value_t = Bucket::Month)]
    pub bucket: Bucket,
}

impl SignalOpts {
    pub fn config(&self) -> SignalConfig {
        SignalConfig {
            multi_attempt_window_s: self.window_s,
            campaign_fraction_threshold: self.campaign_fraction,
            trend_bucket: self.bucket,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct VoicemailArgs {
    #[arg(long, required = true)]
    pub feed: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub campaigns: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub signals: SignalOpts,
}

#[derive(Debug, Args, Serialize)]
pub struct TrendsArgs {
    #[arg(long, required = true)]
    pub feed: Vec<PathBuf>,
    /// Campaign JSON for the language breakdown; repeatable.
    #[arg(long)]
    pub campaigns: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = Bucket::Month)]
    pub bucket: Bucket,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub feed: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, requires = "embeddings_b")]
    pub feed_b: Option<PathBuf>,
    #[arg(long, requires = "feed_b")]
    pub embeddings_b: Option<PathBuf>,
    /// Truth labels JSONL for the first feed.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, requires = "feed_b")]
    pub truth_b: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub nanp_only: bool,
    #[command(flatten)]
    pub filter: FilterOpts,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    #[command(flatten)]
    pub matching: MatchOpts,
    #[command(flatten)]
    pub signals: SignalOpts,
}
