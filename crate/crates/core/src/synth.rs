//! Synthetic corpora with known answers.
//!
//! Every campaign is a transcript template plus a unit-vector centroid. Member
//! calls get the centroid perturbed by gaussian noise and the template with
//! random token dropout. With two feeds, a fraction of templates is played in
//! both; some of those are truncated to their first half in the first feed, the
//! way an interactive honeypot hears more of a pitch than a passive one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callback::{spell_number, CallbackKind};
use crate::model::{
    write_call_records, write_embeddings, AttestationLevel, CallRecord, Campaign, CampaignMember,
    EmbeddingMatrix, Feed, ModelError, SipAttempt, Timestamp, MILLIS_PER_DAY,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// 1 or 2.
    pub n_feeds: usize,
    pub feed_ids: Vec<String>,
    pub n_campaigns: usize,
    pub calls_per_campaign_mean: f64,
    /// Standard deviation of campaign size; 0 gives every campaign the rounded mean.
    pub calls_per_campaign_dispersion: f64,
    pub min_calls_per_campaign: usize,
    /// Outlier calls per feed.
    pub n_outliers: usize,
    pub dim: usize,
    /// Expected euclidean norm of the noise added to each unit centroid.
    pub embedding_noise_sigma: f64,
    pub token_dropout: f64,
    pub template_tokens_min: usize,
    pub template_tokens_max: usize,
    pub vocabulary_size: usize,
    pub zipf_exponent: f64,
    /// Share of the first feed's templates also played in the second feed.
    pub shared_template_fraction: f64,
    /// Share of shared templates heard only up to half length in the first feed.
    pub interactive_fraction: f64,
    pub voicemail_campaign_fraction: f64,
    /// Upper bound on the share of a normal campaign's calls that retry within the window.
    pub background_retry_fraction: f64,
    pub callerids_per_campaign: usize,
    pub invalid_callerid_fraction: f64,
    pub callback_campaign_fraction: f64,
    /// Share of callback campaigns that read their number digit by digit.
    pub vocalized_callback_fraction: f64,
    /// Weights for A, B, C, unsigned.
    pub attestation_mix: [f64; 4],
    /// Campaign languages, allocated to campaigns by largest remainder.
    pub language_mix: Vec<(String, f64)>,
    pub start: Timestamp,
    pub span_days: i64,
    /// Shared campaigns start in the second feed this many days later, uniformly drawn within +/- this bound.
    pub max_feed_lag_days: i64,
    pub max_campaign_days: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_feeds: 1,
            feed_ids: vec!["feed-a".into(), "feed-b".into()],
            n_campaigns: 50,
            calls_per_campaign_mean: 20.0,
            calls_per_campaign_dispersion: 0.0,
            min_calls_per_campaign: 1,
            n_outliers: 200,
            dim: 768,
            embedding_noise_sigma: 0.05,
            token_dropout: 0.05,
            template_tokens_min: 40,
            template_tokens_max: 100,
            vocabulary_size: 3000,
            zipf_exponent: 1.0,
            shared_template_fraction: 0.3,
            interactive_fraction: 0.0,
            voicemail_campaign_fraction: 0.1,
            background_retry_fraction: 0.3,
            callerids_per_campaign: 3,
            invalid_callerid_fraction: 0.02,
            callback_campaign_fraction: 0.3,
            vocalized_callback_fraction: 0.5,
            attestation_mix: [0.304, 0.216, 0.095, 0.385],
            language_mix: vec![
                ("en".into(), 0.90),
                ("es".into(), 0.07),
                ("zh".into(), 0.03),
            ],
            start: Timestamp::from_millis(1_704_067_200_000),
            span_days: 365,
            max_feed_lag_days: 30,
            max_campaign_days: 120,
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(SynthError::InvalidConfig(format!(
            "{name} must be in [0,1], got {v}"
        )))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(1..=2).contains(&self.n_feeds) {
            return bad(format!("n_feeds must be 1 or 2, got {}", self.n_feeds));
        }
        if self.feed_ids.len() < self.n_feeds {
            return bad(format!(
                "need {} feed ids, got {}",
                self.n_feeds,
                self.feed_ids.len()
            ));
        }
        if self.n_feeds == 2 && self.feed_ids[0] == self.feed_ids[1] {
            return bad("feed ids must differ".into());
        }
        if self.dim == 0 {
            return bad("dim must be > 0".into());
        }
        if !(self.calls_per_campaign_mean >= 1.0 && self.calls_per_campaign_mean.is_finite()) {
            return bad("calls_per_campaign_mean must be >= 1".into());
        }
        if !(self.calls_per_campaign_dispersion >= 0.0
            && self.calls_per_campaign_dispersion.is_finite())
        {
            return bad("calls_per_campaign_dispersion must be >= 0".into());
        }
        if !(self.embedding_noise_sigma >= 0.0 && self.embedding_noise_sigma.is_finite()) {
            return bad("embedding_noise_sigma must be >= 0".into());
        }
        for (name, v) in [
            ("token_dropout", self.token_dropout),
            ("shared_template_fraction", self.shared_template_fraction),
            ("interactive_fraction", self.interactive_fraction),
            (
                "voicemail_campaign_fraction",
                self.voicemail_campaign_fraction,
            ),
            ("background_retry_fraction", self.background_retry_fraction),
            ("invalid_callerid_fraction", self.invalid_callerid_fraction),
            (
                "callback_campaign_fraction",
                self.callback_campaign_fraction,
            ),
            (
                "vocalized_callback_fraction",
                self.vocalized_callback_fraction,
            ),
        ] {
            check_fraction(name, v)?;
        }
        if self.background_retry_fraction > 0.5 {
            return bad(
                "background_retry_fraction must be <= 0.5 so only planted campaigns look injected"
                    .into(),
            );
        }
        if self.template_tokens_min < 12 || self.template_tokens_min > self.template_tokens_max {
            return bad("need 12 <= template_tokens_min <= template_tokens_max".into());
        }
        if self.vocabulary_size < 10 {
            return bad("vocabulary_size must be >= 10".into());
        }
        if !(self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be >= 0".into());
        }
        if self.callerids_per_campaign == 0 {
            return bad("callerids_per_campaign must be >= 1".into());
        }
        if self.attestation_mix.iter().any(|w| !(*w >= 0.0))
            || self.attestation_mix.iter().sum::<f64>() <= 0.0
        {
            return bad("attestation_mix needs non-negative weights with a positive sum".into());
        }
        if self.language_mix.is_empty()
            || self.language_mix.iter().any(|(_, w)| !(*w >= 0.0))
            || self.language_mix.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return bad("language_mix needs non-negative weights with a positive sum".into());
        }
        if self.span_days < 1 || self.max_campaign_days < 1 || self.max_feed_lag_days < 0 {
            return bad(
                "span_days and max_campaign_days must be >= 1, max_feed_lag_days >= 0".into(),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCall {
    pub call_id: String,
    /// `None` for outliers.
    pub campaign: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCampaign {
    pub campaign_id: String,
    pub feed_id: String,
    pub template_id: usize,
    pub size: usize,
    pub voicemail: bool,
    /// Transcripts cut to the first half of the template.
    pub truncated: bool,
    pub language: String,
    pub caller_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedPair {
    pub campaign_a: String,
    pub campaign_b: String,
    pub template_id: usize,
    pub interactive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCallback {
    pub number: String,
    pub kind: CallbackKind,
    pub template_id: usize,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
    pub lifetime_days: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub feeds: Vec<String>,
    /// Per feed, every call in record order.
    pub calls: BTreeMap<String, Vec<TruthCall>>,
    pub campaigns: Vec<TruthCampaign>,
    pub shared_pairs: Vec<SharedPair>,
    pub callbacks: Vec<PlantedCallback>,
    pub voicemail_campaigns: Vec<String>,
    /// Member calls per language, over campaign members only.
    pub language_calls: BTreeMap<String, usize>,
    /// Distinct valid caller IDs seen in both feeds.
    pub shared_caller_ids: usize,
    /// Median over shared caller IDs of the first-seen day difference (first feed minus second).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_seen_median_days: Option<f64>,
}

impl GroundTruth {
    /// call_id to true campaign for one feed.
    pub fn truth_map(&self, feed_id: &str) -> HashMap<String, Option<String>> {
        self.calls
            .get(feed_id)
            .map(|calls| {
                calls
                    .iter()
                    .map(|c| (c.call_id.clone(), c.campaign.clone()))
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct SynthFeed {
    pub feed: Feed,
    pub embeddings: EmbeddingMatrix,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub feeds: Vec<SynthFeed>,
    pub truth: GroundTruth,
}

impl SynthCorpus {
    /// Campaigns exactly as planted, with member transcripts.
    pub fn truth_campaigns(&self, feed_index: usize) -> Vec<Campaign> {
        let feed = &self.feeds[feed_index].feed;
        let mut members: BTreeMap<&str, Vec<CampaignMember>> = BTreeMap::new();
        let truth = &self.truth.calls[&feed.feed_id];
        for (r, t) in feed.records.iter().zip(truth) {
            if let Some(c) = &t.campaign {
                members.entry(c).or_default().push(CampaignMember {
                    call_id: r.call_id.clone(),
                    transcript: r.transcript.clone(),
                    first_attempt: r.first_attempt(),
                });
            }
        }
        members
            .into_iter()
            .map(|(id, m)| Campaign {
                campaign_id: id.to_string(),
                feed_id: feed.feed_id.clone(),
                first_seen: m.iter().map(|x| x.first_attempt).min().expect("non-empty"),
                last_seen: m.iter().map(|x| x.first_attempt).max().expect("non-empty"),
                representative_transcripts: Vec::new(),
                members: m,
            })
            .collect()
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
// pseudo-words that collide with spoken digits
const RESERVED: &[&str] = &["zero", "nine", "five"];

fn vocabulary(size: usize) -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|&c| {
            VOWELS
                .iter()
                .map(move |&v| format!("{}{}", c as char, v as char))
        })
        .collect();
    let s = syllables.len();
    (0..)
        .map(|i: usize| {
            let (hi, lo) = (i / s, i % s);
            if hi == 0 {
                format!("{}{}", syllables[lo], syllables[(lo * 7 + 3) % s])
            } else {
                format!(
                    "{}{}{}",
                    syllables[hi % s],
                    syllables[lo],
                    syllables[(hi / s) % s]
                )
            }
        })
        .filter(|w| !RESERVED.contains(&w.as_str()))
        .scan(BTreeSet::new(), |seen, w| {
            Some(seen.insert(w.clone()).then_some(w))
        })
        .flatten()
        .take(size)
        .collect()
}

fn random_nanp(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{}{:02}{}{:06}",
        rng.random_range(2..10),
        rng.random_range(0..100),
        rng.random_range(2..10),
        rng.random_range(0..1_000_000)
    )
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Largest-remainder allocation of `n` items to weights; ties go to the earlier entry.
fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

struct Template {
    tokens: Vec<String>,
    centroid: Vec<f64>,
    callback: Option<(String, CallbackKind)>,
    /// Token index at which the callback phrase is inserted.
    callback_pos: usize,
    caller_ids: Vec<String>,
    language: String,
    voicemail: bool,
}

struct PendingCall {
    attempts: Vec<i64>,
    caller_id: String,
    transcript: String,
    embedding: Vec<f32>,
    campaign: Option<String>,
    language: String,
    answered: bool,
    total: f64,
    voiced: f64,
    attestation: AttestationLevel,
}

struct Gen<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    vocab: Vec<String>,
    zipf: Zipf<f64>,
    attestation: WeightedIndex<f64>,
    used_numbers: BTreeSet<String>,
}

impl Gen<'_> {
    fn word(&mut self) -> String {
        let i = self.zipf.sample(&mut self.rng) as usize;
        self.vocab[(i - 1).min(self.vocab.len() - 1)].clone()
    }

    fn sentence(&mut self) -> Vec<String> {
        let len = self
            .rng
            .random_range(self.cfg.template_tokens_min..=self.cfg.template_tokens_max);
        (0..len).map(|_| self.word()).collect()
    }

    fn fresh_number(&mut self) -> String {
        loop {
            let n = random_nanp(&mut self.rng);
            if self.used_numbers.insert(n.clone()) {
                return n;
            }
        }
    }

    fn member_embedding(&mut self, centroid: &[f64]) -> Vec<f32> {
        let sigma = self.cfg.embedding_noise_sigma;
        if sigma == 0.0 {
            return centroid.iter().map(|&x| x as f32).collect();
        }
        let per_coord = sigma / (centroid.len() as f64).sqrt();
        let v: Vec<f64> = centroid
            .iter()
            .map(|&c| c + per_coord * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| (x / norm) as f32).collect()
    }

    fn campaign_size(&mut self) -> usize {
        let c = self.cfg;
        let raw = if c.calls_per_campaign_dispersion == 0.0 {
            c.calls_per_campaign_mean
        } else {
            Normal::new(c.calls_per_campaign_mean, c.calls_per_campaign_dispersion)
                .expect("validated")
                .sample(&mut self.rng)
        };
        (raw.round().max(1.0) as usize).max(c.min_calls_per_campaign)
    }

    fn caller_id(&mut self, pool: &[String]) -> String {
        if self.rng.random_bool(self.cfg.invalid_callerid_fraction) {
            return ["Anonymous", "0000000000", "12345", "+1 555 0100"]
                [self.rng.random_range(0..4)]
            .to_string();
        }
        let n = &pool[self.rng.random_range(0..pool.len())];
        match self.rng.random_range(0..3) {
            0 => format!("+1{n}"),
            1 => format!("({}) {}-{}", &n[..3], &n[3..6], &n[6..]),
            _ => n.clone(),
        }
    }

    fn transcript(&mut self, t: &Template, truncated: bool) -> String {
        let cut = if truncated {
            t.tokens.len().div_ceil(2)
        } else {
            t.tokens.len()
        };
        let mut words: Vec<String> = t.tokens[..cut]
            .iter()
            .filter(|_| !self.rng.random_bool(self.cfg.token_dropout))
            .cloned()
            .collect();
        if let Some((number, kind)) = &t.callback {
            let spoken = match kind {
                CallbackKind::Vocalized => spell_number(number),
                CallbackKind::Digit => {
                    format!("{}-{}-{}", &number[..3], &number[3..6], &number[6..])
                }
            };
            let phrase = format!("call us back at {spoken} today");
            let pos = t.callback_pos.min(words.len());
            words.insert(pos, phrase);
        }
        words.join(" ")
    }

    fn noise_transcript(&mut self) -> String {
        self.sentence().join(" ")
    }

    fn attempts(
        &mut self,
        at: i64,
        injected: bool,
        close_retry: bool,
        far_retry: bool,
    ) -> Vec<i64> {
        if injected || close_retry {
            vec![at, at + self.rng.random_range(500..=14_000)]
        } else if far_retry {
            vec![at, at + self.rng.random_range(30_000..=600_000)]
        } else {
            vec![at]
        }
    }

    fn durations(&mut self) -> (f64, f64) {
        let total = (self.rng.random_range(20.0..90.0f64) * 100.0).round() / 100.0;
        let voiced = (total * self.rng.random_range(0.5..0.9f64) * 100.0).round() / 100.0;
        (total, voiced)
    }

    fn attestation(&mut self) -> AttestationLevel {
        AttestationLevel::ALL[self.attestation.sample(&mut self.rng)]
    }
}

#[derive(Clone)]
struct Placement {
    template: usize,
    truncated: bool,
    start_day: i64,
}

/// Generates the corpus; identical configs give identical output.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut g = Gen {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        vocab: vocabulary(cfg.vocabulary_size),
        zipf: Zipf::new(cfg.vocabulary_size as f64, cfg.zipf_exponent)
            .map_err(|e| SynthError::InvalidConfig(format!("zipf: {e}")))?,
        attestation: WeightedIndex::new(cfg.attestation_mix)
            .map_err(|e| SynthError::InvalidConfig(format!("attestation_mix: {e}")))?,
        used_numbers: BTreeSet::new(),
    };

    let n_shared = if cfg.n_feeds == 2 {
        (cfg.shared_template_fraction * cfg.n_campaigns as f64).round() as usize
    } else {
        0
    };
    let n_interactive = (cfg.interactive_fraction * n_shared as f64).round() as usize;
    let n_templates = cfg.n_campaigns * cfg.n_feeds - n_shared;
    let n_voicemail = (cfg.voicemail_campaign_fraction * n_templates as f64).round() as usize;
    let n_callback = (cfg.callback_campaign_fraction * n_templates as f64).round() as usize;
    let n_vocalized = (cfg.vocalized_callback_fraction * n_callback as f64).round() as usize;

    let mut languages: Vec<String> = Vec::with_capacity(n_templates);
    let weights: Vec<f64> = cfg.language_mix.iter().map(|(_, w)| *w).collect();
    for ((lang, _), count) in cfg.language_mix.iter().zip(allocate(n_templates, &weights)) {
        languages.extend(std::iter::repeat_n(lang.clone(), count));
    }
    languages.shuffle(&mut g.rng);
    let mut flags: Vec<usize> = (0..n_templates).collect();
    flags.shuffle(&mut g.rng);
    let voicemail: BTreeSet<usize> = flags[..n_voicemail].iter().copied().collect();
    flags.shuffle(&mut g.rng);
    let callback: Vec<usize> = flags[..n_callback].to_vec();

    let mut templates = Vec::with_capacity(n_templates);
    for (t, language) in languages.into_iter().enumerate() {
        let tokens = g.sentence();
        let centroid = unit_vector(&mut g.rng, cfg.dim);
        let callback_pos = g.rng.random_range(1..=(tokens.len() * 2 / 5));
        let caller_ids = (0..cfg.callerids_per_campaign)
            .map(|_| g.fresh_number())
            .collect();
        templates.push(Template {
            tokens,
            centroid,
            callback: None,
            callback_pos,
            caller_ids,
            language,
            voicemail: voicemail.contains(&t),
        });
    }
    for (i, &t) in callback.iter().enumerate() {
        let kind = if i < n_vocalized {
            CallbackKind::Vocalized
        } else {
            CallbackKind::Digit
        };
        let number = g.fresh_number();
        templates[t].callback = Some((number, kind));
    }

    // feed 0 plays templates 0..n_campaigns; feed 1 plays the first n_shared of those
    // and then its own; the first n_interactive shared ones are truncated in feed 0
    let day_range = (cfg.span_days - 1).max(1);
    let mut placements: Vec<Vec<Placement>> = vec![Vec::new(); cfg.n_feeds];
    let mut starts = Vec::with_capacity(cfg.n_campaigns);
    for t in 0..cfg.n_campaigns {
        let start_day = g.rng.random_range(0..day_range);
        starts.push(start_day);
        placements[0].push(Placement {
            template: t,
            truncated: t < n_interactive,
            start_day,
        });
    }
    if cfg.n_feeds == 2 {
        for t in 0..cfg.n_campaigns {
            let (template, start_day) = if t < n_shared {
                let lag = g
                    .rng
                    .random_range(-cfg.max_feed_lag_days..=cfg.max_feed_lag_days);
                (t, (starts[t] + lag).clamp(0, day_range))
            } else {
                (
                    cfg.n_campaigns + t - n_shared,
                    g.rng.random_range(0..day_range),
                )
            };
            placements[1].push(Placement {
                template,
                truncated: false,
                start_day,
            });
        }
    }

    let mut feeds = Vec::new();
    let mut truth_calls = BTreeMap::new();
    let mut truth_campaigns = Vec::new();
    let mut campaign_ids: Vec<HashMap<usize, String>> = vec![HashMap::new(); cfg.n_feeds];
    for (f, feed_placements) in placements.iter().enumerate() {
        let feed_id = cfg.feed_ids[f].clone();
        let mut pending: Vec<PendingCall> = Vec::new();
        for p in feed_placements {
            let t = &templates[p.template];
            let campaign_id = format!("{feed_id}:T{:04}", p.template);
            campaign_ids[f].insert(p.template, campaign_id.clone());
            let size = g.campaign_size();
            let duration_days = g.rng.random_range(1..=cfg.max_campaign_days);
            let start_ms = cfg.start.millis() + p.start_day * MILLIS_PER_DAY;
            let end_ms = (start_ms + duration_days * MILLIS_PER_DAY)
                .min(cfg.start.millis() + cfg.span_days * MILLIS_PER_DAY - 1);
            let close_retries = if t.voicemail {
                0
            } else {
                let share = g.rng.random_range(0.0..=cfg.background_retry_fraction);
                (share * size as f64).floor() as usize
            };
            let mut retry_slots: Vec<usize> = (0..size).collect();
            retry_slots.shuffle(&mut g.rng);
            let close: BTreeSet<usize> = retry_slots[..close_retries].iter().copied().collect();
            for i in 0..size {
                let at = g.rng.random_range(start_ms..=end_ms);
                let far = !close.contains(&i) && g.rng.random_bool(0.1);
                let attempts = g.attempts(at, t.voicemail, close.contains(&i), far);
                let caller_id = g.caller_id(&t.caller_ids.clone());
                let transcript = g.transcript(t, p.truncated);
                let embedding = g.member_embedding(&t.centroid);
                let (total, voiced) = g.durations();
                let attestation = g.attestation();
                pending.push(PendingCall {
                    attempts,
                    caller_id,
                    transcript,
                    embedding,
                    campaign: Some(campaign_id.clone()),
                    language: t.language.clone(),
                    answered: !t.voicemail,
                    total,
                    voiced,
                    attestation,
                });
            }
            truth_campaigns.push(TruthCampaign {
                campaign_id,
                feed_id: feed_id.clone(),
                template_id: p.template,
                size,
                voicemail: t.voicemail,
                truncated: p.truncated,
                language: t.language.clone(),
                caller_ids: t.caller_ids.iter().map(|n| format!("+1{n}")).collect(),
                callback: t.callback.as_ref().map(|(n, _)| format!("+1{n}")),
            });
        }
        let lang_weights = WeightedIndex::new(cfg.language_mix.iter().map(|(_, w)| *w))
            .map_err(|e| SynthError::InvalidConfig(format!("language_mix: {e}")))?;
        for _ in 0..cfg.n_outliers {
            let at = g.rng.random_range(
                cfg.start.millis()..cfg.start.millis() + cfg.span_days * MILLIS_PER_DAY,
            );
            let own = vec![g.fresh_number()];
            let caller_id = g.caller_id(&own);
            let transcript = g.noise_transcript();
            let embedding: Vec<f32> = unit_vector(&mut g.rng, cfg.dim)
                .iter()
                .map(|&x| x as f32)
                .collect();
            let (total, voiced) = g.durations();
            let attestation = g.attestation();
            let language = cfg.language_mix[lang_weights.sample(&mut g.rng)].0.clone();
            pending.push(PendingCall {
                attempts: vec![at],
                caller_id,
                transcript,
                embedding,
                campaign: None,
                language,
                answered: true,
                total,
                voiced,
                attestation,
            });
        }
        // stable sort keeps generation order for equal timestamps
        pending.sort_by_key(|c| c.attempts[0]);

        let mut records = Vec::with_capacity(pending.len());
        let mut data = Vec::with_capacity(pending.len() * cfg.dim);
        let mut row_ids = Vec::with_capacity(pending.len());
        let mut calls = Vec::with_capacity(pending.len());
        for (i, c) in pending.into_iter().enumerate() {
            let call_id = format!("{feed_id}-{i:06}");
            records.push(CallRecord {
                call_id: call_id.clone(),
                feed_id: feed_id.clone(),
                caller_id_raw: c.caller_id,
                called_number_raw: format!("+1919555{:04}", i % 10_000),
                attempts: c
                    .attempts
                    .iter()
                    .map(|&t| SipAttempt::at(Timestamp::from_millis(t)))
                    .collect(),
                attestation: c.attestation,
                answered: c.answered,
                total_duration_s: c.total,
                voiced_duration_s: Some(c.voiced),
                transcript: Some(c.transcript),
                language: Some(c.language),
                embedding_row: Some(i),
            });
            data.extend_from_slice(&c.embedding);
            row_ids.push(call_id.clone());
            calls.push(TruthCall {
                call_id,
                campaign: c.campaign,
            });
        }
        let mut feed = Feed::from_records(feed_id.clone(), records)?;
        feed.window_start = cfg.start;
        feed.window_end =
            Timestamp::from_millis(cfg.start.millis() + cfg.span_days * MILLIS_PER_DAY - 1);
        let embeddings = EmbeddingMatrix::new(cfg.dim, data, row_ids)?;
        truth_calls.insert(feed_id, calls);
        feeds.push(SynthFeed { feed, embeddings });
    }

    let shared_pairs = (0..n_shared)
        .map(|t| SharedPair {
            campaign_a: campaign_ids[0][&t].clone(),
            campaign_b: campaign_ids[1][&t].clone(),
            template_id: t,
            interactive: t < n_interactive,
        })
        .collect();

    let mut corpus = SynthCorpus {
        truth: GroundTruth {
            seed: cfg.seed,
            feeds: cfg.feed_ids[..cfg.n_feeds].to_vec(),
            calls: truth_calls,
            voicemail_campaigns: truth_campaigns
                .iter()
                .filter(|c| c.voicemail)
                .map(|c| c.campaign_id.clone())
                .collect(),
            campaigns: truth_campaigns,
            shared_pairs,
            callbacks: Vec::new(),
            language_calls: BTreeMap::new(),
            shared_caller_ids: 0,
            first_seen_median_days: None,
        },
        feeds,
    };
    derive_observed_truth(&mut corpus, &templates);
    Ok(corpus)
}

/// Fills the truth fields that depend on emitted timestamps.
fn derive_observed_truth(corpus: &mut SynthCorpus, templates: &[Template]) {
    let mut callback_span: BTreeMap<usize, (Timestamp, Timestamp)> = BTreeMap::new();
    let mut language_calls = BTreeMap::new();
    let template_of: HashMap<&str, usize> = corpus
        .truth
        .campaigns
        .iter()
        .map(|c| (c.campaign_id.as_str(), c.template_id))
        .collect();
    for sf in &corpus.feeds {
        let truth = &corpus.truth.calls[&sf.feed.feed_id];
        for (r, t) in sf.feed.records.iter().zip(truth) {
            let Some(c) = &t.campaign else { continue };
            let tpl = template_of[c.as_str()];
            *language_calls
                .entry(templates[tpl].language.clone())
                .or_insert(0usize) += 1;
            if templates[tpl].callback.is_some() {
                let at = r.first_attempt();
                let e = callback_span.entry(tpl).or_insert((at, at));
                e.0 = e.0.min(at);
                e.1 = e.1.max(at);
            }
        }
    }
    corpus.truth.language_calls = language_calls;
    corpus.truth.callbacks = callback_span
        .into_iter()
        .map(|(tpl, (first, last))| {
            let (number, kind) = templates[tpl].callback.clone().expect("callback template");
            PlantedCallback {
                number: format!("+1{number}"),
                kind,
                template_id: tpl,
                first_seen: first,
                last_seen: last,
                lifetime_days: last.whole_days_since(first),
            }
        })
        .collect();

    if corpus.feeds.len() == 2 {
        let first_seen = |f: &Feed| {
            let mut m: BTreeMap<String, Timestamp> = BTreeMap::new();
            for r in &f.records {
                if let Ok(n) = crate::callerid::normalize_to_e164(&r.caller_id_raw) {
                    if n.is_nanp() {
                        let e = m.entry(n.as_str().to_string()).or_insert(r.first_attempt());
                        *e = (*e).min(r.first_attempt());
                    }
                }
            }
            m
        };
        let a = first_seen(&corpus.feeds[0].feed);
        let b = first_seen(&corpus.feeds[1].feed);
        let mut diffs: Vec<i64> = a
            .iter()
            .filter_map(|(n, ta)| b.get(n).map(|tb| ta.day_index() - tb.day_index()))
            .collect();
        diffs.sort_unstable();
        corpus.truth.shared_caller_ids = diffs.len();
        let n = diffs.len();
        corpus.truth.first_seen_median_days = (n > 0).then(|| {
            if n % 2 == 1 {
                diffs[n / 2] as f64
            } else {
                (diffs[n / 2 - 1] + diffs[n / 2]) as f64 / 2.0
            }
        });
    }
}

/// Paths written by [`write_corpus`] for one feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFeedFiles {
    pub feed_id: String,
    pub records: PathBuf,
    pub embeddings: PathBuf,
    pub truth_labels: PathBuf,
}

/// Writes `<feed>.jsonl`, `<feed>.rcem` (+ `.ids`), `<feed>.truth.jsonl` per feed and `truth.json`.
pub fn write_corpus(
    corpus: &SynthCorpus,
    out_dir: &Path,
) -> Result<Vec<SynthFeedFiles>, SynthError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut out = Vec::new();
    for sf in &corpus.feeds {
        let id = &sf.feed.feed_id;
        let files = SynthFeedFiles {
            feed_id: id.clone(),
            records: out_dir.join(format!("{id}.jsonl")),
            embeddings: out_dir.join(format!("{id}.rcem")),
            truth_labels: out_dir.join(format!("{id}.truth.jsonl")),
        };
        write_call_records(&sf.feed, &files.records)?;
        write_embeddings(&sf.embeddings, &files.embeddings)?;
        let file = fs::File::create(&files.truth_labels).map_err(io(&files.truth_labels))?;
        let mut w = BufWriter::new(file);
        for c in &corpus.truth.calls[id] {
            let line = serde_json::to_string(c).expect("truth call serializes");
            writeln!(w, "{line}").map_err(io(&files.truth_labels))?;
        }
        w.flush().map_err(io(&files.truth_labels))?;
        out.push(files);
    }
    let truth_path = out_dir.join("truth.json");
    let body = serde_json::to_string_pretty(&corpus.truth).expect("truth serializes");
    fs::write(&truth_path, body + "\n").map_err(io(&truth_path))?;
    Ok(out)
}
