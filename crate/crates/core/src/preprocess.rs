//! Voice-activity measurement and the retention gate applied before clustering.
//!
//! A call is kept when it carries at least `min_voiced_s` seconds of voiced audio,
//! at least `min_voiced_fraction` of its duration is voiced, and its transcript (if
//! any) has at least `min_transcript_chars` characters. All comparisons are inclusive.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CallRecord, Feed};

pub const SUPPORTED_SAMPLE_RATES: [u32; 4] = [8000, 16000, 44100, 48000];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedSampleRate(u32),
    #[error("empty sample buffer")]
    EmptySamples,
    #[error("invalid VAD config: {0}")]
    InvalidVadConfig(String),
    #[error("invalid filter policy: {0}")]
    InvalidPolicy(String),
    #[error("{path}: {message}")]
    Wav { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VadConfig {
    pub frame_ms: u32,
    pub rms_floor_dbfs: f64,
    /// Multiplier over the 10th-percentile frame RMS (the noise-floor estimate).
    pub relative_factor: f64,
    /// Upper bound on the relative term, so recordings without any silence still
    /// register as voiced.
    pub rms_ceiling_dbfs: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            frame_ms: 30,
            rms_floor_dbfs: -45.0,
            relative_factor: 3.0,
            rms_ceiling_dbfs: -20.0,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(10..=100).contains(&self.frame_ms) {
            return Err(PreprocessError::InvalidVadConfig(format!(
                "frame_ms {} outside [10, 100]",
                self.frame_ms
            )));
        }
        if !(self.relative_factor > 1.0) {
            return Err(PreprocessError::InvalidVadConfig(
                "relative_factor must exceed 1".into(),
            ));
        }
        if !(self.rms_ceiling_dbfs >= self.rms_floor_dbfs) {
            return Err(PreprocessError::InvalidVadConfig(
                "rms_ceiling_dbfs must be at least rms_floor_dbfs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoiceActivity {
    pub total_duration_s: f64,
    pub voiced_duration_s: f64,
}

/// Anything that can measure voiced audio; the energy detector below is the default.
pub trait VoiceActivityDetector: Sync {
    fn measure(&self, samples: &[i16], sample_rate: u32) -> Result<VoiceActivity, PreprocessError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EnergyVad {
    pub config: VadConfig,
}

impl VoiceActivityDetector for EnergyVad {
    fn measure(&self, samples: &[i16], sample_rate: u32) -> Result<VoiceActivity, PreprocessError> {
        compute_voice_activity(samples, sample_rate, &self.config)
    }
}

fn dbfs_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

fn frame_rms(frame: &[i16]) -> f64 {
    let sum: f64 = frame
        .iter()
        .map(|&s| {
            let x = s as f64 / 32768.0;
            x * x
        })
        .sum();
    (sum / frame.len() as f64).sqrt()
}

/// Energy-threshold VAD. A frame is voiced when its RMS exceeds
/// `max(floor, min(relative_factor * p10, ceiling))`, where `p10` is the
/// 10th-percentile frame RMS. A trailing partial frame counts for its own length.
pub fn compute_voice_activity(
    samples: &[i16],
    sample_rate: u32,
    cfg: &VadConfig,
) -> Result<VoiceActivity, PreprocessError> {
    if !SUPPORTED_SAMPLE_RATES.contains(&sample_rate) {
        return Err(PreprocessError::UnsupportedSampleRate(sample_rate));
    }
    if samples.is_empty() {
        return Err(PreprocessError::EmptySamples);
    }
    cfg.validate()?;

    let frame_len = ((sample_rate as u64 * cfg.frame_ms as u64) / 1000).max(1) as usize;
    let rms: Vec<f64> = samples.chunks(frame_len).map(frame_rms).collect();

    let mut sorted = rms.clone();
    sorted.sort_by(f64::total_cmp);
    // nearest-rank percentile
    let rank = ((0.1 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let p10 = sorted[rank - 1];

    let floor = dbfs_to_amplitude(cfg.rms_floor_dbfs);
    let ceiling = dbfs_to_amplitude(cfg.rms_ceiling_dbfs);
    let threshold = floor.max((cfg.relative_factor * p10).min(ceiling));

    let voiced_samples: usize = samples
        .chunks(frame_len)
        .zip(&rms)
        .filter(|(_, &r)| r > threshold)
        .map(|(frame, _)| frame.len())
        .sum();

    Ok(VoiceActivity {
        total_duration_s: samples.len() as f64 / sample_rate as f64,
        voiced_duration_s: voiced_samples as f64 / sample_rate as f64,
    })
}

/// Reads a WAV file as mono 16-bit PCM. Multi-channel files yield `channel`.
pub fn read_wav_mono(path: &Path, channel: usize) -> Result<(Vec<i16>, u32), PreprocessError> {
    let wav_err = |message: String| PreprocessError::Wav {
        path: path.display().to_string(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channel >= channels {
        return Err(wav_err(format!(
            "channel {channel} requested, file has {channels}"
        )));
    }
    let interleaved: Vec<i16> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let shift = bits as i32 - 16;
            reader
                .samples::<i32>()
                .map(|s| {
                    s.map(|v| {
                        if shift >= 0 {
                            (v >> shift) as i16
                        } else {
                            (v << -shift) as i16
                        }
                    })
                })
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(e.to_string()))?
        }
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| (v.clamp(-1.0, 1.0) * i16::MAX as f32) as i16))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (fmt, bits) => return Err(wav_err(format!("unsupported sample format {fmt:?}/{bits}"))),
    };
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame[channel])
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Measures every record that has `<wav_dir>/<call_id>.wav`, replacing its durations.
/// Returns the updated feed and one warning per unreadable file.
pub fn measure_feed_audio(
    feed: &Feed,
    wav_dir: &Path,
    vad: &dyn VoiceActivityDetector,
    channel: usize,
) -> (Feed, Vec<String>) {
    let results: Vec<(CallRecord, Option<String>)> = feed
        .records
        .par_iter()
        .map(|r| {
            let path = wav_dir.join(format!("{}.wav", r.call_id));
            if !path.exists() {
                return (r.clone(), None);
            }
            let measured = read_wav_mono(&path, channel)
                .and_then(|(samples, rate)| vad.measure(&samples, rate));
            match measured {
                Ok(va) => {
                    let mut out = r.clone();
                    out.total_duration_s = va.total_duration_s;
                    out.voiced_duration_s = Some(va.voiced_duration_s);
                    (out, None)
                }
                Err(e) => (r.clone(), Some(format!("{}: {e}", r.call_id))),
            }
        })
        .collect();
    let mut warnings = Vec::new();
    let records = results
        .into_iter()
        .map(|(r, w)| {
            warnings.extend(w);
            r
        })
        .collect();
    (feed.with_records(records), warnings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_voiced_s: f64,
    pub min_voiced_fraction: f64,
    pub min_transcript_chars: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_voiced_s: 5.0,
            min_voiced_fraction: 0.10,
            min_transcript_chars: 30,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.min_voiced_s > 0.0)
            || !(self.min_voiced_fraction > 0.0)
            || self.min_transcript_chars == 0
        {
            return Err(PreprocessError::InvalidPolicy(
                "all thresholds must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardReason {
    NoVad,
    ShortVoiced,
    LowVoicedFraction,
    ShortTranscript,
}

impl DiscardReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DiscardReason::NoVad => "no-vad",
            DiscardReason::ShortVoiced => "short-voiced",
            DiscardReason::LowVoicedFraction => "low-voiced-fraction",
            DiscardReason::ShortTranscript => "short-transcript",
        }
    }
}

fn voiced_fraction(r: &CallRecord, voiced: f64) -> f64 {
    if r.total_duration_s > 0.0 {
        voiced / r.total_duration_s
    } else {
        0.0
    }
}

/// First failing gate for a record, if any.
pub fn check_record(r: &CallRecord, policy: &FilterPolicy) -> Option<DiscardReason> {
    let Some(voiced) = r.voiced_duration_s else {
        return Some(DiscardReason::NoVad);
    };
    if voiced < policy.min_voiced_s {
        return Some(DiscardReason::ShortVoiced);
    }
    if voiced_fraction(r, voiced) < policy.min_voiced_fraction {
        return Some(DiscardReason::LowVoicedFraction);
    }
    match &r.transcript {
        Some(t) if t.trim().chars().count() < policy.min_transcript_chars => {
            Some(DiscardReason::ShortTranscript)
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub retained: Vec<CallRecord>,
    pub discarded: Vec<(CallRecord, DiscardReason)>,
}

pub fn filter_calls(feed: &Feed, policy: &FilterPolicy) -> FilterOutcome {
    let verdicts: Vec<Option<DiscardReason>> = feed
        .records
        .par_iter()
        .map(|r| check_record(r, policy))
        .collect();
    let mut out = FilterOutcome::default();
    for (r, verdict) in feed.records.iter().zip(verdicts) {
        match verdict {
            None => out.retained.push(r.clone()),
            Some(reason) => out.discarded.push((r.clone(), reason)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionSummary {
    pub total: usize,
    pub retained: usize,
    pub retention_rate: f64,
    /// Calls passing only the voiced-fraction gate.
    pub fraction_only_retained: usize,
    pub fraction_only_rate: f64,
    pub discarded_by_reason: BTreeMap<String, usize>,
}

pub fn summarize(feed: &Feed, outcome: &FilterOutcome, policy: &FilterPolicy) -> RetentionSummary {
    let total = feed.len();
    let rate = |n: usize| {
        if total == 0 {
            0.0
        } else {
            n as f64 / total as f64
        }
    };
    let fraction_only_retained = feed
        .records
        .iter()
        .filter(|r| {
            r.voiced_duration_s
                .is_some_and(|v| voiced_fraction(r, v) >= policy.min_voiced_fraction)
        })
        .count();
    let mut discarded_by_reason = BTreeMap::new();
    for (_, reason) in &outcome.discarded {
        *discarded_by_reason
            .entry(reason.as_str().to_string())
            .or_insert(0) += 1;
    }
    RetentionSummary {
        total,
        retained: outcome.retained.len(),
        retention_rate: rate(outcome.retained.len()),
        fraction_only_retained,
        fraction_only_rate: rate(fraction_only_retained),
        discarded_by_reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttestationLevel, SipAttempt, Timestamp};
    use proptest::prelude::*;

    fn tone(n: usize, rate: u32, amp: f64) -> Vec<i16> {
        (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                (amp * 32767.0 * (2.0 * std::f64::consts::PI * 440.0 * t).sin()) as i16
            })
            .collect()
    }

    #[test]
    fn silence_has_no_voiced_audio() {
        let va = compute_voice_activity(&vec![0; 160_000], 16_000, &VadConfig::default()).unwrap();
        assert_eq!(va.total_duration_s, 10.0);
        assert_eq!(va.voiced_duration_s, 0.0);
    }

    #[test]
    fn full_scale_sine_is_fully_voiced() {
        let samples = tone(80_000, 8_000, 1.0);
        let va = compute_voice_activity(&samples, 8_000, &VadConfig::default()).unwrap();
        assert_eq!(va.total_duration_s, 10.0);
        assert!((va.voiced_duration_s - 10.0).abs() < 1e-12, "{va:?}");
    }

    #[test]
    fn half_silence_half_tone_is_within_one_frame() {
        for rate in SUPPORTED_SAMPLE_RATES {
            let half = rate as usize * 5;
            let mut samples = vec![0i16; half];
            samples.extend(tone(half, rate, 0.5));
            let cfg = VadConfig::default();
            let va = compute_voice_activity(&samples, rate, &cfg).unwrap();
            let frame_s = cfg.frame_ms as f64 / 1000.0;
            assert!((va.total_duration_s - 10.0).abs() < 1e-12);
            assert!(
                (va.voiced_duration_s - 5.0).abs() <= frame_s,
                "{rate}: {va:?}"
            );
        }
    }

    #[test]
    fn quiet_noise_floor_raises_threshold() {
        // low-level hiss everywhere, louder tone in the middle third
        let rate = 16_000;
        let mut samples: Vec<i16> = (0..rate * 9)
            .map(|i| if i % 2 == 0 { 300 } else { -300 })
            .collect();
        let loud = tone(rate as usize * 3, rate, 0.3);
        samples[(rate * 3) as usize..(rate * 6) as usize].copy_from_slice(&loud);
        let va = compute_voice_activity(&samples, rate, &VadConfig::default()).unwrap();
        assert!((va.voiced_duration_s - 3.0).abs() <= 0.03, "{va:?}");
    }

    #[test]
    fn vad_errors() {
        let cfg = VadConfig::default();
        assert!(matches!(
            compute_voice_activity(&[1, 2, 3], 22_050, &cfg),
            Err(PreprocessError::UnsupportedSampleRate(22_050))
        ));
        assert!(matches!(
            compute_voice_activity(&[], 8_000, &cfg),
            Err(PreprocessError::EmptySamples)
        ));
        let bad = VadConfig { frame_ms: 5, ..cfg };
        assert!(compute_voice_activity(&[1; 100], 8_000, &bad).is_err());
    }

    #[test]
    fn wav_round_trip_through_hound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c1.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        let caller = tone(8000 * 6, 8000, 0.5);
        for s in &caller {
            w.write_sample(*s).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let (mono, rate) = read_wav_mono(&path, 0).unwrap();
        assert_eq!(rate, 8000);
        assert_eq!(mono, caller);
        let (silent, _) = read_wav_mono(&path, 1).unwrap();
        assert!(silent.iter().all(|s| *s == 0));
    }

    fn record(voiced: Option<f64>, total: f64, transcript: Option<&str>) -> CallRecord {
        CallRecord {
            call_id: "c".into(),
            feed_id: "f".into(),
            caller_id_raw: String::new(),
            called_number_raw: String::new(),
            attempts: vec![SipAttempt::at(Timestamp::from_millis(0))],
            attestation: AttestationLevel::A,
            answered: true,
            total_duration_s: total,
            voiced_duration_s: voiced,
            transcript: transcript.map(str::to_string),
            language: None,
            embedding_row: None,
        }
    }

    #[test]
    fn filter_examples() {
        let p = FilterPolicy::default();
        let fifty = "x".repeat(50);
        assert_eq!(
            check_record(&record(Some(6.0), 20.0, Some(&fifty)), &p),
            None
        );
        assert_eq!(
            check_record(&record(Some(8.0), 100.0, None), &p),
            Some(DiscardReason::LowVoicedFraction)
        );
        assert_eq!(
            check_record(&record(Some(10.0), 20.0, Some(&"y".repeat(20))), &p),
            Some(DiscardReason::ShortTranscript)
        );
        assert_eq!(
            check_record(&record(None, 20.0, None), &p),
            Some(DiscardReason::NoVad)
        );
        assert_eq!(
            check_record(&record(Some(4.0), 20.0, None), &p),
            Some(DiscardReason::ShortVoiced)
        );
        // boundaries are inclusive
        assert_eq!(
            check_record(&record(Some(5.0), 50.0, Some(&"z".repeat(30))), &p),
            None
        );
        assert_eq!(check_record(&record(Some(10.0), 100.0, None), &p), None);
    }

    #[test]
    fn reason_strings_are_kebab_case() {
        assert_eq!(
            serde_json::to_string(&DiscardReason::LowVoicedFraction).unwrap(),
            "\"low-voiced-fraction\""
        );
        assert_eq!(DiscardReason::NoVad.as_str(), "no-vad");
    }

    fn arb_record() -> impl Strategy<Value = CallRecord> {
        (
            0.0f64..120.0,
            0.0f64..1.0,
            prop::option::of(0usize..80),
            any::<bool>(),
        )
            .prop_map(|(total, frac, chars, has_vad)| {
                let transcript = chars.map(|n| "a".repeat(n));
                record(
                    has_vad.then_some(total * frac),
                    total,
                    transcript.as_deref(),
                )
            })
    }

    fn feed_of(records: Vec<CallRecord>) -> Feed {
        let records = records
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.call_id = format!("c{i}");
                r
            })
            .collect();
        Feed::from_records("f", records).unwrap()
    }

    proptest! {
        #[test]
        fn filter_partitions_input(records in prop::collection::vec(arb_record(), 1..40)) {
            let feed = feed_of(records);
            let out = filter_calls(&feed, &FilterPolicy::default());
            prop_assert_eq!(out.retained.len() + out.discarded.len(), feed.len());
            let mut ids: Vec<_> = out.retained.iter().map(|r| r.call_id.clone())
                .chain(out.discarded.iter().map(|(r, _)| r.call_id.clone())).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), feed.len());
        }

        #[test]
        fn relaxing_a_threshold_never_shrinks_retention(
            records in prop::collection::vec(arb_record(), 1..40),
            which in 0usize..3,
            factor in 0.1f64..1.0,
        ) {
            let feed = feed_of(records);
            let strict = FilterPolicy::default();
            let mut relaxed = strict;
            match which {
                0 => relaxed.min_voiced_s *= factor,
                1 => relaxed.min_voiced_fraction *= factor,
                _ => relaxed.min_transcript_chars =
                    ((strict.min_transcript_chars as f64 * factor) as usize).max(1),
            }
            let kept: std::collections::HashSet<_> = filter_calls(&feed, &relaxed)
                .retained.into_iter().map(|r| r.call_id).collect();
            for r in filter_calls(&feed, &strict).retained {
                prop_assert!(kept.contains(&r.call_id));
            }
        }

        #[test]
        fn vad_is_deterministic(samples in prop::collection::vec(any::<i16>(), 1..4000)) {
            let cfg = VadConfig::default();
            let a = compute_voice_activity(&samples, 8000, &cfg).unwrap();
            let b = compute_voice_activity(&samples, 8000, &cfg).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.voiced_duration_s <= a.total_duration_s);
        }
    }

    #[test]
    fn summary_reports_both_rates() {
        let feed = feed_of(vec![
            record(Some(6.0), 20.0, Some(&"x".repeat(40))),
            record(Some(3.0), 10.0, None),
            record(Some(1.0), 100.0, None),
            record(None, 10.0, None),
        ]);
        let p = FilterPolicy::default();
        let out = filter_calls(&feed, &p);
        let s = summarize(&feed, &out, &p);
        assert_eq!(s.retained, 1);
        assert_eq!(s.fraction_only_retained, 2);
        assert_eq!(s.retention_rate, 0.25);
        assert_eq!(s.fraction_only_rate, 0.5);
        assert_eq!(s.discarded_by_reason["no-vad"], 1);
    }
}
