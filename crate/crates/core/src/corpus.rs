//! Utterance manifests, speaker-disjoint splits, WAV input and an optional
//! energy-based voice activity detector.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate every audio file must have.
pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Accent label of an utterance spoken natively.
pub const NATIVE: &str = "native";

/// Relative tolerance on per-speaker durations when a split is balanced.
pub const BALANCE_TOLERANCE: f64 = 0.2;

/// One audio segment and its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language: String,
    pub accent: String,
    pub family: String,
    pub audio_path: PathBuf,
    pub duration_s: f64,
}

impl UtteranceRecord {
    pub fn is_native(&self) -> bool {
        self.accent == NATIVE
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.utterance_id.is_empty() {
            return Err("utterance_id is empty".into());
        }
        if self.speaker_id.is_empty() {
            return Err("speaker_id is empty".into());
        }
        if !is_language_code(&self.language) {
            return Err(format!("`{}` is not a language code", self.language));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        if self.accent != NATIVE {
            if !is_language_code(&self.accent) {
                return Err(format!(
                    "accent must be \"native\" or a language code, got `{}`",
                    self.accent
                ));
            }
            if self.accent == self.language {
                return Err("accent must differ from the utterance language".into());
            }
        }
        Ok(())
    }
}

/// ISO-639-1/3 style code: 2 or 3 lowercase ASCII letters.
fn is_language_code(s: &str) -> bool {
    (2..=3).contains(&s.len()) && s.bytes().all(|b| b.is_ascii_lowercase())
}

/// Reads a newline-delimited JSON manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    parse_manifest(&text)
}

/// Parses manifest text. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<UtteranceRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord =
            serde_json::from_str(line).map_err(|e| Error::SchemaViolation {
                line: line_no,
                reason: e.to_string(),
            })?;
        rec.validate().map_err(|reason| Error::SchemaViolation {
            line: line_no,
            reason,
        })?;
        if !seen.insert(rec.utterance_id.clone()) {
            return Err(Error::DuplicateUtteranceId {
                id: rec.utterance_id,
                line: line_no,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn manifest_to_string(records: &[UtteranceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// How a test split is carved out of one language's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub target_total_duration_s: f64,
    pub n_speakers: usize,
    pub per_speaker_balance: bool,
    pub seed: u64,
}

/// Picks `spec.n_speakers` test speakers and roughly `target / n_speakers`
/// seconds from each; every utterance of the remaining speakers goes to
/// train. Train and test never share a speaker.
pub fn make_split(
    records: &[UtteranceRecord],
    spec: &SplitSpec,
) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    if spec.n_speakers < 2 {
        return Err(Error::InvalidArgument(
            "a test split needs at least 2 speakers".into(),
        ));
    }
    if !(spec.target_total_duration_s > 0.0) {
        return Err(Error::InvalidArgument(
            "target_total_duration_s must be > 0".into(),
        ));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        by_speaker.entry(r.speaker_id.as_str()).or_default().push(r);
    }
    let budget = spec.target_total_duration_s / spec.n_speakers as f64;
    let floor = budget * (1.0 - BALANCE_TOLERANCE / 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut speakers: Vec<&str> = by_speaker.keys().copied().collect();
    speakers.shuffle(&mut rng);

    let total_of = |s: &str| by_speaker[s].iter().map(|r| r.duration_s).sum::<f64>();
    let eligible: Vec<&str> = if spec.per_speaker_balance {
        speakers.iter().copied().filter(|s| total_of(s) >= floor).collect()
    } else {
        speakers.clone()
    };
    if eligible.len() < spec.n_speakers {
        let shortfall: Vec<String> = speakers
            .iter()
            .filter(|s| !eligible.contains(s))
            .map(|s| format!("{s}: {:.1}s of {:.1}s", total_of(s), floor))
            .collect();
        return Err(Error::InsufficientData(format!(
            "need {} speakers, {} available ({} eligible){}{}",
            spec.n_speakers,
            speakers.len(),
            eligible.len(),
            if shortfall.is_empty() { "" } else { "; short: " },
            shortfall.join(", ")
        )));
    }

    let chosen: Vec<&str> = eligible[..spec.n_speakers].to_vec();
    let mut test_ids = HashSet::new();
    let mut realized = Vec::with_capacity(chosen.len());
    for &spk in &chosen {
        let mut utts = by_speaker[spk].clone();
        utts.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        utts.shuffle(&mut rng);
        let mut acc = 0.0;
        for u in utts {
            if acc >= budget {
                break;
            }
            // stop when adding this utterance overshoots more than it closes
            if acc > 0.0 && acc + u.duration_s - budget > budget - acc {
                break;
            }
            acc += u.duration_s;
            test_ids.insert(u.utterance_id.as_str());
        }
        realized.push((spk, acc));
    }

    if spec.per_speaker_balance {
        let mean = realized.iter().map(|r| r.1).sum::<f64>() / realized.len() as f64;
        let lo = realized.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        let hi = realized.iter().map(|r| r.1).fold(0.0, f64::max);
        if hi - lo > BALANCE_TOLERANCE * mean {
            let detail: Vec<String> = realized
                .iter()
                .map(|(s, d)| format!("{s}: {d:.1}s (target {budget:.1}s)"))
                .collect();
            return Err(Error::InsufficientData(format!(
                "per-speaker durations not within {:.0}% of the mean: {}",
                BALANCE_TOLERANCE * 100.0,
                detail.join(", ")
            )));
        }
    }

    let chosen_set: HashSet<&str> = chosen.into_iter().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        if chosen_set.contains(r.speaker_id.as_str()) {
            if test_ids.contains(r.utterance_id.as_str()) {
                test.push(r.clone());
            }
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Reads a 16-bit mono 16 kHz WAV file as samples scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::AudioFormat(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::RateMismatch {
            expected: SAMPLE_RATE_HZ,
            actual: spec.sample_rate,
        });
    }
    if spec.channels != 1 {
        return Err(Error::AudioFormat(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::AudioFormat(format!(
            "{}: expected 16-bit signed PCM",
            path.display()
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| v as f32 / 32768.0)
                .map_err(|e| Error::AudioFormat(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Writes samples in [-1, 1] as 16-bit mono 16 kHz WAV.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map = |e: hound::Error| Error::AudioFormat(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(map)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(map)?;
    }
    w.finalize().map_err(map)
}

/// Frame energy in dB relative to full scale.
pub fn frame_energy_db(frame: &[f32]) -> f64 {
    let e = frame.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / frame.len() as f64;
    10.0 * (e + 1e-10).log10()
}

/// Speech segments `(start_s, end_s)` of consecutive non-overlapping frames
/// whose energy exceeds `threshold_db`. A trailing partial frame is kept.
pub fn energy_vad(
    samples: &[f32],
    sample_rate_hz: u32,
    frame_ms: f64,
    threshold_db: f64,
) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let frame_len = ((frame_ms / 1000.0) * sample_rate_hz as f64).round() as usize;
    if frame_len == 0 {
        return Err(Error::InvalidArgument(format!(
            "frame of {frame_ms} ms is shorter than one sample"
        )));
    }
    let sr = sample_rate_hz as f64;
    let mut segments = Vec::new();
    let mut open: Option<usize> = None;
    for (i, frame) in samples.chunks(frame_len).enumerate() {
        let start = i * frame_len;
        if frame_energy_db(frame) > threshold_db {
            open.get_or_insert(start);
        } else if let Some(s) = open.take() {
            segments.push((s as f64 / sr, start as f64 / sr));
        }
    }
    if let Some(s) = open {
        segments.push((s as f64 / sr, samples.len() as f64 / sr));
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, spk: &str, dur: f64) -> UtteranceRecord {
        UtteranceRecord {
            utterance_id: id.into(),
            speaker_id: spk.into(),
            language: "en".into(),
            accent: NATIVE.into(),
            family: "indo-european".into(),
            audio_path: format!("/audio/{id}.wav").into(),
            duration_s: dur,
        }
    }

    fn line(id: &str, spk: &str) -> String {
        serde_json::to_string(&rec(id, spk, 3.0)).unwrap()
    }

    #[test]
    fn parses_three_records() {
        let text = [line("a", "s1"), line("b", "s1"), line("c", "s2")].join("\n");
        let recs = parse_manifest(&text).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].speaker_id, "s2");
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = [line("a", "s1"), line("a", "s2")].join("\n");
        match parse_manifest(&text) {
            Err(Error::DuplicateUtteranceId { id, line }) => {
                assert_eq!(id, "a");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut v: serde_json::Value = serde_json::from_str(&line("a", "s")).unwrap();
        v["extra"] = 1.into();
        let err = parse_manifest(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { line: 1, .. }));

        let mut r = rec("a", "s", 0.0);
        let text = serde_json::to_string(&r).unwrap();
        assert!(matches!(
            parse_manifest(&text),
            Err(Error::SchemaViolation { .. })
        ));
        r.duration_s = 1.0;
        r.accent = "en".into();
        let text = format!("\n{}", serde_json::to_string(&r).unwrap());
        assert!(matches!(
            parse_manifest(&text),
            Err(Error::SchemaViolation { line: 2, .. })
        ));
        r.accent = "fi".into();
        assert!(parse_manifest(&serde_json::to_string(&r).unwrap()).is_ok());
    }

    #[test]
    fn missing_manifest() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/m.jsonl")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn twelve_speaker_test_set_shape() {
        // 25 minutes balanced over 12 speakers
        let mut recs = Vec::new();
        for s in 0..12 {
            for u in 0..5 {
                recs.push(rec(&format!("s{s}_u{u}"), &format!("s{s}"), 25.0));
            }
        }
        let text = manifest_to_string(&recs);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test.jsonl");
        std::fs::write(&p, text).unwrap();
        let loaded = load_manifest(&p).unwrap();
        let speakers: HashSet<_> = loaded.iter().map(|r| r.speaker_id.clone()).collect();
        assert_eq!(speakers.len(), 12);
        let total: f64 = loaded.iter().map(|r| r.duration_s).sum();
        assert!((total - 25.0 * 60.0).abs() < 1e-9);
    }

    fn pool(n_speakers: usize, per: usize, dur: f64) -> Vec<UtteranceRecord> {
        let mut recs = Vec::new();
        for s in 0..n_speakers {
            for u in 0..per {
                recs.push(rec(&format!("s{s:02}_u{u:02}"), &format!("s{s:02}"), dur));
            }
        }
        recs
    }

    #[test]
    fn split_twenty_of_sixty() {
        let recs = pool(60, 20, 6.0);
        let spec = SplitSpec {
            target_total_duration_s: 1800.0,
            n_speakers: 20,
            per_speaker_balance: true,
            seed: 7,
        };
        let (train, test) = make_split(&recs, &spec).unwrap();
        let test_spk: HashSet<_> = test.iter().map(|r| &r.speaker_id).collect();
        let train_spk: HashSet<_> = train.iter().map(|r| &r.speaker_id).collect();
        assert_eq!(test_spk.len(), 20);
        assert_eq!(train_spk.len(), 40);
        assert!(test_spk.is_disjoint(&train_spk));
        let total: f64 = test.iter().map(|r| r.duration_s).sum();
        assert!((total - 1800.0).abs() < 1e-9);

        let again = make_split(&recs, &spec).unwrap();
        assert_eq!(again, (train, test));
    }

    #[test]
    fn split_too_few_speakers() {
        let recs = pool(3, 10, 5.0);
        let spec = SplitSpec {
            target_total_duration_s: 100.0,
            n_speakers: 5,
            per_speaker_balance: true,
            seed: 1,
        };
        assert!(matches!(
            make_split(&recs, &spec),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn split_detects_imbalance() {
        let mut recs = pool(4, 1, 30.0);
        recs[0].duration_s = 22.0;
        let spec = SplitSpec {
            target_total_duration_s: 120.0,
            n_speakers: 4,
            per_speaker_balance: true,
            seed: 3,
        };
        // speaker 0 falls below the 27 s eligibility floor
        assert!(make_split(&recs, &spec).is_err());
    }

    #[test]
    fn vad_silence_and_threshold() {
        let zeros = vec![0.0f32; 16_000];
        assert!(energy_vad(&zeros, 16_000, 10.0, -50.0).unwrap().is_empty());
        let tone: Vec<f32> = (0..16_000)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16_000.0).sin())
            .collect();
        assert!(energy_vad(&tone, 16_000, 10.0, 0.0).unwrap().is_empty());
        assert_eq!(energy_vad(&tone, 16_000, 10.0, -30.0).unwrap(), vec![(0.0, 1.0)]);
        assert!(matches!(
            energy_vad(&[], 16_000, 10.0, -30.0),
            Err(Error::EmptyAudio)
        ));
    }

    #[test]
    fn wav_roundtrip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f32> = (0..1600).map(|i| ((i % 100) as f32 - 50.0) / 100.0).collect();
        write_wav(&p, &samples).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-4);
        }

        let p8 = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p8, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&p8),
            Err(Error::RateMismatch { actual: 8000, .. })
        ));
    }
}
