//! Browser bindings for three toolkit operations: a synthetic LFE
//! experiment, front-end analysis of an audio clip and a Fisher-Pitman
//! permutation test. Each binding returns a JSON string and wraps a plain
//! Rust function of the same name.

use std::path::PathBuf;

use lfe_core::features::{compute_mfcc, pitch_track, FeatureConfig};
use lfe_core::pipeline::{run_in_memory, ExperimentConfig, LanguageEntry, LfeReport, StatsConfig};
use lfe_core::stats::{fisher_pitman, fisher_pitman_exhaustive};
use lfe_core::synth::{generate, SynthAccent, SynthLanguage, SynthSpec};
use lfe_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest group size tested exhaustively.
pub const EXHAUSTIVE_MAX: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct ExplorerRow {
    pub label: String,
    pub e_aa: f64,
    pub e_bb: f64,
    pub e_ab: f64,
    pub e_ba: f64,
    pub lfe_percent: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplorerResult {
    pub native: ExplorerRow,
    pub accented: ExplorerRow,
}

/// Small two-language spec with an accented test set of `aa` whose
/// generator mixes in `bb` with weight `accent_weight`.
pub fn explorer_spec(accent_weight: f64, speaker_scale: f64, seed: u64) -> SynthSpec {
    let mut spec = SynthSpec {
        languages: vec![
            SynthLanguage {
                name: "aa".into(),
                family: "north".into(),
                generator: "alpha".into(),
            },
            SynthLanguage {
                name: "bb".into(),
                family: "south".into(),
                generator: "beta".into(),
            },
        ],
        accents: vec![SynthAccent {
            language: "aa".into(),
            accent: "bb".into(),
            weight: accent_weight,
        }],
        speaker_scale,
        train_speakers: 6,
        train_utterances: 6,
        train_frames: 400,
        test_speakers: 4,
        test_utterances: 4,
        test_frames: 300,
        seed,
        ..Default::default()
    };
    spec.ubm.components = Some(8);
    spec.ubm.seed = seed;
    spec.tv.rank = Some(6);
    spec.tv.seed = seed;
    spec.abx.seed = seed;
    spec.stats = StatsConfig {
        n_resamples: 2000,
        seed,
        ..Default::default()
    };
    spec
}

fn in_memory_config(spec: &SynthSpec) -> ExperimentConfig {
    ExperimentConfig {
        preset: None,
        cache_dir: PathBuf::new(),
        output_dir: PathBuf::new(),
        features: FeatureConfig::default(),
        ubm: spec.ubm.clone(),
        tv: spec.tv.clone(),
        abx: spec.abx.clone(),
        stats: spec.stats.clone(),
        languages: spec
            .languages
            .iter()
            .map(|l| LanguageEntry {
                name: l.name.clone(),
                family: l.family.clone(),
                train_manifest: PathBuf::new(),
                test_manifest: PathBuf::new(),
                accented_tests: spec
                    .accents
                    .iter()
                    .filter(|a| a.language == l.name)
                    .map(|a| (a.accent.clone(), PathBuf::new()))
                    .collect(),
            })
            .collect(),
    }
}

pub fn synth_report(spec: &SynthSpec) -> Result<LfeReport> {
    let data = generate(spec, &FeatureConfig::default())?;
    run_in_memory(&in_memory_config(spec), &data)
}

pub fn lfe_explorer(accent_weight: f64, speaker_scale: f64, seed: u64) -> Result<ExplorerResult> {
    let report = synth_report(&explorer_spec(accent_weight, speaker_scale, seed))?;
    let row = |p: &lfe_core::pipeline::PairResult, label: &str| ExplorerRow {
        label: label.into(),
        e_aa: p.score.e_aa,
        e_bb: p.score.e_bb,
        e_ab: p.score.e_ab,
        e_ba: p.score.e_ba,
        lfe_percent: p.score.lfe_percent,
        p_value: p.test.p_value,
    };
    Ok(ExplorerResult {
        native: row(&report.pairs[0], "aa vs bb"),
        accented: row(&report.accented[0], "aa (bb accent) vs bb"),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AudioAnalysis {
    pub n_frames: usize,
    pub frame_shift_ms: f64,
    /// Frame-major, 13 coefficients per frame (c0 is log energy).
    pub mfcc: Vec<f32>,
    /// 0 for unvoiced frames.
    pub f0_hz: Vec<f64>,
    pub voicing: Vec<f64>,
}

/// MFCCs and pitch of 16 kHz mono samples.
pub fn analyze_audio(samples: &[f32]) -> Result<AudioAnalysis> {
    let cfg = FeatureConfig::default();
    let m = compute_mfcc(samples, lfe_core::corpus::SAMPLE_RATE_HZ, &cfg)?;
    let track = pitch_track(samples, lfe_core::corpus::SAMPLE_RATE_HZ, &cfg)?;
    Ok(AudioAnalysis {
        n_frames: m.n_frames,
        frame_shift_ms: cfg.frame_shift_ms,
        mfcc: m.data,
        f0_hz: track.iter().map(|p| if p.is_voiced() { p.f0_hz } else { 0.0 }).collect(),
        voicing: track.iter().map(|p| p.voicing()).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PermutationSummary {
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub exhaustive: bool,
    pub paired: bool,
}

/// Parses numbers separated by commas, spaces or newlines.
pub fn parse_numbers(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

/// Two-tailed test, exhaustive when both groups are small.
pub fn permutation_test(a: &[f64], b: &[f64], paired: bool, seed: u64) -> Result<PermutationSummary> {
    let exhaustive = a.len().max(b.len()) <= EXHAUSTIVE_MAX;
    let r = if exhaustive {
        fisher_pitman_exhaustive(a, b, paired)?
    } else {
        fisher_pitman(a, b, paired, 10_000, seed)?
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(PermutationSummary {
        mean_a: mean(a),
        mean_b: mean(b),
        p_value: r.p_value,
        exhaustive,
        paired,
    })
}

fn to_js<T: Serialize>(r: std::result::Result<T, String>) -> std::result::Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = lfeExplorer)]
pub fn lfe_explorer_js(accent_weight: f64, speaker_scale: f64, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(lfe_explorer(accent_weight, speaker_scale, seed as u64).map_err(|e| e.to_string()))
}

#[wasm_bindgen(js_name = analyzeAudio)]
pub fn analyze_audio_js(samples: &[f32]) -> std::result::Result<String, JsValue> {
    to_js(analyze_audio(samples).map_err(|e| e.to_string()))
}

#[wasm_bindgen(js_name = permutationTest)]
pub fn permutation_test_js(a: &str, b: &str, paired: bool, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(
        parse_numbers(a)
            .and_then(|a| parse_numbers(b).map(|b| (a, b)))
            .and_then(|(a, b)| permutation_test(&a, &b, paired, seed as u64).map_err(|e| e.to_string())),
    )
}
