//! Audio-free synthetic languages for end-to-end runs of the pipeline.
//!
//! A synthetic language is a set of "phone" clusters in feature space plus,
//! per phone, a low-rank loading that maps a speaker's latent identity to
//! an offset. Frames are drawn phone segment by phone segment. Two
//! languages built from the same generator label are statistically
//! identical; an accented test set blends two generators.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::derive_seed;
use crate::corpus::{self, UtteranceRecord, NATIVE};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, FeatureConfig, FeatureMatrix};
use crate::pipeline::{
    AbxConfig, ExperimentConfig, LanguageData, LanguageEntry, StatsConfig, TvConfig, UbmConfig,
    Utterance,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLanguage {
    /// Language code used in manifests and reports.
    pub name: String,
    #[serde(default)]
    pub family: String,
    /// Languages sharing a generator label share every generative parameter.
    pub generator: String,
}

/// Test set of `language` spoken with the accent of `accent`: phone means
/// and speaker loadings are `(1 − weight)·language + weight·accent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthAccent {
    pub language: String,
    pub accent: String,
    #[serde(default = "half")]
    pub weight: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub languages: Vec<SynthLanguage>,
    pub accents: Vec<SynthAccent>,
    pub dim: usize,
    pub n_phones: usize,
    /// Standard deviation of phone means around the origin.
    pub phone_spread: f64,
    pub speaker_rank: usize,
    /// Typical size of a speaker offset.
    pub speaker_scale: f64,
    pub noise_sd: f64,
    pub min_phone_frames: usize,
    pub max_phone_frames: usize,
    pub train_speakers: usize,
    pub train_utterances: usize,
    pub train_frames: usize,
    pub test_speakers: usize,
    pub test_utterances: usize,
    pub test_frames: usize,
    pub seed: u64,
    pub ubm: UbmConfig,
    pub tv: TvConfig,
    pub abx: AbxConfig,
    pub stats: StatsConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
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
            accents: Vec::new(),
            dim: 12,
            n_phones: 12,
            phone_spread: 3.0,
            speaker_rank: 4,
            speaker_scale: 0.5,
            noise_sd: 1.0,
            min_phone_frames: 4,
            max_phone_frames: 12,
            train_speakers: 10,
            train_utterances: 12,
            train_frames: 800,
            test_speakers: 6,
            test_utterances: 8,
            test_frames: 400,
            seed: 0,
            ubm: UbmConfig {
                components: Some(16),
                iterations: 10,
                seed: 1,
            },
            tv: TvConfig {
                rank: Some(10),
                iterations: 5,
                seed: 2,
            },
            abx: AbxConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.languages.len() < 2 {
            return bad("at least two synthetic languages are required");
        }
        let mut names = std::collections::HashSet::new();
        for l in &self.languages {
            if !names.insert(l.name.as_str()) {
                return bad("duplicate language name");
            }
            if !(2..=3).contains(&l.name.len()) || !l.name.bytes().all(|b| b.is_ascii_lowercase()) {
                return Err(Error::InvalidSpec(format!(
                    "language name `{}` must be 2-3 lowercase letters",
                    l.name
                )));
            }
        }
        for a in &self.accents {
            if !names.contains(a.language.as_str()) || !names.contains(a.accent.as_str()) {
                return bad("accent refers to an unknown language");
            }
            if a.language == a.accent || !(0.0..=1.0).contains(&a.weight) {
                return bad("accent must name another language with weight in [0, 1]");
            }
        }
        if self.dim == 0 || self.n_phones == 0 || self.speaker_rank == 0 {
            return bad("dim, n_phones and speaker_rank must be positive");
        }
        if self.min_phone_frames == 0 || self.max_phone_frames < self.min_phone_frames {
            return bad("phone durations must satisfy 0 < min <= max");
        }
        if self.test_speakers < 2 || self.test_utterances < 2 {
            return bad("test sets need at least 2 speakers with 2 utterances");
        }
        if self.train_speakers == 0 || self.train_utterances == 0 {
            return bad("empty training set");
        }
        if self.train_frames == 0 || self.test_frames == 0 {
            return bad("utterances need at least one frame");
        }
        if !(self.noise_sd > 0.0) {
            return bad("noise_sd must be positive");
        }
        Ok(())
    }

    fn language(&self, name: &str) -> &SynthLanguage {
        self.languages.iter().find(|l| l.name == name).expect("validated")
    }
}

/// Generative parameters of one synthetic language.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    /// n_phones × dim.
    pub phone_means: Vec<f64>,
    /// Per phone: dim × speaker_rank, row-major.
    pub loadings: Vec<Vec<f64>>,
    dim: usize,
    rank: usize,
}

impl Generator {
    pub fn new(spec: &SynthSpec, label: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("generator/{label}")));
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let phone_means = (0..spec.n_phones * spec.dim)
            .map(|_| spec.phone_spread * normal())
            .collect();
        let scale = spec.speaker_scale / (spec.speaker_rank as f64).sqrt();
        let loadings = (0..spec.n_phones)
            .map(|_| (0..spec.dim * spec.speaker_rank).map(|_| scale * normal()).collect())
            .collect();
        Generator {
            phone_means,
            loadings,
            dim: spec.dim,
            rank: spec.speaker_rank,
        }
    }

    /// `(1 − w)·self + w·other`, parameter by parameter.
    pub fn blend(&self, other: &Generator, w: f64) -> Generator {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
        };
        Generator {
            phone_means: mix(&self.phone_means, &other.phone_means),
            loadings: self
                .loadings
                .iter()
                .zip(&other.loadings)
                .map(|(a, b)| mix(a, b))
                .collect(),
            dim: self.dim,
            rank: self.rank,
        }
    }

    /// Frames of one utterance by a speaker with latent identity `speaker`.
    pub fn utterance(&self, spec: &SynthSpec, speaker: &[f64], n_frames: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let (d, r) = (self.dim, self.rank);
        let n_phones = self.loadings.len();
        let mut data = Vec::with_capacity(n_frames * d);
        let mut offsets = vec![0.0; d];
        while data.len() < n_frames * d {
            let p = rng.gen_range(0..n_phones);
            let len = rng.gen_range(spec.min_phone_frames..=spec.max_phone_frames);
            let load = &self.loadings[p];
            for j in 0..d {
                offsets[j] = (0..r).map(|a| load[j * r + a] * speaker[a]).sum();
            }
            for _ in 0..len {
                if data.len() >= n_frames * d {
                    break;
                }
                for j in 0..d {
                    let noise: f64 = StandardNormal.sample(rng);
                    data.push((self.phone_means[p * d + j] + offsets[j] + spec.noise_sd * noise) as f32);
                }
            }
        }
        data
    }
}

fn speaker_latent(spec: &SynthSpec, id: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("speaker/{id}")));
    (0..spec.speaker_rank).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn make_set(
    spec: &SynthSpec,
    gen: &Generator,
    language: &str,
    accent: &str,
    family: &str,
    tag: &str,
    n_speakers: usize,
    n_utts: usize,
    n_frames: usize,
    audio_dir: &Path,
    frame_shift_s: f64,
) -> Vec<Utterance> {
    let mut out = Vec::with_capacity(n_speakers * n_utts);
    for s in 0..n_speakers {
        let speaker_id = format!("{language}-{tag}-s{s:02}");
        let latent = speaker_latent(spec, &speaker_id);
        for u in 0..n_utts {
            let utterance_id = format!("{speaker_id}-u{u:02}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("utt/{utterance_id}")));
            let data = gen.utterance(spec, &latent, n_frames, &mut rng);
            out.push(Utterance {
                record: UtteranceRecord {
                    utterance_id: utterance_id.clone(),
                    speaker_id: speaker_id.clone(),
                    language: language.into(),
                    accent: accent.into(),
                    family: family.into(),
                    audio_path: audio_dir.join(format!("{utterance_id}.wav")),
                    duration_s: n_frames as f64 * frame_shift_s,
                },
                features: FeatureMatrix::new(utterance_id, spec.dim, data),
            });
        }
    }
    out
}

/// Generates every language's train, test and accented test sets in memory.
/// `features` supplies the configuration hash the matrices are tagged with.
pub fn generate(spec: &SynthSpec, features: &FeatureConfig) -> Result<Vec<LanguageData>> {
    spec.validate()?;
    let hash = features.hash();
    let shift_s = features.frame_shift_ms / 1000.0;
    let audio_dir = PathBuf::from("synthetic");
    let generators: BTreeMap<&str, Generator> = spec
        .languages
        .iter()
        .map(|l| (l.name.as_str(), Generator::new(spec, &l.generator)))
        .collect();
    let mut out = Vec::new();
    for lang in &spec.languages {
        let gen = &generators[lang.name.as_str()];
        let (name, fam) = (lang.name.as_str(), lang.family.as_str());
        let mut data = LanguageData {
            name: name.into(),
            family: fam.into(),
            train: make_set(spec, gen, name, NATIVE, fam, "train", spec.train_speakers, spec.train_utterances, spec.train_frames, &audio_dir, shift_s),
            test: make_set(spec, gen, name, NATIVE, fam, "test", spec.test_speakers, spec.test_utterances, spec.test_frames, &audio_dir, shift_s),
            accented: BTreeMap::new(),
        };
        for acc in spec.accents.iter().filter(|a| a.language == lang.name) {
            let other = &generators[spec.language(&acc.accent).name.as_str()];
            let blended = gen.blend(other, acc.weight);
            let tag = format!("acc{}", acc.accent);
            let set = make_set(spec, &blended, name, &acc.accent, fam, &tag, spec.test_speakers, spec.test_utterances, spec.test_frames, &audio_dir, shift_s);
            data.accented.insert(acc.accent.clone(), set);
        }
        for u in data
            .train
            .iter_mut()
            .chain(data.test.iter_mut())
            .chain(data.accented.values_mut().flatten())
        {
            u.features.config_hash = hash.clone();
        }
        out.push(data);
    }
    Ok(out)
}

/// Writes manifests, feature caches and a runnable config under `out_dir`;
/// returns the config and its path. No audio is written: every utterance's
/// features are already cached, so the pipeline never opens `audio_path`.
pub fn synth_experiment(spec: &SynthSpec, out_dir: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let features = FeatureConfig::default();
    let data = generate(spec, &features)?;
    let cache_dir = out_dir.join("cache");
    let manifest_dir = out_dir.join("manifests");
    std::fs::create_dir_all(&manifest_dir)
        .map_err(|e| Error::io(format!("creating {}", manifest_dir.display()), e))?;
    let cache = FeatureCache::new(cache_dir.join("features"));
    let write_set = |name: String, set: &[Utterance]| -> Result<PathBuf> {
        for u in set {
            cache.store(&u.features)?;
        }
        let recs: Vec<UtteranceRecord> = set.iter().map(|u| u.record.clone()).collect();
        let path = manifest_dir.join(name);
        crate::codec::write_atomic(&path, corpus::manifest_to_string(&recs).as_bytes())?;
        Ok(PathBuf::from("manifests").join(path.file_name().unwrap()))
    };
    let mut languages = Vec::new();
    for lang in &data {
        let mut entry = LanguageEntry {
            name: lang.name.clone(),
            family: lang.family.clone(),
            train_manifest: write_set(format!("{}_train.jsonl", lang.name), &lang.train)?,
            test_manifest: write_set(format!("{}_test.jsonl", lang.name), &lang.test)?,
            accented_tests: BTreeMap::new(),
        };
        for (accent, set) in &lang.accented {
            let p = write_set(format!("{}_test_accent_{accent}.jsonl", lang.name), set)?;
            entry.accented_tests.insert(accent.clone(), p);
        }
        languages.push(entry);
    }
    let config = ExperimentConfig {
        preset: None,
        languages,
        features,
        ubm: spec.ubm.clone(),
        tv: spec.tv.clone(),
        abx: spec.abx.clone(),
        stats: spec.stats.clone(),
        cache_dir: PathBuf::from("cache"),
        output_dir: PathBuf::from("out"),
    };
    let path = out_dir.join("config.toml");
    let text = toml::to_string_pretty(&config).map_err(|e| Error::Parse {
        context: "config".into(),
        reason: e.to_string(),
    })?;
    crate::codec::write_atomic(&path, text.as_bytes())?;
    let config = ExperimentConfig::load(&path)?;
    Ok((config, path))
}
