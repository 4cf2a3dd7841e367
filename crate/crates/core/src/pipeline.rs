//! End-to-end experiment orchestration with a content-addressed cache.
//!
//! Every stage output is stored under `cache_dir/<stage>/<key>` where the
//! key hashes the stage inputs and configuration. Reruns of an unchanged
//! config therefore read every result back instead of recomputing it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::abx::{self, AbxResult, DEFAULT_MAX_TRIPLETS};
use crate::codec::{self, derive_seed, short_hash};
use crate::corpus::{self, UtteranceRecord};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, FeatureConfig, FeatureMatrix};
use crate::par;
use crate::stats::{self, BootstrapCI, FamilyContrast, LfeScore, PermutationTestResult};
use crate::tvspace::{self, Condition, IVector, TestUtterance, TvModel};
use crate::ubm::{self, DiagGmm, Frames};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CACHE_ENV: &str = "LFE_CACHE_DIR";

/// Full-size model settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 128 Gaussians, rank 150.
    Exp1,
    /// 2048 Gaussians, rank 400.
    Exp2,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "exp1" => Ok(Preset::Exp1),
            "exp2" => Ok(Preset::Exp2),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}` (expected exp1 or exp2)"))),
        }
    }

    pub fn components(self) -> usize {
        match self {
            Preset::Exp1 => 128,
            Preset::Exp2 => 2048,
        }
    }

    pub fn rank(self) -> usize {
        match self {
            Preset::Exp1 => 150,
            Preset::Exp2 => 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UbmConfig {
    /// Number of Gaussians; taken from the preset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        UbmConfig {
            components: None,
            iterations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvConfig {
    /// Subspace rank; taken from the preset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            rank: None,
            iterations: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbxConfig {
    /// Triplet cap per condition; 0 means no cap.
    pub max_triplets: u64,
    pub seed: u64,
}

impl Default for AbxConfig {
    fn default() -> Self {
        AbxConfig {
            max_triplets: DEFAULT_MAX_TRIPLETS,
            seed: 0,
        }
    }
}

impl AbxConfig {
    fn cap(&self) -> Option<u64> {
        (self.max_triplets > 0).then_some(self.max_triplets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub n_resamples: usize,
    /// Family-wise significance level, Bonferroni-corrected over pairs.
    pub alpha: f64,
    /// Paired test over matching speaker-pair cells; unpaired otherwise.
    pub paired: bool,
    pub ci_level: f64,
    pub family_ci_level: f64,
    /// Weight pair scores by their triplet counts in the overall mean.
    pub weighted_mean: bool,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            n_resamples: stats::DEFAULT_RESAMPLES,
            alpha: 0.05,
            paired: true,
            ci_level: 0.95,
            family_ci_level: 0.99,
            weighted_mean: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageEntry {
    pub name: String,
    #[serde(default)]
    pub family: String,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Test sets of this language spoken with the accent of another
    /// configured language, keyed by that language.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub accented_tests: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `exp1` or `exp2`; fills in missing UBM size and subspace rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub ubm: UbmConfig,
    #[serde(default)]
    pub tv: TvConfig,
    #[serde(default)]
    pub abx: AbxConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    pub languages: Vec<LanguageEntry>,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            context: "experiment config".into(),
            reason: e.to_string(),
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.cache_dir);
        resolve(&mut cfg.output_dir);
        for l in &mut cfg.languages {
            resolve(&mut l.train_manifest);
            resolve(&mut l.test_manifest);
            l.accented_tests.values_mut().for_each(resolve);
        }
        Ok(cfg)
    }

    /// Reads a config file. `LFE_CACHE_DIR`, when set, replaces `cache_dir`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = codec::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut cfg = Self::from_toml_str(&text, base)?;
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
            cfg.cache_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse {
            context: "experiment config".into(),
            reason: e.to_string(),
        })
    }

    fn preset(&self) -> Result<Option<Preset>> {
        self.preset.as_deref().map(Preset::from_name).transpose()
    }

    pub fn ubm_components(&self) -> Result<usize> {
        match (self.ubm.components, self.preset()?) {
            (Some(k), _) => Ok(k),
            (None, Some(p)) => Ok(p.components()),
            (None, None) => Err(Error::InvalidConfig("ubm.components is not set and no preset is given".into())),
        }
    }

    pub fn tv_rank(&self) -> Result<usize> {
        match (self.tv.rank, self.preset()?) {
            (Some(r), _) => Ok(r),
            (None, Some(p)) => Ok(p.rank()),
            (None, None) => Err(Error::InvalidConfig("tv.rank is not set and no preset is given".into())),
        }
    }

    /// Checks everything that can be checked without reading manifests.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.languages.len() < 2 {
            return bad(format!("{} languages configured; at least 2 are required", self.languages.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.languages {
            if !seen.insert(l.name.as_str()) {
                return bad(format!("language `{}` is listed twice", l.name));
            }
        }
        for l in &self.languages {
            for accent in l.accented_tests.keys() {
                if accent == &l.name || !seen.contains(accent.as_str()) {
                    return bad(format!(
                        "accented test of `{}` names `{accent}`, which is not another configured language",
                        l.name
                    ));
                }
            }
        }
        self.features.validate()?;
        if self.ubm_components()? == 0 || self.tv_rank()? == 0 {
            return bad("ubm.components and tv.rank must be positive".into());
        }
        let s = &self.stats;
        if s.n_resamples == 0 {
            return bad("stats.n_resamples must be positive".into());
        }
        for (name, v) in [("alpha", s.alpha), ("ci_level", s.ci_level), ("family_ci_level", s.family_ci_level)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("stats.{name} = {v} is not in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Short hash of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// One utterance with its features.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub record: UtteranceRecord,
    pub features: FeatureMatrix,
}

/// Loaded train, test and accented test sets of one language.
#[derive(Debug, Clone)]
pub struct LanguageData {
    pub name: String,
    pub family: String,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub accented: BTreeMap<String, Vec<Utterance>>,
}

/// Aggregate ABX error of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub test_set: String,
    pub train_language: String,
    pub n_triplets: u64,
    pub error_rate: f64,
}

/// One LFE row with its test details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub score: LfeScore,
    /// "native", or "accented" when language A's test set carries the
    /// accent of language B.
    pub kind: String,
    pub test: PermutationTestResult,
    /// Triplets over the four conditions.
    pub n_triplets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallLfe {
    pub mean_lfe_percent: f64,
    pub ci: BootstrapCI,
    pub weighted: bool,
    /// Mean familiar and unfamiliar ABX error over native pairs.
    pub mean_same: f64,
    pub mean_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub config_hash: String,
    pub feature_config_hash: String,
    /// Stage and target to cache key.
    pub cache_keys: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfeReport {
    pub languages: Vec<String>,
    pub families: BTreeMap<String, String>,
    /// One row per unordered native pair, in config order.
    pub pairs: Vec<PairResult>,
    pub accented: Vec<PairResult>,
    pub conditions: Vec<ConditionSummary>,
    /// None when fewer than two languages could form resampling units.
    pub overall: Option<OverallLfe>,
    pub family: Option<FamilyContrast>,
    /// Why the family block is absent.
    pub family_notice: Option<String>,
    pub provenance: Provenance,
}

impl LfeReport {
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairResult> {
        self.pairs.iter().find(|p| {
            (p.score.language_a == a && p.score.language_b == b) || (p.score.language_a == b && p.score.language_b == a)
        })
    }

    /// Report without timestamps, for byte comparisons across reruns.
    pub fn to_json_without_timestamps(&self) -> String {
        let mut r = self.clone();
        r.provenance.started_unix_s = 0;
        r.provenance.finished_unix_s = 0;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

/// Stage work counters of one run.
#[derive(Debug, Default)]
pub struct RunLog {
    pub features_extracted: AtomicUsize,
    pub ubms_trained: AtomicUsize,
    pub tvs_trained: AtomicUsize,
    pub conditions_extracted: AtomicUsize,
    pub abx_computed: AtomicUsize,
}

impl RunLog {
    /// Stages that computed anything instead of reading the cache.
    pub fn recomputed(&self) -> usize {
        [
            &self.ubms_trained,
            &self.tvs_trained,
            &self.conditions_extracted,
            &self.abx_computed,
            &self.features_extracted,
        ]
        .iter()
        .map(|c| c.load(Ordering::Relaxed))
        .sum()
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn stage_err(stage: &'static str, target: &str, key: &str) -> impl FnOnce(Error) -> Error {
    let (target, key) = (target.to_string(), key.to_string());
    move |e| Error::Stage {
        stage,
        target,
        key,
        source: Box::new(e),
    }
}

fn key_of(value: serde_json::Value) -> String {
    short_hash(value.to_string().as_bytes())
}

fn set_hash(set: &[Utterance]) -> String {
    let recs: Vec<UtteranceRecord> = set.iter().map(|u| u.record.clone()).collect();
    short_hash(corpus::manifest_to_string(&recs).as_bytes())
}

/// Optional on-disk stage cache.
struct StageCache {
    dir: Option<PathBuf>,
}

impl StageCache {
    fn path(&self, stage: &str, key: &str, ext: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(stage).join(format!("{key}.{ext}")))
    }

    /// Returns the cached value or computes, stores and returns it. A
    /// cached file that fails to decode is recomputed.
    fn get_or_compute<T>(
        &self,
        stage: &str,
        key: &str,
        ext: &str,
        decode: impl Fn(&[u8]) -> Result<T>,
        encode: impl Fn(&T) -> Result<Vec<u8>>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let path = self.path(stage, key, ext);
        if let Some(p) = path.as_ref().filter(|p| p.is_file()) {
            if let Ok(v) = decode(&codec::read_file(p)?) {
                return Ok(v);
            }
        }
        let v = compute()?;
        if let Some(p) = path {
            codec::write_atomic(&p, &encode(&v)?)?;
        }
        Ok(v)
    }
}

/// Pipeline run parameters beyond the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; the global pool when None.
    pub threads: Option<usize>,
    /// Disable the on-disk cache for model, i-vector and ABX stages.
    pub no_cache: bool,
}

/// Loads manifests and features (extracting and caching them on a miss).
pub fn load_languages(cfg: &ExperimentConfig, log: &RunLog) -> Result<Vec<LanguageData>> {
    let fcache = FeatureCache::new(cfg.cache_dir.join("features"));
    let hash = cfg.features.hash();
    let load_set = |lang: &str, path: &Path| -> Result<Vec<Utterance>> {
        let recs = corpus::load_manifest(path).map_err(stage_err("manifest", lang, &path.display().to_string()))?;
        let out = par::map(&recs, |rec| -> Result<Utterance> {
            let features = match fcache.load(&rec.utterance_id, &hash)? {
                Some(m) => m,
                None => {
                    log.features_extracted.fetch_add(1, Ordering::Relaxed);
                    let m = crate::features::extract_features(rec, &cfg.features)?;
                    fcache.store(&m)?;
                    m
                }
            };
            Ok(Utterance {
                record: rec.clone(),
                features,
            })
        });
        out.into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(stage_err("features", lang, &hash))
    };
    let mut out = Vec::new();
    for l in &cfg.languages {
        let mut accented = BTreeMap::new();
        for (accent, p) in &l.accented_tests {
            accented.insert(accent.clone(), load_set(&format!("{}:{accent}", l.name), p)?);
        }
        out.push(LanguageData {
            name: l.name.clone(),
            family: l.family.clone(),
            train: load_set(&l.name, &l.train_manifest)?,
            test: load_set(&l.name, &l.test_manifest)?,
            accented,
        });
    }
    Ok(out)
}

/// Runs the whole experiment described by `cfg`, using its cache directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<LfeReport> {
    run_pipeline_with(cfg, &RunOptions::default(), &RunLog::default())
}

pub fn run_pipeline_with(cfg: &ExperimentConfig, opts: &RunOptions, log: &RunLog) -> Result<LfeReport> {
    with_threads(opts.threads, || {
        cfg.validate()?;
        let started = now_unix();
        let data = load_languages(cfg, log)?;
        let cache = StageCache {
            dir: (!opts.no_cache).then(|| cfg.cache_dir.clone()),
        };
        let mut report = evaluate(cfg, &data, &cache, log)?;
        report.provenance.started_unix_s = started;
        report.provenance.finished_unix_s = now_unix();
        Ok(report)
    })
}

/// Runs every stage after feature extraction on in-memory data, without
/// touching the disk.
pub fn run_in_memory(cfg: &ExperimentConfig, data: &[LanguageData]) -> Result<LfeReport> {
    evaluate(cfg, data, &StageCache { dir: None }, &RunLog::default())
}

/// Runs `f` on a pool of `threads` workers, or the global pool when None.
#[cfg(feature = "parallel")]
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(f),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<T>(_threads: Option<usize>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f()
}

struct Model {
    key: String,
    tv: TvModel,
}

fn train_ubm(
    cfg: &ExperimentConfig,
    lang: &LanguageData,
    cache: &StageCache,
    log: &RunLog,
    keys: &mut BTreeMap<String, String>,
) -> Result<(DiagGmm, String)> {
    let k = cfg.ubm_components()?;
    let ubm_seed = derive_seed(cfg.ubm.seed, &lang.name);
    let ubm_key = key_of(json!({
        "stage": "ubm", "features": cfg.features.hash(), "train": set_hash(&lang.train),
        "components": k, "iterations": cfg.ubm.iterations, "seed": ubm_seed,
    }));
    keys.insert(format!("ubm/{}", lang.name), ubm_key.clone());
    let ubm = cache
        .get_or_compute("ubm", &ubm_key, "lfeg", DiagGmm::from_bytes, |g| Ok(g.to_bytes()), || {
            log.ubms_trained.fetch_add(1, Ordering::Relaxed);
            let dim = lang.train.first().map_or(0, |u| u.features.dim);
            let mut pooled = Vec::new();
            for u in &lang.train {
                if u.features.dim != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: u.features.dim,
                    });
                }
                pooled.extend_from_slice(&u.features.data);
            }
            let frames = Frames::new(&pooled, dim);
            let init = ubm::init_kmeans(frames, k, ubm_seed)?;
            ubm::em_fit(&init, frames, cfg.ubm.iterations)
        })
        .map_err(stage_err("train-ubm", &lang.name, &ubm_key))?;
    Ok((ubm, ubm_key))
}

fn train_model(cfg: &ExperimentConfig, lang: &LanguageData, cache: &StageCache, log: &RunLog, keys: &mut BTreeMap<String, String>) -> Result<Model> {
    let (ubm, ubm_key) = train_ubm(cfg, lang, cache, log, keys)?;
    let fhash = cfg.features.hash();
    let r = cfg.tv_rank()?;
    let tv_seed = derive_seed(cfg.tv.seed, &lang.name);
    let tv_key = key_of(json!({
        "stage": "tv", "ubm": ubm_key, "rank": r, "iterations": cfg.tv.iterations, "seed": tv_seed,
    }));
    keys.insert(format!("tv/{}", lang.name), tv_key.clone());
    let tv = cache
        .get_or_compute("tv", &tv_key, "lfet", TvModel::from_bytes, |m| Ok(m.to_bytes()), || {
            log.tvs_trained.fetch_add(1, Ordering::Relaxed);
            let stats = par::map(&lang.train, |u| {
                tvspace::accumulate_stats(&ubm, &u.features).map_err(|e| e.for_utterance(&u.record.utterance_id))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut m = tvspace::train_tv(&ubm, &stats, r, cfg.tv.iterations, tv_seed)?;
            m.feature_config_hash = fhash.clone();
            Ok(m)
        })
        .map_err(stage_err("train-tv", &lang.name, &tv_key))?;
    Ok(Model { key: tv_key, tv })
}

/// A test set: a language's native test set or an accented one.
struct TestSet<'a> {
    label: String,
    language: &'a str,
    set: &'a [Utterance],
}

fn condition_ivectors(
    cfg: &ExperimentConfig,
    test: &TestSet<'_>,
    train_language: &str,
    model: &Model,
    cache: &StageCache,
    log: &RunLog,
    keys: &mut BTreeMap<String, String>,
) -> Result<(Vec<IVector>, String)> {
    let cond = Condition::new(&test.label, train_language).to_string();
    let ivec_key = key_of(json!({
        "stage": "ivec", "model": model.key, "test": set_hash(test.set), "label": test.label,
        "features": cfg.features.hash(),
    }));
    keys.insert(format!("ivec/{cond}"), ivec_key.clone());
    let ivs = cache
        .get_or_compute(
            "ivec",
            &ivec_key,
            "lfei",
            tvspace::ivectors_from_bytes,
            |v: &Vec<IVector>| tvspace::ivectors_to_bytes(v),
            || {
                log.conditions_extracted.fetch_add(1, Ordering::Relaxed);
                let set: Vec<TestUtterance> = test
                    .set
                    .iter()
                    .map(|u| TestUtterance {
                        speaker_id: u.record.speaker_id.clone(),
                        features: u.features.clone(),
                    })
                    .collect();
                tvspace::extract_condition(&model.tv, train_language, &test.label, &set)
            },
        )
        .map_err(stage_err("extract", &cond, &ivec_key))?;
    Ok((ivs, ivec_key))
}

fn condition_abx(
    cfg: &ExperimentConfig,
    test: &TestSet<'_>,
    train_language: &str,
    model: &Model,
    cache: &StageCache,
    log: &RunLog,
    keys: &mut BTreeMap<String, String>,
) -> Result<AbxResult> {
    let cond = Condition::new(&test.label, train_language).to_string();
    let (ivs, ivec_key) = condition_ivectors(cfg, test, train_language, model, cache, log, keys)?;

    // the sampling seed depends on the test set only, so every model is
    // scored on the same triplets
    let abx_seed = derive_seed(cfg.abx.seed, &test.label);
    let abx_key = key_of(json!({
        "stage": "abx", "ivec": ivec_key, "max_triplets": cfg.abx.max_triplets, "seed": abx_seed,
    }));
    keys.insert(format!("abx/{cond}"), abx_key.clone());
    cache
        .get_or_compute(
            "abx",
            &abx_key,
            "json",
            |b| {
                serde_json::from_slice(b).map_err(|e| Error::CorruptFile {
                    kind: "abx",
                    reason: e.to_string(),
                })
            },
            |r: &AbxResult| Ok(serde_json::to_vec_pretty(r).expect("abx result serializes")),
            || {
                log.abx_computed.fetch_add(1, Ordering::Relaxed);
                abx::abx_error(&ivs, cfg.abx.cap(), abx_seed)
            },
        )
        .map_err(stage_err("abx", &cond, &abx_key))
}

/// Per-cell error rates of `r` in cell order, checked against `reference`.
fn cell_rates(r: &AbxResult, reference: &AbxResult) -> Result<Vec<f64>> {
    let same_cells = r.cells.len() == reference.cells.len()
        && r.cells
            .iter()
            .zip(&reference.cells)
            .all(|(a, b)| a.speaker_ax == b.speaker_ax && a.speaker_b == b.speaker_b);
    if !same_cells {
        return Err(Error::InvalidArgument(format!(
            "{} and {} have different speaker-pair cells",
            r.condition(),
            reference.condition()
        )));
    }
    Ok(r.cells.iter().map(|c| c.error_rate()).collect())
}

/// LFE score and permutation test of one pair. `aa`, `ab` share the test
/// set of A; `bb`, `ba` share the test set of B. Units are speaker-pair
/// cells: the familiar group holds the cells of `aa` and `bb`, the
/// unfamiliar group the same cells under the other model.
fn score_pair(
    cfg: &ExperimentConfig,
    a: &str,
    b: &str,
    kind: &str,
    [aa, bb, ab, ba]: [&AbxResult; 4],
) -> Result<PairResult> {
    let score = stats::lfe_score(aa.error_rate, bb.error_rate, ab.error_rate, ba.error_rate)?.with_pair(a, b);
    let mut same = cell_rates(aa, aa)?;
    same.extend(cell_rates(bb, bb)?);
    let mut diff = cell_rates(ab, aa)?;
    diff.extend(cell_rates(ba, bb)?);
    let seed = derive_seed(cfg.stats.seed, &format!("{kind}/{a}/{b}"));
    let test = stats::fisher_pitman(&same, &diff, cfg.stats.paired, cfg.stats.n_resamples, seed)?;
    let mut score = score;
    score.p_value = Some(test.p_value);
    Ok(PairResult {
        score,
        kind: kind.into(),
        test,
        n_triplets: aa.n_triplets + bb.n_triplets + ab.n_triplets + ba.n_triplets,
    })
}

/// Single pipeline stages over loaded data. Cache keys match those of a
/// full run, so stages computed here are reused by `run_pipeline` and the
/// other way round.
pub struct Stages<'a> {
    cfg: &'a ExperimentConfig,
    data: Vec<LanguageData>,
    cache: StageCache,
    log: &'a RunLog,
}

impl<'a> Stages<'a> {
    /// Validates `cfg` and loads every language's features.
    pub fn open(cfg: &'a ExperimentConfig, opts: &RunOptions, log: &'a RunLog) -> Result<Self> {
        cfg.validate()?;
        let data = load_languages(cfg, log)?;
        Ok(Stages {
            cfg,
            data,
            cache: StageCache {
                dir: (!opts.no_cache).then(|| cfg.cache_dir.clone()),
            },
            log,
        })
    }

    pub fn languages(&self) -> &[LanguageData] {
        &self.data
    }

    fn language(&self, name: &str) -> Result<&LanguageData> {
        self.data
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("language `{name}` is not configured")))
    }

    /// Native test set `A` or accented test set `A:B`.
    fn test_set(&self, label: &str) -> Result<TestSet<'_>> {
        let (lang, accent) = match label.split_once(':') {
            Some((l, a)) => (l, Some(a)),
            None => (label, None),
        };
        let l = self.language(lang)?;
        let set = match accent {
            None => &l.test,
            Some(a) => l
                .accented
                .get(a)
                .ok_or_else(|| Error::InvalidArgument(format!("`{lang}` has no test set with accent `{a}`")))?,
        };
        Ok(TestSet {
            label: label.to_string(),
            language: &l.name,
            set,
        })
    }

    /// Cache file of a stage result, when caching is on.
    pub fn cache_path(&self, stage: &str, key: &str) -> Option<PathBuf> {
        let ext = match stage {
            "ubm" => "lfeg",
            "tv" => "lfet",
            "ivec" => "lfei",
            _ => "json",
        };
        self.cache.path(stage, key, ext)
    }

    /// UBM of `lang` and its cache key.
    pub fn ubm(&self, lang: &str) -> Result<(DiagGmm, String)> {
        train_ubm(self.cfg, self.language(lang)?, &self.cache, self.log, &mut BTreeMap::new())
    }

    /// Total-variability model of `lang` and its cache key.
    pub fn tv(&self, lang: &str) -> Result<(TvModel, String)> {
        let m = train_model(self.cfg, self.language(lang)?, &self.cache, self.log, &mut BTreeMap::new())?;
        Ok((m.tv, m.key))
    }

    /// I-vectors of test set `test` (`A` or `A:B`) under the model of `train`.
    pub fn ivectors(&self, test: &str, train: &str) -> Result<(Vec<IVector>, String)> {
        let t = self.test_set(test)?;
        let model = train_model(self.cfg, self.language(train)?, &self.cache, self.log, &mut BTreeMap::new())?;
        condition_ivectors(self.cfg, &t, train, &model, &self.cache, self.log, &mut BTreeMap::new())
    }

    pub fn abx(&self, test: &str, train: &str) -> Result<AbxResult> {
        let t = self.test_set(test)?;
        let model = train_model(self.cfg, self.language(train)?, &self.cache, self.log, &mut BTreeMap::new())?;
        condition_abx(self.cfg, &t, train, &model, &self.cache, self.log, &mut BTreeMap::new())
    }

    /// LFE row of the native pair (`a`, `b`), or of the accented test set
    /// when `a` is `A:B`. Significance is corrected for this row alone.
    pub fn pair(&self, a: &str, b: &str) -> Result<PairResult> {
        let (kind, la) = match a.split_once(':') {
            Some((l, _)) => ("accented", l),
            None => ("native", a),
        };
        let target = format!("{a}-{b}");
        let mut row = score_pair(
            self.cfg,
            la,
            b,
            kind,
            [&self.abx(a, la)?, &self.abx(b, b)?, &self.abx(a, b)?, &self.abx(b, la)?],
        )
        .map_err(stage_err("lfe", &target, &self.cfg.hash()))?;
        annotate(std::slice::from_mut(&mut row), self.cfg.stats.alpha);
        Ok(row)
    }
}

/// Applies Bonferroni significance and star labels across `rows`.
fn annotate(rows: &mut [PairResult], alpha: f64) {
    let p: Vec<f64> = rows.iter().map(|r| r.test.p_value).collect();
    let sig = stats::bonferroni(&p, alpha);
    for (r, s) in rows.iter_mut().zip(sig) {
        r.score.significant = s;
        r.score.stars = stats::stars(r.test.p_value, p.len()).to_string();
    }
}

fn evaluate(cfg: &ExperimentConfig, data: &[LanguageData], cache: &StageCache, log: &RunLog) -> Result<LfeReport> {
    cfg.validate()?;
    let mut keys = BTreeMap::new();
    let mut models = Vec::new();
    for lang in data {
        models.push(train_model(cfg, lang, cache, log, &mut keys)?);
    }
    let index: BTreeMap<&str, usize> = data.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();

    let mut tests: Vec<TestSet<'_>> = data
        .iter()
        .map(|l| TestSet {
            label: l.name.clone(),
            language: &l.name,
            set: &l.test,
        })
        .collect();
    for l in data {
        for (accent, set) in &l.accented {
            if !index.contains_key(accent.as_str()) {
                return Err(Error::InvalidConfig(format!("accent `{accent}` of `{}` is not a configured language", l.name)));
            }
            tests.push(TestSet {
                label: format!("{}:{accent}", l.name),
                language: &l.name,
                set,
            });
        }
    }

    // (test label, train language) -> result
    let mut abx_results: BTreeMap<(String, String), AbxResult> = BTreeMap::new();
    let mut conditions = Vec::new();
    for t in &tests {
        let trains: Vec<&str> = if t.label == t.language {
            data.iter().map(|l| l.name.as_str()).collect()
        } else {
            let accent = &t.label[t.language.len() + 1..];
            vec![t.language, accent]
        };
        for train in trains {
            let r = condition_abx(cfg, t, train, &models[index[train]], cache, log, &mut keys)?;
            conditions.push(ConditionSummary {
                test_set: t.label.clone(),
                train_language: train.to_string(),
                n_triplets: r.n_triplets,
                error_rate: r.error_rate,
            });
            abx_results.insert((t.label.clone(), train.to_string()), r);
        }
    }
    let get = |test: &str, train: &str| &abx_results[&(test.to_string(), train.to_string())];

    let mut pairs = Vec::new();
    for (i, la) in data.iter().enumerate() {
        for lb in &data[i + 1..] {
            let (a, b) = (la.name.as_str(), lb.name.as_str());
            let row = score_pair(cfg, a, b, "native", [get(a, a), get(b, b), get(a, b), get(b, a)])
                .map_err(stage_err("lfe", &format!("{a}-{b}"), &cfg.hash()))?;
            pairs.push(row);
        }
    }
    annotate(&mut pairs, cfg.stats.alpha);

    let mut accented = Vec::new();
    for la in data {
        for accent in la.accented.keys() {
            let (a, b) = (la.name.as_str(), accent.as_str());
            let acc = format!("{a}:{b}");
            let row = score_pair(cfg, a, b, "accented", [get(&acc, a), get(b, b), get(&acc, b), get(b, a)])
                .map_err(stage_err("lfe", &format!("{acc}-{b}"), &cfg.hash()))?;
            accented.push(row);
        }
    }
    annotate(&mut accented, cfg.stats.alpha);

    let overall = overall_lfe(cfg, &pairs)?;
    let families: BTreeMap<String, String> = data.iter().map(|l| (l.name.clone(), l.family.clone())).collect();
    let (family, family_notice) = if families.values().any(String::is_empty) {
        (None, Some("family labels missing; family contrast omitted".to_string()))
    } else {
        let scores: Vec<LfeScore> = pairs.iter().map(|p| p.score.clone()).collect();
        let seed = derive_seed(cfg.stats.seed, "family");
        match stats::family_contrast(&scores, &families, cfg.stats.family_ci_level, cfg.stats.n_resamples, seed) {
            Ok(f) => (Some(f), None),
            Err(Error::MissingContrast(m)) => (None, Some(format!("family contrast omitted: {m}"))),
            Err(e) => return Err(stage_err("lfe", "family contrast", &cfg.hash())(e)),
        }
    };

    Ok(LfeReport {
        languages: data.iter().map(|l| l.name.clone()).collect(),
        families,
        pairs,
        accented,
        conditions,
        overall,
        family,
        family_notice,
        provenance: Provenance {
            toolkit_version: TOOLKIT_VERSION.into(),
            config_hash: cfg.hash(),
            feature_config_hash: cfg.features.hash(),
            cache_keys: keys,
            started_unix_s: 0,
            finished_unix_s: 0,
        },
    })
}

/// Mean LFE over native pairs with a bootstrap CI over languages; each
/// pair's score is attached to both of its languages.
fn overall_lfe(cfg: &ExperimentConfig, pairs: &[PairResult]) -> Result<Option<OverallLfe>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut by_lang: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for p in pairs {
        let w = if cfg.stats.weighted_mean { p.n_triplets as f64 } else { 1.0 };
        for l in [&p.score.language_a, &p.score.language_b] {
            by_lang.entry(l.clone()).or_default().push((p.score.lfe_percent, w));
        }
    }
    let seed = derive_seed(cfg.stats.seed, "overall");
    let ci = stats::bootstrap_weighted_mean_ci(&by_lang, cfg.stats.ci_level, cfg.stats.n_resamples, seed)?;
    let n = pairs.len() as f64;
    Ok(Some(OverallLfe {
        mean_lfe_percent: ci.estimate,
        ci,
        weighted: cfg.stats.weighted_mean,
        mean_same: pairs.iter().map(|p| p.score.s_same).sum::<f64>() / n,
        mean_diff: pairs.iter().map(|p| p.score.s_diff).sum::<f64>() / n,
    }))
}
