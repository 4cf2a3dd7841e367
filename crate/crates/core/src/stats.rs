//! LFE scores, Fisher-Pitman permutation tests, Bonferroni correction,
//! percentile bootstrap intervals and the language-family contrast.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::derive_seed;
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_RESAMPLES: usize = 10_000;
/// Significance levels of the one- and two-star annotations.
pub const STAR_ALPHAS: [f64; 2] = [0.05, 0.005];

const RESAMPLE_BLOCK: usize = 1000;

/// Relative increase of the ABX error from familiar to unfamiliar
/// conditions, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfeScore {
    pub language_a: String,
    pub language_b: String,
    /// Ts(A)Tr(A), Ts(B)Tr(B), Ts(A)Tr(B), Ts(B)Tr(A).
    pub e_aa: f64,
    pub e_bb: f64,
    pub e_ab: f64,
    pub e_ba: f64,
    pub s_same: f64,
    pub s_diff: f64,
    pub lfe_percent: f64,
    pub p_value: Option<f64>,
    pub significant: bool,
    pub stars: String,
}

impl LfeScore {
    pub fn with_pair(mut self, a: &str, b: &str) -> Self {
        self.language_a = a.into();
        self.language_b = b.into();
        self
    }
}

pub fn lfe_score(e_aa: f64, e_bb: f64, e_ab: f64, e_ba: f64) -> Result<LfeScore> {
    for (name, v) in [("e_aa", e_aa), ("e_bb", e_bb), ("e_ab", e_ab), ("e_ba", e_ba)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} = {v} is not an error rate")));
        }
    }
    let s_same = (e_aa + e_bb) / 2.0;
    let s_diff = (e_ab + e_ba) / 2.0;
    if s_same == 0.0 {
        return Err(Error::DegenerateSame);
    }
    Ok(LfeScore {
        language_a: String::new(),
        language_b: String::new(),
        e_aa,
        e_bb,
        e_ab,
        e_ba,
        s_same,
        s_diff,
        lfe_percent: 100.0 * (s_diff - s_same) / s_same,
        p_value: None,
        significant: false,
        stars: String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    /// mean(group_diff) − mean(group_same).
    pub statistic: f64,
    pub p_value: f64,
    /// Monte-Carlo draws, or the number of enumerated assignments when
    /// `exhaustive`.
    pub n_resamples: usize,
    pub paired: bool,
    pub exhaustive: bool,
    pub seed: u64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// |resampled| ≥ |observed| with a relative tolerance, so resamples that
/// reproduce the observed statistic up to rounding count as extreme.
fn at_least_as_extreme(resampled: f64, observed: f64) -> bool {
    resampled.abs() >= observed.abs() * (1.0 - 1e-12) - 1e-15
}

fn check_groups(same: &[f64], diff: &[f64], paired: bool) -> Result<()> {
    if same.is_empty() || diff.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if paired && same.len() != diff.len() {
        return Err(Error::LengthMismatch {
            left: same.len(),
            right: diff.len(),
        });
    }
    Ok(())
}

/// Two-tailed Fisher-Pitman test with Monte-Carlo resampling and the
/// add-one p-value estimator. The unpaired test permutes group labels over
/// the pooled scores; the paired test flips signs of per-unit differences.
pub fn fisher_pitman(
    group_same: &[f64],
    group_diff: &[f64],
    paired: bool,
    n_resamples: usize,
    seed: u64,
) -> Result<PermutationTestResult> {
    check_groups(group_same, group_diff, paired)?;
    if n_resamples == 0 {
        return Err(Error::InvalidArgument("n_resamples must be positive".into()));
    }
    let blocks = par::blocks(n_resamples, RESAMPLE_BLOCK, usize::MAX);
    let (statistic, hits): (f64, Vec<usize>) = if paired {
        let d: Vec<f64> = group_diff.iter().zip(group_same).map(|(b, a)| b - a).collect();
        let obs = mean(&d);
        let hits = par::map(&blocks, |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("block{}", b.start)));
            b.clone()
                .filter(|_| {
                    let s: f64 = d.iter().map(|&v| if rng.gen::<bool>() { v } else { -v }).sum();
                    at_least_as_extreme(s / d.len() as f64, obs)
                })
                .count()
        });
        (obs, hits)
    } else {
        let obs = mean(group_diff) - mean(group_same);
        let pooled: Vec<f64> = group_same.iter().chain(group_diff).copied().collect();
        let total: f64 = pooled.iter().sum();
        let (ns, nd) = (group_same.len(), group_diff.len());
        let hits = par::map(&blocks, |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("block{}", b.start)));
            let mut buf = pooled.clone();
            b.clone()
                .filter(|_| {
                    let (head, _) = buf.partial_shuffle(&mut rng, ns);
                    let s_same: f64 = head.iter().sum();
                    let stat = (total - s_same) / nd as f64 - s_same / ns as f64;
                    at_least_as_extreme(stat, obs)
                })
                .count()
        });
        (obs, hits)
    };
    let hits: usize = hits.iter().sum();
    Ok(PermutationTestResult {
        statistic,
        p_value: (1 + hits) as f64 / (1 + n_resamples) as f64,
        n_resamples,
        paired,
        exhaustive: false,
        seed,
    })
}

/// Exact two-tailed test by enumerating every label assignment (unpaired)
/// or sign pattern (paired). Intended for small groups.
pub fn fisher_pitman_exhaustive(
    group_same: &[f64],
    group_diff: &[f64],
    paired: bool,
) -> Result<PermutationTestResult> {
    check_groups(group_same, group_diff, paired)?;
    let (statistic, total, hits) = if paired {
        let d: Vec<f64> = group_diff.iter().zip(group_same).map(|(b, a)| b - a).collect();
        if d.len() > 24 {
            return Err(Error::InvalidArgument("too many units for exhaustive enumeration".into()));
        }
        let obs = mean(&d);
        let total = 1usize << d.len();
        let hits = (0..total)
            .filter(|mask| {
                let s: f64 = d
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if mask >> i & 1 == 1 { -v } else { v })
                    .sum();
                at_least_as_extreme(s / d.len() as f64, obs)
            })
            .count();
        (obs, total, hits)
    } else {
        let pooled: Vec<f64> = group_same.iter().chain(group_diff).copied().collect();
        let n = pooled.len();
        if n > 24 {
            return Err(Error::InvalidArgument("too many units for exhaustive enumeration".into()));
        }
        let (ns, nd) = (group_same.len(), group_diff.len());
        let obs = mean(group_diff) - mean(group_same);
        let sum: f64 = pooled.iter().sum();
        let mut total = 0;
        let mut hits = 0;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != ns {
                continue;
            }
            total += 1;
            let s_same: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| pooled[i]).sum();
            if at_least_as_extreme((sum - s_same) / nd as f64 - s_same / ns as f64, obs) {
                hits += 1;
            }
        }
        (obs, total, hits)
    };
    Ok(PermutationTestResult {
        statistic,
        p_value: hits as f64 / total as f64,
        n_resamples: total,
        paired,
        exhaustive: true,
        seed: 0,
    })
}

/// Significant iff p ≤ alpha / m.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let m = p_values.len().max(1) as f64;
    p_values.iter().map(|&p| p <= alpha / m).collect()
}

/// "**" at 0.005, "*" at 0.05, both corrected over `m` tests.
pub fn stars(p: f64, m: usize) -> &'static str {
    let m = m.max(1) as f64;
    if p <= STAR_ALPHAS[1] / m {
        "**"
    } else if p <= STAR_ALPHAS[0] / m {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
    pub estimate: f64,
    pub n_resamples: usize,
    pub unit: String,
    pub seed: u64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn percentile_interval(mut draws: Vec<f64>, level: f64) -> (f64, f64) {
    draws.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&draws, tail), quantile_sorted(&draws, 1.0 - tail))
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} not in (0, 1)")));
    }
    Ok(())
}

/// Runs `n_resamples` seeded draws of `stat` in fixed blocks; draws that
/// return `None` are discarded.
fn resample<F>(n_resamples: usize, seed: u64, stat: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng) -> Option<f64> + Sync + Send,
{
    let blocks = par::blocks(n_resamples, RESAMPLE_BLOCK, usize::MAX);
    par::map(&blocks, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("block{}", b.start)));
        b.clone().filter_map(|_| stat(&mut rng)).collect::<Vec<_>>()
    })
    .concat()
}

/// Percentile bootstrap of the pooled mean: units are drawn with
/// replacement and every score attached to a drawn unit enters the mean.
pub fn bootstrap_mean_ci(
    values_by_unit: &BTreeMap<String, Vec<f64>>,
    level: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapCI> {
    let weighted = values_by_unit
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(|&x| (x, 1.0)).collect()))
        .collect();
    bootstrap_weighted_mean_ci(&weighted, level, n_resamples, seed)
}

/// As [`bootstrap_mean_ci`] with `(value, weight)` scores and a weighted
/// pooled mean.
pub fn bootstrap_weighted_mean_ci(
    values_by_unit: &BTreeMap<String, Vec<(f64, f64)>>,
    level: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapCI> {
    check_level(level)?;
    if values_by_unit.values().flatten().any(|&(_, w)| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("weights must be positive and finite".into()));
    }
    let units: Vec<&Vec<(f64, f64)>> = values_by_unit.values().filter(|v| !v.is_empty()).collect();
    if units.len() < 2 {
        return Err(Error::TooFewUnits(units.len()));
    }
    let pooled = |vs: &mut dyn Iterator<Item = &(f64, f64)>| -> (f64, f64) {
        vs.fold((0.0, 0.0), |(s, n), &(v, w)| (s + w * v, n + w))
    };
    let (sum, wsum) = pooled(&mut units.iter().flat_map(|v| v.iter()));
    let draws = resample(n_resamples, seed, |rng| {
        let (mut sum, mut wsum) = (0.0, 0.0);
        for _ in 0..units.len() {
            let (s, w) = pooled(&mut units[rng.gen_range(0..units.len())].iter());
            sum += s;
            wsum += w;
        }
        Some(sum / wsum)
    });
    let (lo, hi) = percentile_interval(draws, level);
    Ok(BootstrapCI {
        level,
        lo,
        hi,
        estimate: sum / wsum,
        n_resamples,
        unit: "language".into(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single score.
    pub sd: f64,
    pub n: usize,
}

impl GroupSummary {
    fn of(v: &[f64]) -> Self {
        let m = mean(v);
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        GroupSummary {
            mean: m,
            sd,
            n: v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyContrast {
    pub same_family: GroupSummary,
    pub different_family: GroupSummary,
    /// CI on mean(different family) − mean(same family).
    pub difference: BootstrapCI,
    /// Resamples in which both groups were non-empty.
    pub valid_resamples: usize,
}

/// Splits pair scores by whether both languages share a family and
/// bootstraps the difference of group means, resampling languages within
/// each family.
pub fn family_contrast(
    scores: &[LfeScore],
    families: &BTreeMap<String, String>,
    level: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<FamilyContrast> {
    check_level(level)?;
    let family_of = |lang: &str| -> Result<&str> {
        families
            .get(lang)
            .map(String::as_str)
            .filter(|f| !f.is_empty())
            .ok_or_else(|| Error::MissingFamilyLabel(lang.to_string()))
    };
    let mut pair_score: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    let mut languages: BTreeMap<&str, &str> = BTreeMap::new();
    for s in scores {
        let (fa, fb) = (family_of(&s.language_a)?, family_of(&s.language_b)?);
        languages.insert(&s.language_a, fa);
        languages.insert(&s.language_b, fb);
        pair_score.insert((&s.language_a, &s.language_b), s.lfe_percent);
        pair_score.insert((&s.language_b, &s.language_a), s.lfe_percent);
        if fa == fb {
            same.push(s.lfe_percent);
        } else {
            diff.push(s.lfe_percent);
        }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::MissingContrast(format!(
            "{} same-family and {} different-family pairs",
            same.len(),
            diff.len()
        )));
    }
    let mut by_family: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (&lang, &fam) in &languages {
        by_family.entry(fam).or_default().push(lang);
    }
    let groups: Vec<Vec<&str>> = by_family.into_values().collect();

    let draws = resample(n_resamples, seed, |rng| {
        let drawn: Vec<&str> = groups
            .iter()
            .flat_map(|g| (0..g.len()).map(|_| g[rng.gen_range(0..g.len())]).collect::<Vec<_>>())
            .collect();
        let (mut s_sum, mut s_n, mut d_sum, mut d_n) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..drawn.len() {
            for j in i + 1..drawn.len() {
                if drawn[i] == drawn[j] {
                    continue;
                }
                if let Some(&v) = pair_score.get(&(drawn[i], drawn[j])) {
                    if languages[drawn[i]] == languages[drawn[j]] {
                        s_sum += v;
                        s_n += 1;
                    } else {
                        d_sum += v;
                        d_n += 1;
                    }
                }
            }
        }
        (s_n > 0 && d_n > 0).then(|| d_sum / d_n as f64 - s_sum / s_n as f64)
    });
    if draws.is_empty() {
        return Err(Error::MissingContrast(
            "no resample contained both groups".into(),
        ));
    }
    let valid = draws.len();
    let (lo, hi) = percentile_interval(draws, level);
    let same_family = GroupSummary::of(&same);
    let different_family = GroupSummary::of(&diff);
    Ok(FamilyContrast {
        difference: BootstrapCI {
            level,
            lo,
            hi,
            estimate: different_family.mean - same_family.mean,
            n_resamples,
            unit: "language-within-family".into(),
            seed,
        },
        same_family,
        different_family,
        valid_resamples: valid,
    })
}
