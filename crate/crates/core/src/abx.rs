//! Machine ABX speaker discrimination over i-vector triplets.
//!
//! A triplet (a, b, x) has a and x from one speaker and b from another; it
//! counts as an error when x is farther from a than from b, and as half an
//! error on an exact tie. Triplets are grouped into cells by the ordered
//! speaker pair (speaker of a and x, speaker of b).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::derive_seed;
use crate::error::{Error, Result};
use crate::par;
use crate::tvspace::{Condition, IVector};

/// Default cap on triplets per condition before stratified sampling.
pub const DEFAULT_MAX_TRIPLETS: u64 = 2_000_000;

/// Indices into the condition set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub a: usize,
    pub b: usize,
    pub x: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub speaker_ax: String,
    pub speaker_b: String,
    pub n_triplets: u64,
    /// Sum of error weights (ties count one half).
    pub errors: f64,
}

impl CellResult {
    pub fn error_rate(&self) -> f64 {
        self.errors / self.n_triplets as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxResult {
    pub test_language: String,
    pub train_language: String,
    pub n_triplets: u64,
    pub error_rate: f64,
    /// Sorted by (speaker_ax, speaker_b).
    pub cells: Vec<CellResult>,
}

impl AbxResult {
    pub fn condition(&self) -> Condition {
        Condition::new(&self.test_language, &self.train_language)
    }

    /// Unweighted mean of the per-cell error rates.
    pub fn macro_error_rate(&self) -> f64 {
        self.cells.iter().map(CellResult::error_rate).sum::<f64>() / self.cells.len() as f64
    }

    pub fn cell(&self, speaker_ax: &str, speaker_b: &str) -> Option<&CellResult> {
        self.cells
            .binary_search_by(|c| {
                (c.speaker_ax.as_str(), c.speaker_b.as_str()).cmp(&(speaker_ax, speaker_b))
            })
            .ok()
            .map(|i| &self.cells[i])
    }

    /// Plain-text report: a header block followed by one line per cell.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        writeln!(s, "condition\t{}", self.condition()).unwrap();
        writeln!(s, "n_triplets\t{}", self.n_triplets).unwrap();
        writeln!(s, "error_rate\t{:.6}", self.error_rate).unwrap();
        writeln!(s, "speaker_ax\tspeaker_b\tn_triplets\terrors\terror_rate").unwrap();
        for c in &self.cells {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.6}",
                c.speaker_ax,
                c.speaker_b,
                c.n_triplets,
                c.errors,
                c.error_rate()
            )
            .unwrap();
        }
        s
    }
}

/// Error weight of one triplet: 1 if x is farther from a than from b,
/// 0.5 on a tie, 0 otherwise.
pub fn score_triplet(a: &[f32], b: &[f32], x: &[f32]) -> Result<f64> {
    if a.len() != x.len() || b.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: if a.len() != x.len() { a.len() } else { b.len() },
        });
    }
    Ok(weight(sq_dist(a, x), sq_dist(b, x)))
}

fn sq_dist(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum()
}

fn weight(d_ax: f64, d_bx: f64) -> f64 {
    match d_ax.partial_cmp(&d_bx) {
        Some(std::cmp::Ordering::Greater) => 1.0,
        Some(std::cmp::Ordering::Equal) => 0.5,
        _ => 0.0,
    }
}

/// One speaker-pair cell and the triplets drawn from it.
struct CellPlan {
    ax: usize,
    b: usize,
    size: u64,
    /// `None`: every triplet of the cell; otherwise sorted sampled ranks.
    sampled: Option<Vec<u64>>,
}

struct Plan {
    speakers: Vec<String>,
    /// Utterance indices per speaker, in input order.
    members: Vec<Vec<usize>>,
    cells: Vec<CellPlan>,
}

impl Plan {
    /// Decodes a rank in `0..size` into a triplet of the cell.
    fn triplet(&self, cell: &CellPlan, rank: u64) -> Triplet {
        let ax = &self.members[cell.ax];
        let b = &self.members[cell.b];
        let n1 = ax.len() as u64;
        let nb = b.len() as u64;
        let bi = rank % nb;
        let rest = rank / nb;
        let xi = rest % (n1 - 1);
        let ai = rest / (n1 - 1);
        // x ranges over the n1 − 1 utterances other than a
        let xi = if xi >= ai { xi + 1 } else { xi };
        Triplet {
            a: ax[ai as usize],
            b: b[bi as usize],
            x: ax[xi as usize],
        }
    }

    fn for_each_triplet(&self, cell: &CellPlan, mut f: impl FnMut(Triplet)) {
        match &cell.sampled {
            None => (0..cell.size).for_each(|r| f(self.triplet(cell, r))),
            Some(ranks) => ranks.iter().for_each(|&r| f(self.triplet(cell, r))),
        }
    }
}

fn plan(ivs: &[IVector], max_triplets: Option<u64>, seed: u64) -> Result<Plan> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, iv) in ivs.iter().enumerate() {
        groups.entry(iv.speaker_id.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::TooFewSpeakers(format!(
            "{} speaker(s); ABX needs at least 2",
            groups.len()
        )));
    }
    if groups.values().all(|g| g.len() < 2) {
        return Err(Error::TooFewSpeakers(
            "no speaker has the 2 utterances needed for a and x".into(),
        ));
    }
    let speakers: Vec<String> = groups.keys().map(|s| s.to_string()).collect();
    let members: Vec<Vec<usize>> = groups.into_values().collect();
    let mut cells = Vec::new();
    for (ax, m1) in members.iter().enumerate() {
        let n1 = m1.len() as u64;
        if n1 < 2 {
            continue;
        }
        for (b, m2) in members.iter().enumerate() {
            if b != ax {
                cells.push(CellPlan {
                    ax,
                    b,
                    size: n1 * (n1 - 1) * m2.len() as u64,
                    sampled: None,
                });
            }
        }
    }
    let total: u64 = cells.iter().map(|c| c.size).sum();
    if let Some(max) = max_triplets.filter(|&m| total > m) {
        let quotas = allocate(&cells.iter().map(|c| c.size).collect::<Vec<_>>(), max);
        for (i, (cell, q)) in cells.iter_mut().zip(quotas).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("cell{i}")));
            let size = usize::try_from(cell.size).expect("cell larger than the address space");
            let mut ranks: Vec<u64> = index::sample(&mut rng, size, q as usize)
                .into_iter()
                .map(|v| v as u64)
                .collect();
            ranks.sort_unstable();
            cell.sampled = Some(ranks);
        }
    }
    Ok(Plan {
        speakers,
        members,
        cells,
    })
}

/// Splits `budget` samples across cells proportionally to their sizes
/// (largest remainder), giving every cell at least one sample when the
/// budget allows.
fn allocate(sizes: &[u64], budget: u64) -> Vec<u64> {
    let n = sizes.len() as u64;
    let base = if budget >= n { 1 } else { 0 };
    let mut quotas: Vec<u64> = sizes.iter().map(|&s| base.min(s)).collect();
    let remaining = budget - quotas.iter().sum::<u64>();
    let spare: Vec<u64> = sizes.iter().zip(&quotas).map(|(s, q)| s - q).collect();
    let spare_total: u64 = spare.iter().sum();
    if spare_total == 0 || remaining == 0 {
        return quotas;
    }
    let mut rema: Vec<(u128, usize)> = Vec::with_capacity(sizes.len());
    let mut given = 0;
    for (i, &s) in spare.iter().enumerate() {
        let exact = remaining as u128 * s as u128;
        let whole = (exact / spare_total as u128) as u64;
        quotas[i] += whole;
        given += whole;
        rema.push((exact % spare_total as u128, i));
    }
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take((remaining - given) as usize) {
        quotas[i] += 1;
    }
    quotas
}

/// Triplets of a condition set: all of them when their number is within
/// `max_triplets` (or no cap is given), otherwise a seeded sample without
/// replacement stratified by speaker-pair cell.
pub fn enumerate_triplets(ivs: &[IVector], max_triplets: Option<u64>, seed: u64) -> Result<Vec<Triplet>> {
    let plan = plan(ivs, max_triplets, seed)?;
    let mut out = Vec::new();
    for cell in &plan.cells {
        plan.for_each_triplet(cell, |t| out.push(t));
    }
    Ok(out)
}

/// Aggregate and per-cell ABX error of one condition set.
pub fn abx_error(ivs: &[IVector], max_triplets: Option<u64>, seed: u64) -> Result<AbxResult> {
    let first = ivs
        .first()
        .ok_or_else(|| Error::TooFewSpeakers("empty condition set".into()))?;
    let dim = first.w.len();
    for iv in ivs {
        if iv.w.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: iv.w.len(),
            });
        }
        if iv.condition != first.condition {
            return Err(Error::InvalidArgument(format!(
                "condition set mixes {} and {}",
                first.condition, iv.condition
            )));
        }
    }
    let plan = plan(ivs, max_triplets, seed)?;

    let n = ivs.len();
    let rows: Vec<usize> = (0..n).collect();
    let dist: Vec<f64> = par::map(&rows, |&i| {
        (0..n).map(|j| sq_dist(&ivs[i].w, &ivs[j].w)).collect::<Vec<_>>()
    })
    .concat();

    // errors are counted in half units so the reduction is exact
    let counts = par::map(&plan.cells, |cell| {
        let mut n_trip = 0u64;
        let mut halves = 0u64;
        plan.for_each_triplet(cell, |t| {
            n_trip += 1;
            halves += (2.0 * weight(dist[t.a * n + t.x], dist[t.b * n + t.x])) as u64;
        });
        (n_trip, halves)
    });

    let mut cells: Vec<CellResult> = plan
        .cells
        .iter()
        .zip(&counts)
        .map(|(c, &(n_trip, halves))| CellResult {
            speaker_ax: plan.speakers[c.ax].clone(),
            speaker_b: plan.speakers[c.b].clone(),
            n_triplets: n_trip,
            errors: halves as f64 / 2.0,
        })
        .collect();
    cells.sort_by(|a, b| (&a.speaker_ax, &a.speaker_b).cmp(&(&b.speaker_ax, &b.speaker_b)));
    let n_triplets: u64 = counts.iter().map(|c| c.0).sum();
    let halves: u64 = counts.iter().map(|c| c.1).sum();
    Ok(AbxResult {
        test_language: first.condition.test_language.clone(),
        train_language: first.condition.train_language.clone(),
        n_triplets,
        error_rate: halves as f64 / 2.0 / n_triplets as f64,
        cells,
    })
}
