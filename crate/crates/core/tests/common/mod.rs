//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use lfe_core::synth::{SynthAccent, SynthLanguage, SynthSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept separate from the library's sampler
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// ABX by looping over every (a, b, x) with a ≠ x from one speaker and b
/// from another. Returns total triplets, total error and per-cell
/// (triplets, error) keyed by (speaker of a and x, speaker of b).
pub fn brute_abx(items: &[(String, Vec<f32>)]) -> (u64, f64, BTreeMap<(String, String), (u64, f64)>) {
    let dist = |u: &[f32], v: &[f32]| -> f64 {
        let mut s = 0.0;
        for i in 0..u.len() {
            let d = u[i] as f64 - v[i] as f64;
            s += d * d;
        }
        s
    };
    let mut cells: BTreeMap<(String, String), (u64, f64)> = BTreeMap::new();
    let (mut n, mut err) = (0u64, 0.0);
    for (ia, (sa, a)) in items.iter().enumerate() {
        for (ix, (sx, x)) in items.iter().enumerate() {
            if ix == ia || sx != sa {
                continue;
            }
            for (sb, b) in items {
                if sb == sa {
                    continue;
                }
                let (dax, dbx) = (dist(a, x), dist(b, x));
                let e = if dax > dbx {
                    1.0
                } else if dax == dbx {
                    0.5
                } else {
                    0.0
                };
                n += 1;
                err += e;
                let c = cells.entry((sa.clone(), sb.clone())).or_default();
                c.0 += 1;
                c.1 += e;
            }
        }
    }
    (n, err, cells)
}

/// Golden-section search for the minimum of a unimodal function on [lo, hi].
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Derivative-free cyclic coordinate minimization of a convex objective:
/// each coordinate is bracketed by expanding steps and then refined by
/// golden-section search.
pub fn coordinate_minimize(f: impl Fn(&[f64]) -> f64, dim: usize, tol: f64) -> Vec<f64> {
    let mut x = vec![0.0; dim];
    for _sweep in 0..100_000 {
        let mut moved = 0.0f64;
        for i in 0..dim {
            let along = |t: f64| {
                let mut y = x.clone();
                y[i] = t;
                f(&y)
            };
            let mut step = 1.0;
            let x0 = x[i];
            while along(x0 + step) < along(x0) || along(x0 - step) < along(x0) {
                step *= 2.0;
            }
            let t = golden_section(&along, x0 - step, x0 + step, 1e-13);
            moved = moved.max((t - x0).abs());
            x[i] = t;
        }
        if moved < tol {
            break;
        }
    }
    x
}

/// Orthonormal basis of the column space (thin QR).
fn orthonormal(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().qr().q()
}

/// Principal angles between the column spaces of `a` and `b`, in radians.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let m = orthonormal(a).transpose() * orthonormal(b);
    m.singular_values().iter().map(|s| s.clamp(-1.0, 1.0).acos()).collect()
}

/// Kolmogorov-Smirnov statistic of `ps` against U(0, 1).
pub fn ks_uniform(ps: &[f64]) -> f64 {
    let mut v = ps.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &p)| (p - i as f64 / n).abs().max(((i + 1) as f64 / n - p).abs()))
        .fold(0.0, f64::max)
}

/// Exact two-tailed unpaired permutation p-value by recursive enumeration
/// of which pooled indices go to the first group.
pub fn exact_unpaired_p(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let total_sum: f64 = pooled.iter().sum();
    let (nx, ny) = (x.len(), y.len());
    let obs = (y.iter().sum::<f64>() / ny as f64 - x.iter().sum::<f64>() / nx as f64).abs();
    let mut hits = 0u64;
    let mut count = 0u64;
    fn rec(pooled: &[f64], start: usize, left: usize, acc: f64, out: &mut Vec<f64>) {
        if left == 0 {
            out.push(acc);
            return;
        }
        for i in start..=pooled.len() - left {
            rec(pooled, i + 1, left - 1, acc + pooled[i], out);
        }
    }
    let mut sums = Vec::new();
    rec(&pooled, 0, nx, 0.0, &mut sums);
    for s in sums {
        count += 1;
        let stat = ((total_sum - s) / ny as f64 - s / nx as f64).abs();
        if stat >= obs - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / count as f64
}

/// Two synthetic languages with separate generators (or one shared
/// generator for the control), optionally with an accented test set of
/// the first language.
pub fn synth_spec(seed: u64, control: bool, accent: bool) -> SynthSpec {
    let mut spec = SynthSpec {
        seed,
        languages: vec![
            SynthLanguage {
                name: "aa".into(),
                family: "north".into(),
                generator: "alpha".into(),
            },
            SynthLanguage {
                name: "bb".into(),
                family: "south".into(),
                generator: if control { "alpha" } else { "beta" }.into(),
            },
        ],
        ..Default::default()
    };
    if accent {
        spec.accents = vec![SynthAccent {
            language: "aa".into(),
            accent: "bb".into(),
            weight: 0.5,
        }];
    }
    spec.ubm.seed = seed;
    spec.tv.seed = seed;
    spec.abx.seed = seed;
    spec.stats.seed = seed;
    spec
}
