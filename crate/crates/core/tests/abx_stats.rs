mod common;

use std::collections::BTreeMap;

use common::{brute_abx, exact_unpaired_p, gauss, rng};
use lfe_core::abx::{abx_error, enumerate_triplets, score_triplet};
use lfe_core::stats::{
    bonferroni, bootstrap_mean_ci, family_contrast, fisher_pitman, fisher_pitman_exhaustive, lfe_score, stars,
};
use lfe_core::tvspace::{Condition, IVector};
use lfe_core::Error;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn ivs_from(items: &[(String, Vec<f32>)]) -> Vec<IVector> {
    items
        .iter()
        .enumerate()
        .map(|(i, (s, w))| IVector {
            utterance_id: format!("u{i}"),
            speaker_id: s.clone(),
            condition: Condition::new("en", "fi"),
            w: w.clone(),
        })
        .collect()
}

fn random_items(seed: u64, n_spk: usize, n_utt: usize, dim: usize) -> Vec<(String, Vec<f32>)> {
    let mut g = rng(seed);
    let mut out = Vec::new();
    for s in 0..n_spk {
        let center: Vec<f64> = (0..dim).map(|_| gauss(&mut g)).collect();
        for _ in 0..n_utt {
            out.push((format!("s{s}"), center.iter().map(|c| (c + gauss(&mut g)) as f32).collect()));
        }
    }
    out
}

#[test]
fn three_by_three_matches_brute_force() {
    let items = random_items(31, 3, 3, 4);
    let (n, err, cells) = brute_abx(&items);
    let res = abx_error(&ivs_from(&items), None, 0).unwrap();
    assert_eq!(res.n_triplets, n);
    assert_eq!(n, 3 * 2 * 3 * 3 * 2);
    assert!((res.error_rate - err / n as f64).abs() < 1e-12);
    for c in &res.cells {
        let (cn, ce) = cells[&(c.speaker_ax.clone(), c.speaker_b.clone())];
        assert_eq!(c.n_triplets, cn);
        assert_eq!(c.errors, ce);
    }
    let micro: f64 = res.cells.iter().map(|c| c.error_rate() * c.n_triplets as f64).sum::<f64>()
        / res.n_triplets as f64;
    assert!((micro - res.error_rate).abs() < 1e-12);
}

#[test]
fn scores_invariant_under_isometry_and_scaling() {
    let dim = 5;
    let items = random_items(32, 4, 4, dim);
    let base = abx_error(&ivs_from(&items), None, 0).unwrap();
    let mut g = rng(33);
    let q = DMatrix::from_fn(dim, dim, |_, _| gauss(&mut g)).qr().q();
    let shift = DVector::from_fn(dim, |_, _| 10.0 * gauss(&mut g));
    for scale in [1.0, 0.25, 8.0] {
        let moved: Vec<(String, Vec<f32>)> = items
            .iter()
            .map(|(s, w)| {
                let v = DVector::from_iterator(dim, w.iter().map(|&x| x as f64));
                let y = (&q * v) * scale + &shift;
                (s.clone(), y.iter().map(|&x| x as f32).collect())
            })
            .collect();
        let res = abx_error(&ivs_from(&moved), None, 0).unwrap();
        assert_eq!(res.n_triplets, base.n_triplets);
        // f32 rounding can flip near-ties, so compare cell by cell loosely
        for (a, b) in res.cells.iter().zip(&base.cells) {
            assert!((a.errors - b.errors).abs() <= 1.0, "{a:?} {b:?}");
        }
    }
    // exact for transforms that are exact in floating point
    let exact: Vec<(String, Vec<f32>)> = items
        .iter()
        .map(|(s, w)| (s.clone(), w.iter().rev().map(|&x| -2.0 * x + 4.0).collect()))
        .collect();
    assert_eq!(abx_error(&ivs_from(&exact), None, 0).unwrap().cells, base.cells);
}

#[test]
fn identical_vectors_give_exact_chance() {
    let items: Vec<(String, Vec<f32>)> = (0..12).map(|i| (format!("s{}", i % 4), vec![1.0, 2.0])).collect();
    assert_eq!(abx_error(&ivs_from(&items), None, 0).unwrap().error_rate, 0.5);
}

#[test]
fn triplet_examples_and_counts() {
    assert_eq!(score_triplet(&[0.0, 0.0], &[1.0, 0.0], &[0.1, 0.0]).unwrap(), 0.0);
    assert_eq!(score_triplet(&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
    assert_eq!(score_triplet(&[9.0, 9.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert!(score_triplet(&[0.0], &[0.0, 1.0], &[0.0]).is_err());
    let two = random_items(34, 2, 2, 2);
    assert_eq!(enumerate_triplets(&ivs_from(&two), None, 0).unwrap().len(), 8);
    let one = random_items(35, 1, 4, 2);
    assert!(matches!(abx_error(&ivs_from(&one), None, 0), Err(Error::TooFewSpeakers(_))));
}

#[test]
fn stratified_sampling_is_seeded_and_covers_cells() {
    let items = random_items(36, 6, 5, 3);
    let ivs = ivs_from(&items);
    let full = enumerate_triplets(&ivs, None, 0).unwrap();
    assert_eq!(full.len(), 6 * 5 * 5 * 4 * 5);
    let a = enumerate_triplets(&ivs, Some(300), 7).unwrap();
    let b = enumerate_triplets(&ivs, Some(300), 7).unwrap();
    let c = enumerate_triplets(&ivs, Some(300), 8).unwrap();
    assert_eq!(a.len(), 300);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut uniq = a.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), 300);
    let res = abx_error(&ivs, Some(300), 7).unwrap();
    assert_eq!(res.cells.len(), 30);
    assert!(res.cells.iter().all(|c| c.n_triplets >= 1));
    assert_eq!(res.n_triplets, 300);
}

#[test]
fn swapping_a_and_x_keeps_counts() {
    let items = random_items(37, 3, 3, 2);
    let ivs = ivs_from(&items);
    let trips = enumerate_triplets(&ivs, None, 0).unwrap();
    let mut swapped: Vec<_> = trips.iter().map(|t| (t.x, t.b, t.a)).collect();
    let mut orig: Vec<_> = trips.iter().map(|t| (t.a, t.b, t.x)).collect();
    swapped.sort();
    orig.sort();
    assert_eq!(swapped, orig);
}

#[test]
fn lfe_and_bonferroni_examples() {
    let s = lfe_score(0.10, 0.10, 0.12, 0.12).unwrap();
    assert!((s.lfe_percent - 20.0).abs() < 1e-9);
    assert_eq!(lfe_score(0.2, 0.3, 0.3, 0.2).unwrap().lfe_percent, 0.0);
    assert!(matches!(lfe_score(0.0, 0.0, 0.1, 0.1), Err(Error::DegenerateSame)));
    assert!(lfe_score(1.2, 0.1, 0.1, 0.1).is_err());
    assert_eq!(bonferroni(&[0.04], 0.05), vec![true]);
    let mut ps = vec![0.5; 36];
    ps[0] = 0.01;
    ps[1] = 0.001;
    let sig = bonferroni(&ps, 0.05);
    assert!(!sig[0] && sig[1]);
    assert_eq!(stars(0.001, 36), "*");
    assert_eq!(stars(0.0001, 36), "**");
    assert_eq!(stars(0.01, 36), "");
}

#[test]
fn exhaustive_tests_match_independent_enumeration() {
    let mut g = rng(38);
    for trial in 0..30 {
        let (na, nb) = (g.gen_range(1..7), g.gen_range(1..7));
        let a: Vec<f64> = (0..na).map(|_| gauss(&mut g)).collect();
        let b: Vec<f64> = (0..nb).map(|_| gauss(&mut g) + 0.3 * trial as f64 / 10.0).collect();
        let lib = fisher_pitman_exhaustive(&a, &b, false).unwrap().p_value;
        assert!((lib - exact_unpaired_p(&a, &b)).abs() < 1e-10);

        let n = na.min(nb);
        let d: Vec<f64> = b[..n].iter().zip(&a[..n]).map(|(x, y)| x - y).collect();
        let obs = (d.iter().sum::<f64>() / n as f64).abs();
        let mut hits = 0;
        for signs in 0..(1u32 << n) {
            let s: f64 = (0..n).map(|i| if signs & (1 << i) != 0 { -d[i] } else { d[i] }).sum();
            if (s / n as f64).abs() >= obs - 1e-12 {
                hits += 1;
            }
        }
        let oracle = hits as f64 / (1u32 << n) as f64;
        let lib = fisher_pitman_exhaustive(&a[..n], &b[..n], true).unwrap().p_value;
        assert!((lib - oracle).abs() < 1e-10);
    }
    assert!((fisher_pitman_exhaustive(&[0.0; 4], &[1.0; 4], false).unwrap().p_value - 2.0 / 70.0).abs() < 1e-12);
    assert_eq!(fisher_pitman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], false, 500, 1).unwrap().p_value, 1.0);
    assert_eq!(fisher_pitman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], true, 500, 1).unwrap().p_value, 1.0);
    assert!(matches!(fisher_pitman(&[], &[1.0], false, 10, 0), Err(Error::EmptyGroup)));
    assert!(matches!(fisher_pitman(&[1.0], &[1.0, 2.0], true, 10, 0), Err(Error::LengthMismatch { .. })));
}

#[test]
fn bootstrap_two_units_lands_on_exhaustive_outcomes() {
    let units: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.0]), ("b".to_string(), vec![10.0])].into();
    let ci = bootstrap_mean_ci(&units, 0.95, 10_000, 3).unwrap();
    // draws of two units: {0,0}, {0,10}, {10,0}, {10,10} with means 0, 5, 5, 10
    for v in [ci.lo, ci.hi] {
        assert!([0.0, 5.0, 10.0].iter().any(|o| (v - o).abs() < 1e-12), "{v}");
    }
    assert_eq!((ci.lo, ci.hi), (0.0, 10.0));
    assert_eq!(ci.estimate, 5.0);
    let flat: BTreeMap<String, Vec<f64>> = (0..5).map(|i| (format!("l{i}"), vec![3.5, 3.5])).collect();
    let ci = bootstrap_mean_ci(&flat, 0.95, 1000, 1).unwrap();
    assert_eq!((ci.lo, ci.hi), (3.5, 3.5));
    let single: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![1.0])].into();
    assert!(matches!(bootstrap_mean_ci(&single, 0.95, 100, 0), Err(Error::TooFewUnits(1))));
}

#[test]
fn family_contrast_groups_pairs() {
    let fam: BTreeMap<String, String> = [("a", "x"), ("b", "x"), ("c", "y"), ("d", "y")]
        .iter()
        .map(|(l, f)| (l.to_string(), f.to_string()))
        .collect();
    let langs = ["a", "b", "c", "d"];
    let mut scores = Vec::new();
    for i in 0..4 {
        for j in i + 1..4 {
            let same = fam[langs[i]] == fam[langs[j]];
            let v = if same { 4.0 } else { 10.0 };
            let e = 0.1 * (1.0 + v / 100.0);
            scores.push(lfe_score(0.1, 0.1, e, e).unwrap().with_pair(langs[i], langs[j]));
        }
    }
    let fc = family_contrast(&scores, &fam, 0.99, 2000, 5).unwrap();
    assert_eq!((fc.same_family.n, fc.different_family.n), (2, 4));
    assert!((fc.same_family.mean - 4.0).abs() < 1e-9);
    assert!((fc.difference.lo - 6.0).abs() < 1e-9 && (fc.difference.hi - 6.0).abs() < 1e-9);
    let one: BTreeMap<String, String> = langs.iter().map(|l| (l.to_string(), "x".to_string())).collect();
    assert!(matches!(family_contrast(&scores, &one, 0.99, 100, 0), Err(Error::MissingContrast(_))));
    let mut missing = fam.clone();
    missing.remove("d");
    assert!(matches!(family_contrast(&scores, &missing, 0.99, 100, 0), Err(Error::MissingFamilyLabel(_))));
}
