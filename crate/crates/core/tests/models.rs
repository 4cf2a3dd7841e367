mod common;

use common::{gauss, rng};
use lfe_core::features::FeatureMatrix;
use lfe_core::tvspace::{
    accumulate_stats, em_tv, extract_condition, init_tv, train_tv, BaumWelchStats, TestUtterance, TvModel,
};
use lfe_core::ubm::{em_fit, init_kmeans, log_likelihood, DiagGmm, Frames};
use lfe_core::Error;
use rand::Rng;

fn naive_density(g: &DiagGmm, x: &[f32]) -> f64 {
    let d = g.dim();
    (0..g.n_components())
        .map(|c| {
            let mut p = g.weights[c];
            for j in 0..d {
                let v = g.variances[c * d + j];
                let z = x[j] as f64 - g.means[c * d + j];
                p *= (-0.5 * z * z / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
            }
            p
        })
        .sum()
}

fn random_gmm(g: &mut rand_chacha::ChaCha8Rng, k: usize, d: usize) -> DiagGmm {
    let mut w: Vec<f64> = (0..k).map(|_| g.gen_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let means = (0..k * d).map(|_| 2.0 * gauss(g)).collect();
    let vars = (0..k * d).map(|_| g.gen_range(0.3..3.0)).collect();
    DiagGmm::new(w, means, vars).unwrap()
}

#[test]
fn mixture_density_matches_direct_summation() {
    let mut g = rng(21);
    for _ in 0..20 {
        let (k, d) = (g.gen_range(1..4), g.gen_range(1..3));
        let gmm = random_gmm(&mut g, k, d);
        let data: Vec<f32> = (0..10 * d).map(|_| (2.0 * gauss(&mut g)) as f32).collect();
        let frames = Frames::new(&data, d);
        let expected = (0..10).map(|t| naive_density(&gmm, frames.row(t)).ln()).sum::<f64>() / 10.0;
        let got = log_likelihood(&gmm, frames).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        for t in 0..10 {
            let p = gmm.posteriors(frames.row(t));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let unit = DiagGmm::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
    let ll = log_likelihood(&unit, Frames::new(&[0.0], 1)).unwrap();
    assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    let far = log_likelihood(&unit, Frames::new(&[1e18], 1)).unwrap();
    assert!(far.is_finite() && far < -1e30);
}

#[test]
fn kmeans_separates_two_clouds() {
    let mut g = rng(22);
    let mut data = Vec::new();
    for i in 0..2000 {
        let c = if i % 2 == 0 { -5.0 } else { 5.0 };
        data.push((c + gauss(&mut g)) as f32);
        data.push((c + gauss(&mut g)) as f32);
    }
    let gmm = init_kmeans(Frames::new(&data, 2), 2, 3).unwrap();
    let mut m: Vec<f64> = (0..2).map(|c| gmm.mean(c)[0]).collect();
    m.sort_by(f64::total_cmp);
    assert!((m[0] + 5.0).abs() < 0.15 && (m[1] - 5.0).abs() < 0.15, "{m:?}");
    assert!(gmm.weights.iter().all(|&w| (w - 0.5).abs() < 1e-12));
}

#[test]
fn em_recovers_two_component_mixture() {
    let mut g = rng(23);
    let n = 100_000;
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let c = if g.gen_bool(0.5) { -3.0 } else { 3.0 };
            (c + gauss(&mut g)) as f32
        })
        .collect();
    let frames = Frames::new(&data, 1);
    let init = init_kmeans(frames, 2, 1).unwrap();
    let fit = em_fit(&init, frames, 30).unwrap();
    let mut means: Vec<f64> = fit.means.clone();
    means.sort_by(f64::total_cmp);
    let se = (1.0 / (0.5 * n as f64)).sqrt();
    assert!((means[0] + 3.0).abs() < 3.0 * se, "{means:?}");
    assert!((means[1] - 3.0).abs() < 3.0 * se, "{means:?}");
    for w in fit.train_log.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
    }
}

#[test]
fn em_is_permutation_equivariant() {
    let mut g = rng(24);
    let data: Vec<f32> = (0..3000).map(|_| (3.0 * gauss(&mut g)) as f32).collect();
    let frames = Frames::new(&data, 2);
    let init = random_gmm(&mut g, 3, 2);
    let perm = [2usize, 0, 1];
    let permuted = DiagGmm::new(
        perm.iter().map(|&c| init.weights[c]).collect(),
        perm.iter().flat_map(|&c| init.mean(c).to_vec()).collect(),
        perm.iter().flat_map(|&c| init.variance(c).to_vec()).collect(),
    )
    .unwrap();
    let a = em_fit(&init, frames, 5).unwrap();
    let b = em_fit(&permuted, frames, 5).unwrap();
    for (i, &c) in perm.iter().enumerate() {
        assert!((a.weights[c] - b.weights[i]).abs() < 1e-9);
        for j in 0..2 {
            assert!((a.mean(c)[j] - b.mean(i)[j]).abs() < 1e-9);
            assert!((a.variance(c)[j] - b.variance(i)[j]).abs() < 1e-9);
        }
    }
}

#[test]
fn ubm_file_roundtrip_and_corruption() {
    let mut g = rng(25);
    let mut gmm = random_gmm(&mut g, 3, 2);
    gmm.train_log = vec![-3.0, -2.5];
    let bytes = gmm.to_bytes();
    assert_eq!(&bytes[..4], b"LFEG");
    assert_eq!(DiagGmm::from_bytes(&bytes).unwrap(), gmm);
    assert!(matches!(DiagGmm::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptFile { .. })));
}

#[test]
fn stats_match_per_frame_summation() {
    let mut g = rng(26);
    let (k, d) = (3, 2);
    let gmm = random_gmm(&mut g, k, d);
    let data: Vec<f32> = (0..40 * d).map(|_| (2.0 * gauss(&mut g)) as f32).collect();
    let fm = FeatureMatrix::new("u", d, data);
    let s = accumulate_stats(&gmm, &fm).unwrap();
    let mut n = vec![0.0; k];
    let mut f = vec![0.0; k * d];
    for t in 0..fm.n_frames {
        let x = fm.row(t);
        let dens: Vec<f64> = (0..k)
            .map(|c| {
                let one = DiagGmm::new(vec![1.0], gmm.mean(c).to_vec(), gmm.variance(c).to_vec()).unwrap();
                gmm.weights[c] * naive_density(&one, x)
            })
            .collect();
        let total: f64 = dens.iter().sum();
        for c in 0..k {
            let gamma = dens[c] / total;
            n[c] += gamma;
            for j in 0..d {
                f[c * d + j] += gamma * (x[j] as f64 - gmm.mean(c)[j]);
            }
        }
    }
    for c in 0..k {
        assert!((s.n[c] - n[c]).abs() < 1e-10);
    }
    for (a, b) in s.f.iter().zip(&f) {
        assert!((a - b).abs() < 1e-10);
    }
    assert!((s.n.iter().sum::<f64>() - 40.0).abs() < 1e-6);
}

#[test]
fn scalar_tv_em_matches_hand_iteration() {
    let var = 1.7;
    let ubm = DiagGmm::new(vec![1.0], vec![0.4], vec![var]).unwrap();
    let data = [(5.0, 2.0), (12.0, -7.5), (3.0, 0.4), (20.0, 9.0)];
    let stats: Vec<BaumWelchStats> = data
        .iter()
        .enumerate()
        .map(|(i, &(n, f))| BaumWelchStats {
            utterance_id: format!("u{i}"),
            n: vec![n],
            f: vec![f],
            n_frames: n as usize,
        })
        .collect();
    let init = TvModel::new(ubm, vec![0.3], 1).unwrap();
    let trained = em_tv(&init, &stats, 4).unwrap();

    let mut t: f64 = 0.3;
    let objective = |t: f64| {
        data.iter()
            .map(|&(n, f)| {
                let l = 1.0 + t * t * n / var;
                let b = t * f / var;
                0.5 * b * b / l - 0.5 * l.ln()
            })
            .sum::<f64>()
            / data.len() as f64
    };
    let mut log = vec![objective(t)];
    for _ in 0..4 {
        let (mut num, mut den) = (0.0, 0.0);
        for &(n, f) in &data {
            let l = 1.0 + t * t * n / var;
            let w = t * f / var / l;
            num += f * w;
            den += n * (1.0 / l + w * w);
        }
        t = num / den;
        log.push(objective(t));
    }
    assert!((trained.t[0] - t).abs() < 1e-10, "{} vs {t}", trained.t[0]);
    assert_eq!(trained.train_log.len(), log.len());
    for (a, b) in trained.train_log.iter().zip(&log) {
        assert!((a - b).abs() < 1e-10);
    }
    for w in log.windows(2) {
        assert!(w[1] >= w[0] - 1e-12);
    }
}

#[test]
fn tv_training_is_seeded_and_full_rank() {
    let mut g = rng(27);
    let (k, d, r) = (4, 3, 3);
    let ubm = random_gmm(&mut g, k, d);
    let stats: Vec<BaumWelchStats> = (0..50)
        .map(|u| BaumWelchStats {
            utterance_id: format!("u{u}"),
            n: (0..k).map(|_| g.gen_range(1.0..30.0)).collect(),
            f: (0..k * d).map(|_| 5.0 * gauss(&mut g)).collect(),
            n_frames: 10,
        })
        .collect();
    let a = train_tv(&ubm, &stats, r, 5, 42).unwrap();
    let b = train_tv(&ubm, &stats, r, 5, 42).unwrap();
    assert_eq!(a.t, b.t);
    assert_ne!(a.t, train_tv(&ubm, &stats, r, 5, 43).unwrap().t);
    let sv = a.t_matrix().singular_values();
    assert!(sv.iter().all(|&s| s > 1e-10));
    for w in a.train_log.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{:?}", a.train_log);
    }
    let bytes = a.to_bytes();
    assert_eq!(&bytes[..4], b"LFET");
    assert_eq!(TvModel::from_bytes(&bytes).unwrap(), a);
    assert_eq!(init_tv(&ubm, r, 1).unwrap().t, init_tv(&ubm, r, 1).unwrap().t);
}

#[test]
fn condition_extraction_checks_feature_config() {
    let ubm = DiagGmm::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
    let mut model = TvModel::new(ubm, vec![0.5, -0.2], 1).unwrap();
    model.feature_config_hash = "aaaa".into();
    let mut feats = FeatureMatrix::new("u1", 1, vec![0.3, 0.9, -1.2]);
    feats.config_hash = "aaaa".into();
    let set = vec![TestUtterance {
        speaker_id: "s".into(),
        features: feats.clone(),
    }];
    let ivs = extract_condition(&model, "fi", "en", &set).unwrap();
    assert_eq!(ivs.len(), 1);
    assert_eq!(ivs[0].condition.to_string(), "Ts(en)Tr(fi)");
    feats.config_hash = "bbbb".into();
    let bad = vec![TestUtterance {
        speaker_id: "s".into(),
        features: feats,
    }];
    assert!(matches!(extract_condition(&model, "fi", "en", &bad), Err(Error::ConfigMismatch(_))));
}
