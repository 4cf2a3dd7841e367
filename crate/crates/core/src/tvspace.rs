//! Total-variability subspace: Baum-Welch statistics, EM training of the
//! low-rank matrix T, and i-vector extraction as the latent posterior mean.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::par;
use crate::ubm::{DiagGmm, Frames};

const MODEL_MAGIC: &[u8; 4] = b"LFET";
const MODEL_VERSION: u16 = 1;
const IVEC_MAGIC: &[u8; 4] = b"LFEI";
const IVEC_VERSION: u16 = 1;

/// Scale of the random initialization of T relative to the UBM spread.
pub const INIT_SCALE: f64 = 0.1;

/// Zeroth- and centered first-order statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    pub utterance_id: String,
    /// Soft counts, one per component.
    pub n: Vec<f64>,
    /// K × D, row-major: Σ_t γ_t(c)·(x_t − m_c).
    pub f: Vec<f64>,
    pub n_frames: usize,
}

impl BaumWelchStats {
    /// Statistics of an utterance without frames.
    pub fn empty(utterance_id: &str, k: usize, d: usize) -> Self {
        BaumWelchStats {
            utterance_id: utterance_id.into(),
            n: vec![0.0; k],
            f: vec![0.0; k * d],
            n_frames: 0,
        }
    }
}

/// Collects UBM responsibilities over the utterance's frames.
pub fn accumulate_stats(ubm: &DiagGmm, feats: &FeatureMatrix) -> Result<BaumWelchStats> {
    let (k, d) = (ubm.n_components(), ubm.dim());
    if feats.dim != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: feats.dim,
        });
    }
    if feats.n_frames == 0 {
        return Err(Error::EmptyUtterance(feats.utterance_id.clone()));
    }
    let frames = Frames::from(feats);
    let scorer = ubm.scorer();
    let blocks = par::blocks(frames.len(), 512, 32);
    let parts = par::map(&blocks, |b| {
        let mut n = vec![0.0; k];
        let mut f = vec![0.0; k * d];
        let mut post = vec![0.0; k];
        for t in b.clone() {
            let x = frames.row(t);
            scorer.posteriors(x, &mut post);
            for (c, &g) in post.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                n[c] += g;
                let m = ubm.mean(c);
                for j in 0..d {
                    f[c * d + j] += g * (x[j] as f64 - m[j]);
                }
            }
        }
        (n, f)
    });
    let mut stats = BaumWelchStats::empty(&feats.utterance_id, k, d);
    stats.n_frames = feats.n_frames;
    for (n, f) in parts {
        stats.n.iter_mut().zip(n).for_each(|(a, b)| *a += b);
        stats.f.iter_mut().zip(f).for_each(|(a, b)| *a += b);
    }
    Ok(stats)
}

/// Packed upper triangle of a symmetric R × R matrix.
#[derive(Debug, Clone, PartialEq)]
struct Packed {
    r: usize,
    data: Vec<f64>,
}

impl Packed {
    fn zeros(r: usize) -> Self {
        Packed {
            r,
            data: vec![0.0; r * (r + 1) / 2],
        }
    }

    fn from_dense(m: &DMatrix<f64>) -> Self {
        let r = m.nrows();
        let mut p = Packed::zeros(r);
        let mut idx = 0;
        for i in 0..r {
            for j in i..r {
                p.data[idx] = m[(i, j)];
                idx += 1;
            }
        }
        p
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let r = self.r;
        let mut m = DMatrix::zeros(r, r);
        let mut idx = 0;
        for i in 0..r {
            for j in i..r {
                m[(i, j)] = self.data[idx];
                m[(j, i)] = self.data[idx];
                idx += 1;
            }
        }
        m
    }

    fn axpy(&mut self, a: f64, other: &Packed) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }
}

/// Latent posterior of one utterance.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: DVector<f64>,
    /// L = I + Tᵀ Σ⁻¹ N T.
    pub precision: DMatrix<f64>,
    cholesky: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// Tᵀ Σ⁻¹ f.
    pub linear: DVector<f64>,
}

impl Posterior {
    pub fn covariance(&self) -> DMatrix<f64> {
        self.cholesky.inverse()
    }

    pub fn log_det_precision(&self) -> f64 {
        2.0 * self.cholesky.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// UBM plus the (K·D) × R total-variability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TvModel {
    pub ubm: DiagGmm,
    /// Row-major (K·D) × R.
    pub t: Vec<f64>,
    pub rank: usize,
    /// Average per-utterance EM objective: the initial value, then one entry
    /// after each iteration.
    pub train_log: Vec<f64>,
    /// Hash of the front-end configuration of the training features.
    pub feature_config_hash: String,
    inv_var: Vec<f64>,
    gram: Vec<Packed>,
}

impl TvModel {
    pub fn new(ubm: DiagGmm, t: Vec<f64>, rank: usize) -> Result<Self> {
        let kd = ubm.n_components() * ubm.dim();
        if rank == 0 || rank > kd {
            return Err(Error::InvalidArgument(format!(
                "subspace rank {rank} must be in 1..={kd}"
            )));
        }
        if t.len() != kd * rank {
            return Err(Error::DimensionMismatch {
                expected: kd * rank,
                actual: t.len(),
            });
        }
        let inv_var = ubm.variances.iter().map(|v| 1.0 / v).collect();
        let mut m = TvModel {
            ubm,
            t,
            rank,
            train_log: Vec::new(),
            feature_config_hash: String::new(),
            inv_var,
            gram: Vec::new(),
        };
        m.refresh();
        Ok(m)
    }

    /// Recomputes T_cᵀ Σ_c⁻¹ T_c for every component.
    fn refresh(&mut self) {
        let (k, d, r) = (self.ubm.n_components(), self.ubm.dim(), self.rank);
        self.gram = (0..k)
            .map(|c| {
                let mut p = Packed::zeros(r);
                for j in 0..d {
                    let row = c * d + j;
                    let tr = &self.t[row * r..(row + 1) * r];
                    let iv = self.inv_var[row];
                    let mut idx = 0;
                    for a in 0..r {
                        let ta = tr[a] * iv;
                        for b in a..r {
                            p.data[idx] += ta * tr[b];
                            idx += 1;
                        }
                    }
                }
                p
            })
            .collect();
    }

    pub fn n_components(&self) -> usize {
        self.ubm.n_components()
    }

    pub fn dim(&self) -> usize {
        self.ubm.dim()
    }

    /// T as a dense matrix.
    pub fn t_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.t.len() / self.rank, self.rank, &self.t)
    }

    fn check_stats(&self, stats: &BaumWelchStats) -> Result<()> {
        let (k, d) = (self.n_components(), self.dim());
        if stats.n.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: stats.n.len(),
            });
        }
        if stats.f.len() != k * d {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                actual: stats.f.len(),
            });
        }
        Ok(())
    }

    /// Posterior of the latent factor given the statistics.
    pub fn posterior(&self, stats: &BaumWelchStats) -> Result<Posterior> {
        self.check_stats(stats)?;
        let r = self.rank;
        let mut acc = Packed::zeros(r);
        for (c, &n) in stats.n.iter().enumerate() {
            if n != 0.0 {
                acc.axpy(n, &self.gram[c]);
            }
        }
        let mut precision = acc.to_dense();
        for i in 0..r {
            precision[(i, i)] += 1.0;
        }
        let mut linear = DVector::zeros(r);
        for (row, &fv) in stats.f.iter().enumerate() {
            if fv == 0.0 {
                continue;
            }
            let s = fv * self.inv_var[row];
            let tr = &self.t[row * r..(row + 1) * r];
            for a in 0..r {
                linear[a] += s * tr[a];
            }
        }
        let cholesky = precision
            .clone()
            .cholesky()
            .ok_or(Error::SingularSystem { component: usize::MAX })?;
        let mean = cholesky.solve(&linear);
        Ok(Posterior {
            mean,
            precision,
            cholesky,
            linear,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(MODEL_MAGIC, MODEL_VERSION);
        w.len_u32(self.n_components());
        w.len_u32(self.dim());
        w.len_u32(self.rank);
        w.bytes(&self.ubm.to_bytes());
        w.f64s(&self.t);
        w.len_u32(self.train_log.len());
        w.f64s(&self.train_log);
        w.str(&self.feature_config_hash);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open("TV model", bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let k = r.len()?;
        let d = r.len()?;
        let rank = r.len()?;
        // embedded UBM blob carries its own header
        let start = r.position();
        let rest = &bytes[start..];
        let mut inner = ByteReader::open("UBM", rest, b"LFEG", 1)?;
        let ubm = DiagGmm::read(&mut inner)?;
        r.take(inner.position())?;
        if ubm.n_components() != k || ubm.dim() != d {
            return Err(Error::CorruptFile {
                kind: "TV model",
                reason: "UBM shape disagrees with header".into(),
            });
        }
        let t = r.f64s(k * d * rank)?;
        let n_log = r.len()?;
        let train_log = r.f64s(n_log)?;
        let hash = r.str()?;
        r.finish()?;
        let mut m = TvModel::new(ubm, t, rank)?;
        m.train_log = train_log;
        m.feature_config_hash = hash;
        Ok(m)
    }
}

/// E-step sums over a block of utterances.
struct TvAcc {
    objective: f64,
    /// (K·D) × R: Σ_u f_u E[w_u]ᵀ.
    cross: Vec<f64>,
    /// Per component: Σ_u N_uc E[w_u w_uᵀ].
    second: Vec<Packed>,
}

fn tv_e_step(model: &TvModel, stats: &[BaumWelchStats]) -> Result<TvAcc> {
    let (k, d, r) = (model.n_components(), model.dim(), model.rank);
    let blocks = par::blocks(stats.len(), 16, 4);
    let parts = par::map(&blocks, |b| -> Result<TvAcc> {
        let mut acc = TvAcc {
            objective: 0.0,
            cross: vec![0.0; k * d * r],
            second: vec![Packed::zeros(r); k],
        };
        for s in &stats[b.clone()] {
            let post = model.posterior(s)?;
            acc.objective += 0.5 * post.linear.dot(&post.mean) - 0.5 * post.log_det_precision();
            let w = &post.mean;
            let mut ew = post.covariance();
            ew.ger(1.0, w, w, 1.0);
            let ew = Packed::from_dense(&ew);
            for (row, &fv) in s.f.iter().enumerate() {
                if fv == 0.0 {
                    continue;
                }
                let dst = &mut acc.cross[row * r..(row + 1) * r];
                for a in 0..r {
                    dst[a] += fv * w[a];
                }
            }
            for (c, &n) in s.n.iter().enumerate() {
                if n != 0.0 {
                    acc.second[c].axpy(n, &ew);
                }
            }
        }
        Ok(acc)
    });
    let mut total = TvAcc {
        objective: 0.0,
        cross: vec![0.0; k * d * r],
        second: vec![Packed::zeros(r); k],
    };
    for p in parts {
        let p = p?;
        total.objective += p.objective;
        total.cross.iter_mut().zip(&p.cross).for_each(|(a, b)| *a += b);
        for (a, b) in total.second.iter_mut().zip(&p.second) {
            a.axpy(1.0, b);
        }
    }
    Ok(total)
}

/// Solves T_c = C_c A_c⁻¹ for every component.
fn tv_m_step(model: &TvModel, acc: &TvAcc) -> Result<Vec<f64>> {
    let (k, d, r) = (model.n_components(), model.dim(), model.rank);
    let mut t = model.t.clone();
    let comps: Vec<usize> = (0..k).collect();
    let solved = par::map(&comps, |&c| -> Result<Option<Vec<f64>>> {
        let a = acc.second[c].to_dense();
        if a.trace() <= 1e-12 {
            // component never occupied: objective does not depend on its rows
            return Ok(None);
        }
        let chol = a.cholesky().ok_or(Error::SingularSystem { component: c })?;
        let cross = DMatrix::from_row_slice(d, r, &acc.cross[c * d * r..(c + 1) * d * r]);
        // T_c A = C_c  <=>  A T_cᵀ = C_cᵀ (A symmetric)
        let tc = chol.solve(&cross.transpose());
        if tc.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem { component: c });
        }
        let mut rows = Vec::with_capacity(d * r);
        for j in 0..d {
            for a in 0..r {
                rows.push(tc[(a, j)]);
            }
        }
        Ok(Some(rows))
    });
    for (c, res) in solved.into_iter().enumerate() {
        if let Some(rows) = res? {
            t[c * d * r..(c + 1) * d * r].copy_from_slice(&rows);
        }
    }
    Ok(t)
}

/// Random initialization of T: seeded standard normal entries scaled by
/// `INIT_SCALE · sqrt(mean UBM variance)`.
pub fn init_tv(ubm: &DiagGmm, rank: usize, seed: u64) -> Result<TvModel> {
    let kd = ubm.n_components() * ubm.dim();
    let mean_var = ubm.variances.iter().sum::<f64>() / ubm.variances.len() as f64;
    let scale = INIT_SCALE * mean_var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = (0..kd * rank)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    TvModel::new(ubm.clone(), t, rank)
}

/// Runs `n_iter` EM iterations starting from `model`.
pub fn em_tv(model: &TvModel, stats: &[BaumWelchStats], n_iter: usize) -> Result<TvModel> {
    if stats.len() < model.rank {
        return Err(Error::TooFewUtterances {
            n: stats.len(),
            rank: model.rank,
        });
    }
    for s in stats {
        model.check_stats(s)?;
    }
    let mut model = model.clone();
    let mut acc = tv_e_step(&model, stats)?;
    if model.train_log.is_empty() {
        model.train_log.push(acc.objective / stats.len() as f64);
    }
    for _ in 0..n_iter {
        model.t = tv_m_step(&model, &acc)?;
        model.refresh();
        acc = tv_e_step(&model, stats)?;
        model.train_log.push(acc.objective / stats.len() as f64);
    }
    Ok(model)
}

/// Initializes and trains the total-variability matrix.
pub fn train_tv(
    ubm: &DiagGmm,
    stats: &[BaumWelchStats],
    rank: usize,
    n_iter: usize,
    seed: u64,
) -> Result<TvModel> {
    if stats.len() < rank {
        return Err(Error::TooFewUtterances {
            n: stats.len(),
            rank,
        });
    }
    em_tv(&init_tv(ubm, rank, seed)?, stats, n_iter)
}

/// Ts/Tr labels of an i-vector set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Condition {
    pub test_language: String,
    pub train_language: String,
}

impl Condition {
    pub fn new(test: &str, train: &str) -> Self {
        Condition {
            test_language: test.into(),
            train_language: train.into(),
        }
    }

    pub fn is_familiar(&self) -> bool {
        self.test_language == self.train_language
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Ts({})Tr({})", self.test_language, self.train_language)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub utterance_id: String,
    pub speaker_id: String,
    pub condition: Condition,
    pub w: Vec<f32>,
}

/// Posterior mean of the latent factor; no length normalization.
pub fn extract_ivector(model: &TvModel, stats: &BaumWelchStats) -> Result<Vec<f64>> {
    Ok(model.posterior(stats)?.mean.iter().copied().collect())
}

/// One test utterance: its speaker and features.
#[derive(Debug, Clone)]
pub struct TestUtterance {
    pub speaker_id: String,
    pub features: FeatureMatrix,
}

/// I-vectors of every test utterance under a model trained on another (or
/// the same) language.
pub fn extract_condition(
    model: &TvModel,
    train_language: &str,
    test_language: &str,
    test_set: &[TestUtterance],
) -> Result<Vec<IVector>> {
    let condition = Condition::new(test_language, train_language);
    let out = par::map(test_set, |u| -> Result<IVector> {
        if !model.feature_config_hash.is_empty()
            && !u.features.config_hash.is_empty()
            && u.features.config_hash != model.feature_config_hash
        {
            return Err(Error::ConfigMismatch(format!(
                "utterance `{}` has features {} but model expects {}",
                u.features.utterance_id, u.features.config_hash, model.feature_config_hash
            )));
        }
        let stats = accumulate_stats(&model.ubm, &u.features)
            .map_err(|e| e.for_utterance(&u.features.utterance_id))?;
        let w = extract_ivector(model, &stats)?;
        Ok(IVector {
            utterance_id: u.features.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            condition: condition.clone(),
            w: w.iter().map(|&v| v as f32).collect(),
        })
    });
    out.into_iter().collect()
}

pub fn ivectors_to_bytes(ivs: &[IVector]) -> Result<Vec<u8>> {
    let r = ivs.first().map_or(0, |v| v.w.len());
    let mut w = ByteWriter::new(IVEC_MAGIC, IVEC_VERSION);
    w.len_u32(ivs.len());
    w.len_u32(r);
    for iv in ivs {
        if iv.w.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                actual: iv.w.len(),
            });
        }
        w.str(&iv.utterance_id);
        w.str(&iv.speaker_id);
        w.str(&iv.condition.test_language);
        w.str(&iv.condition.train_language);
        w.f32s(&iv.w);
    }
    Ok(w.finish())
}

pub fn ivectors_from_bytes(bytes: &[u8]) -> Result<Vec<IVector>> {
    let mut r = ByteReader::open("i-vector", bytes, IVEC_MAGIC, IVEC_VERSION)?;
    let count = r.len()?;
    let dim = r.len()?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let utterance_id = r.str()?;
        let speaker_id = r.str()?;
        let test = r.str()?;
        let train = r.str()?;
        let w = r.f32s(dim)?;
        out.push(IVector {
            utterance_id,
            speaker_id,
            condition: Condition::new(&test, &train),
            w,
        });
    }
    r.finish()?;
    Ok(out)
}
