//! Diagonal-covariance Gaussian mixture trained by EM: the universal
//! background model of one language.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::par;

/// Variances never drop below this fraction of the global per-dimension
/// variance.
pub const VARIANCE_FLOOR_FRACTION: f64 = 1e-3;
pub const WEIGHT_FLOOR: f64 = 1e-8;
/// Components whose soft count falls below this fraction of the frame count
/// are re-seeded.
pub const RESCUE_FRACTION: f64 = 1e-4;
pub const MAX_INIT_FRAMES: usize = 1_000_000;
pub const MAX_LLOYD_ITERATIONS: usize = 10;
/// Relative slack tolerated when checking EM monotonicity.
pub const MONOTONE_SLACK: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MODEL_MAGIC: &[u8; 4] = b"LFEG";
const MODEL_VERSION: u16 = 1;

/// Borrowed row-major frames.
#[derive(Debug, Clone, Copy)]
pub struct Frames<'a> {
    data: &'a [f32],
    dim: usize,
}

impl<'a> Frames<'a> {
    pub fn new(data: &'a [f32], dim: usize) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "data length not a multiple of dim");
        Frames { data, dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &'a [f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Per-dimension mean and biased variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for t in 0..self.len() {
            for (m, &x) in mean.iter_mut().zip(self.row(t)) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for t in 0..self.len() {
            for ((v, &x), m) in var.iter_mut().zip(self.row(t)).zip(&mean) {
                let d = x as f64 - m;
                *v += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }
}

impl<'a> From<&'a FeatureMatrix> for Frames<'a> {
    fn from(m: &'a FeatureMatrix) -> Self {
        Frames::new(&m.data, m.dim)
    }
}

/// K-component diagonal Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    pub weights: Vec<f64>,
    /// K × D, row-major.
    pub means: Vec<f64>,
    /// K × D, row-major.
    pub variances: Vec<f64>,
    /// Average per-frame log-likelihood: the initial model, then one entry
    /// after each EM iteration.
    pub train_log: Vec<f64>,
    dim: usize,
}

impl DiagGmm {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() % k != 0 || means.is_empty() {
            return Err(Error::InvalidArgument("means must be K × D with K, D > 0".into()));
        }
        let dim = means.len() / k;
        if variances.len() != means.len() {
            return Err(Error::DimensionMismatch {
                expected: means.len(),
                actual: variances.len(),
            });
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("variances must be positive".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("weights must be non-negative".into()));
        }
        Ok(DiagGmm {
            weights,
            means,
            variances,
            train_log: Vec::new(),
            dim,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn variance(&self, c: usize) -> &[f64] {
        &self.variances[c * self.dim..(c + 1) * self.dim]
    }

    pub(crate) fn scorer(&self) -> Scorer<'_> {
        let consts = (0..self.n_components())
            .map(|c| {
                let logdet: f64 = self.variance(c).iter().map(|v| v.ln()).sum();
                self.weights[c].max(f64::MIN_POSITIVE).ln() - 0.5 * (self.dim as f64 * LN_2PI + logdet)
            })
            .collect();
        let inv_var = self.variances.iter().map(|v| 1.0 / v).collect();
        Scorer {
            gmm: self,
            consts,
            inv_var,
        }
    }

    /// Responsibilities of every component for one frame (sum to 1).
    pub fn posteriors(&self, x: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_components()];
        self.scorer().posteriors(x, &mut out);
        out
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: dim,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(MODEL_MAGIC, MODEL_VERSION);
        w.len_u32(self.n_components());
        w.len_u32(self.dim);
        w.f64s(&self.weights);
        w.f64s(&self.means);
        w.f64s(&self.variances);
        w.len_u32(self.train_log.len());
        w.f64s(&self.train_log);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open("UBM", bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let gmm = Self::read(&mut r)?;
        r.finish()?;
        Ok(gmm)
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let k = r.len()?;
        let d = r.len()?;
        let weights = r.f64s(k)?;
        let means = r.f64s(k * d)?;
        let variances = r.f64s(k * d)?;
        let n_log = r.len()?;
        let train_log = r.f64s(n_log)?;
        let mut gmm = DiagGmm::new(weights, means, variances)?;
        gmm.train_log = train_log;
        Ok(gmm)
    }
}

/// Precomputed per-component constants for fast density evaluation.
pub(crate) struct Scorer<'a> {
    gmm: &'a DiagGmm,
    consts: Vec<f64>,
    inv_var: Vec<f64>,
}

impl Scorer<'_> {
    /// Fills `out` with log(w_c · N(x; m_c, Σ_c)) and returns the log of
    /// their sum.
    pub fn joint_log_densities(&self, x: &[f32], out: &mut [f64]) -> f64 {
        let d = self.gmm.dim;
        let mut max = f64::NEG_INFINITY;
        for (c, o) in out.iter_mut().enumerate() {
            let m = &self.gmm.means[c * d..(c + 1) * d];
            let iv = &self.inv_var[c * d..(c + 1) * d];
            let mut q = 0.0;
            for j in 0..d {
                let diff = x[j] as f64 - m[j];
                q += diff * diff * iv[j];
            }
            *o = self.consts[c] - 0.5 * q;
            max = max.max(*o);
        }
        let s: f64 = out.iter().map(|v| (v - max).exp()).sum();
        max + s.ln()
    }

    /// Responsibilities into `out`; returns the frame log-likelihood.
    pub fn posteriors(&self, x: &[f32], out: &mut [f64]) -> f64 {
        let ll = self.joint_log_densities(x, out);
        for v in out.iter_mut() {
            *v = (*v - ll).exp();
        }
        ll
    }
}

/// Average per-frame log-likelihood.
pub fn log_likelihood(gmm: &DiagGmm, frames: Frames<'_>) -> Result<f64> {
    gmm.check_dim(frames.dim())?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames".into()));
    }
    let scorer = gmm.scorer();
    let blocks = par::blocks(frames.len(), 1024, 64);
    let sums = par::map(&blocks, |b| {
        let mut buf = vec![0.0; gmm.n_components()];
        b.clone()
            .map(|t| scorer.joint_log_densities(frames.row(t), &mut buf))
            .sum::<f64>()
    });
    Ok(sums.iter().sum::<f64>() / frames.len() as f64)
}

fn variance_floor(global_var: &[f64]) -> Vec<f64> {
    global_var
        .iter()
        .map(|v| (v * VARIANCE_FLOOR_FRACTION).max(1e-10))
        .collect()
}

fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(&a, b)| (a as f64 - b).powi(2)).sum()
}

fn nearest(x: &[f32], centers: &[f64], dim: usize) -> (usize, f64) {
    centers
        .chunks_exact(dim)
        .enumerate()
        .map(|(c, m)| (c, sq_dist(x, m)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding followed by up to ten Lloyd iterations on at most one
/// million frames; weights start uniform, variances are the floored
/// within-cluster variances.
pub fn init_kmeans(frames: Frames<'_>, k: usize, seed: u64) -> Result<DiagGmm> {
    let n = frames.len();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let needed = 10 * k;
    if n < needed {
        return Err(Error::TooFewFrames {
            n_frames: n,
            k,
            needed,
        });
    }
    let dim = frames.dim();
    let (_, global_var) = frames.moments();
    let floor = variance_floor(&global_var);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let sample: Vec<usize> = if n > MAX_INIT_FRAMES {
        let mut idx = index::sample(&mut rng, n, MAX_INIT_FRAMES).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let row = |i: usize| frames.row(sample[i]);
    let m = sample.len();

    // k-means++ seeding
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..m);
    centers.extend(row(first).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(row(i), &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        let start = centers.len();
        centers.extend(row(pick).iter().map(|&v| v as f64));
        let new_c = centers[start..].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &new_c));
        }
    }

    // Lloyd iterations
    let blocks = par::blocks(m, 1024, 64);
    let mut assign = vec![usize::MAX; m];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let new_assign: Vec<usize> = par::map(&blocks, |b| {
            b.clone().map(|i| nearest(row(i), &centers, dim).0).collect::<Vec<_>>()
        })
        .concat();
        let changed = new_assign != assign;
        assign = new_assign;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut vars = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (j, &x) in row(i).iter().enumerate() {
            vars[c * dim + j] += (x as f64 - centers[c * dim + j]).powi(2);
        }
    }
    for c in 0..k {
        for j in 0..dim {
            let v = if counts[c] > 0 {
                vars[c * dim + j] / counts[c] as f64
            } else {
                global_var[j]
            };
            vars[c * dim + j] = v.max(floor[j]);
        }
    }
    DiagGmm::new(vec![1.0 / k as f64; k], centers, vars)
}

/// Sufficient statistics of one E-step pass.
#[derive(Clone)]
struct EStepAcc {
    ll: f64,
    occ: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
    /// Lowest-likelihood frame of the block.
    worst: (f64, usize),
}

impl EStepAcc {
    fn new(k: usize, d: usize) -> Self {
        EStepAcc {
            ll: 0.0,
            occ: vec![0.0; k],
            first: vec![0.0; k * d],
            second: vec![0.0; k * d],
            worst: (f64::INFINITY, 0),
        }
    }

    fn merge(&mut self, o: &EStepAcc) {
        self.ll += o.ll;
        for (a, b) in self.occ.iter_mut().zip(&o.occ) {
            *a += b;
        }
        for (a, b) in self.first.iter_mut().zip(&o.first) {
            *a += b;
        }
        for (a, b) in self.second.iter_mut().zip(&o.second) {
            *a += b;
        }
        if o.worst.0 < self.worst.0 {
            self.worst = o.worst;
        }
    }
}

/// Runs the E-step over fixed blocks and merges in block order, so the
/// result does not depend on how blocks are scheduled. Also returns each
/// block's worst frame, most poorly explained first.
fn e_step(gmm: &DiagGmm, frames: Frames<'_>) -> (EStepAcc, Vec<(f64, usize)>) {
    let (k, d) = (gmm.n_components(), gmm.dim());
    let scorer = gmm.scorer();
    let blocks = par::blocks(frames.len(), 1024, 64);
    let parts = par::map(&blocks, |b| {
        let mut acc = EStepAcc::new(k, d);
        let mut post = vec![0.0; k];
        for t in b.clone() {
            let x = frames.row(t);
            let ll = scorer.posteriors(x, &mut post);
            acc.ll += ll;
            if ll < acc.worst.0 {
                acc.worst = (ll, t);
            }
            for (c, &g) in post.iter().enumerate() {
                if g < 1e-300 {
                    continue;
                }
                acc.occ[c] += g;
                let f = &mut acc.first[c * d..(c + 1) * d];
                let s = &mut acc.second[c * d..(c + 1) * d];
                for j in 0..d {
                    let v = x[j] as f64;
                    f[j] += g * v;
                    s[j] += g * v * v;
                }
            }
        }
        acc
    });
    let mut total = EStepAcc::new(k, d);
    let mut worsts: Vec<(f64, usize)> = parts.iter().map(|p| p.worst).collect();
    for p in &parts {
        total.merge(p);
    }
    worsts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (total, worsts)
}

/// Maximization step with flooring; returns the new model and the model
/// with any dead components re-seeded (if there were any).
fn m_step(
    gmm: &DiagGmm,
    acc: &EStepAcc,
    n: usize,
    floor: &[f64],
    global_var: &[f64],
    worsts: &[(f64, usize)],
    frames: Frames<'_>,
) -> (DiagGmm, Option<DiagGmm>) {
    let (k, d) = (gmm.n_components(), gmm.dim());
    let n_f = n as f64;
    let mut next = gmm.clone();
    let mut dead = Vec::new();
    for c in 0..k {
        let occ = acc.occ[c];
        next.weights[c] = (occ / n_f).max(WEIGHT_FLOOR);
        if occ < RESCUE_FRACTION * n_f {
            dead.push(c);
        }
        if occ > 0.0 {
            for j in 0..d {
                let mu = acc.first[c * d + j] / occ;
                let var = acc.second[c * d + j] / occ - mu * mu;
                next.means[c * d + j] = mu;
                next.variances[c * d + j] = var.max(floor[j]);
            }
        }
    }
    let wsum: f64 = next.weights.iter().sum();
    next.weights.iter_mut().for_each(|w| *w /= wsum);
    if dead.is_empty() {
        return (next, None);
    }
    let mut rescued = next.clone();
    for (i, &c) in dead.iter().enumerate() {
        // fall back to the overall worst frame if there are more dead
        // components than blocks
        let t = worsts.get(i).or(worsts.first()).map(|w| w.1).unwrap_or(0);
        for (j, &x) in frames.row(t).iter().enumerate() {
            rescued.means[c * d + j] = x as f64;
            rescued.variances[c * d + j] = global_var[j].max(floor[j]);
        }
        rescued.weights[c] = RESCUE_FRACTION;
    }
    let wsum: f64 = rescued.weights.iter().sum();
    rescued.weights.iter_mut().for_each(|w| *w /= wsum);
    (next, Some(rescued))
}

/// `n_iter` EM iterations on all frames. Appends the initial average
/// log-likelihood (when the log is empty) and the value after each
/// iteration to `train_log`.
pub fn em_fit(gmm: &DiagGmm, frames: Frames<'_>, n_iter: usize) -> Result<DiagGmm> {
    gmm.check_dim(frames.dim())?;
    let n = frames.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no frames".into()));
    }
    let (_, global_var) = frames.moments();
    let floor = variance_floor(&global_var);

    let mut model = gmm.clone();
    let (mut acc, mut worsts) = e_step(&model, frames);
    let mut ll = acc.ll / n as f64;
    if !ll.is_finite() {
        return Err(Error::NumericalFailure { iteration: 0 });
    }
    if model.train_log.is_empty() {
        model.train_log.push(ll);
    }
    for iteration in 1..=n_iter {
        let (plain, rescued) = m_step(&model, &acc, n, &floor, &global_var, &worsts, frames);
        let mut candidate = rescued.unwrap_or_else(|| plain.clone());
        let (mut next_acc, mut next_worsts) = e_step(&candidate, frames);
        let mut next_ll = next_acc.ll / n as f64;
        // a re-seeded component may cost likelihood; keep EM monotone by
        // falling back to the plain update
        if candidate != plain && !(next_ll >= ll - MONOTONE_SLACK * ll.abs()) {
            candidate = plain;
            (next_acc, next_worsts) = e_step(&candidate, frames);
            next_ll = next_acc.ll / n as f64;
        }
        if !next_ll.is_finite() {
            return Err(Error::NumericalFailure { iteration });
        }
        candidate.train_log.push(next_ll);
        model = candidate;
        acc = next_acc;
        worsts = next_worsts;
        ll = next_ll;
    }
    Ok(model)
}
