//! Gaussian kernel on delay-embedded points and its bistochastic
//! normalization.
//!
//! For points `z_1..z_N` and bandwidth `eps`:
//!
//! ```text
//! K_ij   = exp(-|z_i - z_j|^2 / eps)
//! d_i    = (1/N) sum_j K_ij                  left degree
//! q_i    = (1/N) sum_j K_ij / d_j            right degree
//! Kt_ij  = K_ij / (N d_i sqrt(q_j))
//! ```
//!
//! The `1/N` inside `Kt` makes it the matrix of an integral operator against
//! the empirical measure, so `P = Kt Kt^T` is a symmetric Markov matrix
//! (`P 1 = 1`) with top singular value of `Kt` equal to one.
//!
//! `Kt` is never stored: the spectral solver only needs `Kt x` and
//! `Kt^T u`, both of which reduce to products with the symmetric `K`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::series::DelayEmbedding;

/// Largest number of embedded points accepted by default (dense storage).
pub const DEFAULT_MAX_POINTS: usize = 25_000;

const DEGREE_FLOOR: f64 = 1e-300;

/// Squared Euclidean distances between all pairs of delay vectors.
///
/// Computed by direct differencing, so the result is exactly symmetric with
/// an exactly zero diagonal.
pub fn pairwise_sqdist(embedding: &DelayEmbedding) -> DMatrix<f64> {
    let n = embedding.len();
    let mut out = DMatrix::zeros(n, n);
    // column j of a symmetric matrix is row j
    out.as_mut_slice()
        .par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(j, col)| {
            let zj = embedding.point(j);
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = sqdist(embedding.point(i), zj);
            }
        });
    out
}

#[inline]
pub(crate) fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Quantiles of the off-diagonal squared distances (`qs` in `[0, 1]`).
pub fn sqdist_quantiles(sqdist: &DMatrix<f64>, qs: &[f64]) -> Vec<f64> {
    let mut vals = off_diagonal(sqdist);
    if vals.is_empty() {
        return vec![0.0; qs.len()];
    }
    vals.sort_unstable_by(f64::total_cmp);
    qs.iter()
        .map(|q| {
            let pos = (q.clamp(0.0, 1.0) * (vals.len() - 1) as f64).round() as usize;
            vals[pos]
        })
        .collect()
}

fn off_diagonal(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut vals = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for j in 0..n {
        for i in 0..j {
            vals.push(m[(i, j)]);
        }
    }
    vals
}

/// One bin of the squared-distance histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Log-spaced histogram of the positive off-diagonal squared distances.
/// Used to pick a bandwidth by eye; no automatic tuning happens here.
pub fn sqdist_histogram(sqdist: &DMatrix<f64>, bins: usize) -> Vec<HistogramBin> {
    let vals: Vec<f64> = off_diagonal(sqdist).into_iter().filter(|v| *v > 0.0).collect();
    if vals.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min).ln();
    let hi = vals.iter().copied().fold(0.0, f64::max).ln();
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for v in vals {
        let b = (((v.ln() - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lower: (lo + b as f64 * width).exp(),
            upper: (lo + (b + 1) as f64 * width).exp(),
            count,
        })
        .collect()
}

/// Kernel matrix with its degree vectors.
#[derive(Debug, Clone)]
pub struct KernelSystem {
    epsilon: f64,
    k: DMatrix<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    inv_sqrt_q: Vec<f64>,
    embedding: Arc<DelayEmbedding>,
}

/// Builds the kernel system with the default size cap.
pub fn gaussian_kernel(embedding: Arc<DelayEmbedding>, epsilon: f64) -> Result<KernelSystem> {
    gaussian_kernel_capped(embedding, epsilon, DEFAULT_MAX_POINTS)
}

pub fn gaussian_kernel_capped(embedding: Arc<DelayEmbedding>, epsilon: f64, max_points: usize) -> Result<KernelSystem> {
    check_size(&embedding, max_points)?;
    check_epsilon(epsilon)?;
    let sq = pairwise_sqdist(&embedding);
    gaussian_kernel_from_sqdist(embedding, sq, epsilon)
}

fn check_size(embedding: &DelayEmbedding, max_points: usize) -> Result<()> {
    if embedding.is_empty() {
        return Err(Error::Data("empty embedding".into()));
    }
    if embedding.len() > max_points {
        return Err(Error::Config(format!(
            "{} embedded points exceed the dense-kernel cap of {max_points}",
            embedding.len()
        )));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Builds the kernel system from precomputed squared distances, consuming
/// the distance matrix.
pub fn gaussian_kernel_from_sqdist(embedding: Arc<DelayEmbedding>, mut sqdist: DMatrix<f64>, epsilon: f64) -> Result<KernelSystem> {
    check_epsilon(epsilon)?;
    let n = embedding.len();
    if sqdist.nrows() != n || sqdist.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: sqdist.nrows(),
        });
    }
    let inv_eps = 1.0 / epsilon;
    sqdist.as_mut_slice().par_iter_mut().for_each(|v| *v = (-*v * inv_eps).exp());
    let k = sqdist;

    let nf = n as f64;
    let d: Vec<f64> = k
        .as_slice()
        .par_chunks(n)
        .map(|col| col.iter().sum::<f64>() / nf)
        .collect();
    if let Some(i) = d.iter().position(|v| *v < DEGREE_FLOOR) {
        return Err(Error::Numerical(format!("isolated point {i} (left degree underflow); increase epsilon")));
    }
    let inv_d: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
    let q: Vec<f64> = k
        .as_slice()
        .par_chunks(n)
        .map(|col| col.iter().zip(&inv_d).map(|(kij, id)| kij * id).sum::<f64>() / nf)
        .collect();
    if let Some(i) = q.iter().position(|v| *v < DEGREE_FLOOR) {
        return Err(Error::Numerical(format!("isolated point {i} (right degree underflow); increase epsilon")));
    }
    let inv_sqrt_q = q.iter().map(|v| v.sqrt().recip()).collect();
    Ok(KernelSystem {
        epsilon,
        k,
        d,
        q,
        inv_sqrt_q,
        embedding,
    })
}

impl KernelSystem {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    /// The symmetric kernel matrix `K`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn left_degree(&self) -> &[f64] {
        &self.d
    }

    pub fn right_degree(&self) -> &[f64] {
        &self.q
    }

    pub(crate) fn inv_sqrt_right_degree(&self) -> &[f64] {
        &self.inv_sqrt_q
    }

    pub fn embedding(&self) -> &Arc<DelayEmbedding> {
        &self.embedding
    }

    /// Entry `(i, j)` of the normalized matrix `Kt`.
    pub fn normalized_entry(&self, i: usize, j: usize) -> f64 {
        self.k[(i, j)] / (self.len() as f64 * self.d[i]) * self.inv_sqrt_q[j]
    }

    /// Materializes `Kt` (N x N). Intended for diagnostics and tests.
    pub fn normalized_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.normalized_entry(i, j))
    }

    fn k_times(&self, z: &[f64]) -> Vec<f64> {
        let n = self.len();
        self.k.as_slice().par_chunks(n).map(|col| dot(col, z)).collect()
    }

    /// `Kt x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let nf = self.len() as f64;
        let z: Vec<f64> = x.iter().zip(&self.inv_sqrt_q).map(|(a, s)| a * s).collect();
        let mut y = self.k_times(&z);
        for (v, d) in y.iter_mut().zip(&self.d) {
            *v /= nf * d;
        }
        y
    }

    /// `Kt^T u`.
    pub fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        let nf = self.len() as f64;
        let z: Vec<f64> = u.iter().zip(&self.d).map(|(a, d)| a / (nf * d)).collect();
        let mut y = self.k_times(&z);
        for (v, s) in y.iter_mut().zip(&self.inv_sqrt_q) {
            *v *= s;
        }
        y
    }
}

/// `(k(y, z_1), ..., k(y, z_N))`.
pub fn kernel_vector_at(system: &KernelSystem, y: &[f64]) -> Result<Vec<f64>> {
    let emb = system.embedding();
    if y.len() != emb.dim() {
        return Err(Error::Dimension {
            expected: emb.dim(),
            got: y.len(),
        });
    }
    let inv_eps = 1.0 / system.epsilon();
    Ok((0..emb.len()).map(|n| (-sqdist(y, emb.point(n)) * inv_eps).exp()).collect())
}

/// Kernel vector at `y` rescaled by `exp(min_n |y - z_n|^2 / eps)`, so the
/// largest entry is one and far-away points do not underflow. Ratios of
/// kernel entries are unchanged.
pub(crate) fn shifted_kernel_vector(system: &KernelSystem, y: &[f64]) -> Result<Vec<f64>> {
    let emb = system.embedding();
    if y.len() != emb.dim() {
        return Err(Error::Dimension {
            expected: emb.dim(),
            got: y.len(),
        });
    }
    let mut dists: Vec<f64> = (0..emb.len()).map(|n| sqdist(y, emb.point(n))).collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let inv_eps = 1.0 / system.epsilon();
    for v in dists.iter_mut() {
        *v = (-(*v - min) * inv_eps).exp();
    }
    Ok(dists)
}
