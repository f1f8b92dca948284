//! Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization.
//!
//! After `k` steps, `A V_k = U_k B_k` and
//! `A^T U_k = V_k B_k^T + beta_k v_{k+1} e_k^T` with `B_k` upper bidiagonal.
//! Ritz triplets come from the SVD of `B_k`; the residual of triplet `i` is
//! `|beta_k * P[k-1, i]|`. Because `A v_i = sigma_i u_i` holds to rounding for
//! every Ritz triplet, only the transpose relation needs to converge.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::dot;

/// A real linear map available only through products.
pub trait LinearOperator: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, u: &[f64]) -> Vec<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()
    }

    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        (self.tr_mul(&nalgebra::DVector::from_column_slice(u))).as_slice().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanczosOptions {
    /// Relative residual tolerance per triplet.
    pub tol: f64,
    /// Upper bound on the Krylov dimension; `None` means `min(rows, cols)`.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            tol: 1e-10,
            max_steps: None,
            seed: 0,
        }
    }
}

/// Top singular triplets, singular values non-increasing.
#[derive(Debug, Clone)]
pub struct PartialSvd {
    pub sigma: Vec<f64>,
    /// `rows x L`, orthonormal columns.
    pub left: DMatrix<f64>,
    /// `cols x L`, orthonormal columns.
    pub right: DMatrix<f64>,
    /// Largest residual relative to its singular value at exit.
    pub attained_tol: f64,
    pub steps: usize,
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Two passes of classical Gram-Schmidt against `basis`.
fn reorthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        let coeffs: Vec<f64> = basis.par_iter().map(|b| dot(b, v)).collect();
        for (b, c) in basis.iter().zip(coeffs) {
            for (x, y) in v.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
}

fn random_unit_orthogonal(len: usize, basis: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        reorthogonalize(&mut v, basis);
        let nv = norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            return v;
        }
    }
}

struct SmallSvd {
    sigma: Vec<f64>,
    /// `k x r` left and right singular vectors of the bidiagonal.
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    /// `|B q - s p| + |B^T p - s q|` per triplet, as computed.
    residual: Vec<f64>,
}

/// Top `r` singular triplets of the upper bidiagonal matrix with diagonal
/// `alpha` and superdiagonal `beta[..k-1]`, through the eigenvectors of the
/// symmetric tridiagonal matrix `[0 B; B^T 0]` with rows interleaved as
/// `(q_1, p_1, q_2, p_2, ..)`, whose positive eigenvalues are the singular
/// values of `B`.
fn bidiagonal_svd(alpha: &[f64], beta: &[f64], r: usize) -> SmallSvd {
    let k = alpha.len();
    let mut t = DMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        t[(2 * i, 2 * i + 1)] = alpha[i];
        t[(2 * i + 1, 2 * i)] = alpha[i];
        if i + 1 < k {
            t[(2 * i + 1, 2 * i + 2)] = beta[i];
            t[(2 * i + 2, 2 * i + 1)] = beta[i];
        }
    }
    let eig = t.symmetric_eigen();
    let mut order: Vec<usize> = (0..2 * k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues.amax();
    let tiny = 64.0 * f64::EPSILON * top;
    let mut p = DMatrix::zeros(k, r);
    let mut q = DMatrix::zeros(k, r);
    let mut sigma = vec![0.0; r];
    // Nonzero singular values: each half of the eigenvector has norm 1/sqrt(2).
    let positive = order[..r].iter().take_while(|&&j| eig.eigenvalues[j] > tiny).count();
    for (c, &j) in order[..positive].iter().enumerate() {
        let z = eig.eigenvectors.column(j);
        for i in 0..k {
            q[(i, c)] = z[2 * i] * std::f64::consts::SQRT_2;
            p[(i, c)] = z[2 * i + 1] * std::f64::consts::SQRT_2;
        }
        sigma[c] = eig.eigenvalues[j];
    }
    if positive < r {
        // Null space of T mixes the null spaces of B and B^T freely; split
        // the halves and orthonormalize each.
        let zero: Vec<usize> = order.iter().copied().filter(|&j| eig.eigenvalues[j].abs() <= tiny).collect();
        let zq = DMatrix::from_fn(k, zero.len(), |i, c| eig.eigenvectors[(2 * i, zero[c])]);
        let zp = DMatrix::from_fn(k, zero.len(), |i, c| eig.eigenvectors[(2 * i + 1, zero[c])]);
        let need = r - positive;
        for (half, dst) in [(zq, &mut q), (zp, &mut p)] {
            let basis = half.svd(true, false).u.expect("left vectors requested");
            for c in 0..need {
                dst.column_mut(positive + c).copy_from(&basis.column(c));
            }
        }
    }
    let mut residual = Vec::with_capacity(r);
    for (c, &s) in sigma.iter().enumerate() {
        let mut res = 0.0;
        for i in 0..k {
            let bq = alpha[i] * q[(i, c)] + if i + 1 < k { beta[i] * q[(i + 1, c)] } else { 0.0 };
            let btp = alpha[i] * p[(i, c)] + if i > 0 { beta[i - 1] * p[(i - 1, c)] } else { 0.0 };
            res += (bq - s * p[(i, c)]).powi(2) + (btp - s * q[(i, c)]).powi(2);
        }
        residual.push(res.sqrt());
    }
    SmallSvd { sigma, p, q, residual }
}

/// Computes the top `rank` singular triplets of `op`.
pub fn partial_svd<A: LinearOperator + ?Sized>(op: &A, rank: usize, opts: &LanczosOptions) -> Result<PartialSvd> {
    let (m, n) = (op.nrows(), op.ncols());
    let full = m.min(n);
    if rank == 0 || rank > full {
        return Err(Error::Config(format!("rank {rank} outside 1..={full}")));
    }
    let max_steps = opts.max_steps.unwrap_or(full).clamp(rank, full);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut vs: Vec<Vec<f64>> = vec![random_unit_orthogonal(n, &[], &mut rng)];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut anorm = 0.0f64;

    let mut target = max_steps.min(rank + (rank / 4).max(30));
    let increment = (rank / 4).max(20);
    loop {
        while alphas.len() < target {
            let j = alphas.len();
            let mut u = op.apply(&vs[j]);
            if j > 0 {
                let b = betas[j - 1];
                for (x, y) in u.iter_mut().zip(&us[j - 1]) {
                    *x -= b * y;
                }
            }
            reorthogonalize(&mut u, &us);
            let mut alpha = norm(&u);
            anorm = anorm.max(alpha);
            if alpha <= 1e-14 * anorm.max(f64::MIN_POSITIVE) {
                alpha = 0.0;
                u = random_unit_orthogonal(m, &us, &mut rng);
            } else {
                u.iter_mut().for_each(|x| *x /= alpha);
            }
            alphas.push(alpha);
            us.push(u);

            let mut v = op.apply_transpose(&us[j]);
            for (x, y) in v.iter_mut().zip(&vs[j]) {
                *x -= alpha * y;
            }
            reorthogonalize(&mut v, &vs);
            let mut beta = norm(&v);
            anorm = anorm.max(beta);
            if vs.len() == n {
                // Krylov space exhausted: the factorization is exact
                beta = 0.0;
                betas.push(beta);
                break;
            }
            if beta <= 1e-14 * anorm.max(f64::MIN_POSITIVE) {
                beta = 0.0;
                v = random_unit_orthogonal(n, &vs, &mut rng);
            } else {
                v.iter_mut().for_each(|x| *x /= beta);
            }
            betas.push(beta);
            vs.push(v);
        }

        let k = alphas.len();
        let small = bidiagonal_svd(&alphas, &betas[..k], rank.min(k));
        let beta_k = betas[k - 1];
        let sigma1 = small.sigma[0];
        let floor = 64.0 * f64::EPSILON * sigma1;
        let mut worst = 0.0f64;
        let mut converged = true;
        for (i, &s) in small.sigma.iter().enumerate() {
            let resid = (beta_k * small.p[(k - 1, i)]).abs() + small.residual[i];
            if resid > opts.tol * s && resid > floor {
                converged = false;
            }
            worst = worst.max(if s > 0.0 { resid / s } else { resid });
        }

        if converged || k >= max_steps || alphas.len() < target {
            if !converged && alphas.len() >= target && k < full {
                return Err(Error::Numerical(format!(
                    "partial SVD did not converge in {k} steps; attained relative residual {worst:.3e}"
                )));
            }
            let ub = DMatrix::from_fn(m, k, |r, c| us[c][r]);
            let vb = DMatrix::from_fn(n, k, |r, c| vs[c][r]);
            return Ok(PartialSvd {
                left: ub * small.p,
                right: vb * small.q,
                sigma: small.sigma,
                attained_tol: worst,
                steps: k,
            });
        }
        target = (target + increment).min(max_steps);
    }
}
