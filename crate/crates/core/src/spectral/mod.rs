//! Leading eigenfunctions of the Markov operator `P = Kt Kt^T`, computed as
//! the top singular triplets of `Kt`, and their out-of-sample extension.
//!
//! `phi_l = sqrt(N) u_l` is orthonormal under `<f, g> = (1/N) sum f g`;
//! `gamma_l = v_l` is Euclidean-orthonormal; `lambda_l = sigma_l^2`.
//! Signs are fixed so every `phi_l` has a non-negative sum; columns whose sum
//! vanishes (all but the constant one) get a positive largest entry instead.

mod lanczos;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use lanczos::{partial_svd, LanczosOptions, LinearOperator, PartialSvd};

use crate::error::{Error, Result};
use crate::kernel::{dot, shifted_kernel_vector, KernelSystem};
use crate::series::DelayEmbedding;

/// Eigenvalues below this are treated as numerically zero.
pub const LAMBDA_FLOOR: f64 = 1e-14;

impl LinearOperator for KernelSystem {
    fn nrows(&self) -> usize {
        self.len()
    }

    fn ncols(&self) -> usize {
        self.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        KernelSystem::apply(self, x)
    }

    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        KernelSystem::apply_transpose(self, u)
    }
}

/// Truncated eigenbasis of the normalized kernel.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    lambda: Vec<f64>,
    sigma: Vec<f64>,
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    kernel: Arc<KernelSystem>,
}

/// Computes the leading `l` eigenpairs with default solver options.
pub fn decompose(kernel: Arc<KernelSystem>, l: usize) -> Result<SpectralBasis> {
    decompose_with(kernel, l, &LanczosOptions::default())
}

pub fn decompose_with(kernel: Arc<KernelSystem>, l: usize, opts: &LanczosOptions) -> Result<SpectralBasis> {
    let n = kernel.len();
    if l == 0 || l > n {
        return Err(Error::Config(format!("L = {l} must lie in 1..={n}")));
    }
    let svd = partial_svd(kernel.as_ref(), l, opts)?;
    SpectralBasis::from_svd(kernel, svd.sigma, svd.left, svd.right)
}

impl SpectralBasis {
    /// Assembles a basis from singular triplets of `Kt` (`u` and `v` with
    /// orthonormal columns), applying the scaling and sign conventions.
    pub fn from_svd(kernel: Arc<KernelSystem>, sigma: Vec<f64>, mut u: DMatrix<f64>, mut v: DMatrix<f64>) -> Result<Self> {
        let n = kernel.len();
        let l = sigma.len();
        if u.nrows() != n || v.nrows() != n || u.ncols() != l || v.ncols() != l {
            return Err(Error::Dimension {
                expected: n,
                got: u.nrows(),
            });
        }
        if let Some(i) = sigma.iter().position(|s| s * s < LAMBDA_FLOOR) {
            return Err(Error::Numerical(format!(
                "eigenvalue {} of {l} is below {LAMBDA_FLOOR:e}; decrease epsilon or decrease L",
                i + 1
            )));
        }
        for c in 0..l {
            if orientation(u.column(c).as_slice()) < 0.0 {
                u.column_mut(c).neg_mut();
                v.column_mut(c).neg_mut();
            }
        }
        u *= (n as f64).sqrt();
        Ok(SpectralBasis {
            lambda: sigma.iter().map(|s| s * s).collect(),
            sigma,
            phi: u,
            gamma: v,
            kernel,
        })
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Number of training points.
    pub fn n_points(&self) -> usize {
        self.phi.nrows()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `N x L`, column `l` is `phi_l` sampled on the training points.
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `N x L`, column `l` is `gamma_l`.
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn kernel(&self) -> &Arc<KernelSystem> {
        &self.kernel
    }

    pub fn embedding(&self) -> &Arc<DelayEmbedding> {
        self.kernel.embedding()
    }

    /// Coefficients `<phi_l, f>` for each column of `f` (`N x m` -> `L x m`).
    pub fn project(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if f.nrows() != self.n_points() {
            return Err(Error::Dimension {
                expected: self.n_points(),
                got: f.nrows(),
            });
        }
        Ok(self.phi.tr_mul(f) / self.n_points() as f64)
    }

    /// `sum_l c_l phi_l` on the training points (`L x m` -> `N x m`).
    pub fn synthesize(&self, coeffs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if coeffs.nrows() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: coeffs.nrows(),
            });
        }
        Ok(&self.phi * coeffs)
    }

    /// Weights `w_j = gamma_lj / sqrt(q_j)` scaled by `sqrt(N)/sigma_l`, one
    /// column per `l`. Contracting normalized kernel weights at `y` against
    /// this matrix gives the extension of every `phi_l` at `y`.
    pub fn extension_weights(&self) -> DMatrix<f64> {
        let sn = (self.n_points() as f64).sqrt();
        let isq = self.kernel.inv_sqrt_right_degree();
        DMatrix::from_fn(self.n_points(), self.len(), |j, l| self.gamma[(j, l)] * isq[j] * sn / self.sigma[l])
    }

    /// Normalized kernel weights at `y`: `k(y, z_j) / sum_i k(y, z_i)`.
    pub fn kernel_weights(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut w = shifted_kernel_vector(&self.kernel, y)?;
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        Ok(w)
    }

    /// Nystrom extension of `phi_l` to an arbitrary delay vector `y`:
    ///
    /// ```text
    /// phibar_l(y) = sqrt(N) / (sigma_l d(y)) * (1/N) sum_j k(y, z_j) gamma_lj / sqrt(q_j)
    /// ```
    ///
    /// with `d(y) = (1/N) sum_j k(y, z_j)`. At a training point this returns
    /// `phi_l` up to rounding.
    pub fn nystrom(&self, y: &[f64], l: usize) -> Result<f64> {
        if l >= self.len() {
            return Err(Error::Config(format!("eigenfunction index {l} >= L = {}", self.len())));
        }
        let w = self.kernel_weights(y)?;
        let isq = self.kernel.inv_sqrt_right_degree();
        let col = self.gamma.column(l);
        let acc: f64 = w.iter().zip(col.iter()).zip(isq).map(|((a, g), s)| a * g * s).sum();
        Ok(acc * (self.n_points() as f64).sqrt() / self.sigma[l])
    }

    /// Extension of all `L` eigenfunctions at `y`.
    pub fn nystrom_all(&self, y: &[f64]) -> Result<Vec<f64>> {
        let w = self.kernel_weights(y)?;
        let isq = self.kernel.inv_sqrt_right_degree();
        let ws: Vec<f64> = w.iter().zip(isq).map(|(a, s)| a * s).collect();
        let sn = (self.n_points() as f64).sqrt();
        Ok((0..self.len())
            .into_par_iter()
            .map(|l| dot(self.gamma.column(l).as_slice(), &ws) * sn / self.sigma[l])
            .collect())
    }

    /// `sup_y |phibar_l(y)| <= sqrt(N)/sigma_l * max_j |gamma_lj| / sqrt(q_j)`,
    /// since the normalized weights are a probability vector.
    pub fn nystrom_sup_bound(&self, l: usize) -> f64 {
        let isq = self.kernel.inv_sqrt_right_degree();
        let m = self
            .gamma
            .column(l)
            .iter()
            .zip(isq)
            .map(|(g, s)| g.abs() * s)
            .fold(0.0, f64::max);
        (self.n_points() as f64).sqrt() / self.sigma[l] * m
    }

    /// Writes the basis to `path` in a compact little-endian binary format.
    pub fn save(&self, path: &Path, key: &str) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * (self.len() * (2 * self.n_points() + 1)));
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(key.len() as u64).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        buf.extend_from_slice(&(self.n_points() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in self.sigma.iter().chain(self.phi.iter()).chain(self.gamma.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a basis written by [`SpectralBasis::save`] and attaches it to
    /// `kernel`. Returns `Ok(None)` when the stored key differs.
    pub fn load(path: &Path, key: &str, kernel: Arc<KernelSystem>) -> Result<Option<Self>> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = || Error::Data(format!("corrupt basis cache {}", path.display()));
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(CACHE_MAGIC.len()).ok_or_else(bad)? != CACHE_MAGIC {
            return Err(bad());
        }
        let klen = r.u64().ok_or_else(bad)? as usize;
        if r.take(klen).ok_or_else(bad)? != key.as_bytes() {
            return Ok(None);
        }
        let n = r.u64().ok_or_else(bad)? as usize;
        let l = r.u64().ok_or_else(bad)? as usize;
        if n != kernel.len() {
            return Ok(None);
        }
        let sigma = r.f64s(l).ok_or_else(bad)?;
        let phi = DMatrix::from_vec(n, l, r.f64s(n * l).ok_or_else(bad)?);
        let gamma = DMatrix::from_vec(n, l, r.f64s(n * l).ok_or_else(bad)?);
        if r.pos != bytes.len() {
            return Err(bad());
        }
        Ok(Some(SpectralBasis {
            lambda: sigma.iter().map(|s| s * s).collect(),
            sigma,
            phi,
            gamma,
            kernel,
        }))
    }
}

/// Sign of the column sum. Columns orthogonal to the constant vector sum to
/// zero up to rounding; those are oriented by their largest-magnitude entry.
fn orientation(col: &[f64]) -> f64 {
    let sum: f64 = col.iter().sum();
    let scale: f64 = col.iter().map(|v| v.abs()).sum();
    if sum.abs() > 1e-8 * scale {
        return sum;
    }
    col.iter().copied().fold(0.0, |best: f64, v| if v.abs() > best.abs() { v } else { best })
}

const CACHE_MAGIC: &[u8] = b"QPBASIS1";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(len)?)?;
        self.pos += len;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64s(&mut self, count: usize) -> Option<Vec<f64>> {
        let raw = self.take(count.checked_mul(8)?)?;
        Some(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Content hash identifying a basis: embedding values and shape, bandwidth
/// and truncation level.
pub fn cache_key(embedding: &DelayEmbedding, epsilon: f64, l: usize) -> String {
    let mut h = Sha256::new();
    h.update((embedding.len() as u64).to_le_bytes());
    h.update((embedding.dim() as u64).to_le_bytes());
    for v in embedding.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.update(epsilon.to_le_bytes());
    h.update((l as u64).to_le_bytes());
    hex::encode(h.finalize())
}

/// Like [`decompose_with`], but reuses `dir/<key>.basis` when present and
/// writes it otherwise. The key also covers the solver seed.
pub fn decompose_cached(kernel: Arc<KernelSystem>, l: usize, dir: &Path, opts: &LanczosOptions) -> Result<SpectralBasis> {
    let key = format!("{}-{:x}", cache_key(kernel.embedding(), kernel.epsilon(), l), opts.seed);
    let path: PathBuf = dir.join(format!("{key}.basis"));
    if path.exists() {
        if let Some(b) = SpectralBasis::load(&path, &key, Arc::clone(&kernel))? {
            return Ok(b);
        }
    }
    let basis = decompose_with(kernel, l, opts)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    basis.save(&path, &key)?;
    Ok(basis)
}
