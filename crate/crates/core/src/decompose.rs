//! Periodic plus chaotic decomposition and the standalone data-driven model.
//!
//! Training pairs delay vector `z_n = (y_n, ..., y_{n+Q})` with the next
//! sample `y_{n+Q+1}`. The periodic part is a trigonometric polynomial on the
//! selected frequencies, fitted by least squares to those next samples:
//!
//! ```text
//! g_per(t) = Re sum_j (2 - delta_{j,0}) A_j exp(i omega_j (t - t_ref))
//! ```
//!
//! where `t_ref` is the time of the first target sample. The residual is
//! expanded in the eigenbasis, `E = Phi^T Y_non / N`, and evaluated off the
//! training set through the Nystrom extension. The free-running model is
//!
//! ```text
//! y_{n+1} = g_per(t_{n+1}) + g_chaos(y_{n-Q}, ..., y_n)
//! ```
//!
//! with the delay state updated as a shift register.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::freqfilter::{self, FrequencySelection};
use crate::kernel;
use crate::series::{delay_embed, DelayEmbedding, TimeSeries};
use crate::spectral::{self, SpectralBasis};

/// Relative rank tolerance for the periodic design matrix.
pub const RANK_TOL: f64 = 1e-10;

/// How the kernel bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `epsilon` used as given.
    Absolute(f64),
    /// `epsilon = c * median off-diagonal squared distance`.
    MedianScale(f64),
}

impl Bandwidth {
    pub fn resolve(&self, sqdist: &DMatrix<f64>) -> Result<f64> {
        let eps = match *self {
            Bandwidth::Absolute(e) => e,
            Bandwidth::MedianScale(c) => c * kernel::sqdist_quantiles(sqdist, &[0.5])[0],
        };
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("resolved epsilon {eps} is not positive")));
        }
        Ok(eps)
    }
}

/// Free-run evaluation mode over the training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Periodic fit plus eigenbasis synthesis at the training points.
    Insample,
    /// Iterate the model from the first training state.
    Freerun,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "insample" => Ok(Mode::Insample),
            "freerun" => Ok(Mode::Freerun),
            _ => Err(Error::Config(format!("unknown mode '{s}' (insample | freerun)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeParams {
    pub delays: usize,
    pub bandwidth: Bandwidth,
    pub num_eigen: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub l0: usize,
    pub merge_adjacent: bool,
    /// Z-score channels before the kernel sees them.
    pub standardize: bool,
    pub max_points: usize,
    /// Start vector seed for the iterative SVD.
    pub seed: u64,
}

impl Default for DecomposeParams {
    fn default() -> Self {
        DecomposeParams {
            delays: 20,
            bandwidth: Bandwidth::Absolute(0.1),
            num_eigen: 1001,
            eps1: freqfilter::DEFAULT_EPS1,
            eps2: freqfilter::DEFAULT_EPS2,
            l0: freqfilter::DEFAULT_L0,
            merge_adjacent: false,
            standardize: false,
            max_points: kernel::DEFAULT_MAX_POINTS,
            seed: 0,
        }
    }
}

/// Result of the harmonic least-squares fit.
#[derive(Debug, Clone)]
pub struct PeriodicFit {
    /// `m x k`, row `j` multiplies `(2 - delta_{j,0}) exp(i omega_j (t - t_ref))`.
    pub a: DMatrix<Complex64>,
    /// `Re(F A)` on the fitted samples.
    pub fitted: DMatrix<f64>,
    /// `Y - Re(F A)`.
    pub residual: DMatrix<f64>,
}

/// Real design matrix with columns `1, cos(w_j t), sin(w_j t), ...`, where a
/// frequency at the Nyquist rate of `dt` gets only a cosine column. Returns
/// the matrix and, per column, the index into `omegas` it belongs to.
pub fn design_matrix(omegas: &[f64], times: &[f64]) -> (DMatrix<f64>, Vec<(usize, bool)>) {
    let mut cols: Vec<(usize, bool)> = Vec::new();
    let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    for (j, w) in omegas.iter().enumerate() {
        if *w == 0.0 {
            cols.push((j, true));
            continue;
        }
        cols.push((j, true));
        if !is_nyquist(*w, dt) {
            cols.push((j, false));
        }
    }
    let m = DMatrix::from_fn(times.len(), cols.len(), |r, c| {
        let (j, is_cos) = cols[c];
        let ph = omegas[j] * times[r];
        if omegas[j] == 0.0 {
            1.0
        } else if is_cos {
            ph.cos()
        } else {
            ph.sin()
        }
    });
    (m, cols)
}

fn is_nyquist(omega: f64, dt: f64) -> bool {
    (omega * dt - std::f64::consts::PI).abs() <= 1e-9 * std::f64::consts::PI
}

/// Least squares `min |A x - B|` by Householder QR with column-norm pivoting.
/// Returns the solution or the indices of columns found dependent on the
/// others (relative tolerance `tol` against the largest column norm).
pub(crate) fn pivoted_lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> std::result::Result<DMatrix<f64>, Vec<usize>> {
    let (m, n) = a.shape();
    let k = b.ncols();
    let mut r = a.clone();
    let mut qtb = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let max_norm = (0..n).map(|c| r.column(c).norm()).fold(0.0, f64::max);
    if n > m {
        return Err((m..n).collect());
    }
    for i in 0..n {
        let (p, pn) = (i..n)
            .map(|c| (c, r.view_range(i.., c).norm()))
            .fold((i, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pn <= tol * max_norm {
            return Err(perm[i..].to_vec());
        }
        r.swap_columns(i, p);
        perm.swap(i, p);
        // Householder vector for column i below the diagonal
        let alpha = if r[(i, i)] > 0.0 { -pn } else { pn };
        let mut v: Vec<f64> = (i..m).map(|row| r[(row, i)]).collect();
        v[0] -= alpha;
        let vn2: f64 = v.iter().map(|x| x * x).sum();
        if vn2 > 0.0 {
            let apply = |col: &mut [f64]| {
                let s: f64 = v.iter().zip(&col[i..]).map(|(a, b)| a * b).sum::<f64>() * 2.0 / vn2;
                for (x, vv) in col[i..].iter_mut().zip(&v) {
                    *x -= s * vv;
                }
            };
            for col in r.as_mut_slice().chunks_mut(m).skip(i) {
                apply(col);
            }
            for col in qtb.as_mut_slice().chunks_mut(m) {
                apply(col);
            }
        }
    }
    let mut x = DMatrix::zeros(n, k);
    for c in 0..k {
        for i in (0..n).rev() {
            let mut s = qtb[(i, c)];
            for jj in i + 1..n {
                s -= r[(i, jj)] * x[(perm[jj], c)];
            }
            x[(perm[i], c)] = s / r[(i, i)];
        }
    }
    Ok(x)
}

/// Fits `Re(F A) = Y` over the frequencies `omegas` at sample times
/// `t_ref + n dt`. `omegas[0]` should be zero (the mean).
pub fn fit_periodic_omegas(y: &DMatrix<f64>, omegas: &[f64], dt: f64) -> Result<PeriodicFit> {
    if omegas.is_empty() {
        return Err(Error::Config("empty frequency selection".into()));
    }
    let times: Vec<f64> = (0..y.nrows()).map(|n| n as f64 * dt).collect();
    let (design, cols) = design_matrix(omegas, &times);
    if y.nrows() < design.ncols() {
        return Err(Error::Data(format!(
            "{} samples cannot determine {} periodic coefficients",
            y.nrows(),
            design.ncols()
        )));
    }
    let coef = pivoted_lstsq(&design, y, RANK_TOL).map_err(|bad| {
        let mut names: Vec<String> = bad
            .iter()
            .map(|c| format!("omega = {:.6e} rad/s", omegas[cols[*c].0]))
            .collect();
        names.dedup();
        Error::Numerical(format!(
            "periodic design matrix is rank deficient; dependent columns for {} (aliased or duplicate bins)",
            names.join(", ")
        ))
    })?;
    let k = y.ncols();
    let mut a = DMatrix::from_element(omegas.len(), k, Complex64::new(0.0, 0.0));
    for (c, (j, is_cos)) in cols.iter().enumerate() {
        for ch in 0..k {
            let v = coef[(c, ch)];
            if omegas[*j] == 0.0 {
                a[(*j, ch)].re += v;
            } else if *is_cos {
                a[(*j, ch)].re = v / 2.0;
            } else {
                a[(*j, ch)].im = -v / 2.0;
            }
        }
    }
    let fitted = &design * &coef;
    let residual = y - &fitted;
    Ok(PeriodicFit { a, fitted, residual })
}

/// Fits the periodic component over a frequency selection.
pub fn fit_periodic(y: &DMatrix<f64>, selection: &FrequencySelection, dt: f64) -> Result<PeriodicFit> {
    fit_periodic_omegas(y, &selection.omegas, dt)
}

/// `E = Phi^T Y_non / N`.
pub fn fit_chaotic(y_non: &DMatrix<f64>, basis: &SpectralBasis) -> Result<DMatrix<f64>> {
    basis.project(y_non)
}

/// Evaluates `Re sum_j (2 - delta_{j,0}) A_j exp(i omega_j tau)`.
pub fn eval_trig(a: &DMatrix<Complex64>, omegas: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.ncols()];
    for (j, w) in omegas.iter().enumerate() {
        let weight = if *w == 0.0 { 1.0 } else { 2.0 };
        let e = Complex64::from_polar(1.0, w * tau);
        for (ch, o) in out.iter_mut().enumerate() {
            *o += weight * (a[(j, ch)] * e).re;
        }
    }
    out
}

/// Fitted decomposition model.
#[derive(Debug, Clone)]
pub struct QPModel {
    selection: FrequencySelection,
    a: DMatrix<Complex64>,
    e: DMatrix<f64>,
    basis: Arc<SpectralBasis>,
    /// `Phi`-extension weights contracted with `E` (`N x k`).
    chaos_weights: DMatrix<f64>,
    dt: f64,
    q: usize,
    epsilon: f64,
    t_ref: f64,
    input_scale: Vec<(f64, f64)>,
    channel_names: Vec<String>,
    data_hash: String,
    max_train_norm: f64,
    params: DecomposeParams,
}

/// Content hash of a training series (values, dt, t0).
pub fn series_hash(series: &TimeSeries) -> String {
    let mut h = Sha256::new();
    h.update((series.len() as u64).to_le_bytes());
    h.update((series.channels() as u64).to_le_bytes());
    h.update(series.dt().to_le_bytes());
    h.update(series.t0().to_le_bytes());
    for v in series.values().iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Intermediate products of [`decompose`], useful for diagnostics.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub model: QPModel,
    pub table: freqfilter::RkhsNormTable,
    pub periodic: PeriodicFit,
}

/// Runs the full training chain on `series`.
pub fn decompose(series: &TimeSeries, params: &DecomposeParams) -> Result<QPModel> {
    Ok(decompose_full(series, params, None)?.model)
}

/// Like [`decompose`], returning the intermediate table and periodic fit, and
/// optionally caching the spectral basis in `cache_dir`.
pub fn decompose_full(series: &TimeSeries, params: &DecomposeParams, cache_dir: Option<&Path>) -> Result<Decomposition> {
    let TrainingBasis {
        basis,
        targets,
        input_scale,
    } = training_basis(series, params, cache_dir)?;
    let q = params.delays;
    let epsilon = basis.kernel().epsilon();
    let table = freqfilter::rkhs_norm_table(&basis, series.dt())?;
    let mut selection = freqfilter::select(&table, params.eps1, params.eps2, params.l0)?;
    if params.merge_adjacent {
        selection = freqfilter::merge_adjacent(&selection);
    }
    let periodic = fit_periodic(&targets, &selection, series.dt())?;
    let e = fit_chaotic(&periodic.residual, &basis)?;
    let t_ref = series.t0() + (q + 1) as f64 * series.dt();
    let max_train_norm = (0..series.len())
        .map(|r| series.values().row(r).norm())
        .fold(0.0, f64::max);
    let model = QPModel::assemble(ModelParts {
        selection,
        a: periodic.a.clone(),
        e,
        basis,
        dt: series.dt(),
        q,
        epsilon,
        t_ref,
        input_scale,
        channel_names: series.channel_names().to_vec(),
        data_hash: series_hash(series),
        max_train_norm,
        params: params.clone(),
    });
    Ok(Decomposition { model, table, periodic })
}

fn build_basis(ks: Arc<kernel::KernelSystem>, params: &DecomposeParams, cache_dir: Option<&Path>) -> Result<SpectralBasis> {
    let opts = spectral::LanczosOptions {
        seed: params.seed,
        ..Default::default()
    };
    match cache_dir {
        Some(dir) => spectral::decompose_cached(ks, params.num_eigen, dir, &opts),
        None => spectral::decompose_with(ks, params.num_eigen, &opts),
    }
}

/// Eigenbasis of the training delay vectors with their next-sample targets.
#[derive(Debug, Clone)]
pub struct TrainingBasis {
    pub basis: Arc<SpectralBasis>,
    /// `N x k` next-sample targets in data units.
    pub targets: DMatrix<f64>,
    /// Per-channel `(mean, std)` applied before the kernel.
    pub input_scale: Vec<(f64, f64)>,
}

/// Builds the kernel and spectral basis for `series` without fitting.
pub fn training_basis(series: &TimeSeries, params: &DecomposeParams, cache_dir: Option<&Path>) -> Result<TrainingBasis> {
    series.ensure_regular()?;
    let q = params.delays;
    if series.len() < q + 3 {
        return Err(Error::Data(format!(
            "series of length {} too short for {q} delays",
            series.len()
        )));
    }
    let input_scale = if params.standardize {
        series.standardize()?.1
    } else {
        vec![(0.0, 1.0); series.channels()]
    };
    let (embedding, targets) = training_pairs(series, q, &input_scale)?;
    let n = embedding.len();
    if n > params.max_points {
        return Err(Error::Config(format!(
            "{n} embedded points exceed the dense-kernel cap of {}",
            params.max_points
        )));
    }
    let embedding = Arc::new(embedding);
    let sq = kernel::pairwise_sqdist(&embedding);
    let epsilon = params.bandwidth.resolve(&sq)?;
    let ks = Arc::new(kernel::gaussian_kernel_from_sqdist(embedding, sq, epsilon)?);
    let basis = Arc::new(build_basis(ks, params, cache_dir)?);
    Ok(TrainingBasis {
        basis,
        targets,
        input_scale,
    })
}

/// Delay vectors `z_n` (last one dropped) and their next-sample targets.
fn training_pairs(series: &TimeSeries, q: usize, scale: &[(f64, f64)]) -> Result<(DelayEmbedding, DMatrix<f64>)> {
    let full = delay_embed(series, q)?;
    let n = full.len() - 1;
    let k = series.channels();
    let dim = full.dim();
    let mut pts = full.as_slice()[..n * dim].to_vec();
    for chunk in pts.chunks_mut(k) {
        for (v, (mu, sd)) in chunk.iter_mut().zip(scale) {
            *v = (*v - mu) / sd;
        }
    }
    let emb = DelayEmbedding::from_points(pts, k, q, series.dt())?;
    let targets = series.values().rows(q + 1, n).into_owned();
    Ok((emb, targets))
}

struct ModelParts {
    selection: FrequencySelection,
    a: DMatrix<Complex64>,
    e: DMatrix<f64>,
    basis: Arc<SpectralBasis>,
    dt: f64,
    q: usize,
    epsilon: f64,
    t_ref: f64,
    input_scale: Vec<(f64, f64)>,
    channel_names: Vec<String>,
    data_hash: String,
    max_train_norm: f64,
    params: DecomposeParams,
}

impl QPModel {
    fn assemble(p: ModelParts) -> Self {
        let chaos_weights = p.basis.extension_weights() * &p.e;
        QPModel {
            selection: p.selection,
            a: p.a,
            e: p.e,
            basis: p.basis,
            chaos_weights,
            dt: p.dt,
            q: p.q,
            epsilon: p.epsilon,
            t_ref: p.t_ref,
            input_scale: p.input_scale,
            channel_names: p.channel_names,
            data_hash: p.data_hash,
            max_train_norm: p.max_train_norm,
            params: p.params,
        }
    }

    pub fn selection(&self) -> &FrequencySelection {
        &self.selection
    }

    /// Periodic coefficients, `m x k`.
    pub fn a(&self) -> &DMatrix<Complex64> {
        &self.a
    }

    /// Chaotic coefficients, `L x k`.
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        &self.basis
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn delays(&self) -> usize {
        self.q
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Time of the first training target; phases are measured from here.
    pub fn t_ref(&self) -> f64 {
        self.t_ref
    }

    pub fn channels(&self) -> usize {
        self.a.ncols()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Number of training pairs.
    pub fn train_len(&self) -> usize {
        self.basis.n_points()
    }

    pub fn data_hash(&self) -> &str {
        &self.data_hash
    }

    pub fn params(&self) -> &DecomposeParams {
        &self.params
    }

    /// Length of a delay state, `k (Q + 1)`.
    pub fn state_dim(&self) -> usize {
        self.channels() * (self.q + 1)
    }

    /// `g_per` at absolute time `t` (seconds).
    pub fn eval_periodic(&self, t: f64) -> Vec<f64> {
        eval_trig(&self.a, &self.selection.omegas, t - self.t_ref)
    }

    /// `g_chaos` at a delay state in data units, oldest sample first.
    pub fn eval_chaotic(&self, y_delay: &[f64]) -> Result<Vec<f64>> {
        let z = self.scale_state(y_delay)?;
        let w = self.basis.kernel_weights(&z)?;
        let k = self.channels();
        Ok((0..k)
            .map(|c| kernel::dot(self.chaos_weights.column(c).as_slice(), &w))
            .collect())
    }

    fn scale_state(&self, y_delay: &[f64]) -> Result<Vec<f64>> {
        if y_delay.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                got: y_delay.len(),
            });
        }
        let k = self.channels();
        Ok(y_delay
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (mu, sd) = self.input_scale[i % k];
                (v - mu) / sd
            })
            .collect())
    }

    /// `sum_j (2 - delta_{j,0}) |A_j|`, an upper bound on `|g_per(t)|`.
    pub fn periodic_bound(&self) -> f64 {
        (0..self.a.nrows())
            .map(|j| {
                let w = if self.selection.omegas[j] == 0.0 { 1.0 } else { 2.0 };
                w * self.a.row(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
            })
            .sum()
    }

    /// `sum_l |E_l| sup |phibar_l|`, an upper bound on `|g_chaos(y)|`.
    pub fn chaotic_bound(&self) -> f64 {
        (0..self.e.nrows())
            .map(|l| self.e.row(l).norm() * self.basis.nystrom_sup_bound(l))
            .sum()
    }

    /// Bound on the norm of every free-run output.
    pub fn free_run_bound(&self) -> f64 {
        self.periodic_bound() + self.chaotic_bound()
    }

    /// Largest row norm of the training series.
    pub fn max_train_norm(&self) -> f64 {
        self.max_train_norm
    }

    /// Iterates the standalone model for `n_steps` from the delay state
    /// `init` (oldest sample first). `t_start` is the time of the first
    /// predicted sample. With `clip = Some(c)` each output is scaled back to
    /// norm at most `c` times the largest training norm.
    pub fn reconstruct(&self, init: &[f64], n_steps: usize, t_start: f64, clip: Option<f64>) -> Result<TimeSeries> {
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if init.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                got: init.len(),
            });
        }
        let k = self.channels();
        let mut state = init.to_vec();
        let mut out = DMatrix::zeros(n_steps, k);
        let cap = clip.map(|c| c * self.max_train_norm);
        for step in 0..n_steps {
            let t = t_start + step as f64 * self.dt;
            let per = self.eval_periodic(t);
            let chaos = self.eval_chaotic(&state)?;
            let mut y: Vec<f64> = per.iter().zip(&chaos).map(|(a, b)| a + b).collect();
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step });
            }
            if let Some(cap) = cap {
                let nrm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > cap {
                    y.iter_mut().for_each(|v| *v *= cap / nrm);
                }
            }
            state.copy_within(k.., 0);
            let len = state.len();
            state[len - k..].copy_from_slice(&y);
            out.row_mut(step).copy_from_slice(&y);
        }
        TimeSeries::new(out, self.dt, t_start, self.channel_names.clone())
    }

    /// Model output over the training targets. `Insample` sums the periodic
    /// fit and the eigenbasis synthesis of `E`; `Freerun` iterates from the
    /// first training state.
    pub fn reconstruct_training(&self, series: &TimeSeries, mode: Mode, clip: Option<f64>) -> Result<TimeSeries> {
        let n = self.train_len();
        match mode {
            Mode::Insample => {
                let per = DMatrix::from_fn(n, self.channels(), |r, c| {
                    self.eval_periodic(self.t_ref + r as f64 * self.dt)[c]
                });
                let chaos = self.basis.synthesize(&self.e)?;
                TimeSeries::new(per + chaos, self.dt, self.t_ref, self.channel_names.clone())
            }
            Mode::Freerun => {
                let init = state_at(series, self.q, self.q)?;
                self.reconstruct(&init, n, self.t_ref, clip)
            }
        }
    }

    /// Free-run prediction from the state ending at sample `init_at` of
    /// `series`, for `steps` samples starting at `init_at + 1`.
    pub fn predict(&self, series: &TimeSeries, init_at: usize, steps: usize, clip: Option<f64>) -> Result<TimeSeries> {
        if series.channels() != self.channels() {
            return Err(Error::Dimension {
                expected: self.channels(),
                got: series.channels(),
            });
        }
        let init = state_at(series, init_at, self.q)?;
        let t_start = series.t0() + (init_at + 1) as f64 * series.dt();
        self.reconstruct(&init, steps, t_start, clip)
    }
}

/// Delay state `(y_{n-Q}, ..., y_n)` of `series`.
pub fn state_at(series: &TimeSeries, n: usize, q: usize) -> Result<Vec<f64>> {
    if n < q || n >= series.len() {
        return Err(Error::Config(format!(
            "state index {n} needs {q} earlier samples within a series of length {}",
            series.len()
        )));
    }
    let mut s = Vec::with_capacity(series.channels() * (q + 1));
    for r in n - q..=n {
        s.extend(series.row(r));
    }
    Ok(s)
}

/// `|y - yhat| / max_n |y|` per channel.
pub fn relative_error(truth: &TimeSeries, estimate: &TimeSeries) -> Result<DMatrix<f64>> {
    if truth.len() != estimate.len() || truth.channels() != estimate.channels() {
        return Err(Error::Dimension {
            expected: truth.len() * truth.channels(),
            got: estimate.len() * estimate.channels(),
        });
    }
    if (truth.dt() - estimate.dt()).abs() > 1e-12 * truth.dt() {
        return Err(Error::Data(format!("dt mismatch: {} vs {}", truth.dt(), estimate.dt())));
    }
    let (n, k) = (truth.len(), truth.channels());
    let mut out = DMatrix::zeros(n, k);
    for c in 0..k {
        let denom = truth.values().column(c).amax();
        if denom == 0.0 {
            return Err(Error::Data(format!(
                "channel '{}' is identically zero; relative error undefined",
                truth.channel_names()[c]
            )));
        }
        for r in 0..n {
            out[(r, c)] = (truth.values()[(r, c)] - estimate.values()[(r, c)]).abs() / denom;
        }
    }
    Ok(out)
}

/// Trailing mean over `min(window, n + 1)` samples.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for (n, v) in x.iter().enumerate() {
        acc += v;
        if n >= window {
            acc -= x[n - window];
        }
        out.push(acc / (n + 1).min(window) as f64);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    selection: FrequencySelection,
    a_re: Vec<Vec<f64>>,
    a_im: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    dt: f64,
    delays: usize,
    epsilon: f64,
    t_ref: f64,
    input_scale: Vec<(f64, f64)>,
    channel_names: Vec<String>,
    data_hash: String,
    max_train_norm: f64,
    params: DecomposeParams,
}

const MODEL_FORMAT: &str = "quasiperiodic-model-1";

fn rows<T: Copy>(m: &DMatrix<T>, f: impl Fn(T) -> f64) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().map(|v| f(*v)).collect()).collect()
}

impl QPModel {
    /// Serializes the model as JSON. The spectral basis is not included; it
    /// is rebuilt from the training data on load.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            selection: self.selection.clone(),
            a_re: rows(&self.a, |z| z.re),
            a_im: rows(&self.a, |z| z.im),
            e: rows(&self.e, |v| v),
            dt: self.dt,
            delays: self.q,
            epsilon: self.epsilon,
            t_ref: self.t_ref,
            input_scale: self.input_scale.clone(),
            channel_names: self.channel_names.clone(),
            data_hash: self.data_hash.clone(),
            max_train_norm: self.max_train_norm,
            params: self.params.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Loads a model and reattaches it to its training series, which must hash
    /// to the stored value. The basis is recomputed, or read from
    /// `cache_dir` when given.
    pub fn load(path: &Path, training: &TimeSeries, cache_dir: Option<&Path>) -> Result<Self> {
        let txt = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: ModelFile = serde_json::from_str(&txt).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if f.format != MODEL_FORMAT {
            return Err(Error::Data(format!("unsupported model format '{}'", f.format)));
        }
        let hash = series_hash(training);
        if hash != f.data_hash {
            return Err(Error::Data(format!(
                "training data hash {hash} does not match the model's {}",
                f.data_hash
            )));
        }
        let (embedding, _) = training_pairs(training, f.delays, &f.input_scale)?;
        let ks = Arc::new(kernel::gaussian_kernel_capped(Arc::new(embedding), f.epsilon, f.params.max_points)?);
        let basis = build_basis(ks, &f.params, cache_dir)?;
        let to_mat = |r: &Vec<Vec<f64>>, cols: usize| -> Result<DMatrix<f64>> {
            if r.iter().any(|row| row.len() != cols) {
                return Err(Error::Data("ragged coefficient matrix in model file".into()));
            }
            Ok(DMatrix::from_fn(r.len(), cols, |i, j| r[i][j]))
        };
        let k = f.channel_names.len();
        let are = to_mat(&f.a_re, k)?;
        let aim = to_mat(&f.a_im, k)?;
        let e = to_mat(&f.e, k)?;
        if e.nrows() != basis.len() || are.nrows() != f.selection.len() {
            return Err(Error::Data("model coefficients do not match its basis".into()));
        }
        Ok(QPModel::assemble(ModelParts {
            selection: f.selection,
            a: DMatrix::from_fn(are.nrows(), k, |i, j| Complex64::new(are[(i, j)], aim[(i, j)])),
            e,
            basis: Arc::new(basis),
            dt: f.dt,
            q: f.delays,
            epsilon: f.epsilon,
            t_ref: f.t_ref,
            input_scale: f.input_scale,
            channel_names: f.channel_names,
            data_hash: f.data_hash,
            max_train_norm: f.max_train_norm,
            params: f.params,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn grid_omegas(n: usize, dt: f64, bins: &[usize]) -> Vec<f64> {
        bins.iter().map(|j| TAU * *j as f64 / (n as f64 * dt)).collect()
    }

    #[test]
    fn dc_fit() {
        let y = DMatrix::from_element(10, 2, 3.5);
        let fit = fit_periodic_omegas(&y, &[0.0], 1.0).unwrap();
        assert!((fit.a[(0, 0)].re - 3.5).abs() < 1e-14);
        assert!(fit.a[(0, 1)].im == 0.0);
        assert!(fit.residual.amax() < 1e-13);
    }

    #[test]
    fn harmonic_regression_amplitude_and_phase() {
        let (n, dt) = (128, 0.5);
        let om = grid_omegas(n, dt, &[0, 7]);
        let w = om[1];
        let y = DMatrix::from_fn(n, 1, |r, _| {
            let t = r as f64 * dt;
            3.0 * (w * t).cos() + 4.0 * (w * t).sin()
        });
        let fit = fit_periodic_omegas(&y, &om, dt).unwrap();
        assert!(fit.residual.amax() < 1e-9);
        let a = fit.a[(1, 0)];
        assert!((2.0 * a.norm() - 5.0).abs() < 1e-12);
        // 2 Re(A e^{iwt}) = 5 cos(wt - atan2(4, 3))
        assert!((-a.arg() - 4f64.atan2(3.0)).abs() < 1e-12);
        for r in [0, 5, 77] {
            let t = r as f64 * dt;
            assert!((eval_trig(&fit.a, &om, t)[0] - y[(r, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn full_lattice_is_inverse_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [16usize, 17] {
            let y = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let bins: Vec<usize> = (0..=n / 2).collect();
            let fit = fit_periodic_omegas(&y, &grid_omegas(n, 2.0, &bins), 2.0).unwrap();
            assert!(fit.residual.amax() < 1e-10, "n = {n}");
        }
    }

    #[test]
    fn aliased_bins_are_named() {
        let (n, dt) = (32, 1.0);
        let om = grid_omegas(n, dt, &[0, 3, 35]);
        let y = DMatrix::from_element(n, 1, 1.0);
        let err = fit_periodic_omegas(&y, &om, dt).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("rank deficient"));
    }

    #[test]
    fn nyquist_bin_gets_cosine_only() {
        let n = 8;
        let om = grid_omegas(n, 1.0, &[0, 4]);
        let (d, cols) = design_matrix(&om, &(0..n).map(|v| v as f64).collect::<Vec<_>>());
        assert_eq!(d.ncols(), 2);
        assert_eq!(cols, vec![(0, true), (1, true)]);
    }

    #[test]
    fn lstsq_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(40, 2, |_, _| rng.random_range(-1.0..1.0));
        let x = pivoted_lstsq(&a, &b, RANK_TOL).unwrap();
        let r = &b - &a * &x;
        assert!((a.transpose() * r).amax() < 1e-12);
        let mut dep = a.clone();
        let c0 = dep.column(0) * 2.0 - dep.column(3);
        dep.set_column(5, &c0);
        assert!(pivoted_lstsq(&dep, &b, RANK_TOL).is_err());
    }

    #[test]
    fn periodicity_of_bin_lattice() {
        let (n, dt) = (64, 3.0);
        let om = grid_omegas(n, dt, &[0, 1, 9]);
        let a = DMatrix::from_fn(3, 1, |j, _| Complex64::new(0.3 * j as f64 + 0.1, 0.2));
        let x0 = eval_trig(&a, &om, 0.0)[0];
        let x1 = eval_trig(&a, &om, n as f64 * dt)[0];
        assert!((x0 - x1).abs() < 1e-12);
        let c = eval_trig(&DMatrix::from_element(1, 1, Complex64::new(2.0, 0.0)), &[0.0], 123.0);
        assert_eq!(c, vec![2.0]);
    }

    #[test]
    fn moving_average_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(moving_average(&x, 1), x.to_vec());
        assert_eq!(moving_average(&[4.0; 5], 3), vec![4.0; 5]);
        let step = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(moving_average(&step, 4), vec![0.0, 0.0, 0.0, 0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn relative_error_examples() {
        let t = TimeSeries::from_values(DMatrix::from_column_slice(3, 1, &[10.0, -5.0, 2.0]), 1.0).unwrap();
        let e = TimeSeries::from_values(DMatrix::from_column_slice(3, 1, &[9.0, -4.0, 3.0]), 1.0).unwrap();
        assert!(relative_error(&t, &t).unwrap().amax() == 0.0);
        let r = relative_error(&t, &e).unwrap();
        assert!(r.iter().all(|v| (v - 0.1).abs() < 1e-15));
        let z = TimeSeries::from_values(DMatrix::zeros(3, 1), 1.0).unwrap();
        assert!(relative_error(&z, &e).is_err());
    }

    #[test]
    fn state_at_orders_oldest_first() {
        let s = TimeSeries::from_values(DMatrix::from_fn(6, 2, |r, c| (10 * r + c) as f64), 1.0).unwrap();
        assert_eq!(state_at(&s, 3, 2).unwrap(), vec![10.0, 11.0, 20.0, 21.0, 30.0, 31.0]);
        assert!(state_at(&s, 1, 2).is_err());
        assert!(state_at(&s, 6, 2).is_err());
    }

    proptest! {
        #[test]
        fn residual_orthogonal_to_design(seed in 0u64..1000, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 50;
            let mut bins: Vec<usize> = (1..25).collect();
            for i in 0..bins.len() {
                let j = rng.random_range(i..bins.len());
                bins.swap(i, j);
            }
            let mut sel = vec![0];
            sel.extend_from_slice(&bins[..m]);
            sel.sort_unstable();
            let om = grid_omegas(n, 1.0, &sel);
            let y = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-5.0..5.0));
            let fit = fit_periodic_omegas(&y, &om, 1.0).unwrap();
            let times: Vec<f64> = (0..n).map(|v| v as f64).collect();
            let (d, _) = design_matrix(&om, &times);
            prop_assert!((d.transpose() * &fit.residual).amax() < 1e-8);
            for r in 0..n {
                let ev = eval_trig(&fit.a, &om, r as f64);
                for (c, v) in ev.iter().enumerate() {
                    prop_assert!((v - fit.fitted[(r, c)]).abs() < 1e-10);
                }
            }
        }
    }
}
