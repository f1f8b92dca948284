//! RKHS-norm spectral filtering of the eigenbasis.
//!
//! Each eigenfunction is Fourier transformed along time (forward DFT scaled
//! by `1/N`, bins `0..=N/2`). With `H = Phi_hat Lambda^{-1/2}`, the table
//! `W[j, l] = sum_{i <= l} |H[j, i]|` measures how much RKHS norm is needed
//! to represent frequency bin `j` with the first `l` eigenfunctions. Bins
//! that are cheap early (`W[j, L0] >= eps1`) and stay cheap
//! (`ln W[j, L] - ln W[j, L0] <= eps2`) are kept.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::spectral::{SpectralBasis, LAMBDA_FLOOR};

pub const DEFAULT_EPS1: f64 = 0.1;
pub const DEFAULT_EPS2: f64 = 2.5;
pub const DEFAULT_L0: usize = 5;

/// Cumulative RKHS norms per frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct RkhsNormTable {
    w: DMatrix<f64>,
    freqs: Vec<f64>,
    dt: f64,
    n: usize,
}

/// Builds the `W` table from the first `L` eigenfunctions sampled in time order.
pub fn rkhs_norm_table(basis: &SpectralBasis, dt: f64) -> Result<RkhsNormTable> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if let Some(l) = basis.lambda().iter().position(|v| *v <= LAMBDA_FLOOR) {
        return Err(Error::Numerical(format!("eigenvalue {} below floor {LAMBDA_FLOOR:e}", l + 1)));
    }
    let n = basis.n_points();
    let l = basis.len();
    let nf = n / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let scale = 1.0 / n as f64;

    let h: Vec<Vec<f64>> = (0..l)
        .into_par_iter()
        .map(|c| {
            let mut buf: Vec<Complex<f64>> = basis.phi().column(c).iter().map(|v| Complex::new(*v, 0.0)).collect();
            fft.process(&mut buf);
            let s = scale / basis.lambda()[c].sqrt();
            buf[..nf].iter().map(|z| z.norm() * s).collect()
        })
        .collect();

    let mut w = DMatrix::zeros(nf, l);
    for j in 0..nf {
        let mut acc = 0.0;
        for (c, col) in h.iter().enumerate() {
            acc += col[j];
            w[(j, c)] = acc;
        }
    }
    let freqs = (0..nf).map(|j| TAU * j as f64 / (n as f64 * dt)).collect();
    Ok(RkhsNormTable { w, freqs, dt, n })
}

impl RkhsNormTable {
    /// Assembles a table from a precomputed `W` (rows are bins `0..N/2`).
    pub fn from_parts(w: DMatrix<f64>, n: usize, dt: f64) -> Result<Self> {
        if w.nrows() != n / 2 + 1 {
            return Err(Error::Dimension {
                expected: n / 2 + 1,
                got: w.nrows(),
            });
        }
        let freqs = (0..w.nrows()).map(|j| TAU * j as f64 / (n as f64 * dt)).collect();
        Ok(RkhsNormTable { w, freqs, dt, n })
    }

    /// `N_f x L` cumulative norms; column `l - 1` holds `W[., l]`.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `W[j, l]` with 1-based `l`.
    pub fn at(&self, j: usize, l: usize) -> f64 {
        self.w[(j, l - 1)]
    }

    /// Angular frequencies `2 pi j / (N dt)`, rad/s.
    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Length of the transformed series.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_bins(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_eigen(&self) -> usize {
        self.w.ncols()
    }

    /// `ln W[j, L] - ln W[j, L0]`; infinite when `W[j, L0]` is zero.
    pub fn growth(&self, j: usize, l0: usize) -> f64 {
        let lo = self.at(j, l0);
        let hi = self.at(j, self.num_eigen());
        if lo > 0.0 {
            hi.ln() - lo.ln()
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub eps1: f64,
    pub eps2: f64,
    pub l0: usize,
    pub l: usize,
}

/// Bins that passed both threshold tests, sorted by frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySelection {
    pub indices: Vec<usize>,
    pub omegas: Vec<f64>,
    /// `2 pi / omega` in seconds, `None` for the mean.
    pub periods: Vec<Option<f64>>,
    /// `W[j, L0]`.
    pub amplitudes: Vec<f64>,
    pub growth: Vec<f64>,
    pub params: SelectionParams,
    /// Length and step of the series the bins refer to.
    pub n: usize,
    pub dt: f64,
}

impl FrequencySelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Selected bins other than the mean.
    pub fn nonzero_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied().filter(|j| *j != 0)
    }

    /// Builds a selection from explicit bin indices of a table, bypassing the
    /// thresholds. Bin 0 is added if missing.
    pub fn from_bins(table: &RkhsNormTable, bins: &[usize], l0: usize) -> Result<Self> {
        check_l0(table, l0)?;
        let mut idx: Vec<usize> = bins.to_vec();
        idx.push(0);
        idx.sort_unstable();
        idx.dedup();
        if let Some(bad) = idx.iter().find(|j| **j >= table.num_bins()) {
            return Err(Error::Config(format!("bin {bad} beyond Nyquist bin {}", table.num_bins() - 1)));
        }
        Ok(Self::build(table, idx, SelectionParams {
            eps1: 0.0,
            eps2: f64::INFINITY,
            l0,
            l: table.num_eigen(),
        }))
    }

    fn build(table: &RkhsNormTable, indices: Vec<usize>, params: SelectionParams) -> Self {
        let omegas: Vec<f64> = indices.iter().map(|j| table.freqs()[*j]).collect();
        FrequencySelection {
            periods: omegas.iter().map(|w| (*w > 0.0).then(|| TAU / w)).collect(),
            amplitudes: indices.iter().map(|j| table.at(*j, params.l0)).collect(),
            growth: indices.iter().map(|j| table.growth(*j, params.l0)).collect(),
            omegas,
            indices,
            params,
            n: table.n(),
            dt: table.dt(),
        }
    }

    /// Writes `bin,omega_rad_per_s,period_s,period_human,amplitude,growth`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin,omega_rad_per_s,period_s,period_human,amplitude,growth\n");
        for i in 0..self.len() {
            let period = self.periods[i].map_or_else(|| "inf".to_string(), fmt_f64);
            writeln!(
                out,
                "{},{},{},{},{},{}",
                self.indices[i],
                fmt_f64(self.omegas[i]),
                period,
                crate::report::format_period(self.periods[i]),
                fmt_f64(self.amplitudes[i]),
                fmt_f64(self.growth[i])
            )
            .unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_l0(table: &RkhsNormTable, l0: usize) -> Result<()> {
    let l = table.num_eigen();
    if l0 < 2 || l0 > l {
        return Err(Error::Config(format!("L0 = {l0} must lie in 2..={l}")));
    }
    Ok(())
}

/// Keeps bin `j` iff `W[j, L0] >= eps1` and `ln W[j, L] - ln W[j, L0] <= eps2`.
/// Bin 0 is always kept. An empty selection apart from bin 0 is a valid
/// outcome (no periodic component).
pub fn select(table: &RkhsNormTable, eps1: f64, eps2: f64, l0: usize) -> Result<FrequencySelection> {
    if !(eps1 > 0.0 && eps2 > 0.0) {
        return Err(Error::Config(format!("thresholds must be positive, got eps1 = {eps1}, eps2 = {eps2}")));
    }
    check_l0(table, l0)?;
    let indices: Vec<usize> = (0..table.num_bins())
        .filter(|&j| j == 0 || (table.at(j, l0) >= eps1 && table.growth(j, l0) <= eps2))
        .collect();
    Ok(FrequencySelection::build(table, indices, SelectionParams {
        eps1,
        eps2,
        l0,
        l: table.num_eigen(),
    }))
}

/// Collapses each run of consecutive nonzero bins to its largest-amplitude
/// member. Bin 0 is kept as is.
pub fn merge_adjacent(sel: &FrequencySelection) -> FrequencySelection {
    let mut keep: Vec<usize> = Vec::new();
    let mut run_best: Option<usize> = None;
    for i in 0..sel.len() {
        let j = sel.indices[i];
        if j == 0 {
            keep.push(i);
            continue;
        }
        match run_best {
            Some(b) if sel.indices[i - 1] + 1 == j && sel.indices[i - 1] != 0 => {
                if sel.amplitudes[i] > sel.amplitudes[b] {
                    run_best = Some(i);
                }
            }
            _ => {
                if let Some(b) = run_best {
                    keep.push(b);
                }
                run_best = Some(i);
            }
        }
    }
    if let Some(b) = run_best {
        keep.push(b);
    }
    let pick = |v: &[f64]| keep.iter().map(|i| v[*i]).collect::<Vec<_>>();
    FrequencySelection {
        indices: keep.iter().map(|i| sel.indices[*i]).collect(),
        omegas: pick(&sel.omegas),
        periods: keep.iter().map(|i| sel.periods[*i]).collect(),
        amplitudes: pick(&sel.amplitudes),
        growth: pick(&sel.growth),
        params: sel.params,
        n: sel.n,
        dt: sel.dt,
    }
}

/// Curves for choosing `L0` and `eps2` by eye.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdDiagnostics {
    /// Per `l = 1..L`: median and maximum over bins of `W[., l]`, and the
    /// mean of `ln W[., l]` over bins with positive `W`.
    pub median_w: Vec<f64>,
    pub max_w: Vec<f64>,
    pub mean_log_w: Vec<f64>,
    /// `(bin, ln W[j, L] - ln W[j, L0])`, sorted by ratio ascending
    /// (bins with `W[j, L0] = 0` are omitted).
    pub sorted_ratio: Vec<(usize, f64)>,
    pub l0: usize,
}

pub fn choose_thresholds_diagnostics(table: &RkhsNormTable, l0: usize) -> Result<ThresholdDiagnostics> {
    check_l0(table, l0)?;
    let nb = table.num_bins();
    let mut median_w = Vec::with_capacity(table.num_eigen());
    let mut max_w = Vec::with_capacity(table.num_eigen());
    let mut mean_log_w = Vec::with_capacity(table.num_eigen());
    for c in 0..table.num_eigen() {
        let mut col: Vec<f64> = table.w().column(c).iter().copied().collect();
        let logs: Vec<f64> = col.iter().filter(|v| **v > 0.0).map(|v| v.ln()).collect();
        mean_log_w.push(if logs.is_empty() { f64::NEG_INFINITY } else { logs.iter().sum::<f64>() / logs.len() as f64 });
        col.sort_unstable_by(f64::total_cmp);
        median_w.push(col[nb / 2]);
        max_w.push(col[nb - 1]);
    }
    let mut sorted_ratio: Vec<(usize, f64)> = (0..nb)
        .map(|j| (j, table.growth(j, l0)))
        .filter(|(_, g)| g.is_finite())
        .collect();
    sorted_ratio.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ThresholdDiagnostics {
        median_w,
        max_w,
        mean_log_w,
        sorted_ratio,
        l0,
    })
}

impl ThresholdDiagnostics {
    /// Writes `growth_curve.csv` and `ratio_curve.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut g = String::from("l,median_w,max_w,mean_log_w\n");
        for l in 0..self.median_w.len() {
            writeln!(
                g,
                "{},{},{},{}",
                l + 1,
                fmt_f64(self.median_w[l]),
                fmt_f64(self.max_w[l]),
                fmt_f64(self.mean_log_w[l])
            )
            .unwrap();
        }
        let p = dir.join("growth_curve.csv");
        std::fs::write(&p, g).map_err(|e| Error::io(&p, e))?;
        let mut r = String::from("rank,bin,log_ratio\n");
        for (i, (j, v)) in self.sorted_ratio.iter().enumerate() {
            writeln!(r, "{i},{j},{}", fmt_f64(*v)).unwrap();
        }
        let p = dir.join("ratio_curve.csv");
        std::fs::write(&p, r).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gaussian_kernel;
    use crate::series::DelayEmbedding;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn table(w: Vec<Vec<f64>>) -> RkhsNormTable {
        let nb = w.len();
        let l = w[0].len();
        let m = DMatrix::from_fn(nb, l, |j, c| w[j][c]);
        RkhsNormTable::from_parts(m, 2 * (nb - 1), 1.0).unwrap()
    }

    fn basis_from_columns(cols: Vec<Vec<f64>>, lambda: Vec<f64>) -> SpectralBasis {
        // builds a basis with prescribed phi and lambda on a throwaway kernel
        let n = cols[0].len();
        let e = Arc::new(DelayEmbedding::from_points((0..n).map(|i| i as f64).collect(), 1, 0, 1.0).unwrap());
        let k = Arc::new(gaussian_kernel(e, 1.0).unwrap());
        let l = cols.len();
        let sn = (n as f64).sqrt();
        let u = DMatrix::from_fn(n, l, |r, c| cols[c][r] / sn);
        let sigma = lambda.iter().map(|v| v.sqrt()).collect();
        SpectralBasis::from_svd(k, sigma, u.clone(), u).unwrap()
    }

    #[test]
    fn constant_only_basis_has_dc_mass() {
        let b = basis_from_columns(vec![vec![1.0; 16]], vec![1.0]);
        let t = rkhs_norm_table(&b, 1.0).unwrap();
        assert_eq!(t.num_bins(), 9);
        assert!((t.at(0, 1) - 1.0).abs() < 1e-14);
        for j in 1..9 {
            assert!(t.at(j, 1) < 1e-14);
        }
    }

    #[test]
    fn sinusoid_column_closed_form() {
        let n = 64;
        let jstar = 5;
        let amp = 2f64.sqrt();
        let phi2: Vec<f64> = (0..n).map(|i| amp * (TAU * (jstar * i) as f64 / n as f64).cos()).collect();
        let lam2 = 0.25;
        let b = basis_from_columns(vec![vec![1.0; n], phi2], vec![1.0, lam2]);
        let t = rkhs_norm_table(&b, 0.5).unwrap();
        let want = (amp / 2.0) / lam2.sqrt();
        assert!((t.at(jstar, 2) - t.at(jstar, 1) - want).abs() < 1e-12);
        assert!((t.freqs()[jstar] - TAU * 5.0 / (64.0 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn rows_are_cumulative() {
        let b = basis_from_columns(
            vec![vec![1.0; 8], (0..8).map(|i| (i as f64).sin()).collect(), (0..8).map(|i| (i as f64 * 0.3).cos()).collect()],
            vec![1.0, 0.5, 0.25],
        );
        let t = rkhs_norm_table(&b, 1.0).unwrap();
        for j in 0..t.num_bins() {
            for l in 1..3 {
                assert!(t.at(j, l + 1) >= t.at(j, l));
            }
            assert!(t.at(j, 1) >= 0.0);
        }
        let f = t.freqs();
        assert_eq!(f[0], 0.0);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn select_applies_both_tests() {
        // bins: 0 dc, 1 strong+flat, 2 weak, 3 strong but growing
        let t = table(vec![
            vec![1.0, 1.0, 1.0, 1.0],
            vec![0.5, 0.6, 0.7, 0.8],
            vec![0.01, 0.02, 0.05, 0.1],
            vec![0.2, 0.3, 5.0, 50.0],
        ]);
        let s = select(&t, 0.1, 1.0, 2).unwrap();
        assert_eq!(s.indices, vec![0, 1]);
        assert_eq!(s.periods[0], None);
        assert!((s.periods[1].unwrap() - 6.0).abs() < 1e-12);
        assert!((s.amplitudes[1] - 0.6).abs() < 1e-15);
        let s = select(&t, 0.1, 10.0, 2).unwrap();
        assert_eq!(s.indices, vec![0, 1, 3]);
        assert!(select(&t, 0.1, 1.0, 1).is_err());
        assert!(select(&t, 0.1, 1.0, 5).is_err());
        assert!(select(&t, 0.0, 1.0, 2).is_err());
    }

    #[test]
    fn dc_always_selected() {
        let t = table(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(select(&t, 0.1, 1.0, 2).unwrap().indices, vec![0]);
    }

    #[test]
    fn merge_collapses_runs() {
        let t = table(vec![
            vec![1.0, 1.0],
            vec![0.5, 0.5],
            vec![0.9, 0.9],
            vec![0.3, 0.3],
            vec![0.1, 0.1],
            vec![0.4, 0.4],
            vec![0.2, 0.2],
        ]);
        let s = select(&t, 0.2, 1.0, 2).unwrap();
        assert_eq!(s.indices, vec![0, 1, 2, 3, 5, 6]);
        let m = merge_adjacent(&s);
        assert_eq!(m.indices, vec![0, 2, 5]);
        assert_eq!(m.amplitudes, vec![1.0, 0.9, 0.4]);
    }

    #[test]
    fn diagnostics_are_sorted() {
        let t = table(vec![
            vec![1.0, 1.0, 1.0],
            vec![0.1, 0.2, 0.9],
            vec![0.3, 0.4, 0.5],
            vec![0.0, 0.0, 0.0],
        ]);
        let d = choose_thresholds_diagnostics(&t, 2).unwrap();
        assert_eq!(d.sorted_ratio.len(), 3);
        assert!(d.sorted_ratio.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(d.sorted_ratio[0].0, 0);
        assert!(d.max_w.windows(2).all(|w| w[1] >= w[0]));
        assert!(d.median_w.windows(2).all(|w| w[1] >= w[0]));
        let dir = tempfile::tempdir().unwrap();
        d.write_csv(dir.path()).unwrap();
        let txt = std::fs::read_to_string(dir.path().join("ratio_curve.csv")).unwrap();
        assert_eq!(txt.lines().count(), 4);
    }

    fn arb_table() -> impl Strategy<Value = RkhsNormTable> {
        (2usize..12, 3usize..8).prop_flat_map(|(nb, l)| {
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, l), nb).prop_map(|rows| {
                let cum: Vec<Vec<f64>> = rows
                    .into_iter()
                    .map(|r| {
                        r.iter()
                            .scan(0.0, |a, v| {
                                *a += v;
                                Some(*a)
                            })
                            .collect()
                    })
                    .collect();
                table(cum)
            })
        })
    }

    proptest! {
        #[test]
        fn selection_monotone_in_thresholds(t in arb_table(), e1 in 0.01f64..1.0, d1 in 0.0f64..1.0, e2 in 0.01f64..3.0, d2 in 0.0f64..2.0) {
            let l0 = 2;
            let base = select(&t, e1, e2, l0).unwrap();
            let stricter1 = select(&t, e1 + d1, e2, l0).unwrap();
            let stricter2 = select(&t, e1, (e2 - d2).max(1e-3), l0).unwrap();
            for s in [&stricter1, &stricter2] {
                prop_assert!(s.indices.iter().all(|j| base.indices.contains(j)));
            }
        }
    }
}
