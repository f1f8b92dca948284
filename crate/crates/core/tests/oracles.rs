use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use quasiperiodic::decompose::{self, moving_average, relative_error, Bandwidth, DecomposeParams, Mode, QPModel};
use quasiperiodic::freqfilter::{self, rkhs_norm_table};
use quasiperiodic::kernel::{self, gaussian_kernel};
use quasiperiodic::series::{window, DelayEmbedding, TimeSeries};
use quasiperiodic::spectral;
use quasiperiodic::synth::{simulate, standard_testbed};

fn params(l: usize) -> DecomposeParams {
    DecomposeParams {
        bandwidth: Bandwidth::MedianScale(0.1),
        num_eigen: l,
        ..Default::default()
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Direct O(N^2) periodogram of one channel, bins 0..=N/2.
fn periodogram(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|j| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let a = TAU * ((j * t) % n) as f64 / n as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            (re * re + im * im) / (n * n) as f64
        })
        .collect()
}

#[test]
fn pure_torus_dft_has_lines_at_driver_bins() {
    let n = 4096;
    let sim = simulate(&standard_testbed("pure_torus_2").unwrap(), n, 1.0, 0).unwrap();
    let x: Vec<f64> = sim.series.values().column(0).iter().copied().collect();
    let p = periodogram(&x);
    let mut sorted = p[1..].to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    for j in [233, 377] {
        assert!(p[j] > p[j - 1] && p[j] > p[j + 1], "bin {j} is not a local maximum");
        assert!(p[j] > 1e6 * median, "bin {j}: {} vs median {median}", p[j]);
    }
}

#[test]
fn contracting_noise_has_no_line_spectrum_and_no_selection() {
    let system = standard_testbed("torus_plus_damped").unwrap().without_periodic();
    let n = 1024;
    let sim = simulate(&system, n + 21, 1.0, 3).unwrap();
    for c in 0..sim.series.channels() {
        let x: Vec<f64> = sim.series.values().column(c).iter().take(n).copied().collect();
        let mean = x.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let p = periodogram(&centered);
        let avg = p[1..].iter().sum::<f64>() / (p.len() - 1) as f64;
        let peak = p[1..].iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(peak < 15.0 * avg, "channel {c}: peak/mean {}", peak / avg);
    }
    let model = decompose::decompose(&sim.series, &params(100)).unwrap();
    assert_eq!(model.selection().nonzero_indices().count(), 0);
}

#[test]
fn white_noise_selects_only_the_mean() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DMatrix::from_fn(1024 + 21, 3, |_, _| StandardNormal.sample(&mut rng));
        let ts = TimeSeries::from_values(v, 1.0).unwrap();
        let model = decompose::decompose(&ts, &params(100)).unwrap();
        let bins: Vec<usize> = model.selection().nonzero_indices().collect();
        assert!(bins.is_empty(), "seed {seed}: {bins:?}");
    }
}

/// Smallest `|a| + |b|` with `a w0 + b w1` within half a bin of bin `j`.
fn lattice_order(j: usize, n: usize, w: &[f64]) -> Option<i32> {
    let o = TAU * j as f64 / n as f64;
    let mut best = None;
    for a in -10i32..=10 {
        for b in -10i32..=10 {
            let c = (a as f64 * w[0] + b as f64 * w[1]).rem_euclid(TAU);
            if (c.min(TAU - c) - o).abs() <= 0.5 * TAU / n as f64 {
                let k = a.abs() + b.abs();
                best = Some(best.map_or(k, |m: i32| m.min(k)));
            }
        }
    }
    best
}

#[test]
fn growth_ratio_separates_lattice_bins() {
    let system = standard_testbed("pure_torus_2").unwrap();
    let n = 4096;
    let sim = simulate(&system, n + 21, 1.0, 0).unwrap();
    let tb = decompose::training_basis(&sim.series, &params(300), None).unwrap();
    let table = rkhs_norm_table(&tb.basis, 1.0).unwrap();
    let diag = freqfilter::choose_thresholds_diagnostics(&table, freqfilter::DEFAULT_L0).unwrap();
    let w = &system.driver.omega;
    let mut low = f64::MIN;
    let mut off = f64::MAX;
    for &(j, r) in &diag.sorted_ratio {
        match lattice_order(j, n, w) {
            Some(k) if (1..=2).contains(&k) => low = low.max(r),
            None => off = off.min(r),
            _ => {}
        }
    }
    assert!(low + 1.0 < off, "low-order lattice max {low}, off-lattice min {off}");
}

fn random_embedding(n: usize, dim: usize, seed: u64) -> Arc<DelayEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-1.0, 1.0).unwrap();
    let pts: Vec<f64> = (0..n * dim).map(|_| u.sample(&mut rng)).collect();
    Arc::new(DelayEmbedding::from_points(pts, dim, 0, 1.0).unwrap())
}

#[test]
fn truncation_error_equals_next_singular_value() {
    let emb = random_embedding(200, 3, 1);
    let ks = Arc::new(gaussian_kernel(emb, 0.5).unwrap());
    let kt = ks.normalized_matrix();
    let dense = kt.singular_values();
    let mut sv: Vec<f64> = dense.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let basis = spectral::decompose(ks, 50).unwrap();
    let u = basis.phi() / 200f64.sqrt();
    let approx = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(basis.sigma())) * basis.gamma().transpose();
    let err = (kt - approx).singular_values().max();
    assert!((err - sv[50]).abs() <= 1e-8 * sv[0], "{err} vs {}", sv[50]);
    let ident = DMatrix::<f64>::identity(50, 50);
    assert!(max_abs(&(u.transpose() * &u - &ident)) < 1e-8);
    assert!(max_abs(&(basis.gamma().transpose() * basis.gamma() - &ident)) < 1e-8);
}

#[test]
fn nystrom_at_midpoint_matches_direct_formula() {
    let emb = random_embedding(150, 2, 2);
    let eps = 0.3;
    let ks = Arc::new(gaussian_kernel(emb.clone(), eps).unwrap());
    let basis = spectral::decompose(ks, 20).unwrap();
    let n = emb.len();
    let k = |a: &[f64], b: &[f64]| (-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / eps).exp();
    let d: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k(emb.point(i), emb.point(j))).sum::<f64>() / n as f64).collect();
    let q: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| k(emb.point(i), emb.point(j)) / d[j]).sum::<f64>() / n as f64)
        .collect();
    let y: Vec<f64> = emb.point(0).iter().zip(emb.point(1)).map(|(a, b)| 0.5 * (a + b)).collect();
    let ky: Vec<f64> = (0..n).map(|j| k(&y, emb.point(j))).collect();
    let dy = ky.iter().sum::<f64>() / n as f64;
    for l in 0..20 {
        let oracle = (0..n).map(|j| ky[j] * basis.gamma()[(j, l)] / q[j].sqrt()).sum::<f64>() / (n as f64 * dy)
            * (n as f64).sqrt()
            / basis.sigma()[l];
        let got = basis.nystrom(&y, l).unwrap();
        assert!((got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0), "l = {l}: {got} vs {oracle}");
        assert!(got.abs() <= basis.nystrom_sup_bound(l) * (1.0 + 1e-12));
    }
}

fn torus_model(n: usize, l: usize) -> (TimeSeries, QPModel) {
    let train = simulate(&standard_testbed("pure_torus_2").unwrap(), n + 21, 1.0, 0).unwrap().series;
    let model = decompose::decompose(&train, &params(l)).unwrap();
    (train, model)
}

#[test]
fn model_consistency_oracles() {
    let (train, model) = torus_model(1024, 120);
    let basis = model.basis();
    let synth_e = basis.synthesize(model.e()).unwrap();
    let emb = basis.embedding();
    for i in (0..emb.len()).step_by(37) {
        let g = model.eval_chaotic(emb.point(i)).unwrap();
        for (c, v) in g.iter().enumerate() {
            assert!((v - synth_e[(i, c)]).abs() <= 1e-8 * max_abs(&synth_e).max(1.0), "row {i}");
        }
    }
    let far = vec![1e3; model.state_dim()];
    let g = model.eval_chaotic(&far).unwrap();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm.is_finite() && norm <= model.chaotic_bound());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let back = QPModel::load(&path, &train, None).unwrap();
    assert_eq!(back.to_json(), model.to_json());
    let a = model.predict(&train, 600, 50, None).unwrap();
    let b = back.predict(&train, 600, 50, None).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn training_free_run_on_pure_torus_is_accurate() {
    let (train, model) = torus_model(2048, 300);
    let rec = model.reconstruct_training(&train, Mode::Freerun, None).unwrap();
    let truth = window(&train, train.len() - rec.len(), train.len()).unwrap();
    let err = relative_error(&truth, &rec).unwrap();
    assert!(max_abs(&err) <= 1e-2, "max relative error {}", max_abs(&err));
}

#[test]
fn smoothing_reduces_error_variance() {
    let system = standard_testbed("torus_plus_logistic").unwrap();
    let sim = simulate(&system, 1024 + 21 + 1000, 1.0, 5).unwrap();
    let train = window(&sim.series, 0, 1045).unwrap();
    let model = decompose::decompose(&train, &params(150)).unwrap();
    let pred = model.predict(&sim.series, 1044, 1000, None).unwrap();
    let truth = window(&sim.series, 1045, 2045).unwrap();
    let err = relative_error(&truth, &pred).unwrap();
    let var = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
    };
    for c in 0..err.ncols() {
        let e: Vec<f64> = err.column(c).iter().copied().collect();
        let v: Vec<f64> = [1, 10, 100].iter().map(|&m| var(&moving_average(&e, m))).collect();
        assert!(v[0] > v[1] && v[1] > v[2], "channel {c}: {v:?}");
    }
}

#[test]
fn kernel_matrices_match_double_loop() {
    let emb = random_embedding(100, 5, 9);
    let sq = kernel::pairwise_sqdist(&emb);
    let eps = 1.3;
    let ks = gaussian_kernel(emb.clone(), eps).unwrap();
    for i in 0..100 {
        for j in 0..100 {
            let d: f64 = emb.point(i).iter().zip(emb.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!((sq[(i, j)] - d).abs() <= 1e-10 * d.max(1.0));
            assert!((ks.matrix()[(i, j)] - (-d / eps).exp()).abs() <= 1e-12);
        }
    }
}
