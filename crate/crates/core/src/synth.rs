//! Ground-truth skew-product systems driven by a torus rotation.
//!
//! The driver is `theta_{n+1} = theta_n + dt * omega (mod 2 pi)` and the driven
//! state follows `x_{n+1} = g_per(theta_n) + g_chaos(theta_n, x_n)`. The
//! observed series is `y_n = Y(theta_n, x_n)`.
//!
//! Three canned testbeds are provided by [`standard_testbed`]:
//!
//! | name                  | d | m | periodic part           | chaotic part                              |
//! |-----------------------|---|---|-------------------------|-------------------------------------------|
//! | `pure_torus_2`        | 2 | 1 | `cos t1 cos t2`         | none                                      |
//! | `torus_plus_logistic` | 1 | 2 | `(0.5 (1 + cos t), 0)`  | `(0.3 (2v - 1), 3.9 v (1 - v))`           |
//! | `torus_plus_damped`   | 1 | 1 | `cos t`                 | `0.5 x + 0.2 xi`, xi standard normal      |
//!
//! All three share `omega_1 = 2 pi * 377 / 4096` rad/s; `pure_torus_2` adds
//! `omega_2 = omega_1 (sqrt 5 - 1) / 2`. With `dt = 1` s and 4096 embedded
//! samples the first driver sits on a Fourier bin (377) while the second is
//! irrational in bin units (232.9988...). Observations are a fixed seeded
//! random linear map of `(cos theta, sin theta, x)` into three channels.

use std::f64::consts::TAU;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::series::TimeSeries;

/// Driver frequency shared by the standard testbeds, rad/s.
pub const TESTBED_OMEGA_1: f64 = TAU * 377.0 / 4096.0;

/// Golden-mean ratio used for the second torus frequency.
pub const GOLDEN_RATIO_CONJUGATE: f64 = 0.618_033_988_749_894_9;

const OBSERVATION_SEED: u64 = 1234;
const TESTBED_CHANNELS: usize = 3;

pub const TESTBED_NAMES: [&str; 3] = ["pure_torus_2", "torus_plus_logistic", "torus_plus_damped"];

/// Rotation on the d-torus.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusDriver {
    pub omega: Vec<f64>,
    pub theta0: Vec<f64>,
}

impl TorusDriver {
    pub fn new(omega: Vec<f64>, theta0: Vec<f64>) -> Result<Self> {
        if omega.is_empty() || omega.len() != theta0.len() {
            return Err(Error::Config("driver needs matching, non-empty omega and theta0".into()));
        }
        let theta0 = theta0.into_iter().map(|t| t.rem_euclid(TAU)).collect();
        Ok(TorusDriver { omega, theta0 })
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    /// Phase after `n` steps, evaluated in closed form.
    pub fn phase_at(&self, n: usize, dt: f64) -> Vec<f64> {
        self.theta0
            .iter()
            .zip(&self.omega)
            .map(|(t0, w)| (t0 + n as f64 * dt * w).rem_euclid(TAU))
            .collect()
    }

    /// One application of the rotation.
    pub fn step(&self, theta: &mut [f64], dt: f64) {
        for (t, w) in theta.iter_mut().zip(&self.omega) {
            *t = (*t + dt * w).rem_euclid(TAU);
        }
    }
}

pub type PeriodicMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ChaoticMap = Arc<dyn Fn(&[f64], &[f64], &mut ChaCha8Rng, &mut [f64]) + Send + Sync>;
pub type ObservationFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// How the latent `(theta, x)` is observed.
#[derive(Clone)]
pub enum Observation {
    /// `y = M (cos theta, sin theta, x)` with `M` of shape `k x (2d + m)`.
    LiftedLinear(DMatrix<f64>),
    Custom { channels: usize, map: ObservationFn },
}

impl Observation {
    pub fn channels(&self) -> usize {
        match self {
            Observation::LiftedLinear(m) => m.nrows(),
            Observation::Custom { channels, .. } => *channels,
        }
    }

    /// Seeded Gaussian map `R^{2d+m} -> R^k`, entries scaled by `1/sqrt(2d+m)`.
    pub fn random_lifted(d: usize, m: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = 2 * d + m;
        let scale = (cols as f64).sqrt().recip();
        let mut mat = DMatrix::zeros(k, cols);
        for c in 0..cols {
            for r in 0..k {
                let z: f64 = rng.sample(StandardNormal);
                mat[(r, c)] = z * scale;
            }
        }
        Observation::LiftedLinear(mat)
    }

    fn apply(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        match self {
            Observation::LiftedLinear(mat) => {
                let d = theta.len();
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (i, t) in theta.iter().enumerate() {
                        acc += mat[(r, i)] * t.cos() + mat[(r, d + i)] * t.sin();
                    }
                    for (j, xj) in x.iter().enumerate() {
                        acc += mat[(r, 2 * d + j)] * xj;
                    }
                    *o = acc;
                }
            }
            Observation::Custom { map, .. } => map(theta, x, out),
        }
    }
}

/// One-way coupled system: a torus rotation forcing a driven state.
#[derive(Clone)]
pub struct SkewProductSystem {
    pub name: String,
    pub driver: TorusDriver,
    pub x0: Vec<f64>,
    pub g_per: PeriodicMap,
    pub g_chaos: ChaoticMap,
    pub observation: Observation,
    /// Draw the initial driven state from the seed instead of using `x0`.
    pub random_x0: Option<fn(&mut ChaCha8Rng) -> Vec<f64>>,
}

impl fmt::Debug for SkewProductSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SkewProductSystem")
            .field("name", &self.name)
            .field("driver", &self.driver)
            .field("x0", &self.x0)
            .field("channels", &self.observation.channels())
            .finish_non_exhaustive()
    }
}

impl SkewProductSystem {
    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    /// The same system with the periodic forcing removed: `g_per` becomes
    /// zero and a lifted-linear observation stops seeing the phases.
    pub fn without_periodic(mut self) -> Self {
        self.g_per = Arc::new(|_, out: &mut [f64]| out.fill(0.0));
        if let Observation::LiftedLinear(ref mut mat) = self.observation {
            let d = self.driver.dim();
            mat.columns_mut(0, 2 * d).fill(0.0);
        }
        self.name = format!("{}_aperiodic", self.name);
        self
    }
}

/// Output of [`simulate`]: the observed series and the latent trajectory.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub series: TimeSeries,
    /// `n_steps x d` phases.
    pub phases: DMatrix<f64>,
    /// `n_steps x m` driven states.
    pub states: DMatrix<f64>,
}

/// Runs the system for `n_steps` samples (`y_0 .. y_{n_steps-1}`).
pub fn simulate(system: &SkewProductSystem, n_steps: usize, dt: f64, seed: u64) -> Result<Simulation> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = system.driver.dim();
    let m = system.state_dim();
    let k = system.observation.channels();
    let mut x = match system.random_x0 {
        Some(draw) => draw(&mut rng),
        None => system.x0.clone(),
    };
    let mut phases = DMatrix::zeros(n_steps, d);
    let mut states = DMatrix::zeros(n_steps, m);
    let mut values = DMatrix::zeros(n_steps, k);
    let mut per = vec![0.0; m];
    let mut chaos = vec![0.0; m];
    let mut y = vec![0.0; k];
    for n in 0..n_steps {
        let theta = system.driver.phase_at(n, dt);
        system.observation.apply(&theta, &x, &mut y);
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: n });
        }
        phases.row_mut(n).copy_from_slice(&theta);
        states.row_mut(n).copy_from_slice(&x);
        values.row_mut(n).copy_from_slice(&y);

        (system.g_per)(&theta, &mut per);
        (system.g_chaos)(&theta, &x, &mut rng, &mut chaos);
        for i in 0..m {
            x[i] = per[i] + chaos[i];
        }
    }
    let names = (0..k).map(|c| format!("y{c}")).collect();
    let series = TimeSeries::new(values, dt, 0.0, names)?;
    Ok(Simulation { series, phases, states })
}

/// Largest Lyapunov exponent per step, estimated from a twin trajectory
/// renormalized every step (the twin sees the same noise draws).
pub fn largest_lyapunov(system: &SkewProductSystem, n_steps: usize, dt: f64, seed: u64) -> f64 {
    const DELTA: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = system.state_dim();
    let mut x = match system.random_x0 {
        Some(draw) => draw(&mut rng),
        None => system.x0.clone(),
    };
    let mut twin = x.clone();
    twin[m - 1] += DELTA;
    let (mut per, mut cx, mut ct) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut acc = 0.0;
    let transient = n_steps / 10;
    for n in 0..n_steps {
        let theta = system.driver.phase_at(n, dt);
        (system.g_per)(&theta, &mut per);
        let mut twin_rng = rng.clone();
        (system.g_chaos)(&theta, &x, &mut rng, &mut cx);
        (system.g_chaos)(&theta, &twin, &mut twin_rng, &mut ct);
        for i in 0..m {
            x[i] = per[i] + cx[i];
            twin[i] = per[i] + ct[i];
        }
        let sep = x.iter().zip(&twin).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if n >= transient {
            acc += (sep / DELTA).ln();
        }
        // renormalize the separation back to DELTA along its current direction
        let scale = if sep > 0.0 { DELTA / sep } else { 1.0 };
        for i in 0..m {
            twin[i] = x[i] + (twin[i] - x[i]) * scale;
        }
    }
    acc / (n_steps - transient) as f64
}

/// One of the canned systems listed in the module docs.
pub fn standard_testbed(name: &str) -> Result<SkewProductSystem> {
    let system = match name {
        "pure_torus_2" => SkewProductSystem {
            name: name.into(),
            driver: TorusDriver::new(
                vec![TESTBED_OMEGA_1, TESTBED_OMEGA_1 * GOLDEN_RATIO_CONJUGATE],
                vec![0.0, 0.0],
            )?,
            x0: vec![1.0],
            g_per: Arc::new(|theta, out| out[0] = theta[0].cos() * theta[1].cos()),
            g_chaos: Arc::new(|_, _, _, out| out.fill(0.0)),
            observation: Observation::random_lifted(2, 1, TESTBED_CHANNELS, OBSERVATION_SEED),
            random_x0: None,
        },
        "torus_plus_logistic" => SkewProductSystem {
            name: name.into(),
            driver: TorusDriver::new(vec![TESTBED_OMEGA_1], vec![0.0])?,
            x0: vec![0.0, 0.4],
            g_per: Arc::new(|theta, out| {
                out[0] = 0.5 * (1.0 + theta[0].cos());
                out[1] = 0.0;
            }),
            g_chaos: Arc::new(|_, x, _, out| {
                let v = x[1];
                out[0] = 0.3 * (2.0 * v - 1.0);
                out[1] = 3.9 * v * (1.0 - v);
            }),
            observation: Observation::random_lifted(1, 2, TESTBED_CHANNELS, OBSERVATION_SEED),
            random_x0: Some(|rng| vec![0.0, 0.2 + 0.6 * rng.random::<f64>()]),
        },
        "torus_plus_damped" => SkewProductSystem {
            name: name.into(),
            driver: TorusDriver::new(vec![TESTBED_OMEGA_1], vec![0.0])?,
            x0: vec![0.0],
            g_per: Arc::new(|theta, out| out[0] = theta[0].cos()),
            g_chaos: Arc::new(|_, x, rng, out| {
                let xi: f64 = rng.sample(StandardNormal);
                out[0] = 0.5 * x[0] + 0.2 * xi;
            }),
            observation: Observation::random_lifted(1, 1, TESTBED_CHANNELS, OBSERVATION_SEED),
            random_x0: None,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown testbed '{other}'; available: {}",
                TESTBED_NAMES.join(", ")
            )))
        }
    };
    Ok(system)
}

/// Writes the latent trajectory as CSV: `step, theta_0.., x_0..`.
pub fn write_latent_csv(sim: &Simulation, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write!(buf, "step").unwrap();
    for i in 0..sim.phases.ncols() {
        write!(buf, ",theta{i}").unwrap();
    }
    for i in 0..sim.states.ncols() {
        write!(buf, ",x{i}").unwrap();
    }
    writeln!(buf).unwrap();
    for n in 0..sim.phases.nrows() {
        write!(buf, "{n}").unwrap();
        for v in sim.phases.row(n).iter().chain(sim.states.row(n).iter()) {
            write!(buf, ",{}", fmt_f64(*v)).unwrap();
        }
        writeln!(buf).unwrap();
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_sinusoid_with_period_100_samples() {
        let dt = 0.5;
        let system = SkewProductSystem {
            name: "sinusoid".into(),
            driver: TorusDriver::new(vec![TAU / 100.0 / dt], vec![0.0]).unwrap(),
            x0: vec![0.0],
            g_per: Arc::new(|_, out| out.fill(0.0)),
            g_chaos: Arc::new(|_, _, _, out| out.fill(0.0)),
            observation: Observation::Custom {
                channels: 1,
                map: Arc::new(|theta, _, out| out[0] = theta[0].cos()),
            },
            random_x0: None,
        };
        let sim = simulate(&system, 300, dt, 0).unwrap();
        for n in 0..300 {
            let expected = (TAU * n as f64 / 100.0).cos();
            assert!((sim.series.values()[(n, 0)] - expected).abs() < 1e-12);
        }
        for n in 0..200 {
            assert!((sim.series.values()[(n, 0)] - sim.series.values()[(n + 100, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_and_iterated_phases_agree() {
        let driver = TorusDriver::new(vec![0.7, 0.7 * GOLDEN_RATIO_CONJUGATE], vec![1.0, 6.0]).unwrap();
        let dt = 0.25;
        let mut theta = driver.theta0.clone();
        for n in 0..100_000 {
            if n % 997 == 0 {
                let direct = driver.phase_at(n, dt);
                for (a, b) in direct.iter().zip(&theta) {
                    let diff = (a - b).abs();
                    // compare on the circle
                    assert!(diff.min(TAU - diff) < 1e-9, "step {n}: {a} vs {b}");
                }
            }
            driver.step(&mut theta, dt);
        }
        assert!(theta.iter().all(|t| (0.0..TAU).contains(t)));
    }

    #[test]
    fn pure_torus_matches_closed_form() {
        let system = standard_testbed("pure_torus_2").unwrap();
        let sim = simulate(&system, 2000, 1.0, 5).unwrap();
        let Observation::LiftedLinear(ref mat) = system.observation else {
            panic!("expected lifted observation");
        };
        for n in 0..2000 {
            let th = system.driver.phase_at(n, 1.0);
            let x = if n == 0 {
                1.0
            } else {
                let prev = system.driver.phase_at(n - 1, 1.0);
                prev[0].cos() * prev[1].cos()
            };
            let lift = [th[0].cos(), th[1].cos(), th[0].sin(), th[1].sin(), x];
            for r in 0..3 {
                let y: f64 = (0..5).map(|c| mat[(r, c)] * lift[c]).sum();
                assert!((y - sim.series.values()[(n, r)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        for name in TESTBED_NAMES {
            let system = standard_testbed(name).unwrap();
            let a = simulate(&system, 500, 1.0, 42).unwrap();
            let b = simulate(&system, 500, 1.0, 42).unwrap();
            assert_eq!(a.series, b.series);
            assert_eq!(a.states, b.states);
        }
        let system = standard_testbed("torus_plus_damped").unwrap();
        let a = simulate(&system, 50, 1.0, 1).unwrap();
        let b = simulate(&system, 50, 1.0, 2).unwrap();
        assert_ne!(a.series, b.series);
    }

    #[test]
    fn testbed_catalog() {
        let s = standard_testbed("pure_torus_2").unwrap();
        assert_eq!(s.driver.dim(), 2);
        let sim = simulate(&s, 10, 1.0, 0).unwrap();
        assert_eq!(sim.series.channels(), 3);

        let s = standard_testbed("torus_plus_logistic").unwrap();
        assert_eq!(s.driver.dim(), 1);
        let err = standard_testbed("lorenz").unwrap_err().to_string();
        assert!(err.contains("pure_torus_2") && err.contains("torus_plus_damped"), "{err}");
    }

    #[test]
    fn logistic_coupling_is_chaotic() {
        let s = standard_testbed("torus_plus_logistic").unwrap();
        let lyap = largest_lyapunov(&s, 20_000, 1.0, 3);
        assert!(lyap > 0.2, "largest Lyapunov exponent {lyap}");
        // the contracting noisy map is not
        let s = standard_testbed("torus_plus_damped").unwrap();
        let lyap = largest_lyapunov(&s, 20_000, 1.0, 3);
        assert!((lyap - 0.5f64.ln()).abs() < 1e-6, "{lyap}");
    }

    #[test]
    fn without_periodic_removes_phase_dependence() {
        let s = standard_testbed("torus_plus_logistic").unwrap().without_periodic();
        let Observation::LiftedLinear(ref m) = s.observation else { unreachable!() };
        assert!(m.columns(0, 2).iter().all(|v| *v == 0.0));
        let mut out = [1.0, 1.0];
        (s.g_per)(&[0.3], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let system = SkewProductSystem {
            name: "blowup".into(),
            driver: TorusDriver::new(vec![0.1], vec![0.0]).unwrap(),
            x0: vec![1.0],
            g_per: Arc::new(|_, out| out.fill(0.0)),
            g_chaos: Arc::new(|_, x, _, out| out[0] = x[0] * 1e200),
            observation: Observation::random_lifted(1, 1, 1, 0),
            random_x0: None,
        };
        match simulate(&system, 10, 1.0, 0) {
            Err(Error::NonFinite { step }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
    }
}
