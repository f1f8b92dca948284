//! Quasiperiodic decomposition of multivariate time series.
//!
//! The pipeline delay-embeds a series, builds a bistochastically normalized
//! Gaussian kernel on the embedded points, extracts a truncated singular
//! basis, and filters Fourier bins of the basis functions by the growth of
//! their RKHS norms. Surviving bins are treated as Koopman eigenfrequencies
//! of the quasiperiodic driver. A harmonic least-squares fit over those
//! frequencies gives the periodic component; the residual is expanded in the
//! kernel basis and extended off-sample by Nyström, giving a standalone
//! delay-coordinate model that reconstructs and predicts the series.
//!
//! ```no_run
//! use quasiperiodic::{decompose::DecomposeParams, synth};
//!
//! let system = synth::standard_testbed("pure_torus_2").unwrap();
//! let sim = synth::simulate(&system, 4117, 1.0, 0).unwrap();
//! let params = DecomposeParams::default();
//! let model = quasiperiodic::decompose::decompose(&sim.series, &params).unwrap();
//! println!("{:?}", model.selection().omegas);
//! ```

pub mod decompose;
pub mod error;
pub mod freqfilter;
pub mod kernel;
pub mod pipeline;
pub mod report;
pub mod series;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
