//! Frequency selection with and without the periodic forcing on a chaotic
//! testbed. With forcing the driver bin survives; without it nothing does.
//!
//! Run with `cargo run --release --example chaos_robustness`.

use std::f64::consts::TAU;

use quasiperiodic::decompose::{decompose, Bandwidth, DecomposeParams};
use quasiperiodic::synth::{simulate, standard_testbed};

fn main() -> quasiperiodic::Result<()> {
    let n = 2048;
    let params = DecomposeParams {
        bandwidth: Bandwidth::MedianScale(0.1),
        num_eigen: 200,
        ..Default::default()
    };
    let forced = standard_testbed("torus_plus_logistic")?;
    let driver = forced.driver.omega[0];
    let bare = forced.clone().without_periodic();
    for (label, system) in [("forced", forced), ("unforced", bare)] {
        for seed in 0..3 {
            let sim = simulate(&system, n + params.delays + 1, 1.0, seed)?;
            let model = decompose(&sim.series, &params)?;
            let bins: Vec<usize> = model.selection().nonzero_indices().collect();
            println!("{label:>8} seed {seed}: nonzero bins {bins:?}");
        }
    }
    println!("driver sits at bin {:.2}", driver * n as f64 / TAU);
    Ok(())
}
