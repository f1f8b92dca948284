//! Simulate the built-in skew-product testbeds and summarize each one.
//!
//! Run with `cargo run --release --example simulate_testbeds [out_dir]`.

use std::path::PathBuf;

use quasiperiodic::synth::{largest_lyapunov, simulate, standard_testbed, write_latent_csv, TESTBED_NAMES};

fn main() -> quasiperiodic::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| quasiperiodic::Error::Data(e.to_string()))?;
    }
    for name in TESTBED_NAMES {
        let system = standard_testbed(name)?;
        let sim = simulate(&system, 2000, 1.0, 0)?;
        let v = sim.series.values();
        let lyap = largest_lyapunov(&system, 5000, 1.0, 0);
        let lyap = if lyap.is_finite() { format!("{lyap:+.4}") } else { "n/a (no driven state)".into() };
        println!(
            "{name:>20}: {} channels, driver omega {:?}, range [{:.3}, {:.3}], largest Lyapunov exponent {lyap}",
            sim.series.channels(),
            system.driver.omega,
            v.min(),
            v.max()
        );
        if let Some(dir) = &out {
            sim.series.write_csv(&dir.join(format!("{name}.csv")), "time")?;
            write_latent_csv(&sim, &dir.join(format!("{name}_latent.csv")))?;
        }
    }
    Ok(())
}
