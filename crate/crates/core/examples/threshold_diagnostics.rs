//! Curves for choosing the filtering thresholds by eye, plus the
//! squared-distance histogram for choosing the bandwidth.
//!
//! Run with `cargo run --release --example threshold_diagnostics [out_dir]`.

use std::path::PathBuf;

use quasiperiodic::decompose::{training_basis, Bandwidth, DecomposeParams};
use quasiperiodic::freqfilter::{choose_thresholds_diagnostics, rkhs_norm_table, DEFAULT_L0};
use quasiperiodic::kernel::{pairwise_sqdist, sqdist_histogram};
use quasiperiodic::synth::{simulate, standard_testbed};

fn main() -> quasiperiodic::Result<()> {
    let params = DecomposeParams {
        bandwidth: Bandwidth::MedianScale(0.1),
        num_eigen: 150,
        ..Default::default()
    };
    let sim = simulate(&standard_testbed("pure_torus_2")?, 1500, 1.0, 0)?;
    let tb = training_basis(&sim.series, &params, None)?;

    let sq = pairwise_sqdist(tb.basis.embedding());
    println!("squared-distance histogram (log-spaced):");
    let hist = sqdist_histogram(&sq, 12);
    let peak = hist.iter().map(|b| b.count).max().unwrap_or(1).max(1);
    for b in &hist {
        println!("  [{:>9.3}, {:>9.3})  {}", b.lower, b.upper, "#".repeat(b.count * 50 / peak));
    }

    let table = rkhs_norm_table(&tb.basis, sim.series.dt())?;
    let diag = choose_thresholds_diagnostics(&table, DEFAULT_L0)?;
    println!("l, median W, max W");
    for l in [1, 2, 5, 10, 50, 150] {
        println!("{l:>4} {:>12.4e} {:>12.4e}", diag.median_w[l - 1], diag.max_w[l - 1]);
    }
    let r = &diag.sorted_ratio;
    println!("growth ratio quantiles: min {:.2}, median {:.2}, max {:.2}", r[0].1, r[r.len() / 2].1, r[r.len() - 1].1);

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        std::fs::create_dir_all(&dir).map_err(|e| quasiperiodic::Error::Data(e.to_string()))?;
        diag.write_csv(&dir)?;
        println!("wrote curves to {}", dir.display());
    }
    Ok(())
}
