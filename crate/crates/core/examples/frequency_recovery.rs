//! Recover the two driver frequencies of a quasiperiodic signal.
//!
//! Run with `cargo run --release --example frequency_recovery`.

use std::f64::consts::TAU;
use std::sync::Arc;
use std::time::Instant;

use quasiperiodic::freqfilter::{rkhs_norm_table, select, DEFAULT_EPS1, DEFAULT_EPS2, DEFAULT_L0};
use quasiperiodic::kernel::{gaussian_kernel_from_sqdist, pairwise_sqdist, sqdist_quantiles};
use quasiperiodic::report::report_periods;
use quasiperiodic::series::delay_embed;
use quasiperiodic::spectral::decompose;
use quasiperiodic::synth::{simulate, standard_testbed, GOLDEN_RATIO_CONJUGATE, TESTBED_OMEGA_1};

fn main() -> quasiperiodic::error::Result<()> {
    let (n, q, l) = (4096, 20, 300);
    let start = Instant::now();
    let system = standard_testbed("pure_torus_2")?;
    let sim = simulate(&system, n + q, 1.0, 0)?;
    let emb = Arc::new(delay_embed(&sim.series, q)?);
    let sq = pairwise_sqdist(&emb);
    let eps = 0.1 * sqdist_quantiles(&sq, &[0.5])[0];
    let kernel = Arc::new(gaussian_kernel_from_sqdist(emb, sq, eps)?);
    println!("kernel ready after {:.1?} (epsilon = {eps:.4})", start.elapsed());
    let basis = decompose(kernel, l)?;
    println!("basis ready after {:.1?}; lambda_2 = {:.6}, lambda_L = {:.3e}", start.elapsed(), basis.lambda()[1], basis.lambda()[l - 1]);
    let table = rkhs_norm_table(&basis, 1.0)?;
    let sel = select(&table, DEFAULT_EPS1, DEFAULT_EPS2, DEFAULT_L0)?;
    println!("selected after {:.1?}", start.elapsed());

    let bin = TAU / (n as f64);
    for (name, w) in [("omega_1", TESTBED_OMEGA_1), ("omega_2", GOLDEN_RATIO_CONJUGATE * TESTBED_OMEGA_1)] {
        let hit = sel.omegas.iter().any(|o| (o - w).abs() <= bin);
        println!("{name} = {w:.6} rad/s (bin {:.2}) recovered: {hit}", w / bin);
    }
    println!("{}", report_periods(&sel));
    Ok(())
}
