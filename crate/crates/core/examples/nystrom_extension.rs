//! Out-of-sample evaluation of kernel eigenfunctions.
//!
//! The extension reproduces each eigenfunction at the training points and is
//! bounded everywhere by a constant computable from the basis.

use std::sync::Arc;

use quasiperiodic::kernel::{gaussian_kernel_from_sqdist, pairwise_sqdist, sqdist_quantiles};
use quasiperiodic::series::delay_embed;
use quasiperiodic::spectral::decompose;
use quasiperiodic::synth::{simulate, standard_testbed};

fn main() -> quasiperiodic::Result<()> {
    let q = 10;
    let system = standard_testbed("pure_torus_2")?;
    let sim = simulate(&system, 1200, 1.0, 0)?;
    let train = delay_embed(&quasiperiodic::series::window(&sim.series, 0, 1000)?, q)?;
    let sq = pairwise_sqdist(&train);
    let eps = 0.1 * sqdist_quantiles(&sq, &[0.5])[0];
    let kernel = Arc::new(gaussian_kernel_from_sqdist(Arc::new(train), sq, eps)?);
    let basis = decompose(kernel, 40)?;
    let emb = basis.embedding().clone();

    let mut worst = 0.0f64;
    for i in 0..emb.len() {
        let ext = basis.nystrom_all(emb.point(i))?;
        for (l, v) in ext.iter().enumerate() {
            worst = worst.max((v - basis.phi()[(i, l)]).abs());
        }
    }
    println!("max |extension - phi| on training points: {worst:.2e}");

    let held_out = delay_embed(&quasiperiodic::series::window(&sim.series, 1000, 1200)?, q)?;
    for l in [1, 2, 10, 39] {
        let sup = (0..held_out.len())
            .map(|i| basis.nystrom(held_out.point(i), l).map(f64::abs))
            .collect::<quasiperiodic::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        println!("l = {l:>2}: held-out max |phibar| {sup:.3}, bound {:.3}", basis.nystrom_sup_bound(l));
    }
    Ok(())
}
