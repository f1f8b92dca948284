//! Fit a model on a training window, save it, reload it and forecast.
//!
//! Run with `cargo run --release --example decompose_predict`.

use quasiperiodic::decompose::{decompose, moving_average, relative_error, Bandwidth, DecomposeParams, QPModel};
use quasiperiodic::report::report_periods;
use quasiperiodic::series::window;
use quasiperiodic::synth::{simulate, standard_testbed};

fn main() -> quasiperiodic::Result<()> {
    let (n_train, horizon) = (2000, 1500);
    let params = DecomposeParams {
        bandwidth: Bandwidth::MedianScale(0.1),
        num_eigen: 200,
        ..Default::default()
    };
    let system = standard_testbed("torus_plus_logistic")?;
    let sim = simulate(&system, n_train + horizon + 1, 1.0, 1)?;
    let train = window(&sim.series, 0, n_train)?;
    let model = decompose(&train, &params)?;
    print!("{}", report_periods(model.selection()));
    println!(
        "periodic bound {:.3}, free-run bound {:.3}",
        model.periodic_bound(),
        model.free_run_bound()
    );

    let dir = tempfile::tempdir().map_err(|e| quasiperiodic::Error::Data(e.to_string()))?;
    let path = dir.path().join("model.json");
    model.save(&path)?;
    let model = QPModel::load(&path, &train, None)?;

    let init_at = n_train - 1;
    let pred = model.predict(&sim.series, init_at, horizon, None)?;
    let truth = window(&sim.series, init_at + 1, init_at + 1 + horizon)?;
    let err = relative_error(&truth, &pred)?;
    let col: Vec<f64> = err.column(0).iter().copied().collect();
    for m in [1, 10, 100] {
        let smooth = moving_average(&col, m);
        let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
        println!("moving average {m:>3}: mean relative error {mean:.4}, final {:.4}", smooth[smooth.len() - 1]);
    }
    Ok(())
}
