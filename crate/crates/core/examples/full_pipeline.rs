//! Drive the whole pipeline from a config, as the `run` subcommand does.
//!
//! Run with `cargo run --release --example full_pipeline`.

use quasiperiodic::pipeline::{run_pipeline, PipelineConfig};
use quasiperiodic::synth::{simulate, standard_testbed};

fn main() -> quasiperiodic::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| quasiperiodic::Error::Data(e.to_string()))?;
    let input = dir.path().join("series.csv");
    let sim = simulate(&standard_testbed("torus_plus_damped")?, 1400, 1.0, 0)?;
    sim.series.write_csv(&input, "time")?;

    let cfg = PipelineConfig::from_toml_str(&format!(
        r#"
input = "{}"
delays = 10
epsilon_median_scale = 0.1
num_eigen = 120
train_end = 1000
predict_start = 1050
predict_end = 1399
output_dir = "{}"
"#,
        input.display(),
        dir.path().join("out").display()
    ))?;
    let summary = run_pipeline(&cfg)?;
    println!("epsilon {:.4}, selected bins {:?}", summary.epsilon, summary.selected_bins);
    for a in &summary.artifacts {
        println!("  {}", a.display());
    }
    let errors = std::fs::read_to_string(summary.output_dir.join("errors.csv")).unwrap_or_default();
    for line in errors.lines().take(4) {
        println!("{line}");
    }
    Ok(())
}
