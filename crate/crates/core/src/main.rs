use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quasiperiodic::decompose::{self, Mode};
use quasiperiodic::error::{Error, Result};
use quasiperiodic::freqfilter;
use quasiperiodic::kernel;
use quasiperiodic::pipeline::{self, PipelineConfig};
use quasiperiodic::report::report_periods;
use quasiperiodic::series::window;
use quasiperiodic::synth;

/// Quasiperiodic plus chaotic decomposition of multivariate time series.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a built-in test system to CSV.
    Synth(SynthArgs),
    /// Select frequencies and print the period table.
    Frequencies {
        #[command(flatten)]
        data: DataArgs,
        /// Write the selection CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model and save it as JSON.
    Decompose {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Reproduce the training window with a saved model.
    Reconstruct {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "insample")]
        mode: Mode,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Free-run forecast from a state of the input series.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Index of the newest sample in the initial delay state.
        #[arg(long)]
        init_at: usize,
        #[arg(long)]
        steps: usize,
        /// Moving-average windows for the error report (repeatable).
        #[arg(long = "ma-window")]
        ma_windows: Vec<usize>,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Relative-error CSV, written when the input covers the forecast.
        #[arg(long)]
        errors_out: Option<PathBuf>,
    },
    /// Run the whole pipeline and write all artifacts.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        predict_start: Option<usize>,
        #[arg(long)]
        predict_end: Option<usize>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long = "ma-window")]
        ma_windows: Vec<usize>,
    },
    /// Write distance histogram, eigenvalues and threshold curves.
    Diagnostics {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    testbed: String,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the latent phases and states.
    #[arg(long)]
    latent: Option<PathBuf>,
    /// Drop the periodic forcing.
    #[arg(long)]
    no_periodic: bool,
}

/// Input and model parameters; each flag overrides the config file.
#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    time_column: Option<String>,
    /// Comma-separated value columns.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    #[arg(long)]
    dt_seconds: Option<f64>,
    #[arg(long)]
    resample_method: Option<String>,
    #[arg(long)]
    max_gap_seconds: Option<f64>,
    #[arg(long)]
    standardize: bool,
    /// Number of delays Q.
    #[arg(long)]
    delays: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Bandwidth as a multiple of the median squared distance.
    #[arg(long)]
    epsilon_median_scale: Option<f64>,
    #[arg(long)]
    num_eigen: Option<usize>,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long = "L0")]
    l0: Option<usize>,
    #[arg(long)]
    merge_adjacent: bool,
    #[arg(long)]
    train_end: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl DataArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { c.$f = v.clone().into(); })*};
        }
        set!(input, time_column, channels, dt_seconds, resample_method, max_gap_seconds, epsilon_median_scale, train_end, cache_dir);
        set!(delays, epsilon, num_eigen, eps1, eps2, l0, seed, max_points);
        if self.epsilon.is_some() && self.epsilon_median_scale.is_none() {
            c.epsilon_median_scale = None;
        }
        c.standardize |= self.standardize;
        c.merge_adjacent |= self.merge_adjacent;
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    pipeline::configure_threads()?;
    match cli.command {
        Command::Synth(a) => {
            let mut system = synth::standard_testbed(&a.testbed)?;
            if a.no_periodic {
                system = system.without_periodic();
            }
            let sim = synth::simulate(&system, a.steps, a.dt, a.seed)?;
            sim.series.write_csv(&a.out, "time")?;
            if let Some(p) = a.latent {
                synth::write_latent_csv(&sim, &p)?;
            }
        }
        Command::Frequencies { data, out } => {
            let cfg = data.config()?;
            let train = cfg.training_window(&cfg.load_series()?)?;
            let tb = decompose::training_basis(&train, &cfg.decompose_params(), cfg.cache_dir.as_deref())?;
            let table = freqfilter::rkhs_norm_table(&tb.basis, train.dt())?;
            let mut sel = freqfilter::select(&table, cfg.eps1, cfg.eps2, cfg.l0)?;
            if cfg.merge_adjacent {
                sel = freqfilter::merge_adjacent(&sel);
            }
            if sel.nonzero_indices().next().is_none() {
                eprintln!("warning: no frequency besides the mean passed the thresholds");
            }
            print!("{}", report_periods(&sel));
            if let Some(p) = out {
                sel.write_csv(&p)?;
            }
        }
        Command::Decompose { data, model } => {
            let cfg = data.config()?;
            let train = cfg.training_window(&cfg.load_series()?)?;
            let m = decompose::decompose_full(&train, &cfg.decompose_params(), cfg.cache_dir.as_deref())?.model;
            m.save(&model)?;
            print!("{}", report_periods(m.selection()));
        }
        Command::Reconstruct {
            data,
            model,
            mode,
            clip,
            out,
        } => {
            let cfg = data.config()?;
            let (m, series) = pipeline::load_model(&cfg, &model)?;
            let train = cfg.training_window(&series)?;
            let rec = m.reconstruct_training(&train, mode, clip)?;
            rec.write_csv(&out, &cfg.time_column)?;
        }
        Command::Predict {
            data,
            model,
            init_at,
            steps,
            ma_windows,
            clip,
            out,
            errors_out,
        } => {
            let cfg = data.config()?;
            let (m, series) = pipeline::load_model(&cfg, &model)?;
            let pred = m.predict(&series, init_at, steps, clip)?;
            pred.write_csv(&out, &cfg.time_column)?;
            if init_at + steps < series.len() {
                let truth = window(&series, init_at + 1, init_at + 1 + steps)?;
                let err = decompose::relative_error(&truth, &pred)?;
                for (c, name) in m.channel_names().iter().enumerate() {
                    let col: Vec<f64> = err.column(c).iter().copied().collect();
                    let mean = col.iter().sum::<f64>() / col.len() as f64;
                    println!("{name}: mean relative error {mean:.4e}, max {:.4e}", err.column(c).max());
                }
                if let Some(p) = errors_out {
                    let windows = if ma_windows.is_empty() { cfg.ma_windows.clone() } else { ma_windows };
                    pipeline::write_errors(&p, &[("predict", truth, pred)], m.channel_names(), &windows)?;
                }
            } else if errors_out.is_some() {
                return Err(Error::Data("input does not cover the forecast window; no errors computed".into()));
            }
        }
        Command::Run {
            data,
            output_dir,
            predict_start,
            predict_end,
            mode,
            clip,
            ma_windows,
        } => {
            let mut cfg = data.config()?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if predict_start.is_some() || predict_end.is_some() {
                cfg.predict_start = predict_start;
                cfg.predict_end = predict_end;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if clip.is_some() {
                cfg.clip = clip;
            }
            if !ma_windows.is_empty() {
                cfg.ma_windows = ma_windows;
            }
            let summary = pipeline::run_pipeline(&cfg)?;
            println!(
                "wrote {} artifacts to {}; selected bins {:?}",
                summary.artifacts.len(),
                summary.output_dir.display(),
                summary.selected_bins
            );
        }
        Command::Diagnostics { data, out_dir } => {
            let cfg = data.config()?;
            let train = cfg.training_window(&cfg.load_series()?)?;
            let tb = decompose::training_basis(&train, &cfg.decompose_params(), cfg.cache_dir.as_deref())?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Data(format!("{}: {e}", out_dir.display())))?;
            let table = freqfilter::rkhs_norm_table(&tb.basis, train.dt())?;
            freqfilter::choose_thresholds_diagnostics(&table, cfg.l0)?.write_csv(&out_dir)?;
            let sq = kernel::pairwise_sqdist(tb.basis.embedding());
            pipeline::write_histogram(&out_dir.join("sqdist_histogram.csv"), &sq)?;
            let lam = tb.basis.lambda();
            let idx: Vec<f64> = (1..=lam.len()).map(|l| l as f64).collect();
            pipeline::write_matrix_csv(
                &out_dir.join("eigenvalues.csv"),
                "l",
                &idx,
                &["lambda".to_string()],
                &nalgebra::DMatrix::from_column_slice(lam.len(), 1, lam),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} code={} message={msg:?}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
