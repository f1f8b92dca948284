//! End-to-end runs driven by a flat TOML configuration.
//!
//! A run writes, into the output directory:
//!
//! - `frequencies.csv`: selected bins with periods and amplitudes
//! - `periodic.csv`: fitted periodic component on the training targets
//! - `chaotic_coeffs.csv`: eigenvalues and chaotic coefficients per eigenfunction
//! - `reconstruction.csv`: model output over the training targets
//! - `prediction.csv`: free-run forecast over the prediction window, if any
//! - `errors.csv`: relative errors and their moving averages
//! - `model.json`: the fitted model
//! - `diagnostics/`: distance histogram, eigenvalues, threshold curves
//! - `manifest.toml`: the full configuration plus content hashes
//!
//! The manifest is itself a valid configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decompose::{self, Bandwidth, DecomposeParams, Mode, QPModel};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::freqfilter;
use crate::kernel;
use crate::series::{self, CsvSchema, ResampleMethod, TimeSeries};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "QP_THREADS";

const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub time_column: String,
    /// Value columns; all non-time columns when absent.
    pub channels: Option<Vec<String>>,
    /// Resample onto this step; the input must already be regular otherwise.
    pub dt_seconds: Option<f64>,
    pub resample_method: String,
    pub max_gap_seconds: Option<f64>,
    pub standardize: bool,
    pub delays: usize,
    pub epsilon: f64,
    /// When set, epsilon is this multiple of the median squared distance.
    pub epsilon_median_scale: Option<f64>,
    pub num_eigen: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub l0: usize,
    pub merge_adjacent: bool,
    /// Exclusive end of the training window; the whole series by default.
    pub train_end: Option<usize>,
    /// The forecast starts from the state ending at `predict_start` and
    /// covers samples `predict_start + 1 ..= predict_end`.
    pub predict_start: Option<usize>,
    pub predict_end: Option<usize>,
    pub ma_windows: Vec<usize>,
    pub mode: Mode,
    pub clip: Option<f64>,
    pub seed: u64,
    pub max_points: usize,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let d = DecomposeParams::default();
        PipelineConfig {
            input: None,
            time_column: "time".into(),
            channels: None,
            dt_seconds: None,
            resample_method: "previous".into(),
            max_gap_seconds: None,
            standardize: false,
            delays: d.delays,
            epsilon: 0.1,
            epsilon_median_scale: None,
            num_eigen: d.num_eigen,
            eps1: d.eps1,
            eps2: d.eps2,
            l0: d.l0,
            merge_adjacent: false,
            train_end: None,
            predict_start: None,
            predict_end: None,
            ma_windows: vec![1, 10, 100],
            mode: Mode::Insample,
            clip: None,
            seed: 0,
            max_points: kernel::DEFAULT_MAX_POINTS,
            output_dir: PathBuf::from("qp_out"),
            cache_dir: None,
        }
    }
}

impl PipelineConfig {
    /// Parses a configuration or a run manifest (its `[run]` table is ignored).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        table.remove("run");
        let cfg: PipelineConfig = table.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Relative paths in a config file are relative to the file itself.
        if let Some(base) = path.parent().filter(|b| !b.as_os_str().is_empty()) {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            if let Some(p) = cfg.input.as_mut() {
                rebase(p);
            }
            if let Some(p) = cfg.cache_dir.as_mut() {
                rebase(p);
            }
            rebase(&mut cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every parameter against the ranges its consumer accepts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(dt) = self.dt_seconds {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad(format!("dt_seconds must be positive, got {dt}"));
            }
        }
        self.resample_method.parse::<ResampleMethod>()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if let Some(c) = self.epsilon_median_scale {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("epsilon_median_scale must be positive, got {c}"));
            }
        }
        if self.num_eigen == 0 {
            return bad("num_eigen must be at least 1".into());
        }
        if !(self.eps1 > 0.0 && self.eps2 > 0.0) {
            return bad(format!("eps1 and eps2 must be positive, got {} and {}", self.eps1, self.eps2));
        }
        if self.l0 < 2 || self.l0 > self.num_eigen {
            return bad(format!("l0 = {} must lie in 2..={}", self.l0, self.num_eigen));
        }
        if self.ma_windows.contains(&0) {
            return bad("moving-average windows must be at least 1".into());
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip factor must be positive, got {c}"));
            }
        }
        if let Some(te) = self.train_end {
            if te < self.delays + 3 {
                return bad(format!("train_end = {te} leaves no training pairs for {} delays", self.delays));
            }
        }
        match (self.predict_start, self.predict_end) {
            (None, None) => {}
            (Some(s), Some(e)) if s < e && s >= self.delays => {}
            (s, e) => return bad(format!("invalid prediction window {s:?}..{e:?}")),
        }
        Ok(())
    }

    pub fn decompose_params(&self) -> DecomposeParams {
        DecomposeParams {
            delays: self.delays,
            bandwidth: match self.epsilon_median_scale {
                Some(c) => Bandwidth::MedianScale(c),
                None => Bandwidth::Absolute(self.epsilon),
            },
            num_eigen: self.num_eigen,
            eps1: self.eps1,
            eps2: self.eps2,
            l0: self.l0,
            merge_adjacent: self.merge_adjacent,
            standardize: self.standardize,
            max_points: self.max_points,
            seed: self.seed,
        }
    }

    /// Loads the input, resampling when `dt_seconds` is set.
    pub fn load_series(&self) -> Result<TimeSeries> {
        let path = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("no input file given".into()))?;
        let schema = match &self.channels {
            Some(c) => CsvSchema::new(self.time_column.clone(), c.clone()),
            None => CsvSchema::all_channels(self.time_column.clone()),
        };
        let raw = series::load_csv(path, &schema)?;
        match self.dt_seconds {
            Some(dt) => series::resample(&raw, dt, self.resample_method.parse()?, self.max_gap_seconds),
            None => {
                raw.ensure_regular()?;
                Ok(raw)
            }
        }
    }

    /// The training window `[0, train_end)` of `series`.
    pub fn training_window(&self, series: &TimeSeries) -> Result<TimeSeries> {
        let end = self.train_end.unwrap_or(series.len());
        series::window(series, 0, end)
    }
}

/// Applies the thread-count override from [`THREADS_ENV`], if set. Returns
/// the number of worker threads in use.
/// Build time for the manifest; honours `SOURCE_DATE_EPOCH` for reproducible output.
fn created_timestamp() -> chrono::DateTime<chrono::Utc> {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .unwrap_or_else(chrono::Utc::now)
}

pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be at least 1")));
        }
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

/// Writes a CSV with a leading time column and one column per name.
pub fn write_matrix_csv(path: &Path, time_header: &str, times: &[f64], names: &[String], values: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut header = vec![time_header.to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (r, t) in times.iter().enumerate() {
        let mut rec = vec![fmt_f64(*t)];
        rec.extend(values.row(r).iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    /// Artifact paths relative to the output directory, in write order.
    pub artifacts: Vec<PathBuf>,
    pub selected_bins: Vec<usize>,
    pub epsilon: f64,
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn path(&mut self, rel: &str) -> PathBuf {
        self.written.push(PathBuf::from(rel));
        self.dir.join(rel)
    }

    fn remove_all(&self) {
        for rel in self.written.iter().rev() {
            let _ = fs::remove_file(self.dir.join(rel));
        }
        let _ = fs::remove_dir(self.dir.join("diagnostics"));
    }
}

/// Runs the full chain: load, train, select, decompose, reconstruct,
/// predict and report. On failure every artifact written so far is removed.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("no input file given".into()))?;
    if !input.is_file() {
        return Err(Error::Data(format!("input file {} not found", input.display())));
    }
    let created_dir = !cfg.output_dir.exists();
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let lock = cfg.output_dir.join(LOCK_FILE);
    if fs::OpenOptions::new().write(true).create_new(true).open(&lock).is_err() {
        return Err(Error::Config(format!(
            "output directory {} is locked by another run (remove {} if stale)",
            cfg.output_dir.display(),
            lock.display()
        )));
    }
    let mut art = Artifacts {
        dir: cfg.output_dir.clone(),
        written: Vec::new(),
    };
    let result = run_inner(cfg, &input, &mut art);
    if result.is_err() {
        art.remove_all();
    }
    let _ = fs::remove_file(&lock);
    if result.is_err() && created_dir {
        let _ = fs::remove_dir(&cfg.output_dir);
    }
    result
}

fn run_inner(cfg: &PipelineConfig, input: &Path, art: &mut Artifacts) -> Result<RunSummary> {
    let series = cfg.load_series()?;
    let train = cfg.training_window(&series)?;
    let params = cfg.decompose_params();
    let dec = decompose::decompose_full(&train, &params, cfg.cache_dir.as_deref())?;
    let model = &dec.model;
    let names = model.channel_names().to_vec();
    let dt = model.dt();
    let n = model.train_len();
    let train_times: Vec<f64> = (0..n).map(|r| model.t_ref() + r as f64 * dt).collect();

    model.selection().write_csv(&art.path("frequencies.csv"))?;
    write_matrix_csv(&art.path("periodic.csv"), "time", &train_times, &names, &dec.periodic.fitted)?;

    let lam = model.basis().lambda();
    let coeffs = DMatrix::from_fn(lam.len(), names.len() + 1, |r, c| if c == 0 { lam[r] } else { model.e()[(r, c - 1)] });
    let mut coeff_names = vec!["lambda".to_string()];
    coeff_names.extend(names.iter().cloned());
    let ls: Vec<f64> = (1..=lam.len()).map(|l| l as f64).collect();
    write_matrix_csv(&art.path("chaotic_coeffs.csv"), "l", &ls, &coeff_names, &coeffs)?;

    let recon = model.reconstruct_training(&train, cfg.mode, cfg.clip)?;
    write_matrix_csv(&art.path("reconstruction.csv"), "time", recon.times(), &names, recon.values())?;
    let train_truth = series::window(&train, params.delays + 1, params.delays + 1 + n)?;
    let mut segments = vec![("train", train_truth, recon)];

    if let (Some(start), Some(end)) = (cfg.predict_start, cfg.predict_end) {
        let pred = model.predict(&series, start, end - start, cfg.clip)?;
        let mut cols = names.clone();
        let mut vals = pred.values().clone();
        if end < series.len() {
            let truth = series::window(&series, start + 1, end + 1)?;
            cols.extend(names.iter().map(|c| format!("truth_{c}")));
            vals = DMatrix::from_fn(vals.nrows(), 2 * names.len(), |r, c| {
                if c < names.len() {
                    pred.values()[(r, c)]
                } else {
                    truth.values()[(r, c - names.len())]
                }
            });
            segments.push(("predict", truth, pred.clone()));
        }
        write_matrix_csv(&art.path("prediction.csv"), "time", pred.times(), &cols, &vals)?;
    }

    write_errors(&art.path("errors.csv"), &segments, &names, &cfg.ma_windows)?;
    model.save(&art.path("model.json"))?;

    fs::create_dir_all(art.dir.join("diagnostics")).map_err(|e| Error::io(art.dir.join("diagnostics"), e))?;
    let diag = freqfilter::choose_thresholds_diagnostics(&dec.table, cfg.l0)?;
    diag.write_csv(&art.dir.join("diagnostics"))?;
    art.written.push(PathBuf::from("diagnostics/growth_curve.csv"));
    art.written.push(PathBuf::from("diagnostics/ratio_curve.csv"));
    let sq = kernel::pairwise_sqdist(model.basis().embedding());
    write_histogram(&art.path("diagnostics/sqdist_histogram.csv"), &sq)?;
    let idx: Vec<f64> = (1..=lam.len()).map(|l| l as f64).collect();
    write_matrix_csv(
        &art.path("diagnostics/eigenvalues.csv"),
        "l",
        &idx,
        &["lambda".to_string()],
        &DMatrix::from_column_slice(lam.len(), 1, lam),
    )?;

    let mut hashes = toml::Table::new();
    for rel in &art.written {
        hashes.insert(rel.to_string_lossy().into_owned(), toml::Value::String(sha256_file(&art.dir.join(rel))?));
    }
    let mut run = toml::Table::new();
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    run.insert("input_sha256".into(), sha256_file(input)?.into());
    run.insert("training_hash".into(), model.data_hash().into());
    run.insert("epsilon_resolved".into(), model.epsilon().into());
    run.insert("train_pairs".into(), (n as i64).into());
    run.insert("selected_bins".into(), model.selection().indices.iter().map(|j| *j as i64).collect::<Vec<_>>().into());
    run.insert("artifacts".into(), hashes.into());
    run.insert(
        "created".into(),
        created_timestamp().to_rfc3339_opts(chrono::SecondsFormat::Secs, true).into(),
    );
    let mut doc = toml::Table::try_from(cfg).expect("config serializes");
    doc.insert("run".into(), run.into());
    let manifest = toml::to_string(&doc).expect("manifest serializes");
    let mpath = art.path("manifest.toml");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;

    Ok(RunSummary {
        output_dir: art.dir.clone(),
        artifacts: art.written.clone(),
        selected_bins: model.selection().indices.clone(),
        epsilon: model.epsilon(),
    })
}

/// Writes `segment,time` followed by, per channel, the relative error and
/// its trailing moving averages.
pub fn write_errors(path: &Path, segments: &[(&str, TimeSeries, TimeSeries)], names: &[String], windows: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut header = vec!["segment".to_string(), "time".to_string()];
    for c in names {
        header.push(format!("err_{c}"));
        header.extend(windows.iter().map(|m| format!("err_{c}_ma{m}")));
    }
    w.write_record(&header).map_err(io)?;
    for (label, truth, est) in segments {
        let err = decompose::relative_error(truth, est)?;
        let smoothed: Vec<Vec<Vec<f64>>> = (0..names.len())
            .map(|c| {
                let col: Vec<f64> = err.column(c).iter().copied().collect();
                windows.iter().map(|m| decompose::moving_average(&col, *m)).collect()
            })
            .collect();
        for r in 0..err.nrows() {
            let mut rec = vec![label.to_string(), fmt_f64(est.times()[r])];
            for c in 0..names.len() {
                rec.push(fmt_f64(err[(r, c)]));
                rec.extend(smoothed[c].iter().map(|s| fmt_f64(s[r])));
            }
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the log-spaced squared-distance histogram used to pick epsilon.
pub fn write_histogram(path: &Path, sqdist: &DMatrix<f64>) -> Result<()> {
    let bins = kernel::sqdist_histogram(sqdist, 50);
    let q = kernel::sqdist_quantiles(sqdist, &[0.1, 0.5, 0.9]);
    let mut out = format!(
        "# quantiles q10={} q50={} q90={}\nlower,upper,count\n",
        fmt_f64(q[0]),
        fmt_f64(q[1]),
        fmt_f64(q[2])
    );
    for b in bins {
        out.push_str(&format!("{},{},{}\n", fmt_f64(b.lower), fmt_f64(b.upper), b.count));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a saved model together with the training window it was fitted on.
pub fn load_model(cfg: &PipelineConfig, model_path: &Path) -> Result<(QPModel, TimeSeries)> {
    let series = cfg.load_series()?;
    let train = cfg.training_window(&series)?;
    let model = QPModel::load(model_path, &train, cfg.cache_dir.as_deref())?;
    Ok((model, series))
}
