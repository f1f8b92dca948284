//! Multivariate time series: ingestion, regular resampling, windowing and
//! delay-coordinate embedding.
//!
//! All times are stored as seconds. Timestamps in input files may be plain
//! numbers (seconds) or ISO-8601 strings; both are converted on read.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fmt_f64;

/// A k-channel real-valued series.
///
/// A series produced by [`load_csv`] may be irregularly sampled and may carry
/// missing cells (stored as NaN); it is flagged `regular == false`. Every
/// other constructor yields a regular, NaN-free series, and downstream
/// numerical code refuses series that are not.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: DMatrix<f64>,
    times: Vec<f64>,
    dt: f64,
    t0: f64,
    channel_names: Vec<String>,
    regular: bool,
}

impl TimeSeries {
    /// Regular series with sample `n` at `t0 + n * dt`.
    pub fn new(values: DMatrix<f64>, dt: f64, t0: f64, channel_names: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Data("time series needs at least one sample and one channel".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if channel_names.len() != values.ncols() {
            return Err(Error::Dimension {
                expected: values.ncols(),
                got: channel_names.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::Data(format!(
                "non-finite value at row {r}, channel '{}'",
                channel_names[c]
            )));
        }
        let times = (0..values.nrows()).map(|n| t0 + n as f64 * dt).collect();
        Ok(TimeSeries {
            values,
            times,
            dt,
            t0,
            channel_names,
            regular: true,
        })
    }

    /// Regular series with default channel names `ch0, ch1, ...`.
    pub fn from_values(values: DMatrix<f64>, dt: f64) -> Result<Self> {
        let names = (0..values.ncols()).map(|c| format!("ch{c}")).collect();
        Self::new(values, dt, 0.0, names)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn is_regular(&self) -> bool {
        self.regular
    }

    /// Row `n` as a k-vector.
    pub fn row(&self, n: usize) -> Vec<f64> {
        self.values.row(n).iter().copied().collect()
    }

    /// Fails unless the series is regular and free of missing values.
    pub fn ensure_regular(&self) -> Result<()> {
        if !self.regular {
            return Err(Error::Data(
                "series is irregular or has missing values; resample it first".into(),
            ));
        }
        Ok(())
    }

    /// Per-channel z-scoring. Returns the standardized series and the
    /// `(mean, std)` pair of every channel. Constant channels keep std 1.
    pub fn standardize(&self) -> Result<(TimeSeries, Vec<(f64, f64)>)> {
        self.ensure_regular()?;
        let n = self.len() as f64;
        let mut out = self.values.clone();
        let mut stats = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let col = self.values.column(c);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            for r in 0..self.len() {
                out[(r, c)] = (self.values[(r, c)] - mean) / std;
            }
            stats.push((mean, std));
        }
        let series = TimeSeries {
            values: out,
            ..self.clone()
        };
        Ok((series, stats))
    }

    /// Writes the series as CSV: a time column (seconds) followed by one
    /// column per channel, floats with 17 significant digits.
    pub fn write_csv(&self, path: &Path, time_column: &str) -> Result<()> {
        let mut buf = Vec::new();
        write!(buf, "{time_column}").unwrap();
        for name in &self.channel_names {
            write!(buf, ",{name}").unwrap();
        }
        writeln!(buf).unwrap();
        for n in 0..self.len() {
            write!(buf, "{}", fmt_f64(self.times[n])).unwrap();
            for c in 0..self.channels() {
                write!(buf, ",{}", fmt_f64(self.values[(n, c)])).unwrap();
            }
            writeln!(buf).unwrap();
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Which columns of a CSV file to read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub time_column: String,
    /// `None` selects every column except the time column.
    pub value_columns: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(time_column: impl Into<String>, value_columns: Vec<String>) -> Self {
        CsvSchema {
            time_column: time_column.into(),
            value_columns: Some(value_columns),
        }
    }

    pub fn all_channels(time_column: impl Into<String>) -> Self {
        CsvSchema {
            time_column: time_column.into(),
            value_columns: None,
        }
    }
}

/// Parses a timestamp given as seconds or as ISO-8601 (naive times are UTC).
pub fn parse_timestamp(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64 + dt.timestamp_subsec_nanos() as f64 * 1e-9);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            let utc = dt.and_utc();
            return Some(utc.timestamp() as f64 + utc.timestamp_subsec_nanos() as f64 * 1e-9);
        }
    }
    None
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

/// Reads a CSV with a header row. Rows stay in file order; timestamps must be
/// strictly increasing. The returned series is flagged irregular with `dt` set
/// to the median spacing; pass it through [`resample`] before analysis.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let time_idx = headers
        .iter()
        .position(|h| *h == schema.time_column)
        .ok_or_else(|| Error::Config(format!("time column '{}' not in header", schema.time_column)))?;
    let names: Vec<String> = match &schema.value_columns {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != time_idx)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if names.is_empty() {
        return Err(Error::Config("empty channel selection".into()));
    }
    let value_idx: Vec<usize> = names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("column '{name}' not in header")))
        })
        .collect::<Result<_>>()?;

    let mut times = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut bad_lines = Vec::new();
    let mut details = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                bad_lines.push(line);
                details.push(format!("line {line}: {e}"));
                continue;
            }
        };
        if record.len() != headers.len() {
            bad_lines.push(line);
            details.push(format!("line {line}: expected {} fields, found {}", headers.len(), record.len()));
            continue;
        }
        let Some(t) = parse_timestamp(&record[time_idx]) else {
            bad_lines.push(line);
            details.push(format!("line {line}, column '{}': bad timestamp '{}'", schema.time_column, &record[time_idx]));
            continue;
        };
        let mut row = Vec::with_capacity(value_idx.len());
        let mut ok = true;
        for (&ci, name) in value_idx.iter().zip(&names) {
            let cell = &record[ci];
            if is_missing(cell) {
                row.push(f64::NAN);
            } else {
                match cell.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(v),
                    _ => {
                        ok = false;
                        details.push(format!("line {line}, column '{name}': non-numeric value '{cell}'"));
                    }
                }
            }
        }
        if !ok {
            bad_lines.push(line);
            continue;
        }
        times.push(t);
        rows.push(row);
    }
    if !bad_lines.is_empty() {
        details.truncate(5);
        return Err(Error::MalformedRows {
            lines: bad_lines,
            detail: details.join("; "),
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    if let Some(w) = times.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Data(format!(
            "timestamps not strictly increasing at data row {} ({} then {})",
            w + 2,
            times[w],
            times[w + 1]
        )));
    }

    let k = names.len();
    let values = DMatrix::from_fn(rows.len(), k, |r, c| rows[r][c]);
    let dt = if times.len() > 1 {
        let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_by(f64::total_cmp);
        gaps[gaps.len() / 2]
    } else {
        1.0
    };
    let regular = is_regular_grid(&times, dt) && values.iter().all(|v| v.is_finite());
    Ok(TimeSeries {
        values,
        t0: times[0],
        times,
        dt,
        channel_names: names,
        regular,
    })
}

fn is_regular_grid(times: &[f64], dt: f64) -> bool {
    let t0 = times[0];
    times
        .iter()
        .enumerate()
        .all(|(n, &t)| (t - (t0 + n as f64 * dt)).abs() <= 1e-9 * dt.max(1.0))
}

/// Interpolation used by [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    /// Hold the most recent observation.
    Previous,
    Linear,
}

impl std::str::FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "previous" | "hold" | "previous-value" => Ok(ResampleMethod::Previous),
            "linear" => Ok(ResampleMethod::Linear),
            other => Err(Error::Config(format!("unknown resample method '{other}'"))),
        }
    }
}

/// Resamples onto the grid `t0, t0 + dt, ...` up to the last timestamp,
/// filling missing cells with the chosen method. A grid point inside a gap
/// between valid observations wider than `max_gap` (default `10 * dt`) is
/// an error.
pub fn resample(series: &TimeSeries, dt: f64, method: ResampleMethod, max_gap: Option<f64>) -> Result<TimeSeries> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let max_gap = max_gap.unwrap_or(10.0 * dt);
    let times = series.times();
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let slack = 1e-9 * dt;
    if dt > span + slack {
        return Err(Error::Config(format!("dt {dt} exceeds total span {span}")));
    }
    let n_out = ((span + slack) / dt).floor() as usize + 1;
    let grid: Vec<f64> = (0..n_out).map(|n| t0 + n as f64 * dt).collect();

    let k = series.channels();
    let mut out = DMatrix::zeros(n_out, k);
    for c in 0..k {
        let valid: Vec<(f64, f64)> = times
            .iter()
            .zip(series.values.column(c).iter())
            .filter(|(_, v)| v.is_finite())
            .map(|(&t, &v)| (t, v))
            .collect();
        if valid.is_empty() {
            return Err(Error::Data(format!("channel '{}' has no valid samples", series.channel_names[c])));
        }
        for (n, &t) in grid.iter().enumerate() {
            // index of the last valid sample at or before t
            let after = valid.partition_point(|&(ts, _)| ts <= t + slack);
            if after == 0 {
                return Err(Error::Data(format!(
                    "channel '{}' has no observation at or before t={t}",
                    series.channel_names[c]
                )));
            }
            let (ta, va) = valid[after - 1];
            let exact = (t - ta).abs() <= slack;
            let next = valid.get(after).copied();
            if !exact {
                let gap = match next {
                    Some((tb, _)) => tb - ta,
                    None => t - ta,
                };
                if gap > max_gap {
                    return Err(Error::Data(format!(
                        "channel '{}': gap of {gap} s around t={t} exceeds max gap {max_gap} s",
                        series.channel_names[c]
                    )));
                }
            }
            out[(n, c)] = match (method, next) {
                _ if exact => va,
                (ResampleMethod::Previous, _) | (ResampleMethod::Linear, None) => va,
                (ResampleMethod::Linear, Some((tb, vb))) => va + (vb - va) * ((t - ta) / (tb - ta)),
            };
        }
    }
    TimeSeries::new(out, dt, t0, series.channel_names.clone())
}

/// Contiguous sub-series `[start, end)`.
pub fn window(series: &TimeSeries, start: usize, end: usize) -> Result<TimeSeries> {
    if start >= end || end > series.len() {
        return Err(Error::Config(format!(
            "window [{start}, {end}) invalid for series of length {}",
            series.len()
        )));
    }
    let values = series.values.rows(start, end - start).into_owned();
    let times = series.times[start..end].to_vec();
    let t0 = if series.regular {
        series.t0 + start as f64 * series.dt
    } else {
        times[0]
    };
    Ok(TimeSeries {
        values,
        times,
        dt: series.dt,
        t0,
        channel_names: series.channel_names.clone(),
        regular: series.regular,
    })
}

/// Delay-coordinate view of a series: row `n` is `(y_n, y_{n+1}, ..., y_{n+q})`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayEmbedding {
    points: Vec<f64>,
    rows: usize,
    channels: usize,
    q: usize,
    dt: f64,
}

impl DelayEmbedding {
    /// Builds an embedding from raw row-major points of width `channels * (q + 1)`.
    pub fn from_points(points: Vec<f64>, channels: usize, q: usize, dt: f64) -> Result<Self> {
        let dim = channels * (q + 1);
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: points.len(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding contains non-finite values".into()));
        }
        Ok(DelayEmbedding {
            rows: points.len() / dim,
            points,
            channels,
            q,
            dt,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Embedding dimension `k (q + 1)`.
    pub fn dim(&self) -> usize {
        self.channels * (self.q + 1)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn delays(&self) -> usize {
        self.q
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn point(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.points[n * d..(n + 1) * d]
    }

    /// Row-major storage, `len() * dim()` values.
    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim(), &self.points)
    }

    /// Copy with every coordinate multiplied by `c`.
    pub fn scaled(&self, c: f64) -> DelayEmbedding {
        DelayEmbedding {
            points: self.points.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Stacks `q` delays: row `n` concatenates source rows `n..=n+q`.
pub fn delay_embed(series: &TimeSeries, q: usize) -> Result<DelayEmbedding> {
    series.ensure_regular()?;
    let n = series.len();
    if q >= n {
        return Err(Error::Config(format!("delay count {q} must be below series length {n}")));
    }
    let k = series.channels();
    let rows = n - q;
    let mut points = Vec::with_capacity(rows * k * (q + 1));
    for r in 0..rows {
        for s in r..=r + q {
            points.extend(series.values.row(s).iter());
        }
    }
    DelayEmbedding::from_points(points, k, q, series.dt)
}
