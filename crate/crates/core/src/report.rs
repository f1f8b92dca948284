//! Human-readable period tables.

use std::fmt;

use crate::freqfilter::FrequencySelection;

const MINUTE: f64 = 60.0;
const HOUR: f64 = 3600.0;
const DAY: f64 = 86400.0;

/// Renders a period in the largest natural unit with three significant
/// figures, e.g. `12 h`, `3.5 d`, `45 min`. `None` is the mean term.
pub fn format_period(period_s: Option<f64>) -> String {
    let Some(p) = period_s else {
        return "∞ (mean)".to_string();
    };
    if !p.is_finite() {
        return "∞ (mean)".to_string();
    }
    let (value, unit) = if p >= DAY {
        (p / DAY, "d")
    } else if p >= HOUR {
        (p / HOUR, "h")
    } else if p >= MINUTE {
        (p / MINUTE, "min")
    } else {
        (p, "s")
    };
    format!("{} {unit}", three_sig(value))
}

fn three_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (2 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodRow {
    pub bin: usize,
    pub period: String,
    pub amplitude: f64,
}

/// Selected periods split at one day, like a long-period and a
/// short-period panel. The mean term goes with the long periods.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodReport {
    pub long: Vec<PeriodRow>,
    pub short: Vec<PeriodRow>,
}

pub fn report_periods(sel: &FrequencySelection) -> PeriodReport {
    let mut long = Vec::new();
    let mut short = Vec::new();
    for i in 0..sel.len() {
        let row = PeriodRow {
            bin: sel.indices[i],
            period: format_period(sel.periods[i]),
            amplitude: sel.amplitudes[i],
        };
        match sel.periods[i] {
            Some(p) if p < DAY => short.push(row),
            _ => long.push(row),
        }
    }
    PeriodReport { long, short }
}

impl fmt::Display for PeriodReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (title, rows) in [("periods >= 1 d", &self.long), ("periods < 1 d", &self.short)] {
            writeln!(f, "{title}")?;
            writeln!(f, "{:>8}  {:>12}  {:>12}", "bin", "period", "amplitude")?;
            for r in rows {
                writeln!(f, "{:>8}  {:>12}  {:>12.4e}", r.bin, r.period, r.amplitude)?;
            }
        }
        Ok(())
    }
}
