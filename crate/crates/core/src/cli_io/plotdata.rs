//! Tidy CSV for plotting. One observation per row.
//!
//! * trace: `s` followed by one column per traced quantity.
//! * slope: `s, <name>, fit`, where `fit` is the least-squares line over the
//!   trailing window (empty outside it); the fitted slope is in `slope`.
//! * histogram: `bin_left, bin_right, count`; counts sum to the number of
//!   finite inputs.

use crate::boundary_stats::lyapunov;
use crate::error::{Error, Result};

/// Named columns sampled along one path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotSeries {
    pub s: Vec<f64>,
    pub columns: Vec<(String, Vec<f64>)>,
}

fn write(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn trace_csv(series: &PlotSeries) -> Result<String> {
    let mut header = vec!["s"];
    header.extend(series.columns.iter().map(|(n, _)| n.as_str()));
    let rows = (0..series.s.len()).map(|i| {
        let mut r = vec![num(series.s[i])];
        r.extend(series.columns.iter().map(|(_, c)| num(c[i])));
        r
    });
    write(&header, rows)
}

/// Column `name` with the trailing-window fit alongside. Fewer than ten
/// points in the window leaves `fit` empty.
pub fn slope_csv(series: &PlotSeries, name: &str, window: f64) -> Result<String> {
    let y = series
        .columns
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::InvalidConfig(format!("no column `{name}`")))?;
    let fit = lyapunov(&series.s, y, window).ok().map(|(b, _)| {
        let start = ((series.s.len() as f64) * (1.0 - window)).floor() as usize;
        let (xs, ys) = (&series.s[start..], &y[start..]);
        let (mx, my) = (mean(xs), mean(ys));
        (start, b, my - b * mx)
    });
    let rows = (0..series.s.len()).map(|i| {
        let f = match fit {
            Some((start, b, c)) if i >= start => num(c + b * series.s[i]),
            _ => String::new(),
        };
        let slope = fit.map(|(_, b, _)| num(b)).unwrap_or_default();
        vec![num(series.s[i]), num(y[i]), f, slope]
    });
    write(&["s", name, "fit", "slope"], rows)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Equal-width bins over the finite range of `values`.
pub fn histogram_csv(values: &[f64], bins: usize) -> Result<String> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let header = ["bin_left", "bin_right", "count"];
    if v.is_empty() || bins == 0 {
        return write(&header, std::iter::empty());
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0u64; bins];
    for x in &v {
        let k = (((x - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    let rows = counts.iter().enumerate().map(|(k, c)| {
        let left = lo + k as f64 * width;
        let right = if k + 1 == bins && hi > lo { hi } else { left + width };
        vec![num(left), num(right), c.to_string()]
    });
    write(&header, rows)
}
