//! Plain-text and CSV table rendering.

use crate::error::{Error, Result};
use crate::resample::Summary;

/// Marker for a confidence interval of zero width (every resample agreed).
pub const NO_INTERVAL: &str = "[†]";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let mut row: Vec<String> = row.into_iter().map(Into::into).collect();
        row.resize(self.header.len(), String::new());
        self.rows.push(row);
    }

    /// Columns padded to a common width; the first column is left-aligned,
    /// the rest right-aligned.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                std::iter::once(&self.header)
                    .chain(&self.rows)
                    .map(|r| r[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let mut out = String::new();
            for (c, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                let pad = w - cell.chars().count();
                if c == 0 {
                    out.push_str(cell);
                    out.push_str(&" ".repeat(pad));
                } else {
                    out.push_str(&" ".repeat(pad));
                    out.push_str(cell);
                }
            }
            out.trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Malformed {
            row: 0,
            message: format!("csv rendering: {e}"),
        };
        w.write_record(&self.header).map_err(err)?;
        for row in &self.rows {
            w.write_record(row).map_err(err)?;
        }
        w.into_inner()
            .map_err(|e| Error::Malformed { row: 0, message: e.to_string() })
    }
}

/// Fixed-decimal value; blank when undefined.
pub fn fixed(value: Option<f64>, decimals: usize) -> String {
    match value {
        Some(v) if v.is_finite() => format!("{v:.decimals$}"),
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

/// Shortest round-trip representation; blank when undefined.
pub fn exact(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// "0.975±0.003", or "1.000 [†]" for a zero-width interval.
pub fn mean_pm(summary: &Summary) -> String {
    if summary.ci_high == summary.ci_low {
        format!("{:.3} {NO_INTERVAL}", summary.mean)
    } else {
        format!("{:.3}±{:.3}", summary.mean, summary.half_width())
    }
}

/// "0.926 (0.920-0.932)".
pub fn with_interval(value: f64, low: f64, high: f64) -> String {
    if low == high {
        format!("{value:.3} {NO_INTERVAL}")
    } else {
        format!("{value:.3} ({low:.3}-{high:.3})")
    }
}

/// p-values below 0.001 print as "<0.001"; a trailing `*` marks significance.
pub fn p_value(p: f64, significant: bool) -> String {
    let mut s = if p.is_nan() {
        String::new()
    } else if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    };
    if significant {
        s.push('*');
    }
    s
}

/// Thousands separators, as in "13,390".
pub fn count(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// File-name-safe form of a label.
pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        match ch {
            '<' => out.push_str("lt"),
            '>' => out.push_str("gt"),
            '=' => out.push('-'),
            c if c.is_ascii_alphanumeric() || c == '-' || c == '_' => out.push(c),
            _ => out.push('_'),
        }
    }
    out
}
