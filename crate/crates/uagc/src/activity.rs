//! Weekly activity-frequency table and timestamp features.
//!
//! The week is 2016 five-minute bins (7 days x 288), bin 0 = Monday
//! 00:00-00:05. Survey rows are binned per category, smoothed with a
//! circular Gaussian, and z-scored per category before feeding the
//! activity embedding.

use std::io::{BufRead, Write};

use chrono::{Datelike, NaiveDateTime, Timelike};
use thiserror::Error;

use crate::scalar::Scalar;

pub const BINS_PER_DAY: usize = 288;
pub const BINS_PER_WEEK: usize = 7 * BINS_PER_DAY;
/// Weekday one-hot plus time-of-day one-hot.
pub const TIMESTAMP_FEATURE_LEN: usize = 7 + BINS_PER_DAY;
pub const DEFAULT_CATEGORIES: usize = 9;
pub const DEFAULT_SMOOTHING_SIGMA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ActivityError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error("smoothing sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// One survey observation: an activity of a category starting at a
/// weekday/minute-of-day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurveyRow {
    /// 1-based category index.
    pub category: usize,
    /// 0 = Monday.
    pub weekday: usize,
    /// Minute of day, 0..=1439.
    pub start_minute: usize,
}

/// Per-category weekly frequencies, `n_categories x 2016` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityTable<T> {
    pub labels: Vec<String>,
    values: Vec<T>,
}

impl<T: Scalar> ActivityTable<T> {
    pub fn zeros(labels: Vec<String>) -> Self {
        let values = vec![T::zero(); labels.len() * BINS_PER_WEEK];
        Self { labels, values }
    }

    pub fn n_categories(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, category: usize) -> &[T] {
        &self.values[category * BINS_PER_WEEK..(category + 1) * BINS_PER_WEEK]
    }

    pub fn row_mut(&mut self, category: usize) -> &mut [T] {
        &mut self.values[category * BINS_PER_WEEK..(category + 1) * BINS_PER_WEEK]
    }

    pub fn get(&self, category: usize, bin: usize) -> T {
        self.values[category * BINS_PER_WEEK + bin]
    }

    /// All categories at one weekly bin, in label order.
    pub fn bin_vector(&self, bin: usize) -> Vec<T> {
        (0..self.n_categories()).map(|k| self.get(k, bin % BINS_PER_WEEK)).collect()
    }

    /// Writes `bin,<label>,...` with one row per weekly bin.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<(), ActivityError> {
        write!(out, "bin")?;
        for label in &self.labels {
            write!(out, ",{label}")?;
        }
        writeln!(out)?;
        for bin in 0..BINS_PER_WEEK {
            write!(out, "{bin}")?;
            for k in 0..self.n_categories() {
                write!(out, ",{}", self.get(k, bin))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv(input: impl BufRead) -> Result<Self, ActivityError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or(ActivityError::Format {
            line: 1,
            msg: "empty file".into(),
        })??;
        let mut cols = header.split(',');
        if cols.next() != Some("bin") {
            return Err(ActivityError::Format {
                line: 1,
                msg: format!("expected `bin,<labels>` header, got `{header}`"),
            });
        }
        let labels: Vec<String> = cols.map(str::to_string).collect();
        if labels.is_empty() {
            return Err(ActivityError::Format {
                line: 1,
                msg: "no category labels".into(),
            });
        }
        let mut table = Self::zeros(labels);
        let mut seen = 0usize;
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != table.n_categories() + 1 {
                return Err(ActivityError::Format {
                    line: lineno,
                    msg: format!("expected {} fields", table.n_categories() + 1),
                });
            }
            let bin: usize = fields[0].trim().parse().map_err(|_| ActivityError::Format {
                line: lineno,
                msg: format!("bad bin `{}`", fields[0]),
            })?;
            if bin >= BINS_PER_WEEK {
                return Err(ActivityError::Format {
                    line: lineno,
                    msg: format!("bin {bin} out of range"),
                });
            }
            for (k, field) in fields[1..].iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| ActivityError::Format {
                    line: lineno,
                    msg: format!("bad value `{field}`"),
                })?;
                table.values[k * BINS_PER_WEEK + bin] = T::from_f64(v);
            }
            seen += 1;
        }
        if seen != BINS_PER_WEEK {
            return Err(ActivityError::Format {
                line: 0,
                msg: format!("expected {BINS_PER_WEEK} bins, got {seen}"),
            });
        }
        Ok(table)
    }
}

/// Bins survey rows into a raw weekly histogram with `n_categories` rows
/// labeled `cat1..catK` (relabel via [`ActivityTable::labels`] if needed).
pub fn build_histogram<T: Scalar>(
    rows: impl IntoIterator<Item = SurveyRow>,
    n_categories: usize,
) -> Result<ActivityTable<T>, ActivityError> {
    let labels = (1..=n_categories).map(|k| format!("cat{k}")).collect();
    let mut table = ActivityTable::zeros(labels);
    for (i, row) in rows.into_iter().enumerate() {
        let rowno = i + 1;
        if row.category == 0 || row.category > n_categories {
            return Err(ActivityError::BadRow {
                row: rowno,
                msg: format!("category {} outside 1..={n_categories}", row.category),
            });
        }
        if row.weekday > 6 {
            return Err(ActivityError::BadRow {
                row: rowno,
                msg: format!("weekday {} outside 0..=6", row.weekday),
            });
        }
        if row.start_minute > 1439 {
            return Err(ActivityError::BadRow {
                row: rowno,
                msg: format!("start_minute {} outside 0..=1439", row.start_minute),
            });
        }
        let bin = row.weekday * BINS_PER_DAY + row.start_minute / 5;
        let slot = &mut table.row_mut(row.category - 1)[bin];
        *slot = *slot + T::one();
    }
    Ok(table)
}

/// Parses `category,weekday,start_minute` rows.
pub fn parse_survey_csv(input: impl BufRead) -> Result<Vec<SurveyRow>, ActivityError> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(ActivityError::Format {
        line: 1,
        msg: "empty file".into(),
    })??;
    if header.trim() != "category,weekday,start_minute" {
        return Err(ActivityError::Format {
            line: 1,
            msg: format!("expected `category,weekday,start_minute` header, got `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(ActivityError::Format {
                line: lineno,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| {
            s.trim().parse::<usize>().map_err(|_| ActivityError::Format {
                line: lineno,
                msg: format!("bad {what} `{s}`"),
            })
        };
        rows.push(SurveyRow {
            category: parse(fields[0], "category")?,
            weekday: parse(fields[1], "weekday")?,
            start_minute: parse(fields[2], "start_minute")?,
        });
    }
    Ok(rows)
}

/// Discrete Gaussian kernel truncated at +-4 sigma and renormalized to unit
/// mass, so circular convolution preserves per-category totals.
pub fn gaussian_kernel<T: Scalar>(sigma_bins: f64) -> Vec<T> {
    let radius = (4.0 * sigma_bins).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma_bins * sigma_bins)).exp()
        })
        .collect();
    let mass: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= mass;
    }
    kernel.into_iter().map(T::from_f64).collect()
}

/// Circular smoothing over the weekly axis, one category at a time.
pub fn smooth_histogram<T: Scalar>(
    table: &ActivityTable<T>,
    sigma_bins: f64,
) -> Result<ActivityTable<T>, ActivityError> {
    if !(sigma_bins.is_finite() && sigma_bins > 0.0) {
        return Err(ActivityError::BadSigma(sigma_bins));
    }
    let kernel: Vec<T> = gaussian_kernel(sigma_bins);
    let radius = kernel.len() / 2;
    let mut out = ActivityTable::zeros(table.labels.clone());
    for k in 0..table.n_categories() {
        let src = table.row(k);
        let dst = out.row_mut(k);
        for (bin, slot) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &w) in kernel.iter().enumerate() {
                let offset = bin + BINS_PER_WEEK + j - radius;
                acc += w * src[offset % BINS_PER_WEEK];
            }
            *slot = acc;
        }
    }
    Ok(out)
}

/// Z-scores each category row with the population standard deviation;
/// near-constant rows (std below 1e-12) become all zeros. When `center` is
/// false only the division is applied.
pub fn normalize_activity<T: Scalar>(table: &ActivityTable<T>, center: bool) -> ActivityTable<T> {
    let mut out = ActivityTable::zeros(table.labels.clone());
    let n = T::from_f64(BINS_PER_WEEK as f64);
    for k in 0..table.n_categories() {
        let src = table.row(k);
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / n;
        let std = var.sqrt();
        let dst = out.row_mut(k);
        if std < T::from_f64(1e-12) {
            continue; // stays zero
        }
        for (d, &s) in dst.iter_mut().zip(src) {
            let centered = if center { s - mean } else { s };
            *d = centered / std;
        }
    }
    out
}

/// Weekly bin of a timestamp (Monday 00:00 is bin 0).
pub fn weekly_bin(timestamp: NaiveDateTime) -> usize {
    let weekday = timestamp.weekday().num_days_from_monday() as usize;
    let minute = timestamp.hour() as usize * 60 + timestamp.minute() as usize;
    weekday * BINS_PER_DAY + minute / 5
}

/// Values for `p + q` consecutive 5-minute steps starting at
/// `start_timestamp`, indexing the weekly table modulo one week. Returns a
/// `(p + q) x n_categories` row-major matrix.
pub fn slice_window<T: Scalar>(
    table: &ActivityTable<T>,
    start_timestamp: NaiveDateTime,
    p: usize,
    q: usize,
) -> Vec<T> {
    let start_bin = weekly_bin(start_timestamp);
    let k = table.n_categories();
    let mut out = Vec::with_capacity((p + q) * k);
    for step in 0..p + q {
        out.extend(table.bin_vector((start_bin + step) % BINS_PER_WEEK));
    }
    out
}

/// Weekday one-hot concatenated with a 288-slot time-of-day one-hot.
pub fn timestamp_feature(timestamp: NaiveDateTime) -> Vec<f64> {
    let mut out = vec![0.0; TIMESTAMP_FEATURE_LEN];
    let weekday = timestamp.weekday().num_days_from_monday() as usize;
    let slot = (timestamp.hour() as usize * 60 + timestamp.minute() as usize) / 5;
    out[weekday] = 1.0;
    out[7 + slot] = 1.0;
    out
}
