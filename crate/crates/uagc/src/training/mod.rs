//! Dataset assembly, standardization, the training loop and evaluation.

pub mod metrics;
pub mod synthetic;
pub mod trainer;

pub use metrics::{last_repeat, masked_metrics, MetricAccumulator, StepMetrics};
pub use synthetic::{make_synthetic_dataset, SyntheticBundle};
pub use trainer::{evaluate, train, DatasetView, EpochLog, TrainConfig, TrainOutcome};

use std::io::{BufRead, Write};
use std::ops::Range;

use chrono::{NaiveDateTime, TimeDelta};
use thiserror::Error;

use crate::Real;

pub const STEP_MINUTES: i64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("timestamps must be strictly increasing at 5-minute spacing (line {0})")]
    IrregularSpacing(usize),
    #[error("train range has no observed values")]
    EmptyTrainRange,
    #[error("train data has zero standard deviation")]
    ZeroStd,
    #[error("{0}")]
    Mismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Optim(#[from] crate::diffengine::OptimError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

/// Speeds for N sensors at 5-minute steps, with an observation mask.
/// Zero-speed cells in the raw file are treated as sensor failures and
/// masked missing (unless loading opts out).
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    pub sensor_ids: Vec<String>,
    pub start: NaiveDateTime,
    /// T x N row-major; unobserved slots hold 0.
    values: Vec<Real>,
    mask: Vec<bool>,
    n_steps: usize,
}

impl TrafficSeries {
    pub fn new(
        sensor_ids: Vec<String>,
        start: NaiveDateTime,
        values: Vec<Real>,
        mask: Vec<bool>,
    ) -> Self {
        let n = sensor_ids.len();
        assert_eq!(values.len(), mask.len());
        assert!(n > 0 && values.len() % n == 0);
        let n_steps = values.len() / n;
        let mut values = values;
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        Self {
            sensor_ids,
            start,
            values,
            mask,
            n_steps,
        }
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + TimeDelta::minutes(STEP_MINUTES * step as i64)
    }

    /// Step index of a timestamp, when it lies exactly on the series grid.
    pub fn step_of(&self, t: NaiveDateTime) -> Option<usize> {
        let delta = t - self.start;
        let minutes = delta.num_minutes();
        if minutes < 0 || minutes % STEP_MINUTES != 0 || delta != TimeDelta::minutes(minutes) {
            return None;
        }
        let step = (minutes / STEP_MINUTES) as usize;
        (step < self.n_steps).then_some(step)
    }

    pub fn value(&self, step: usize, sensor: usize) -> Real {
        self.values[step * self.n_sensors() + sensor]
    }

    pub fn observed(&self, step: usize, sensor: usize) -> bool {
        self.mask[step * self.n_sensors() + sensor]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%d %H:%M:%S"))
        .ok()
}

/// Loads `timestamp,<sensor>,...` rows. Blank cells are missing; exact
/// zeros are masked missing when `zero_is_missing` (the sensor-failure
/// convention of loop-detector feeds).
pub fn load_traffic_csv(input: impl BufRead, zero_is_missing: bool) -> Result<TrafficSeries, TrainError> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(TrainError::Format {
        line: 1,
        msg: "empty file".into(),
    })??;
    let mut cols = header.split(',');
    if cols.next() != Some("timestamp") {
        return Err(TrainError::Format {
            line: 1,
            msg: format!("expected `timestamp,<sensors>` header, got `{header}`"),
        });
    }
    let sensor_ids: Vec<String> = cols.map(str::to_string).collect();
    if sensor_ids.is_empty() {
        return Err(TrainError::Format {
            line: 1,
            msg: "no sensor columns".into(),
        });
    }
    let n = sensor_ids.len();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut start = None;
    let mut prev: Option<NaiveDateTime> = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 {
            return Err(TrainError::Format {
                line: lineno,
                msg: format!("expected {} fields, got {}", n + 1, fields.len()),
            });
        }
        let t = parse_timestamp(fields[0]).ok_or(TrainError::Format {
            line: lineno,
            msg: format!("bad timestamp `{}`", fields[0]),
        })?;
        if let Some(p) = prev {
            if t - p != TimeDelta::minutes(STEP_MINUTES) {
                return Err(TrainError::IrregularSpacing(lineno));
            }
        } else {
            start = Some(t);
        }
        prev = Some(t);
        for cell in &fields[1..] {
            let cell = cell.trim();
            if cell.is_empty() {
                values.push(0.0);
                mask.push(false);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| TrainError::Format {
                line: lineno,
                msg: format!("bad value `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(TrainError::Format {
                    line: lineno,
                    msg: format!("non-finite value `{cell}`"),
                });
            }
            if zero_is_missing && v == 0.0 {
                values.push(0.0);
                mask.push(false);
            } else {
                values.push(v);
                mask.push(true);
            }
        }
    }
    let start = start.ok_or(TrainError::Format {
        line: 2,
        msg: "no data rows".into(),
    })?;
    Ok(TrafficSeries::new(sensor_ids, start, values, mask))
}

/// Writes the canonical traffic CSV (missing cells blank, ISO timestamps).
pub fn write_traffic_csv(series: &TrafficSeries, out: &mut impl Write) -> Result<(), TrainError> {
    write!(out, "timestamp")?;
    for id in &series.sensor_ids {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    for t in 0..series.n_steps() {
        write!(out, "{}", series.timestamp(t).format("%Y-%m-%dT%H:%M:%S"))?;
        for s in 0..series.n_sensors() {
            if series.observed(t, s) {
                write!(out, ",{}", series.value(t, s))?;
            } else {
                write!(out, ",")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Affine speed standardization fit on training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardScaler {
    pub mean: Real,
    pub std: Real,
}

impl StandardScaler {
    pub fn apply(&self, x: Real) -> Real {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: Real) -> Real {
        z * self.std + self.mean
    }
}

/// Chronological train/val/test step ranges plus the train-only scaler.
/// Windows are anchored inside one range and never straddle boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub scaler: StandardScaler,
}

impl DatasetSplit {
    /// 70/10/20 chronological split with the scaler fit on observed train
    /// entries only.
    pub fn chronological(series: &TrafficSeries) -> Result<Self, TrainError> {
        Self::with_fractions(series, 0.7, 0.1)
    }

    pub fn with_fractions(
        series: &TrafficSeries,
        train_frac: f64,
        val_frac: f64,
    ) -> Result<Self, TrainError> {
        let t = series.n_steps();
        let train_end = (t as f64 * train_frac).floor() as usize;
        let val_end = (t as f64 * (train_frac + val_frac)).floor() as usize;
        let train = 0..train_end;
        let mut count = 0u64;
        let mut sum = 0.0;
        for step in train.clone() {
            for s in 0..series.n_sensors() {
                if series.observed(step, s) {
                    count += 1;
                    sum += series.value(step, s);
                }
            }
        }
        if count == 0 {
            return Err(TrainError::EmptyTrainRange);
        }
        let mean = sum / count as f64;
        let mut sq = 0.0;
        for step in train.clone() {
            for s in 0..series.n_sensors() {
                if series.observed(step, s) {
                    sq += (series.value(step, s) - mean).powi(2);
                }
            }
        }
        let std = (sq / count as f64).sqrt();
        if std <= 1e-12 {
            return Err(TrainError::ZeroStd);
        }
        Ok(Self {
            train,
            val: train_end..val_end,
            test: val_end..t,
            scaler: StandardScaler { mean, std },
        })
    }

    /// Window start indices (first history step) fully inside a range.
    pub fn windows_in(&self, range: &Range<usize>, p: usize, q: usize) -> Vec<usize> {
        if range.end < range.start + p + q {
            return Vec::new();
        }
        (range.start..=range.end - p - q).collect()
    }
}
