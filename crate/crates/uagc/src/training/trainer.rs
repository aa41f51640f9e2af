//! Training loop and batched inference.
//!
//! Loss is masked MAE on standardized speeds; reported numbers are always
//! de-standardized mph. Batches are sharded across worker threads, each
//! shard running its own tape; gradients are reduced in shard order, so a
//! run is reproducible for a fixed seed and thread count.

use std::ops::Range;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::activity::{timestamp_feature, weekly_bin, ActivityTable};
use crate::diffengine::{AdamParams, ParamId, Tensor};
use crate::models::{BatchInputs, EmbeddingMode, Forecaster, TeacherInputs};
use crate::training::{
    metrics::{last_repeat, MetricAccumulator},
    DatasetSplit, TrafficSeries, TrainError,
};
use crate::{Real, Tape};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Early stopping: halt after this many epochs without a new best
    /// validation loss.
    pub patience: usize,
    /// Learning-rate schedule: divide by 10 after this many consecutive
    /// non-improving epochs.
    pub lr_reduce_trials: usize,
    pub lr_factor: f64,
    pub seed: u64,
    pub threads: usize,
    /// Inverse-sigmoid scheduled-sampling decay constant; None is plain
    /// teacher forcing. Only the recurrent decoders sample.
    pub scheduled_sampling_tau: Option<f64>,
    /// With timing off the per-epoch seconds log as 0.0, making two runs
    /// byte-identical.
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.01,
            max_epochs: 100,
            patience: 5,
            lr_reduce_trials: 2,
            lr_factor: 0.1,
            seed: 1,
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            scheduled_sampling_tau: None,
            log_timing: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// The data a model trains and evaluates on: the raw series, its split and
/// scaler, and the (already normalized) activity table for AE mode.
pub struct DatasetView<'a> {
    pub series: &'a TrafficSeries,
    pub split: &'a DatasetSplit,
    pub activity: Option<&'a ActivityTable<Real>>,
}

impl<'a> DatasetView<'a> {
    pub fn validate_for(&self, model: &Forecaster) -> Result<(), TrainError> {
        if self.series.n_sensors() != model.cfg.n_sensors {
            return Err(TrainError::Mismatch(format!(
                "traffic file has {} sensors, model expects {}",
                self.series.n_sensors(),
                model.cfg.n_sensors
            )));
        }
        if model.cfg.embedding == EmbeddingMode::Activity {
            let table = self
                .activity
                .ok_or_else(|| TrainError::Mismatch("activity table required for AE mode".into()))?;
            if table.n_categories() != model.cfg.n_activity_categories {
                return Err(TrainError::Mismatch(format!(
                    "activity table has {} categories, model expects {}",
                    table.n_categories(),
                    model.cfg.n_activity_categories
                )));
            }
        }
        Ok(())
    }

    fn embedding_row(&self, mode: EmbeddingMode, step: usize) -> Vec<Real> {
        match mode {
            EmbeddingMode::Activity => self
                .activity
                .expect("validated")
                .bin_vector(weekly_bin(self.series.timestamp(step))),
            EmbeddingMode::Timestamp => timestamp_feature(self.series.timestamp(step)),
            EmbeddingMode::None => Vec::new(),
        }
    }
}

struct BatchData {
    inputs: BatchInputs,
    /// Q tensors (B*N, 1) of standardized teacher values.
    teacher: Vec<Tensor<Real>>,
    /// (B*N, Q, 1) standardized truth and its observation mask.
    truth_std: Tensor<Real>,
    mask: Tensor<Real>,
    observed: u64,
}

fn build_batch(view: &DatasetView, model: &Forecaster, windows: &[usize]) -> BatchData {
    let cfg = &model.cfg;
    let (p, q, n) = (cfg.p_steps, cfg.q_steps, cfg.n_sensors);
    let b = windows.len();
    let rows = b * n;
    let scaler = view.split.scaler;

    let mut history = Vec::with_capacity(p);
    for t in 0..p {
        let mut vals = vec![0.0; rows];
        for (wi, &w) in windows.iter().enumerate() {
            for s in 0..n {
                if view.series.observed(w + t, s) {
                    vals[wi * n + s] = scaler.apply(view.series.value(w + t, s));
                }
            }
        }
        history.push(Tensor::from_vec(&[rows, 1], vals));
    }

    let embedding_rows = if cfg.embedding == EmbeddingMode::None {
        Vec::new()
    } else {
        let k_in = cfg.embedding_input_width();
        (0..p + q)
            .map(|t| {
                let mut vals = Vec::with_capacity(b * k_in);
                for &w in windows {
                    vals.extend(view.embedding_row(cfg.embedding, w + t));
                }
                Tensor::from_vec(&[b, k_in], vals)
            })
            .collect()
    };

    let mut teacher = Vec::with_capacity(q);
    let mut truth = vec![0.0; rows * q];
    let mut mask = vec![0.0; rows * q];
    let mut observed = 0u64;
    for qi in 0..q {
        let mut vals = vec![0.0; rows];
        for (wi, &w) in windows.iter().enumerate() {
            for s in 0..n {
                let step = w + p + qi;
                if view.series.observed(step, s) {
                    let z = scaler.apply(view.series.value(step, s));
                    vals[wi * n + s] = z;
                    truth[(wi * n + s) * q + qi] = z;
                    mask[(wi * n + s) * q + qi] = 1.0;
                    observed += 1;
                }
            }
        }
        teacher.push(Tensor::from_vec(&[rows, 1], vals));
    }

    BatchData {
        inputs: BatchInputs {
            batch: b,
            history,
            embedding_rows,
        },
        teacher,
        truth_std: Tensor::from_vec(&[rows, q, 1], truth),
        mask: Tensor::from_vec(&[rows, q, 1], mask),
        observed,
    }
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x243f6a8885a308d3u64;
    for &p in parts {
        state ^= p;
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        state = z ^ (z >> 31);
    }
    state
}

fn shards_of(windows: &[usize], threads: usize) -> Vec<&[usize]> {
    let per = windows.len().div_ceil(threads.max(1));
    windows.chunks(per.max(1)).collect()
}

/// Forward + masked-MAE-sum + backward for one shard. Returns the raw
/// gradient of the loss sum, the loss sum and the observed count.
#[allow(clippy::type_complexity)]
fn run_shard(
    model: &Forecaster,
    view: &DatasetView,
    windows: &[usize],
    feed_probability: f64,
    rng_seed: u64,
) -> (Vec<(ParamId, Tensor<Real>)>, f64, u64) {
    let data = build_batch(view, model, windows);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let preds = model.forward(
        &mut tape,
        &data.inputs,
        Some(TeacherInputs {
            values: &data.teacher,
            feed_probability,
            rng: Some(&mut rng),
        }),
    );
    let truth = tape.input(data.truth_std);
    let mask = tape.input(data.mask);
    let diff = tape.sub(preds, truth);
    let abs = tape.abs(diff);
    let masked = tape.mul(abs, mask);
    let loss = tape.sum(masked);
    let loss_value = tape.value(loss).data()[0];
    let grads = tape.backward(loss);
    (grads, loss_value, data.observed)
}

/// Masked MAE (standardized units) of teacher-free predictions over a
/// window list.
fn inference_mae(
    model: &Forecaster,
    view: &DatasetView,
    windows: &[usize],
    batch_size: usize,
    pool: &rayon::ThreadPool,
    threads: usize,
) -> (f64, u64) {
    let mut abs_sum = 0.0;
    let mut count = 0u64;
    for chunk in windows.chunks(batch_size.max(1)) {
        let shards = shards_of(chunk, threads);
        let results: Vec<(f64, u64)> = pool.install(|| {
            shards
                .par_iter()
                .map(|shard| {
                    let data = build_batch(view, model, shard);
                    let mut tape = Tape::new();
                    let preds = model.forward(&mut tape, &data.inputs, None);
                    let truth = tape.input(data.truth_std);
                    let mask = tape.input(data.mask);
                    let diff = tape.sub(preds, truth);
                    let abs = tape.abs(diff);
                    let masked = tape.mul(abs, mask);
                    let loss = tape.sum(masked);
                    (tape.value(loss).data()[0], data.observed)
                })
                .collect()
        });
        for (s, c) in results {
            abs_sum += s;
            count += c;
        }
    }
    (abs_sum, count)
}

/// Trains in place; on return the parameter bank holds the best-validation
/// weights and the scaler entries. The decoder is teacher-forced (or
/// scheduled-sampled); validation always runs teacher-free.
pub fn train(
    model: &mut Forecaster,
    view: &DatasetView,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    view.validate_for(model)?;
    let (p, q) = (model.cfg.p_steps, model.cfg.q_steps);
    let train_windows = view.split.windows_in(&view.split.train, p, q);
    let val_windows = view.split.windows_in(&view.split.val, p, q);
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(TrainError::Mismatch(format!(
            "not enough steps for P={p}, Q={q} windows (train {}, val {})",
            train_windows.len(),
            val_windows.len()
        )));
    }

    for (name, value) in [
        ("scaler.mean", view.split.scaler.mean),
        ("scaler.std", view.split.scaler.std),
    ] {
        let id = model.store.id(name).expect("scaler entries exist");
        model.store.get_mut(id).value = Tensor::scalar(value);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .expect("thread pool");

    let mut lr = cfg.learning_rate;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = model.store.values_snapshot();
    let mut since_best = 0usize;
    let mut since_lr_drop = 0usize;
    let mut adam_steps = 0u64;
    let mut global_step = 0u64;
    let mut logs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order = train_windows.clone();
        {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64]));
            order.shuffle(&mut rng);
        }

        let mut epoch_abs = 0.0;
        let mut epoch_count = 0u64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let feed_probability = match cfg.scheduled_sampling_tau {
                Some(tau) => tau / (tau + (global_step as f64 / tau).exp()),
                None => 1.0,
            };
            let shards = shards_of(chunk, cfg.threads);
            let results: Vec<(Vec<(ParamId, Tensor<Real>)>, f64, u64)> = pool.install(|| {
                shards
                    .par_iter()
                    .enumerate()
                    .map(|(si, shard)| {
                        let rng_seed =
                            mix_seed(&[cfg.seed, epoch as u64, batch_idx as u64, si as u64]);
                        run_shard(model, view, shard, feed_probability, rng_seed)
                    })
                    .collect()
            });

            let total: u64 = results.iter().map(|(_, _, c)| c).sum();
            if total == 0 {
                continue;
            }
            let loss_sum: f64 = results.iter().map(|(_, s, _)| s).sum();
            if !loss_sum.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let inv = 1.0 / total as f64;
            model.store.zero_grads();
            for (grads, _, _) in &results {
                for (id, g) in grads {
                    let mut scaled = g.clone();
                    scaled.scale_assign(inv);
                    model.store.accumulate_grads(&[(*id, scaled)]);
                }
            }
            adam_steps += 1;
            model.store.adam_step(lr, AdamParams::default(), adam_steps)?;
            epoch_abs += loss_sum;
            epoch_count += total;
            global_step += 1;
        }

        let train_mae = if epoch_count > 0 {
            epoch_abs / epoch_count as f64 * view.split.scaler.std
        } else {
            f64::NAN
        };
        let (val_abs, val_count) =
            inference_mae(model, view, &val_windows, cfg.batch_size, &pool, cfg.threads);
        let val_mae = if val_count > 0 {
            val_abs / val_count as f64 * view.split.scaler.std
        } else {
            f64::NAN
        };
        let seconds = if cfg.log_timing {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        };
        logs.push(EpochLog {
            epoch,
            train_mae,
            val_mae,
            lr,
            seconds,
        });

        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best_snapshot = model.store.values_snapshot();
            since_best = 0;
            since_lr_drop = 0;
        } else {
            since_best += 1;
            since_lr_drop += 1;
            if since_lr_drop >= cfg.lr_reduce_trials {
                lr *= cfg.lr_factor;
                since_lr_drop = 0;
            }
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    model.store.restore_values(&best_snapshot);
    let epochs_run = logs.len();
    Ok(TrainOutcome {
        logs,
        best_val_mae: best_val,
        best_epoch,
        epochs_run,
    })
}

/// Teacher-free predictions for a window list, de-standardized to mph.
/// Returns one `(Q * N)` row-major (step-major) vector per window.
pub fn predict_windows(
    model: &Forecaster,
    view: &DatasetView,
    windows: &[usize],
) -> Vec<Vec<Real>> {
    let (q, n) = (model.cfg.q_steps, model.cfg.n_sensors);
    let data = build_batch(view, model, windows);
    let mut tape = Tape::new();
    let preds = model.forward(&mut tape, &data.inputs, None);
    let pv = tape.value(preds);
    let scaler = view.split.scaler;
    windows
        .iter()
        .enumerate()
        .map(|(wi, _)| {
            let mut out = vec![0.0; q * n];
            for s in 0..n {
                for step in 0..q {
                    out[step * n + s] = scaler.invert(pv.data()[(wi * n + s) * q + step]);
                }
            }
            out
        })
        .collect()
}

/// Evaluates teacher-free predictions over a window list, in mph against
/// the raw observed values.
pub fn evaluate(
    model: &Forecaster,
    view: &DatasetView,
    windows: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<MetricAccumulator, TrainError> {
    view.validate_for(model)?;
    let (p, q, n) = (model.cfg.p_steps, model.cfg.q_steps, model.cfg.n_sensors);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    let mut acc = MetricAccumulator::new(q);
    for chunk in windows.chunks(batch_size.max(1)) {
        let shards = shards_of(chunk, threads);
        let parts: Vec<MetricAccumulator> = pool.install(|| {
            shards
                .par_iter()
                .map(|shard| {
                    let mut local = MetricAccumulator::new(q);
                    let preds = predict_windows(model, view, shard);
                    for (wi, &w) in shard.iter().enumerate() {
                        let mut truth = vec![0.0; q * n];
                        let mut mask = vec![false; q * n];
                        for step in 0..q {
                            for s in 0..n {
                                truth[step * n + s] = view.series.value(w + p + step, s);
                                mask[step * n + s] = view.series.observed(w + p + step, s);
                            }
                        }
                        local.add_window(&preds[wi], &truth, &mask);
                    }
                    local
                })
                .collect()
        });
        for part in parts {
            acc.merge(&part);
        }
    }
    Ok(acc)
}

/// The last-value baseline over the same windows, in mph.
pub fn evaluate_last_repeat(
    view: &DatasetView,
    windows: &[usize],
    p: usize,
    q: usize,
) -> MetricAccumulator {
    let n = view.series.n_sensors();
    let mut acc = MetricAccumulator::new(q);
    for &w in windows {
        let mut hist = vec![0.0; p * n];
        let mut hist_mask = vec![false; p * n];
        for t in 0..p {
            for s in 0..n {
                hist[t * n + s] = view.series.value(w + t, s);
                hist_mask[t * n + s] = view.series.observed(w + t, s);
            }
        }
        let pred = last_repeat(&hist, &hist_mask, p, n, q, view.split.scaler.mean);
        let mut truth = vec![0.0; q * n];
        let mut mask = vec![false; q * n];
        for step in 0..q {
            for s in 0..n {
                truth[step * n + s] = view.series.value(w + p + step, s);
                mask[step * n + s] = view.series.observed(w + p + step, s);
            }
        }
        acc.add_window(&pred, &truth, &mask);
    }
    acc
}

/// Windows of a named split range.
pub fn split_range<'a>(split: &'a DatasetSplit, name: &str) -> Result<&'a Range<usize>, TrainError> {
    match name {
        "train" => Ok(&split.train),
        "val" => Ok(&split.val),
        "test" => Ok(&split.test),
        other => Err(TrainError::Mismatch(format!("unknown split `{other}`"))),
    }
}
