//! Masked evaluation metrics and the last-value baseline.
//!
//! All metrics run over observed entries only, in original mph units.
//! MAPE additionally skips entries whose true value is zero and is
//! reported in percent.

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub mae: Real,
    pub rmse: Real,
    /// None when no observed entry has a nonzero true value.
    pub mape_percent: Option<Real>,
}

/// Streaming per-horizon-step aggregation over any number of windows.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    q: usize,
    abs_sum: Vec<f64>,
    sq_sum: Vec<f64>,
    ape_sum: Vec<f64>,
    count: Vec<u64>,
    ape_count: Vec<u64>,
}

impl MetricAccumulator {
    pub fn new(q: usize) -> Self {
        Self {
            q,
            abs_sum: vec![0.0; q],
            sq_sum: vec![0.0; q],
            ape_sum: vec![0.0; q],
            count: vec![0; q],
            ape_count: vec![0; q],
        }
    }

    pub fn horizon(&self) -> usize {
        self.q
    }

    /// Adds one `Q x N` window (row-major over horizon steps).
    pub fn add_window(&mut self, pred: &[Real], truth: &[Real], mask: &[bool]) {
        assert_eq!(pred.len(), truth.len());
        assert_eq!(pred.len(), mask.len());
        assert_eq!(pred.len() % self.q, 0, "window not a multiple of the horizon");
        let n = pred.len() / self.q;
        for step in 0..self.q {
            for i in 0..n {
                let idx = step * n + i;
                if !mask[idx] {
                    continue;
                }
                let err = pred[idx] - truth[idx];
                self.abs_sum[step] += err.abs();
                self.sq_sum[step] += err * err;
                self.count[step] += 1;
                if truth[idx] != 0.0 {
                    self.ape_sum[step] += (err / truth[idx]).abs();
                    self.ape_count[step] += 1;
                }
            }
        }
    }

    /// Metrics at a 1-based horizon step; None when nothing was observed
    /// there.
    pub fn step_metrics(&self, step: usize) -> Option<StepMetrics> {
        assert!(step >= 1 && step <= self.q, "horizon step {step} out of 1..={}", self.q);
        let i = step - 1;
        if self.count[i] == 0 {
            return None;
        }
        let n = self.count[i] as f64;
        Some(StepMetrics {
            mae: self.abs_sum[i] / n,
            rmse: (self.sq_sum[i] / n).sqrt(),
            mape_percent: (self.ape_count[i] > 0)
                .then(|| 100.0 * self.ape_sum[i] / self.ape_count[i] as f64),
        })
    }

    /// Folds another accumulator in (same horizon); call in a fixed order
    /// when reproducibility matters.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.q, other.q);
        for i in 0..self.q {
            self.abs_sum[i] += other.abs_sum[i];
            self.sq_sum[i] += other.sq_sum[i];
            self.ape_sum[i] += other.ape_sum[i];
            self.count[i] += other.count[i];
            self.ape_count[i] += other.ape_count[i];
        }
    }

    /// Masked MAE over all horizon steps together.
    pub fn overall_mae(&self) -> Option<Real> {
        let count: u64 = self.count.iter().sum();
        (count > 0).then(|| self.abs_sum.iter().sum::<f64>() / count as f64)
    }

    /// The conventional report steps: 3, 6 and the last step (each capped
    /// to the horizon and deduplicated).
    pub fn report_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = [3, 6, self.q]
            .into_iter()
            .filter(|&s| s >= 1 && s <= self.q)
            .collect();
        steps.dedup();
        steps
    }
}

/// Metrics for one window at the requested 1-based horizon steps.
pub fn masked_metrics(
    pred: &[Real],
    truth: &[Real],
    mask: &[bool],
    q: usize,
    steps: &[usize],
) -> Vec<(usize, Option<StepMetrics>)> {
    let mut acc = MetricAccumulator::new(q);
    acc.add_window(pred, truth, mask);
    steps.iter().map(|&s| (s, acc.step_metrics(s))).collect()
}

/// The last-value baseline: every future step repeats the sensor's last
/// observed history value, falling back to `fallback` (the train mean)
/// when a sensor was never observed in the window.
pub fn last_repeat(
    history: &[Real],
    history_mask: &[bool],
    p: usize,
    n_sensors: usize,
    q: usize,
    fallback: Real,
) -> Vec<Real> {
    assert_eq!(history.len(), p * n_sensors);
    assert_eq!(history_mask.len(), history.len());
    let mut last = vec![fallback; n_sensors];
    for step in 0..p {
        for s in 0..n_sensors {
            if history_mask[step * n_sensors + s] {
                last[s] = history[step * n_sensors + s];
            }
        }
    }
    let mut out = Vec::with_capacity(q * n_sensors);
    for _ in 0..q {
        out.extend_from_slice(&last);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_two_entry_window() {
        // pred [1,2] vs truth [2,4], one step, both observed:
        // MAE 1.5, RMSE sqrt(2.5), MAPE 50%.
        let out = masked_metrics(&[1.0, 2.0], &[2.0, 4.0], &[true, true], 1, &[1]);
        let m = out[0].1.unwrap();
        assert!((m.mae - 1.5).abs() < 1e-12);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((m.mape_percent.unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let truth = [3.0, 7.0, 9.0, 1.0];
        let out = masked_metrics(&truth, &truth, &[true; 4], 2, &[1, 2]);
        for (_, m) in out {
            let m = m.unwrap();
            assert_eq!(m.mae, 0.0);
            assert_eq!(m.rmse, 0.0);
            assert_eq!(m.mape_percent.unwrap(), 0.0);
        }
    }

    #[test]
    fn masking_restricts_to_observed_entries() {
        let out = masked_metrics(&[1.0, 100.0], &[2.0, 4.0], &[true, false], 1, &[1]);
        let m = out[0].1.unwrap();
        assert_eq!(m.mae, 1.0);
        assert_eq!(m.rmse, 1.0);
        // Fully masked step is undefined.
        let out = masked_metrics(&[1.0], &[2.0], &[false], 1, &[1]);
        assert!(out[0].1.is_none());
    }

    #[test]
    fn mape_skips_zero_truth() {
        let out = masked_metrics(&[1.0, 5.0], &[0.0, 4.0], &[true, true], 1, &[1]);
        let m = out[0].1.unwrap();
        assert!((m.mape_percent.unwrap() - 25.0).abs() < 1e-12);
        let out = masked_metrics(&[1.0], &[0.0], &[true], 1, &[1]);
        assert_eq!(out[0].1.unwrap().mape_percent, None);
    }

    #[test]
    fn report_steps_follow_horizon() {
        assert_eq!(MetricAccumulator::new(12).report_steps(), vec![3, 6, 12]);
        assert_eq!(MetricAccumulator::new(9).report_steps(), vec![3, 6, 9]);
        assert_eq!(MetricAccumulator::new(6).report_steps(), vec![3, 6]);
        assert_eq!(MetricAccumulator::new(2).report_steps(), vec![2]);
    }

    #[test]
    fn accumulator_matches_direct_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (q, n, windows) = (5, 3, 7);
        let mut acc = MetricAccumulator::new(q);
        let mut all: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = Vec::new();
        for _ in 0..windows {
            let pred: Vec<f64> = (0..q * n).map(|_| rng.random_range(0.0..70.0)).collect();
            let truth: Vec<f64> = (0..q * n).map(|_| rng.random_range(0.0..70.0)).collect();
            let mask: Vec<bool> = (0..q * n).map(|_| rng.random_range(0.0..1.0) > 0.2).collect();
            acc.add_window(&pred, &truth, &mask);
            all.push((pred, truth, mask));
        }
        // Direct recomputation at the last step.
        let step = q;
        let mut abs = 0.0;
        let mut count = 0u64;
        for (pred, truth, mask) in &all {
            for i in 0..n {
                let idx = (step - 1) * n + i;
                if mask[idx] {
                    abs += (pred[idx] - truth[idx]).abs();
                    count += 1;
                }
            }
        }
        let m = acc.step_metrics(step).unwrap();
        assert!((m.mae - abs / count as f64).abs() < 1e-12);
    }

    #[test]
    fn last_repeat_rules() {
        // History ends at 60: all Q steps are 60.
        let hist = [50.0, 55.0, 60.0];
        let out = last_repeat(&hist, &[true, true, true], 3, 1, 4, 0.0);
        assert_eq!(out, vec![60.0; 4]);
        // Missing last value falls back to the last observed one.
        let out = last_repeat(&hist, &[true, true, false], 3, 1, 2, 0.0);
        assert_eq!(out, vec![55.0, 55.0]);
        // Never observed: dataset mean.
        let out = last_repeat(&hist, &[false, false, false], 3, 1, 2, 42.0);
        assert_eq!(out, vec![42.0, 42.0]);
        // Q = 0 is an empty prediction.
        let out = last_repeat(&hist, &[true, true, true], 3, 1, 0, 0.0);
        assert!(out.is_empty());
    }

    #[test]
    fn constant_speed_gives_zero_baseline_error() {
        let hist = vec![48.0; 6];
        let pred = last_repeat(&hist, &[true; 6], 3, 2, 2, 0.0);
        let truth = vec![48.0; 4];
        let out = masked_metrics(&pred, &truth, &[true; 4], 2, &[1, 2]);
        for (_, m) in out {
            assert_eq!(m.unwrap().mae, 0.0);
        }
    }
}
