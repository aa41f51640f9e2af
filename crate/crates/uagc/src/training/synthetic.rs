//! Synthetic ring-road fixture.
//!
//! Sensors sit on a one-way freeway loop, one mile apart. Speeds start at
//! 60 mph free flow and are depressed by congestion that (a) propagates to
//! the next sensor downstream with a one-step lag and (b) is driven by two
//! activity categories with distinct daily peaks: a scheduled component at
//! the activity-sensitive sensors and random incidents whose rate follows
//! the activity level. The whole bundle is a pure function of the seed.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::activity::SurveyRow;
use crate::geodata::{haversine_miles, RoadGraph, RoadNode, Sensor, MILES_PER_DEGREE};
use crate::training::TrafficSeries;
use crate::Real;

pub const FREE_FLOW_MPH: f64 = 60.0;
/// Downstream carry-over of congestion per 5-minute step.
pub const PROPAGATION_FACTOR: f64 = 0.72;
/// Steps an incident keeps depressing its own sensor (linear decay).
pub const INCIDENT_DURATION_STEPS: usize = 12;
const MORNING_PEAK_MINUTE: f64 = 450.0; // 07:30
const EVENING_PEAK_MINUTE: f64 = 1050.0; // 17:30
const PEAK_WIDTH_MINUTES: f64 = 90.0;
const PLANTED_AMPLITUDE: f64 = 26.0;
const BASE_AMPLITUDE: f64 = 3.0;
const NOISE_STD: f64 = 0.4;
const MISSING_FRACTION: f64 = 0.02;
const SURVEY_ROWS_PER_CATEGORY: usize = 4000;

/// One random congestion incident.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CongestionPulse {
    pub sensor: usize,
    pub start_step: usize,
    pub magnitude: f64,
}

pub struct SyntheticBundle {
    pub graph: RoadGraph,
    pub sensors: Vec<Sensor>,
    pub series: TrafficSeries,
    pub survey: Vec<SurveyRow>,
    pub pulses: Vec<CongestionPulse>,
    /// Per-day, per-category amplitude factors of the scheduled congestion
    /// (day-major). The daily shape repeats but its strength varies, so
    /// upstream observations carry information timestamps alone do not.
    pub day_factors: Vec<f64>,
    /// Congestion field (T x N) before noise/clamping, for replay checks.
    pub congestion: Vec<Real>,
    /// Sensors whose scheduled congestion follows the morning category.
    pub morning_sensors: Vec<usize>,
    /// Sensors whose scheduled congestion follows the evening category.
    pub evening_sensors: Vec<usize>,
    pub seed: u64,
}

fn weekday_amplitude(weekday: usize) -> f64 {
    match weekday {
        0..=4 => 1.0,
        5 => 0.4,
        _ => 0.3,
    }
}

/// Daily activity intensity in [0, 1]-ish units for the two categories.
pub fn activity_intensity(category: usize, weekday: usize, minute_of_day: f64) -> f64 {
    let peak = if category == 0 {
        MORNING_PEAK_MINUTE
    } else {
        EVENING_PEAK_MINUTE
    };
    let z = (minute_of_day - peak) / PEAK_WIDTH_MINUTES;
    weekday_amplitude(weekday) * (-0.5 * z * z).exp()
}

/// Linear one-step-lag congestion recursion:
/// `c[i][t] = drive[i][t] + rho * c[i-1][t-1]` around the ring.
pub fn propagate_congestion(drive: &[f64], n_sensors: usize, n_steps: usize, rho: f64) -> Vec<f64> {
    assert_eq!(drive.len(), n_sensors * n_steps);
    let mut c = vec![0.0; drive.len()];
    for t in 0..n_steps {
        for i in 0..n_sensors {
            let upstream = if t == 0 {
                0.0
            } else {
                c[(t - 1) * n_sensors + (i + n_sensors - 1) % n_sensors]
            };
            c[t * n_sensors + i] = drive[t * n_sensors + i] + rho * upstream;
        }
    }
    c
}

/// Scheduled congestion at one sensor: the two activity curves scaled by
/// planted/base amplitudes and the day's strength factors.
pub fn scheduled_drive(
    sensor: usize,
    morning: &[usize],
    evening: &[usize],
    weekday: usize,
    minute: f64,
    factor_morning: f64,
    factor_evening: f64,
) -> f64 {
    let amp_morning = if morning.contains(&sensor) {
        PLANTED_AMPLITUDE
    } else {
        BASE_AMPLITUDE
    };
    let amp_evening = if evening.contains(&sensor) {
        PLANTED_AMPLITUDE
    } else {
        BASE_AMPLITUDE
    };
    amp_morning * factor_morning * activity_intensity(0, weekday, minute)
        + amp_evening * factor_evening * activity_intensity(1, weekday, minute)
}

/// Builds the full fixture: ring road, sensors on its nodes, a two-category
/// travel survey and `n_days` of 5-minute speeds starting on a Monday.
pub fn make_synthetic_dataset(n_sensors: usize, n_days: usize, seed: u64) -> SyntheticBundle {
    assert!(n_sensors >= 4, "ring needs at least 4 sensors");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Ring geometry: one-way freeway loop with mile-spaced sensors.
    let center = (34.05, -118.25);
    let radius_miles = n_sensors as f64 / (2.0 * std::f64::consts::PI);
    let lat_per_mile = 1.0 / MILES_PER_DEGREE;
    let lon_per_mile = 1.0 / (MILES_PER_DEGREE * (center.0 as f64).to_radians().cos());
    let nodes: Vec<RoadNode> = (0..n_sensors)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / n_sensors as f64;
            RoadNode {
                node_id: format!("n{i:02}"),
                lat: center.0 + radius_miles * lat_per_mile * angle.sin(),
                lon: center.1 + radius_miles * lon_per_mile * angle.cos(),
            }
        })
        .collect();
    let edges: Vec<(String, String, String, f64, bool)> = (0..n_sensors)
        .map(|i| {
            let j = (i + 1) % n_sensors;
            let length = haversine_miles(nodes[i].lat, nodes[i].lon, nodes[j].lat, nodes[j].lon);
            (
                format!("e{i:02}"),
                nodes[i].node_id.clone(),
                nodes[j].node_id.clone(),
                length,
                true,
            )
        })
        .collect();
    let graph = RoadGraph::from_parts(nodes.clone(), edges, |_| 0).expect("ring is valid");
    let sensors: Vec<Sensor> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| Sensor {
            sensor_id: format!("s{i:02}"),
            lat: n.lat,
            lon: n.lon,
        })
        .collect();

    let morning_sensors: Vec<usize> = (2..=5).map(|i| i % n_sensors).collect();
    let evening_sensors: Vec<usize> = if n_sensors >= 16 {
        (12..=15).collect()
    } else {
        (n_sensors / 2..n_sensors / 2 + 4).map(|i| i % n_sensors).collect()
    };

    // Travel survey approximating the two analytic activity curves.
    let mut survey = Vec::with_capacity(2 * SURVEY_ROWS_PER_CATEGORY);
    for category in 0..2usize {
        let peak = if category == 0 {
            MORNING_PEAK_MINUTE
        } else {
            EVENING_PEAK_MINUTE
        };
        let weekday_weights: Vec<f64> = (0..7).map(weekday_amplitude).collect();
        let total_weight: f64 = weekday_weights.iter().sum();
        let normal = Normal::new(peak, PEAK_WIDTH_MINUTES).expect("valid normal");
        for _ in 0..SURVEY_ROWS_PER_CATEGORY {
            let mut pick = rng.random_range(0.0..total_weight);
            let mut weekday = 6;
            for (w, &weight) in weekday_weights.iter().enumerate() {
                if pick < weight {
                    weekday = w;
                    break;
                }
                pick -= weight;
            }
            let start_minute = loop {
                let m = normal.sample(&mut rng);
                if (0.0..1440.0).contains(&m) {
                    break m as usize;
                }
            };
            survey.push(SurveyRow {
                category: category + 1,
                weekday,
                start_minute,
            });
        }
    }

    // Daily strength of the scheduled congestion, per category.
    let n_steps = n_days * 288;
    let mut day_factors = Vec::with_capacity(2 * n_days);
    for _ in 0..n_days {
        for _ in 0..2 {
            day_factors.push(rng.random_range(0.55..1.45));
        }
    }

    // Incidents: Bernoulli per (step, sensor) with an activity-raised rate.
    let mut pulses = Vec::new();
    for t in 0..n_steps {
        let weekday = (t / 288) % 7;
        let minute = (t % 288) as f64 * 5.0;
        let intensity = activity_intensity(0, weekday, minute) + activity_intensity(1, weekday, minute);
        let rate = 0.0025 * (1.0 + 4.0 * intensity);
        for sensor in 0..n_sensors {
            if rng.random_range(0.0..1.0) < rate {
                pulses.push(CongestionPulse {
                    sensor,
                    start_step: t,
                    magnitude: rng.random_range(15.0..30.0),
                });
            }
        }
    }

    // Drive field: scheduled activity congestion plus decaying incidents.
    let mut drive = vec![0.0f64; n_steps * n_sensors];
    for t in 0..n_steps {
        let day = t / 288;
        let weekday = day % 7;
        let minute = (t % 288) as f64 * 5.0;
        for sensor in 0..n_sensors {
            drive[t * n_sensors + sensor] = scheduled_drive(
                sensor,
                &morning_sensors,
                &evening_sensors,
                weekday,
                minute,
                day_factors[day * 2],
                day_factors[day * 2 + 1],
            );
        }
    }
    for p in &pulses {
        for k in 0..INCIDENT_DURATION_STEPS {
            let t = p.start_step + k;
            if t >= n_steps {
                break;
            }
            drive[t * n_sensors + p.sensor] +=
                p.magnitude * (1.0 - k as f64 / INCIDENT_DURATION_STEPS as f64);
        }
    }

    let congestion = propagate_congestion(&drive, n_sensors, n_steps, PROPAGATION_FACTOR);

    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let mut values = Vec::with_capacity(n_steps * n_sensors);
    for &c in &congestion {
        let v: f64 = FREE_FLOW_MPH - c + noise.sample(&mut rng);
        values.push(v.clamp(3.0, 70.0));
    }
    let mask: Vec<bool> = (0..n_steps * n_sensors)
        .map(|_| rng.random_range(0.0..1.0) >= MISSING_FRACTION)
        .collect();

    // 2012-03-05 is a Monday, so weekday indexing lines up with bin 0.
    let start = NaiveDate::from_ymd_opt(2012, 3, 5)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let series = TrafficSeries::new(
        sensors.iter().map(|s| s.sensor_id.clone()).collect(),
        start,
        values,
        mask,
    );

    SyntheticBundle {
        graph,
        sensors,
        series,
        survey,
        pulses,
        day_factors,
        congestion,
        morning_sensors,
        evening_sensors,
        seed,
    }
}
