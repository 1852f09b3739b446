//! Lag-coupled two-modality generator.
//!
//! The support series is a daily cycle plus white noise. The target series
//! follows the support series `lag` steps later, blended with an unrelated
//! cycle whose period is incommensurate with a day:
//!
//! `tm(t) = c * sm(t - lag) + (1 - c) * other(t) + noise`

use std::f64::consts::TAU;

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grid::{valid_interval, SeriesGrid};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub locations: usize,
    pub steps: usize,
    pub interval_minutes: u32,
    pub lag: usize,
    pub coupling: f64,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: NaiveDateTime,
}

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2017, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
}

impl SynthConfig {
    pub fn new(locations: usize, steps: usize, interval_minutes: u32, lag: usize, coupling: f64, noise_sd: f64, seed: u64) -> Self {
        Self {
            locations,
            steps,
            interval_minutes,
            lag,
            coupling,
            noise_sd,
            seed,
            start: default_start(),
        }
    }
}

const BASE_LEVEL: f64 = 3.0;
/// Period of the unrelated cycle in days.
const OTHER_PERIOD_DAYS: f64 = 0.618_033_988_749_895;

/// Returns `(tm, sm)` on identical time axes and locations.
pub fn synthesize_lagged_pair(cfg: &SynthConfig) -> Result<(SeriesGrid, SeriesGrid)> {
    if !(0.0..=1.0).contains(&cfg.coupling) {
        return Err(Error::Config(format!("coupling {} outside [0, 1]", cfg.coupling)));
    }
    if cfg.noise_sd < 0.0 || !cfg.noise_sd.is_finite() {
        return Err(Error::Config(format!("noise_sd {} must be >= 0", cfg.noise_sd)));
    }
    if cfg.locations == 0 || cfg.steps == 0 || cfg.lag >= cfg.steps {
        return Err(Error::Config(format!(
            "need locations > 0 and lag < steps (got N={}, T={}, lag={})",
            cfg.locations, cfg.steps, cfg.lag
        )));
    }
    if !valid_interval(cfg.interval_minutes) {
        return Err(Error::Config(format!("bad interval {}", cfg.interval_minutes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let day = 1440.0 / cfg.interval_minutes as f64;
    let (t, lag, c) = (cfg.steps, cfg.lag, cfg.coupling);
    let mut tm_rows = Vec::with_capacity(cfg.locations);
    let mut sm_rows = Vec::with_capacity(cfg.locations);
    let mut centroids = Vec::with_capacity(cfg.locations);
    for n in 0..cfg.locations {
        let phase: f64 = rng.random_range(0.0..TAU);
        let phase2: f64 = rng.random_range(0.0..TAU);
        let other_phase: f64 = rng.random_range(0.0..TAU);
        let amp: f64 = rng.random_range(0.8..1.2);
        // Support series over steps -lag .. T so that every tm step has a
        // predecessor.
        let sm_ext: Vec<f64> = (0..t + lag)
            .map(|i| {
                let s = i as f64 - lag as f64;
                let eps: f64 = rng.sample(StandardNormal);
                let v = BASE_LEVEL
                    + amp * (0.7 * (TAU * s / day + phase).sin() + 0.3 * (2.0 * TAU * s / day + phase2).sin())
                    + cfg.noise_sd * eps;
                v.max(0.0)
            })
            .collect();
        let tm_row: Vec<f64> = (0..t)
            .map(|s| {
                let other = BASE_LEVEL + (TAU * s as f64 / (day * OTHER_PERIOD_DAYS) + other_phase).sin();
                let eps: f64 = rng.sample(StandardNormal);
                (c * sm_ext[s] + (1.0 - c) * other + cfg.noise_sd * eps).max(0.0)
            })
            .collect();
        sm_rows.push(sm_ext[lag..].to_vec());
        tm_rows.push(tm_row);
        centroids.push((
            35.6 + 0.01 * (n / 4) as f64 + rng.random_range(-1e-3..1e-3),
            139.6 + 0.01 * (n % 4) as f64 + rng.random_range(-1e-3..1e-3),
        ));
    }
    let ids: Vec<String> = (0..cfg.locations).map(|n| format!("loc{n:03}")).collect();
    let tm = SeriesGrid::new("tm", ids.clone(), centroids.clone(), cfg.start, cfg.interval_minutes, tm_rows)?;
    let sm = SeriesGrid::new("sm", ids, centroids, cfg.start, cfg.interval_minutes, sm_rows)?;
    Ok((tm, sm))
}
