use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::model::{predict, ModelParams};
use crate::{Error, Result};

/// Forecast steps covering `hours` at `interval_minutes`.
pub fn horizon_steps(hours: u32, interval_minutes: u32, horizon: usize) -> Result<usize> {
    let minutes = hours * 60;
    if hours == 0 || !minutes.is_multiple_of(interval_minutes) {
        return Err(Error::Config(format!(
            "{hours} h is not a whole number of {interval_minutes}-minute steps"
        )));
    }
    let steps = (minutes / interval_minutes) as usize;
    if steps > horizon {
        return Err(Error::Config(format!(
            "{hours} h needs {steps} steps but the forecast has only {horizon}"
        )));
    }
    Ok(steps)
}

/// MAE and RMSE over the first `steps` of every forecast. Squared errors
/// are pooled over all samples before the single square root.
pub fn horizon_errors(preds: &[Vec<f64>], truths: &[&[f64]], steps: usize) -> (f64, f64) {
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        for (a, b) in p[..steps].iter().zip(&t[..steps]) {
            abs += (a - b).abs();
            sq += (a - b).powi(2);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    (abs / n, (sq / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonScore {
    pub hours: u32,
    pub steps: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub samples: usize,
    pub scores: Vec<HorizonScore>,
}

pub fn score_predictions(preds: &[Vec<f64>], samples: &[&WindowSample], horizons: &[u32], interval_minutes: u32) -> Result<Vec<HorizonScore>> {
    let horizon = samples.first().map_or(0, |s| s.horizon());
    let truths: Vec<&[f64]> = samples.iter().map(|s| s.target.as_slice()).collect();
    horizons
        .iter()
        .map(|&hours| {
            let steps = horizon_steps(hours, interval_minutes, horizon)?;
            let (mae, rmse) = horizon_errors(preds, &truths, steps);
            Ok(HorizonScore { hours, steps, mae, rmse })
        })
        .collect()
}

/// Scores one trained model. With `fine_only`, coarse samples are skipped.
pub fn evaluate_horizons(
    params: &ModelParams,
    samples: &[WindowSample],
    horizons: &[u32],
    fine_only: bool,
    batch: usize,
) -> Result<SeedScores> {
    let picked: Vec<&WindowSample> = samples.iter().filter(|s| !(fine_only && s.is_coarse)).collect();
    if picked.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    for &h in horizons {
        horizon_steps(h, params.config.interval_minutes, params.config.horizon)?;
    }
    let preds = predict(params, &picked, batch)?;
    Ok(SeedScores {
        seed: params.config.seed,
        samples: picked.len(),
        scores: score_predictions(&preds, &picked, horizons, params.config.interval_minutes)?,
    })
}

/// `"mean (std)"` with two decimals.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ({std:.2})")
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub hours: u32,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mae: String,
    pub rmse: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub resolution_minutes: u32,
    pub horizons: Vec<u32>,
    pub per_seed: Vec<SeedScores>,
    pub summary: Vec<HorizonSummary>,
}

impl EvalReport {
    pub fn from_seeds(resolution_minutes: u32, horizons: &[u32], per_seed: Vec<SeedScores>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Usage("report needs at least one seed".into()));
        }
        let summary = horizons
            .iter()
            .enumerate()
            .map(|(i, &hours)| {
                let mae: Vec<f64> = per_seed.iter().map(|s| s.scores[i].mae).collect();
                let rmse: Vec<f64> = per_seed.iter().map(|s| s.scores[i].rmse).collect();
                let (mae_mean, mae_std) = mean_std(&mae);
                let (rmse_mean, rmse_std) = mean_std(&rmse);
                HorizonSummary {
                    hours,
                    mae_mean,
                    mae_std,
                    rmse_mean,
                    rmse_std,
                    mae: format_cell(mae_mean, mae_std),
                    rmse: format_cell(rmse_mean, rmse_std),
                }
            })
            .collect();
        let report = Self {
            resolution_minutes,
            horizons: horizons.to_vec(),
            per_seed,
            summary,
        };
        report.check()?;
        Ok(report)
    }

    /// RMSE >= MAE >= 0 in every cell.
    pub fn check(&self) -> Result<()> {
        for s in &self.per_seed {
            for c in &s.scores {
                if !(c.mae >= 0.0 && c.rmse >= c.mae * (1.0 - 1e-12)) {
                    return Err(Error::Numerical(format!(
                        "seed {} at {} h: MAE {} RMSE {}",
                        s.seed, c.hours, c.mae, c.rmse
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plain-text table with one row per horizon.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>8}  {:>20}  {:>20}\n", "horizon", "MAE", "RMSE");
        for s in &self.summary {
            out.push_str(&format!("{:>7}h  {:>20}  {:>20}\n", s.hours, s.mae, s.rmse));
        }
        out
    }
}
