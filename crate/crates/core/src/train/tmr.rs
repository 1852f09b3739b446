use std::collections::HashMap;

use chrono::NaiveDateTime;

use super::config::TrainConfig;
use super::single::{train_single_resolution, Consistency, TrainOutcome};
use crate::data::WindowSample;
use crate::model::{predict, ModelConfig, ModelParams};
use crate::{Error, Result};

/// Windows of one resolution.
#[derive(Clone, Debug)]
pub struct ResolutionData {
    pub interval_minutes: u32,
    pub train: Vec<WindowSample>,
    pub valid: Vec<WindowSample>,
    /// Uncapped training windows searched for coarse partners; empty means
    /// `train`.
    pub partners: Vec<WindowSample>,
}

impl ResolutionData {
    /// `(input_len, horizon)` shared by every window.
    pub fn shape(&self) -> Result<(usize, usize)> {
        let first = self
            .train
            .first()
            .ok_or_else(|| Error::Config(format!("no training windows at {} min", self.interval_minutes)))?;
        let shape = (first.input_len(), first.horizon());
        if let Some(bad) = self
            .train
            .iter()
            .chain(&self.valid)
            .find(|s| (s.input_len(), s.horizon()) != shape || s.resolution_minutes != self.interval_minutes)
        {
            return Err(Error::Alignment(format!(
                "window at {} has shape {:?} at {} min, expected {shape:?} at {} min",
                bad.input_start,
                (bad.input_len(), bad.horizon()),
                bad.resolution_minutes,
                self.interval_minutes
            )));
        }
        Ok(shape)
    }

    pub fn partner_pool(&self) -> &[WindowSample] {
        if self.partners.is_empty() {
            &self.train
        } else {
            &self.partners
        }
    }

    pub fn model_config(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let (input_len, horizon) = self.shape()?;
        let cfg = ModelConfig {
            input_len,
            horizon,
            interval_minutes: self.interval_minutes,
            ..base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Frozen coarse forecasts for every fine window whose forecast origin lies
/// on the coarse grid. A fine window on the grid and inside the coarse span
/// without a coarse partner is an alignment error.
pub fn aligned_coarse_targets(
    fine: &[WindowSample],
    coarse_model: &ModelParams,
    coarse: &[WindowSample],
    batch: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    let (Some(f0), Some(c0)) = (fine.first(), coarse.first()) else {
        return Ok(vec![None; fine.len()]);
    };
    let (rf, rc) = (f0.resolution_minutes, c0.resolution_minutes);
    if rc % rf != 0 {
        return Err(Error::Config(format!("{rc} min is not a multiple of {rf} min")));
    }
    let ratio = (rc / rf) as usize;
    if f0.horizon() != c0.horizon() * ratio || f0.input_len() * rf as usize != c0.input_len() * rc as usize {
        return Err(Error::Alignment(format!(
            "windows at {rf} min ({} in, {} out) and {rc} min ({} in, {} out) cover different spans",
            f0.input_len(),
            f0.horizon(),
            c0.input_len(),
            c0.horizon()
        )));
    }
    let by_origin: HashMap<(&str, NaiveDateTime), usize> = coarse
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.location_id.as_str(), s.target_start()), i))
        .collect();
    let grid0 = coarse.iter().map(|s| s.input_start).min().expect("nonempty");
    let first_origin = coarse.iter().map(|s| s.target_start()).min().expect("nonempty");
    let last_origin = coarse.iter().map(|s| s.target_start()).max().expect("nonempty");
    let mut need = Vec::new();
    let mut slots = vec![None; fine.len()];
    for (i, s) in fine.iter().enumerate() {
        let origin = s.target_start();
        let offset = (origin - grid0).num_minutes();
        if offset < 0 || offset % rc as i64 != 0 || origin < first_origin || origin > last_origin {
            continue;
        }
        match by_origin.get(&(s.location_id.as_str(), origin)) {
            Some(&j) => {
                slots[i] = Some(need.len());
                need.push(&coarse[j]);
            }
            None => {
                return Err(Error::Alignment(format!(
                    "no {rc}-minute window for {} with forecast origin {origin}",
                    s.location_id
                )))
            }
        }
    }
    let preds = if need.is_empty() {
        Vec::new()
    } else {
        predict(coarse_model, &need, batch)?
    };
    Ok(slots.into_iter().map(|s| s.map(|k| preds[k].clone())).collect())
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub interval_minutes: u32,
    pub outcome: TrainOutcome,
    /// Training windows that received a consistency term.
    pub consistency_windows: usize,
}

/// Coarse-to-fine training. `data` is ordered finest first (`r1, r2, r3`);
/// the returned stages are in training order (`r3, r2, r1`).
pub fn train_tmr(data: &[ResolutionData; 3], base: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<Vec<StageOutcome>> {
    cfg.validate()?;
    for (d, r) in data.iter().zip(cfg.resolutions) {
        if d.interval_minutes != r {
            return Err(Error::Config(format!(
                "dataset at {} min does not match configured resolution {r} min",
                d.interval_minutes
            )));
        }
    }
    let mut stages: Vec<StageOutcome> = Vec::with_capacity(3);
    for level in (0..3).rev() {
        let d = &data[level];
        let mcfg = ModelConfig {
            seed,
            ..d.model_config(base)?
        };
        let params = ModelParams::init(&mcfg)?;
        let consistency = match stages.last() {
            None => None,
            Some(prev) => {
                let coarse = &data[level + 1];
                let targets = aligned_coarse_targets(&d.train, &prev.outcome.params, coarse.partner_pool(), cfg.eval_batch_size)?;
                Some(Consistency {
                    ratio: (coarse.interval_minutes / d.interval_minutes) as usize,
                    mode: cfg.prediction_aggregation,
                    lambda: cfg.lambda,
                    targets,
                })
            }
        };
        let consistency_windows = consistency
            .as_ref()
            .map_or(0, |c| c.targets.iter().filter(|t| t.is_some()).count());
        log::info!(
            "stage {} min: {} train windows, {consistency_windows} with a coarse partner",
            d.interval_minutes,
            d.train.len()
        );
        let outcome = train_single_resolution(params, &d.train, &d.valid, cfg, seed, consistency.as_ref())?;
        stages.push(StageOutcome {
            interval_minutes: d.interval_minutes,
            outcome,
            consistency_windows,
        });
    }
    Ok(stages)
}
