use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::data::{AggregationMode, WindowSample};
use crate::model::{forward_on_tape, predict, ModelParams, NormalizedBatch};
use crate::{Error, Result};

/// Frozen coarse-model forecasts that the fine model's aggregated forecasts
/// are pulled towards.
#[derive(Clone, Debug, PartialEq)]
pub struct Consistency {
    /// Fine steps per coarse step.
    pub ratio: usize,
    pub mode: AggregationMode,
    pub lambda: f64,
    /// One entry per training sample; `None` where no aligned coarse window
    /// exists.
    pub targets: Vec<Option<Vec<f64>>>,
}

/// `lambda * MSE(aggregate(fine), coarse)` over the given rows of `fine`.
/// `coarse` is recorded as a constant, so no gradient reaches it.
pub fn consistency_loss(
    tape: &mut Tape,
    fine: Var,
    rows: &[usize],
    coarse: &[Vec<f64>],
    ratio: usize,
    mode: AggregationMode,
    lambda: f64,
) -> Result<Var> {
    let picked = tape.gather_rows(fine, rows)?;
    let agg = tape.block_reduce(picked, ratio, mode == AggregationMode::Mean)?;
    let width = tape.shape(agg)[1];
    let flat: Vec<f64> = coarse.iter().flatten().copied().collect();
    let target = tape.constant(Tensor::new(vec![coarse.len(), width], flat)?);
    let mse = tape.mse_loss(agg, target)?;
    Ok(tape.scale(mse, lambda))
}

/// Forecast MSE plus the optional consistency term.
pub fn stage_loss(
    tape: &mut Tape,
    forecast: Var,
    target: &[Vec<f64>],
    coarse: Option<(&[usize], &[Vec<f64>], usize, AggregationMode, f64)>,
) -> Result<Var> {
    let shape = tape.shape(forecast).to_vec();
    let flat: Vec<f64> = target.iter().flatten().copied().collect();
    let tv = tape.constant(Tensor::new(shape, flat)?);
    let loss = tape.mse_loss(forecast, tv)?;
    match coarse {
        Some((rows, values, ratio, mode, lambda)) if lambda != 0.0 && !rows.is_empty() => {
            let extra = consistency_loss(tape, forecast, rows, values, ratio, mode, lambda)?;
            tape.add(loss, extra)
        }
        _ => Ok(loss),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Loss of every optimisation step.
    pub steps: Vec<f64>,
    /// Mean training loss per epoch.
    pub train: Vec<f64>,
    /// Validation MSE per epoch.
    pub valid: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    pub curve: LossCurve,
    pub best_epoch: usize,
    pub best_valid: f64,
}

/// Pooled mean squared error of forecasts against targets.
pub fn mse(preds: &[Vec<f64>], samples: &[&WindowSample]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        for (a, b) in p.iter().zip(&s.target) {
            sum += (a - b).powi(2);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

pub fn validation_mse(params: &ModelParams, valid: &[&WindowSample], batch: usize) -> Result<f64> {
    Ok(mse(&predict(params, valid, batch)?, valid))
}

/// Mini-batch Adam on MSE with early stopping on validation MSE.
pub fn train_single_resolution(
    params: ModelParams,
    train: &[WindowSample],
    valid: &[WindowSample],
    cfg: &TrainConfig,
    seed: u64,
    consistency: Option<&Consistency>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if valid.is_empty() {
        return Err(Error::Config("validation set is empty; early stopping needs one".into()));
    }
    if let Some(c) = consistency {
        if c.targets.len() != train.len() {
            return Err(Error::Usage(format!(
                "{} consistency targets for {} training samples",
                c.targets.len(),
                train.len()
            )));
        }
    }
    let mcfg = params.config.clone();
    let valid_refs: Vec<&WindowSample> = valid.iter().collect();
    let mut params = params;
    let mut adam = Adam::new(params.parameters(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = LossCurve::default();
    let mut best = (params.clone(), 0usize, validation_mse(&params, &valid_refs, cfg.eval_batch_size)?);
    let mut since_best = 0;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&WindowSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = NormalizedBatch::from_samples(&samples, &mcfg)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let f = forward_on_tape(&mut tape, &bound, &mcfg, &batch)?;
            let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.target.clone()).collect();
            let (rows, coarse): (Vec<usize>, Vec<Vec<f64>>) = match consistency {
                Some(c) => idx
                    .iter()
                    .enumerate()
                    .filter_map(|(r, &i)| c.targets[i].clone().map(|t| (r, t)))
                    .unzip(),
                None => (Vec::new(), Vec::new()),
            };
            let extra = consistency.map(|c| (rows.as_slice(), coarse.as_slice(), c.ratio, c.mode, c.lambda));
            let loss = stage_loss(&mut tape, f.forecast, &targets, extra)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {lv} at epoch {epoch}, batch {bi}, step {step}"
                )));
            }
            tape.backward(loss)?;
            params.accumulate_grads(&tape, &bound)?;
            adam.step(params.parameters_mut())?;
            curve.steps.push(lv);
            epoch_loss += lv * idx.len() as f64;
            step += 1;
        }
        let v = validation_mse(&params, &valid_refs, cfg.eval_batch_size)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("validation MSE is {v} after epoch {epoch}, step {step}")));
        }
        curve.train.push(epoch_loss / train.len() as f64);
        curve.valid.push(v);
        log::info!(
            "epoch {epoch}: train {:.6} valid {v:.6} ({} min, {})",
            epoch_loss / train.len() as f64,
            mcfg.interval_minutes,
            mcfg.wiring
        );
        if v < best.2 {
            best = (params.clone(), epoch, v);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        curve,
        best_epoch: best.1,
        best_valid: best.2,
    })
}
