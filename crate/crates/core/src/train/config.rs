use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::data::AggregationMode;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Weight of the cross-resolution consistency term.
    pub lambda: f64,
    /// `[r1, r2, r3]` in minutes, finest first.
    pub resolutions: [u32; 3],
    /// How forecasts are coarsened for the consistency term.
    pub prediction_aggregation: AggregationMode,
    pub seeds: Vec<u64>,
    /// Keep at most this many training windows, evenly spaced.
    pub max_train_samples: Option<usize>,
    /// Keep at most this many validation windows, evenly spaced.
    pub max_valid_samples: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            patience: 3,
            adam: AdamConfig::default(),
            lambda: 1.0,
            resolutions: [15, 60, 360],
            prediction_aggregation: AggregationMode::Mean,
            seeds: vec![0, 1, 2],
            max_train_samples: None,
            max_valid_samples: None,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    /// All violations at once.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            out.push("batch sizes must be positive".to_string());
        }
        let [r1, r2, r3] = self.resolutions;
        if !(r1 > 0 && r1 < r2 && r2 < r3 && r2 % r1 == 0 && r3 % r2 == 0) {
            out.push(format!(
                "resolutions {:?} must satisfy r1 < r2 < r3 with r2 % r1 == 0 and r3 % r2 == 0",
                self.resolutions
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            out.push(format!("invalid Adam hyperparameters {a:?}"));
        }
        if self.seeds.is_empty() {
            out.push("at least one seed is required".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Evenly spaced subset of at most `cap` items, keeping order.
pub fn evenly_spaced<T: Clone>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(c) if c > 0 && c < items.len() => (0..c).map(|i| items[i * items.len() / c].clone()).collect(),
        _ => items.to_vec(),
    }
}
