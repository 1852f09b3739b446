use serde::{Deserialize, Serialize};

/// Added to the window variance before the square root.
pub const REVIN_EPS: f64 = 1e-5;

/// Statistics of one input window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevInState {
    pub mean: f64,
    /// `sqrt(var + eps)` with the population variance.
    pub std: f64,
}

impl RevInState {
    pub fn of(window: &[f64]) -> Self {
        let n = window.len() as f64;
        let mean = window.iter().sum::<f64>() / n;
        let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: (var + REVIN_EPS).sqrt(),
        }
    }
}

/// Standardises `window` and applies the scalar affine `gamma * x + beta`.
pub fn revin_normalize(window: &[f64], gamma: f64, beta: f64) -> (Vec<f64>, RevInState) {
    let state = RevInState::of(window);
    let out = window
        .iter()
        .map(|v| (v - state.mean) / state.std * gamma + beta)
        .collect();
    (out, state)
}

/// Undoes the affine, then rescales by the window statistics.
pub fn revin_denormalize(pred: &[f64], state: &RevInState, gamma: f64, beta: f64) -> Vec<f64> {
    pred.iter()
        .map(|v| (v - beta) / gamma * state.std + state.mean)
        .collect()
}
