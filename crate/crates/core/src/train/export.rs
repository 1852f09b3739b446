use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::eval::EvalReport;
use crate::data::WindowSample;
use crate::model::{AblationWiring, PredictionBundle};
use crate::{Error, Result};

pub const EXPORT_VERSION: u32 = 1;
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const ATTENTION_FILE: &str = "attention.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub location_id: String,
    pub input_start: NaiveDateTime,
    pub target_start: NaiveDateTime,
    pub input: Vec<f64>,
    pub forecast: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionExport {
    pub version: u32,
    pub wiring: AblationWiring,
    pub resolution_minutes: u32,
    pub input_len: usize,
    pub horizon: usize,
    pub samples: Vec<PredictionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub location_id: String,
    pub input_start: NaiveDateTime,
    /// `[query step][support step]`, averaged over heads.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub version: u32,
    pub wiring: AblationWiring,
    pub resolution_minutes: u32,
    pub input_len: usize,
    /// Zero-based index of the fusion layer the maps come from.
    pub layer: usize,
    pub heads: usize,
    pub samples: Vec<AttentionRecord>,
}

pub fn prediction_export(bundles: &[PredictionBundle], samples: &[&WindowSample]) -> Result<PredictionExport> {
    let first = bundles.first().ok_or_else(|| Error::Usage("nothing to export".into()))?;
    if bundles.len() != samples.len() {
        return Err(Error::Usage(format!("{} forecasts for {} samples", bundles.len(), samples.len())));
    }
    Ok(PredictionExport {
        version: EXPORT_VERSION,
        wiring: first.wiring,
        resolution_minutes: first.resolution_minutes,
        input_len: first.input.len(),
        horizon: first.forecast.len(),
        samples: bundles
            .iter()
            .zip(samples)
            .map(|(b, s)| PredictionRecord {
                location_id: b.location_id.clone(),
                input_start: b.input_start,
                target_start: s.target_start(),
                input: b.input.clone(),
                forecast: b.forecast.clone(),
                truth: s.target.clone(),
            })
            .collect(),
    })
}

/// Head-averaged second-attention maps of the last fusion layer; `None` for
/// wirings without a second attention.
pub fn attention_export(bundles: &[PredictionBundle]) -> Option<AttentionExport> {
    let first = bundles.first()?;
    let last = first.temporal_attention.last()?;
    Some(AttentionExport {
        version: EXPORT_VERSION,
        wiring: first.wiring,
        resolution_minutes: first.resolution_minutes,
        input_len: first.input.len(),
        layer: first.temporal_attention.len() - 1,
        heads: last.len(),
        samples: bundles
            .iter()
            .filter_map(|b| {
                Some(AttentionRecord {
                    location_id: b.location_id.clone(),
                    input_start: b.input_start,
                    matrix: b.head_averaged_temporal()?,
                })
            })
            .collect(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Writes predictions, attention maps (when the wiring has them) and the
/// report into `dir`. Returns the files written.
pub fn export_results(
    dir: &Path,
    bundles: &[PredictionBundle],
    samples: &[&WindowSample],
    report: Option<&EvalReport>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let p = dir.join(PREDICTIONS_FILE);
    write_json(&p, &prediction_export(bundles, samples)?)?;
    written.push(p);
    if let Some(a) = attention_export(bundles) {
        let p = dir.join(ATTENTION_FILE);
        write_json(&p, &a)?;
        written.push(p);
    }
    if let Some(r) = report {
        let p = dir.join(REPORT_FILE);
        write_json(&p, r)?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
