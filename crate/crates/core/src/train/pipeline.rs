use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::config::{evenly_spaced, TrainConfig};
use super::eval::{evaluate_horizons, EvalReport, SeedScores};
use super::export::export_results;
use super::single::{train_single_resolution, LossCurve};
use super::tmr::{train_tmr, ResolutionData};
use crate::data::{
    aggregate_space, aggregate_time, default_k, kmeans_partition, make_windows_strided, AggregationMode, HolidaySet, SeriesGrid,
    WindowSample, WindowShape,
};
use crate::model::{model_forward_batch, save_checkpoint, AblationWiring, ModelConfig, ModelParams};
use crate::{Error, Result};

/// Window lengths, either wall-clock or in steps of the working resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSpec {
    Hours { lookback: u32, horizon: u32 },
    Steps { input_len: usize, horizon: usize },
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec::Hours { lookback: 24, horizon: 12 }
    }
}

impl WindowSpec {
    pub fn shape(&self, interval_minutes: u32) -> Result<WindowShape> {
        match *self {
            WindowSpec::Hours { lookback, horizon } => WindowShape::from_hours(lookback, horizon, interval_minutes),
            WindowSpec::Steps { input_len, horizon } => Ok(WindowShape { input_len, horizon }),
        }
    }
}

/// Chronological train / validation / test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Inclusive date ranges.
    Dates {
        train: [NaiveDate; 2],
        valid: [NaiveDate; 2],
        test: [NaiveDate; 2],
    },
    /// Leading fractions of the steps; the test split is the remainder.
    Fractions { train: f64, valid: f64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.7, valid: 0.1 }
    }
}

impl SplitSpec {
    pub fn problems(&self) -> Vec<String> {
        match self {
            SplitSpec::Dates { train, valid, test } => {
                let mut out = Vec::new();
                for (name, r) in [("train", train), ("valid", valid), ("test", test)] {
                    if r[0] > r[1] {
                        out.push(format!("{name} range {} .. {} is reversed", r[0], r[1]));
                    }
                }
                if !(train[1] < valid[0] && valid[1] < test[0]) {
                    out.push("date ranges must be disjoint and ordered train < valid < test".to_string());
                }
                out
            }
            SplitSpec::Fractions { train, valid } => {
                if *train > 0.0 && *valid > 0.0 && train + valid < 1.0 {
                    Vec::new()
                } else {
                    vec![format!("split fractions {train} + {valid} must be positive and leave a test share")]
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// Width, depth and wiring; window lengths and interval are filled in
    /// from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: WindowSpec,
    pub split: SplitSpec,
    pub tmr: bool,
    pub smr: bool,
    /// Coarse regions for spatial multi-resolution; `ceil(N/4)` if unset.
    pub smr_regions: Option<usize>,
    pub tm_aggregation: AggregationMode,
    pub sm_aggregation: AggregationMode,
    /// Horizons in hours.
    pub horizons: Vec<u32>,
    pub window_stride: usize,
    pub max_test_samples: Option<usize>,
    /// Test windows exported with attention maps.
    pub export_samples: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            window: WindowSpec::default(),
            split: SplitSpec::default(),
            tmr: false,
            smr: false,
            smr_regions: None,
            tm_aggregation: AggregationMode::Mean,
            sm_aggregation: AggregationMode::Mean,
            horizons: vec![3, 6, 12],
            window_stride: 1,
            max_test_samples: None,
            export_samples: 32,
        }
    }
}

impl ExperimentSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.problems();
        out.extend(self.split.problems());
        if let Err(Error::Config(m)) = (ModelConfig { input_len: 1, horizon: 1, ..self.model.clone() }).validate() {
            out.push(m);
        }
        if self.window_stride == 0 {
            out.push("window_stride must be positive".to_string());
        }
        if self.tmr && matches!(self.window, WindowSpec::Steps { .. }) {
            out.push("temporal multi-resolution needs wall-clock (hours) windows".to_string());
        }
        if self.horizons.is_empty() {
            out.push("at least one evaluation horizon is required".to_string());
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

    /// Resolution the delivered model works at.
    pub fn working_interval(&self, native: u32) -> u32 {
        if self.tmr {
            self.train.resolutions[0]
        } else {
            native
        }
    }

    fn intervals(&self, native: u32) -> Vec<u32> {
        if self.tmr {
            self.train.resolutions.to_vec()
        } else {
            vec![native]
        }
    }
}

/// Source grids of one split.
#[derive(Clone, Debug)]
pub struct SplitGrids {
    pub train: (SeriesGrid, SeriesGrid),
    pub valid: (SeriesGrid, SeriesGrid),
    pub test: (SeriesGrid, SeriesGrid),
}

pub fn split_grids(tm: &SeriesGrid, sm: &SeriesGrid, spec: &ExperimentSpec) -> Result<SplitGrids> {
    let pair = |f: &dyn Fn(&SeriesGrid) -> Result<SeriesGrid>| -> Result<(SeriesGrid, SeriesGrid)> { Ok((f(tm)?, f(sm)?)) };
    match &spec.split {
        SplitSpec::Dates { train, valid, test } => Ok(SplitGrids {
            train: pair(&|g| g.slice_dates(train[0], train[1]))?,
            valid: pair(&|g| g.slice_dates(valid[0], valid[1]))?,
            test: pair(&|g| g.slice_dates(test[0], test[1]))?,
        }),
        SplitSpec::Fractions { train, valid } => {
            // Boundaries fall on whole coarsest-resolution blocks.
            let coarsest = *spec.intervals(tm.interval_minutes()).last().unwrap();
            let block = (coarsest / tm.interval_minutes()).max(1) as usize;
            let t = tm.num_steps();
            let cut = |f: f64| ((t as f64 * f) as usize / block) * block;
            let (a, b) = (cut(*train), cut(train + valid));
            let end = (t / block) * block;
            Ok(SplitGrids {
                train: pair(&|g| g.slice_steps(0, a))?,
                valid: pair(&|g| g.slice_steps(a, b))?,
                test: pair(&|g| g.slice_steps(b, end))?,
            })
        }
    }
}

/// Windows of every split at one resolution.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub interval_minutes: u32,
    pub shape: WindowShape,
    pub train: Vec<WindowSample>,
    /// Every training window, kept only when striding or capping could drop
    /// the coarse partners of temporal multi-resolution.
    pub partners: Vec<WindowSample>,
    pub valid: Vec<WindowSample>,
    /// Includes flagged coarse windows under spatial multi-resolution.
    pub test: Vec<WindowSample>,
}

fn at_resolution(g: &SeriesGrid, r: u32, mode: AggregationMode) -> Result<SeriesGrid> {
    if g.interval_minutes() == r {
        Ok(g.clone())
    } else {
        aggregate_time(g, r, mode)
    }
}

/// Builds the windows of every resolution the experiment trains at, finest
/// first. Spatial coarse windows are added to the training split when
/// enabled.
pub fn prepare_data(
    tm: &SeriesGrid,
    sm: &SeriesGrid,
    holidays: &HolidaySet,
    spec: &ExperimentSpec,
    seed: u64,
) -> Result<Vec<PreparedData>> {
    spec.validate()?;
    let splits = split_grids(tm, sm, spec)?;
    let regions = if spec.smr {
        let k = spec.smr_regions.unwrap_or_else(|| default_k(tm.num_locations()));
        Some(kmeans_partition(tm.location_ids(), tm.centroids(), k, seed)?)
    } else {
        None
    };
    spec.intervals(tm.interval_minutes())
        .into_iter()
        .map(|r| {
            let shape = spec.window.shape(r)?;
            let grids = |(t, s): &(SeriesGrid, SeriesGrid)| -> Result<(SeriesGrid, SeriesGrid)> {
                Ok((at_resolution(t, r, spec.tm_aggregation)?, at_resolution(s, r, spec.sm_aggregation)?))
            };
            let windows = |(t, s): &(SeriesGrid, SeriesGrid)| make_windows_strided(t, s, shape, holidays, spec.window_stride);
            let coarse = |(t, s): &(SeriesGrid, SeriesGrid), stride: usize| -> Result<Vec<WindowSample>> {
                let Some(regions) = &regions else {
                    return Ok(Vec::new());
                };
                let ct = aggregate_space(t, regions, spec.tm_aggregation)?;
                let cs = aggregate_space(s, regions, spec.sm_aggregation)?;
                let mut w = make_windows_strided(&ct, &cs, shape, holidays, stride)?;
                w.iter_mut().for_each(|w| w.is_coarse = true);
                Ok(w)
            };
            // Coarse windows are thinned in the same proportion as the fine ones.
            let combined = |pair: &(SeriesGrid, SeriesGrid), cap: Option<usize>| -> Result<Vec<WindowSample>> {
                let all = windows(pair)?;
                let mut out = evenly_spaced(&all, cap);
                let extra = coarse(pair, spec.window_stride)?;
                let keep = (extra.len() * out.len()).div_ceil(all.len().max(1));
                out.extend(evenly_spaced(&extra, Some(keep)));
                Ok(out)
            };
            let train_grids = grids(&splits.train)?;
            let train = combined(&train_grids, spec.train.max_train_samples)?;
            let fine_train = train.iter().filter(|s| !s.is_coarse).count();
            let thinned = spec.window_stride > 1 || spec.train.max_train_samples.is_some_and(|c| c <= fine_train);
            let partners = if spec.tmr && thinned {
                let mut p = make_windows_strided(&train_grids.0, &train_grids.1, shape, holidays, 1)?;
                p.extend(coarse(&train_grids, 1)?);
                p
            } else {
                Vec::new()
            };
            Ok(PreparedData {
                interval_minutes: r,
                shape,
                train,
                partners,
                valid: evenly_spaced(&windows(&grids(&splits.valid)?)?, spec.train.max_valid_samples),
                test: combined(&grids(&splits.test)?, spec.max_test_samples)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub interval_minutes: u32,
    pub params: ModelParams,
    pub curve: LossCurve,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    /// In training order; the last stage is the delivered model.
    pub stages: Vec<StageResult>,
    pub scores: SeedScores,
}

impl SeedRun {
    pub fn model(&self) -> &ModelParams {
        &self.stages.last().expect("at least one stage").params
    }
}

/// Trains and scores one seed.
pub fn run_seed(data: &[PreparedData], spec: &ExperimentSpec, seed: u64) -> Result<SeedRun> {
    let stages: Vec<StageResult> = if spec.tmr {
        let sets: Vec<ResolutionData> = data
            .iter()
            .map(|d| ResolutionData {
                interval_minutes: d.interval_minutes,
                train: d.train.clone(),
                valid: d.valid.clone(),
                partners: d.partners.clone(),
            })
            .collect();
        let sets: [ResolutionData; 3] = sets
            .try_into()
            .map_err(|_| Error::Config("temporal multi-resolution needs three resolutions".into()))?;
        train_tmr(&sets, &spec.model, &spec.train, seed)?
            .into_iter()
            .map(|s| StageResult {
                interval_minutes: s.interval_minutes,
                params: s.outcome.params,
                curve: s.outcome.curve,
                best_epoch: s.outcome.best_epoch,
            })
            .collect()
    } else {
        let d = &data[0];
        let cfg = ModelConfig {
            input_len: d.shape.input_len,
            horizon: d.shape.horizon,
            interval_minutes: d.interval_minutes,
            seed,
            ..spec.model.clone()
        };
        let out = train_single_resolution(ModelParams::init(&cfg)?, &d.train, &d.valid, &spec.train, seed, None)?;
        vec![StageResult {
            interval_minutes: d.interval_minutes,
            params: out.params,
            curve: out.curve,
            best_epoch: out.best_epoch,
        }]
    };
    let model = &stages.last().unwrap().params;
    let scores = evaluate_horizons(model, &data[0].test, &spec.horizons, true, spec.train.eval_batch_size)?;
    Ok(SeedRun { seed, stages, scores })
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub runs: Vec<SeedRun>,
    pub report: EvalReport,
}

/// Every configured seed, then the multi-seed report.
pub fn run_experiment(tm: &SeriesGrid, sm: &SeriesGrid, holidays: &HolidaySet, spec: &ExperimentSpec) -> Result<ExperimentRun> {
    spec.validate()?;
    let mut runs = Vec::with_capacity(spec.train.seeds.len());
    for &seed in &spec.train.seeds {
        let data = prepare_data(tm, sm, holidays, spec, seed)?;
        runs.push(run_seed(&data, spec, seed)?);
    }
    let interval = spec.working_interval(tm.interval_minutes());
    let report = EvalReport::from_seeds(interval, &spec.horizons, runs.iter().map(|r| r.scores.clone()).collect())?;
    Ok(ExperimentRun { runs, report })
}

/// `<dir>/seed<k>/stage_<r>/best.ckpt`.
pub fn checkpoint_path(dir: &Path, seed: u64, interval_minutes: u32) -> PathBuf {
    dir.join(format!("seed{seed}")).join(format!("stage_{interval_minutes}")).join("best.ckpt")
}

/// Writes checkpoints, loss curves, the report and the test exports of the
/// first seed into `dir`.
pub fn save_run(
    dir: &Path,
    run: &ExperimentRun,
    test: &[WindowSample],
    export_samples: usize,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for r in &run.runs {
        for s in &r.stages {
            let ckpt = checkpoint_path(dir, r.seed, s.interval_minutes);
            save_checkpoint(&s.params, &ckpt)?;
            let curve = ckpt.with_file_name("loss_curve.json");
            fs::write(&curve, serde_json::to_string_pretty(&s.curve)?).map_err(|e| Error::io(&curve, e))?;
            written.extend([ckpt, curve]);
        }
    }
    if let Some(first) = run.runs.first() {
        let picked = evenly_spaced(&test.iter().filter(|s| !s.is_coarse).collect::<Vec<_>>(), Some(export_samples));
        if !picked.is_empty() {
            let bundles = model_forward_batch(first.model(), &picked)?;
            written.extend(export_results(dir, &bundles, &picked, Some(&run.report))?);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub wiring: AblationWiring,
    pub label: String,
    pub report: EvalReport,
}

/// Every wiring on the same data and seeds.
pub fn run_ablation(
    tm: &SeriesGrid,
    sm: &SeriesGrid,
    holidays: &HolidaySet,
    spec: &ExperimentSpec,
    wirings: &[AblationWiring],
) -> Result<Vec<AblationRow>> {
    wirings
        .iter()
        .map(|&w| {
            let s = ExperimentSpec {
                model: ModelConfig { wiring: w, ..spec.model.clone() },
                ..spec.clone()
            };
            Ok(AblationRow {
                wiring: w,
                label: w.label().to_string(),
                report: run_experiment(tm, sm, holidays, &s)?.report,
            })
        })
        .collect()
}

/// Rows of wirings against horizons, `MAE / RMSE` per cell.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut out = format!("{:<22}", "wiring");
    for h in &first.report.horizons {
        out.push_str(&format!("  {:>34}", format!("{h}h MAE / RMSE")));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<22}", format!("{} {}", r.wiring, r.label)));
        for s in &r.report.summary {
            out.push_str(&format!("  {:>34}", format!("{} / {}", s.mae, s.rmse)));
        }
        out.push('\n');
    }
    out
}
