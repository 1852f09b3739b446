//! Python bindings: grids, windows, models, training and evaluation.
//! Configurations and reports cross the boundary as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use xmtrans_core::data::{
    aggregate_time, load_grid_csv, make_windows_strided, synthesize_lagged_pair, AggregationMode, ColumnSpec, FillRule,
    HolidaySet, SeriesGrid, SynthConfig, WindowSample, WindowShape,
};
use xmtrans_core::model::{
    load_checkpoint, model_forward_batch, predict, revin_denormalize, revin_normalize, save_checkpoint, ModelConfig,
    ModelParams, RevInState,
};
use xmtrans_core::train::{evaluate_horizons, run_experiment, train_single_resolution, ExperimentSpec, TrainConfig};
use xmtrans_core::{Error, Result};

fn py_err(e: Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> Result<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| Error::Config(e.to_string())),
    }
}

fn mode(name: &str) -> Result<AggregationMode> {
    match name {
        "mean" => Ok(AggregationMode::Mean),
        "sum" => Ok(AggregationMode::Sum),
        _ => Err(Error::Usage(format!("aggregation mode {name:?} is not \"mean\" or \"sum\""))),
    }
}

fn fill(name: &str) -> Result<FillRule> {
    match name {
        "zero" => Ok(FillRule::Zero),
        "forward" => Ok(FillRule::Forward),
        _ => Err(Error::Usage(format!("fill rule {name:?} is not \"zero\" or \"forward\""))),
    }
}

/// N locations by T readings of one modality.
#[pyclass(name = "Grid", module = "xmtrans", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyGrid(SeriesGrid);

#[pymethods]
impl PyGrid {
    #[staticmethod]
    #[pyo3(signature = (path, modality, fill_rule = "zero", interval_minutes = None))]
    fn load_csv(path: PathBuf, modality: &str, fill_rule: &str, interval_minutes: Option<u32>) -> PyResult<Self> {
        let spec = ColumnSpec {
            modality: modality.to_string(),
            fill: fill(fill_rule).map_err(py_err)?,
            interval_minutes,
        };
        load_grid_csv(&path, &spec).map(PyGrid).map_err(py_err)
    }

    #[getter]
    fn location_ids(&self) -> Vec<String> {
        self.0.location_ids().to_vec()
    }

    #[getter]
    fn interval_minutes(&self) -> u32 {
        self.0.interval_minutes()
    }

    #[getter]
    fn start(&self) -> String {
        self.0.start().to_string()
    }

    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        self.0.values().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.num_steps()
    }

    #[pyo3(signature = (minutes, mode_name = "mean"))]
    fn aggregate_time(&self, minutes: u32, mode_name: &str) -> PyResult<Self> {
        aggregate_time(&self.0, minutes, mode(mode_name).map_err(py_err)?)
            .map(PyGrid)
            .map_err(py_err)
    }

    fn slice_steps(&self, start: usize, stop: usize) -> PyResult<Self> {
        self.0.slice_steps(start, stop).map(PyGrid).map_err(py_err)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_csv(&path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid({:?}, locations={}, steps={}, interval={} min)",
            self.0.modality(),
            self.0.num_locations(),
            self.0.num_steps(),
            self.0.interval_minutes()
        )
    }
}

/// One input window with its target.
#[pyclass(name = "Window", module = "xmtrans", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyWindow(WindowSample);

#[pymethods]
impl PyWindow {
    #[getter]
    fn location_id(&self) -> String {
        self.0.location_id.clone()
    }

    #[getter]
    fn input_start(&self) -> String {
        self.0.input_start.to_string()
    }

    #[getter]
    fn tm_input(&self) -> Vec<f64> {
        self.0.tm_input.clone()
    }

    #[getter]
    fn sm_input(&self) -> Vec<f64> {
        self.0.sm_input.clone()
    }

    #[getter]
    fn target(&self) -> Vec<f64> {
        self.0.target.clone()
    }

    #[getter]
    fn resolution_minutes(&self) -> u32 {
        self.0.resolution_minutes
    }

    #[getter]
    fn is_coarse(&self) -> bool {
        self.0.is_coarse
    }
}

fn samples(windows: &[PyRef<'_, PyWindow>]) -> Vec<WindowSample> {
    windows.iter().map(|w| w.0.clone()).collect()
}

/// Trained or freshly initialised network.
#[pyclass(name = "Model", module = "xmtrans", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel(ModelParams);

#[pymethods]
impl PyModel {
    /// `config` is a JSON object of ModelConfig fields; omitted fields take
    /// their defaults.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = from_json(config).map_err(py_err)?;
        ModelParams::init(&cfg).map(PyModel).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(PyModel).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, &path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.0.config).expect("config serializes")
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.scalar_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.0.parameters().iter().map(|p| p.name.clone()).collect()
    }

    #[pyo3(signature = (windows, batch_size = 256))]
    fn forecast(&self, windows: Vec<PyRef<'_, PyWindow>>, batch_size: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = samples(&windows);
        predict(&self.0, &s.iter().collect::<Vec<_>>(), batch_size).map_err(py_err)
    }

    /// Head-averaged second-attention map of the last fusion layer, rows
    /// indexed by query step; `None` for wiring e1.
    fn attention(&self, window: PyRef<'_, PyWindow>) -> PyResult<Option<Vec<Vec<f64>>>> {
        let b = model_forward_batch(&self.0, &[&window.0]).map_err(py_err)?;
        Ok(b[0].head_averaged_temporal())
    }

    /// Mini-batch Adam with early stopping. Returns the best model and the
    /// loss curve as JSON.
    #[pyo3(signature = (train, valid, config = None, seed = 0))]
    fn train(
        &self,
        py: Python<'_>,
        train: Vec<PyRef<'_, PyWindow>>,
        valid: Vec<PyRef<'_, PyWindow>>,
        config: Option<&str>,
        seed: u64,
    ) -> PyResult<(PyModel, String)> {
        let cfg: TrainConfig = from_json(config).map_err(py_err)?;
        let (t, v) = (samples(&train), samples(&valid));
        let params = self.0.clone();
        let out = py
            .detach(|| train_single_resolution(params, &t, &v, &cfg, seed, None))
            .map_err(py_err)?;
        let curve = serde_json::to_string(&out.curve).expect("curve serializes");
        Ok((PyModel(out.params), curve))
    }

    /// Per-horizon MAE and RMSE as JSON.
    #[pyo3(signature = (windows, horizons, fine_only = true))]
    fn evaluate(&self, windows: Vec<PyRef<'_, PyWindow>>, horizons: Vec<u32>, fine_only: bool) -> PyResult<String> {
        let s = samples(&windows);
        let scores = evaluate_horizons(&self.0, &s, &horizons, fine_only, 256).map_err(py_err)?;
        Ok(serde_json::to_string(&scores).expect("scores serialize"))
    }

    fn __repr__(&self) -> String {
        let c = &self.0.config;
        format!(
            "Model(wiring={}, d={}, heads={}, layers={}, input_len={}, horizon={})",
            c.wiring, c.d, c.heads, c.layers, c.input_len, c.horizon
        )
    }
}

/// Lag-coupled `(tm, sm)` pair.
#[pyfunction]
#[pyo3(signature = (locations, steps, interval_minutes, lag, coupling, noise_sd = 0.5, seed = 0))]
fn synthesize(
    locations: usize,
    steps: usize,
    interval_minutes: u32,
    lag: usize,
    coupling: f64,
    noise_sd: f64,
    seed: u64,
) -> PyResult<(PyGrid, PyGrid)> {
    let cfg = SynthConfig::new(locations, steps, interval_minutes, lag, coupling, noise_sd, seed);
    let (tm, sm) = synthesize_lagged_pair(&cfg).map_err(py_err)?;
    Ok((PyGrid(tm), PyGrid(sm)))
}

#[pyfunction]
#[pyo3(signature = (tm, sm, input_len, horizon, stride = 1))]
fn make_windows(tm: &PyGrid, sm: &PyGrid, input_len: usize, horizon: usize, stride: usize) -> PyResult<Vec<PyWindow>> {
    let w = make_windows_strided(&tm.0, &sm.0, WindowShape { input_len, horizon }, &HolidaySet::new(), stride)
        .map_err(py_err)?;
    Ok(w.into_iter().map(PyWindow).collect())
}

/// Runs a full experiment described by an ExperimentSpec JSON object.
/// Returns the delivered model of every seed and the report as JSON.
#[pyfunction]
#[pyo3(signature = (tm, sm, spec = None))]
fn experiment(py: Python<'_>, tm: &PyGrid, sm: &PyGrid, spec: Option<&str>) -> PyResult<(Vec<PyModel>, String)> {
    let spec: ExperimentSpec = from_json(spec).map_err(py_err)?;
    let (tm, sm) = (tm.0.clone(), sm.0.clone());
    let run = py
        .detach(|| run_experiment(&tm, &sm, &HolidaySet::new(), &spec))
        .map_err(py_err)?;
    let report = serde_json::to_string(&run.report).expect("report serializes");
    Ok((run.runs.iter().map(|r| PyModel(r.model().clone())).collect(), report))
}

/// Standardises a window; returns `(normalised, mean, std)`.
#[pyfunction]
#[pyo3(signature = (window, gamma = 1.0, beta = 0.0))]
fn revin_forward(window: Vec<f64>, gamma: f64, beta: f64) -> (Vec<f64>, f64, f64) {
    let (x, s) = revin_normalize(&window, gamma, beta);
    (x, s.mean, s.std)
}

#[pyfunction]
#[pyo3(signature = (values, mean, std, gamma = 1.0, beta = 0.0))]
fn revin_inverse(values: Vec<f64>, mean: f64, std: f64, gamma: f64, beta: f64) -> Vec<f64> {
    revin_denormalize(&values, &RevInState { mean, std }, gamma, beta)
}

#[pyfunction]
#[pyo3(signature = (pred, from_minutes, to_minutes, mode_name = "mean"))]
fn aggregate_predictions(pred: Vec<f64>, from_minutes: u32, to_minutes: u32, mode_name: &str) -> PyResult<Vec<f64>> {
    xmtrans_core::data::aggregate_predictions(&pred, from_minutes, to_minutes, mode(mode_name).map_err(py_err)?)
        .map_err(py_err)
}

#[pymodule]
fn xmtrans(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyWindow>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(make_windows, m)?)?;
    m.add_function(wrap_pyfunction!(experiment, m)?)?;
    m.add_function(wrap_pyfunction!(revin_forward, m)?)?;
    m.add_function(wrap_pyfunction!(revin_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_predictions, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_configs_fill_defaults_and_reject_garbage() {
        let cfg: ModelConfig = from_json(Some(r#"{"d": 8, "heads": 2, "wiring": "e3"}"#)).unwrap();
        assert_eq!((cfg.d, cfg.heads, cfg.layers), (8, 2, ModelConfig::default().layers));
        assert_eq!(from_json::<TrainConfig>(None).unwrap(), TrainConfig::default());
        assert!(matches!(from_json::<ModelConfig>(Some("{")), Err(Error::Config(_))));
    }

    #[test]
    fn names_map_to_modes() {
        assert_eq!(mode("sum").unwrap(), AggregationMode::Sum);
        assert!(matches!(mode("max"), Err(Error::Usage(_))));
        assert_eq!(fill("forward").unwrap(), FillRule::Forward);
        assert!(fill("nan").is_err());
    }
}
