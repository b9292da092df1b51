//! Python module `spikestag`: datasets, the forecaster, metrics and energy.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use spikestag::checkpoint::{load_model, save_model};
use spikestag::cli::{energy_report, splits_for};
use spikestag::data::{self, format_timestamp, SeriesDataset};
use spikestag::energy::{E_AC_PJ, E_MAC_PJ};
use spikestag::model::{ForecastModel, ModelConfig};
use spikestag::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Regularly sampled multivariate series.
#[pyclass(name = "Dataset", module = "spikestag", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: SeriesDataset,
}

#[pymethods]
impl PyDataset {
    /// Graph-coupled synthetic series, hourly.
    #[staticmethod]
    #[pyo3(signature = (nodes, steps, seed=1))]
    fn synthetic(nodes: usize, steps: usize, seed: u64) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::synth_generate(nodes, steps, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load_csv(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_csv(path).map_err(py_err)?,
        })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        data::write_csv(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.nodes()
    }

    #[getter]
    fn node_names(&self) -> Vec<String> {
        self.inner.nodes.clone()
    }

    /// Rows of values, one list per step.
    fn values(&self) -> Vec<Vec<f32>> {
        self.inner.values.chunks(self.inner.nodes()).map(|r| r.to_vec()).collect()
    }

    fn timestamps(&self) -> Vec<String> {
        self.inner.timestamps.iter().map(format_timestamp).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.steps()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(steps={}, nodes={})", self.inner.steps(), self.inner.nodes())
    }
}

/// The forecaster. Keyword arguments are config keys, e.g.
/// `Model(nodes=8, ts=4, ablation="W4")`.
#[pyclass(name = "Model", module = "spikestag")]
pub struct PyModel {
    inner: ForecastModel,
}

fn config_from(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<ModelConfig> {
    let mut c = ModelConfig::default();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = match v.extract::<bool>() {
                Ok(b) if v.is_instance_of::<pyo3::types::PyBool>() => b.to_string(),
                _ => v.str()?.to_string(),
            };
            c.set(&key, &value).map_err(py_err)?;
        }
    }
    Ok(c)
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(PyModel {
            inner: ForecastModel::new(config_from(kwargs)?).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path, &self.inner).map_err(py_err)
    }

    /// Config as `{key: value-string}`.
    fn config(&self) -> Vec<(String, String)> {
        self.inner
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.keys().cloned().collect()
    }

    /// Trains in place; returns `(epoch, loss, val_r2, val_rse)` per epoch.
    fn train(&mut self, py: Python<'_>, ds: &PyDataset) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let splits = splits_for(&self.inner.config, &ds.inner).map_err(py_err)?;
        let model = &mut self.inner;
        let report = py.detach(|| model.train(&ds.inner, &splits)).map_err(py_err)?;
        Ok(report.epochs.iter().map(|l| (l.epoch, l.loss, l.r2, l.rse)).collect())
    }

    /// `(r2, rse)` on `split` ("train", "val" or "test").
    #[pyo3(signature = (ds, split="test"))]
    fn evaluate(&self, ds: &PyDataset, split: &str) -> PyResult<(f64, f64)> {
        let s = splits_for(&self.inner.config, &ds.inner).map_err(py_err)?;
        let starts = match split {
            "train" => &s.train,
            "val" => &s.val,
            "test" => &s.test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        let m = self.inner.evaluate(&ds.inner, starts).map_err(py_err)?;
        Ok((m.r2, m.rse))
    }

    /// Forecast after the window starting at `start` (default: last window).
    /// Returns `(timestamps, rows)`.
    #[pyo3(signature = (ds, start=None))]
    fn forecast(&self, ds: &PyDataset, start: Option<usize>) -> PyResult<(Vec<String>, Vec<Vec<f32>>)> {
        let t = self.inner.config.input_len;
        let start = match start {
            Some(s) => s,
            None => ds
                .inner
                .steps()
                .checked_sub(t)
                .ok_or_else(|| PyValueError::new_err(format!("need at least {t} steps")))?,
        };
        let (times, values) = self.inner.forecast_from(&ds.inner, start).map_err(py_err)?;
        let rows = values.chunks(self.inner.config.nodes).map(|r| r.to_vec()).collect();
        Ok((times.iter().map(format_timestamp).collect(), rows))
    }

    /// Energy estimate on the first `batch` test windows, as a dict.
    #[pyo3(signature = (ds, batch=8, e_mac=E_MAC_PJ, e_ac=E_AC_PJ))]
    fn energy<'py>(
        &self,
        py: Python<'py>,
        ds: &PyDataset,
        batch: usize,
        e_mac: f64,
        e_ac: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let r = energy_report(&self.inner, &ds.inner, batch, e_mac, e_ac).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("params", r.params)?;
        d.set_item("mac_ops", r.mac_ops)?;
        d.set_item("ac_ops", r.ac_ops)?;
        d.set_item("energy_mj", r.energy_mj)?;
        d.set_item("dense_energy_mj", r.dense_energy_mj)?;
        d.set_item("reduction_pct", r.reduction_pct)?;
        let layers: Vec<(String, u64, u64, f64, f64)> = r
            .layers
            .iter()
            .map(|l| (l.layer.clone(), l.mac_ops, l.ac_ops, l.spike_rate, l.energy_mj))
            .collect();
        d.set_item("layers", layers)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(ablation={}, nodes={}, params={})",
            self.inner.config.ablation,
            self.inner.config.nodes,
            self.inner.param_count()
        )
    }
}

#[pyfunction]
fn metric_r2(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    data::metric_r2(&pred, &target).map_err(py_err)
}

#[pyfunction]
fn metric_rse(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    data::metric_rse(&pred, &target).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "spikestag")]
fn spikestag_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(metric_r2, m)?)?;
    m.add_function(wrap_pyfunction!(metric_rse, m)?)?;
    m.add("E_MAC_PJ", E_MAC_PJ)?;
    m.add("E_AC_PJ", E_AC_PJ)?;
    Ok(())
}
