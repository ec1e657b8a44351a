//! Python bindings for the `lada` crate. Fields cross the boundary as
//! nested lists (`rows` lists of `cols` floats), latent states as flat
//! lists.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use lada::assimilate::{self, CovarianceEstimate, ObservationOperator};
use lada::cae::CaeModel;
use lada::dataset;
use lada::harness::{self, ResultTable};
use lada::linalg::Matrix;
use lada::scene::{self, Field};
use lada::surrogate::LstmModel;

create_exception!(lada_py, ConfigError, PyValueError, "Invalid experiment configuration.");
create_exception!(lada_py, NumericalError, PyArithmeticError, "Divergence or an ill-conditioned solve.");

fn to_py(e: lada::Error) -> PyErr {
    if e.is_config() {
        ConfigError::new_err(e.to_string())
    } else if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn field_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Field> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged field rows"));
    }
    Field::new(r, c, 1, rows.concat()).map_err(to_py)
}

fn field_to_rows(f: &Field) -> Vec<Vec<f64>> {
    f.values()[..f.rows() * f.cols()]
        .chunks(f.cols())
        .map(<[f64]>::to_vec)
        .collect()
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(to_py)
}

fn table_to_dict(t: &ResultTable) -> HashMap<String, HashMap<String, f64>> {
    t.rows
        .iter()
        .map(|(label, values)| {
            let row = t.columns.iter().cloned().zip(values.iter().copied()).collect();
            (label.clone(), row)
        })
        .collect()
}

/// Experiment configuration. Every key is optional; missing values take
/// the desk-scale defaults.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => harness::ExperimentConfig::from_toml(t).map_err(to_py)?,
            None => harness::ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: harness::ExperimentConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.cae.latent_dim
    }

    fn observation_timesteps(&self) -> Vec<usize> {
        self.inner.observation_timesteps()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, out_dir={:?})", self.inner.seed, self.inner.out_dir)
    }
}

/// Trained convolutional autoencoder.
#[pyclass(name = "Autoencoder")]
struct PyAutoencoder {
    inner: CaeModel,
}

#[pymethods]
impl PyAutoencoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyAutoencoder {
            inner: CaeModel::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn encode(&self, field: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.encode(&field_from_rows(field)?).map_err(to_py)
    }

    fn decode(&self, latent: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(field_to_rows(&self.inner.decode(&latent).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }
}

/// Trained LSTM surrogate over latent states.
#[pyclass(name = "Surrogate")]
struct PySurrogate {
    inner: LstmModel,
}

#[pymethods]
impl PySurrogate {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySurrogate {
            inner: LstmModel::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn lookback(&self) -> usize {
        self.inner.lookback()
    }

    /// Next latent state after a window of `lookback` states.
    fn forecast(&self, window: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.forecast(&window).map_err(to_py)
    }
}

/// Runs the scene and returns normalized snapshots.
#[pyfunction]
fn simulate(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let cfg = config.inner.clone();
    let fields = py.detach(move || -> lada::Result<Vec<Field>> {
        let range = (cfg.scene.ambient_ppm, cfg.scene.initial_ppm);
        scene::simulate(&cfg.scene)?
            .iter()
            .map(|f| scene::normalize(f, range.0, range.1))
            .collect()
    });
    Ok(fields.map_err(to_py)?.iter().map(field_to_rows).collect())
}

/// Train, validation and test timesteps.
#[pyfunction]
#[pyo3(signature = (total, jump = 1, observation_timesteps = Vec::new()))]
fn split(total: usize, jump: usize, observation_timesteps: Vec<usize>) -> PyResult<HashMap<String, Vec<usize>>> {
    let s = dataset::split(total, jump, &observation_timesteps).map_err(to_py)?;
    Ok(HashMap::from([
        ("train".to_string(), s.train),
        ("val".to_string(), s.val),
        ("test".to_string(), s.test),
    ]))
}

/// `(inputs, target)` index windows over a series of length `length`.
#[pyfunction]
fn window(length: usize, q: usize) -> PyResult<Vec<(Vec<usize>, usize)>> {
    let idx: Vec<usize> = (0..length).collect();
    Ok(dataset::window(&idx, q)
        .map_err(to_py)?
        .into_iter()
        .map(|s| (s.inputs, s.target))
        .collect())
}

#[pyfunction]
fn kfold(indices: Vec<usize>, k: usize, seed: u64) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
    dataset::kfold(&indices, k, seed).map_err(to_py)
}

/// Mean-removed `V Vᵀ`, optionally divided by `s - 1`.
#[pyfunction]
#[pyo3(signature = (samples, normalize = false))]
fn sample_covariance(samples: Vec<Vec<f64>>, normalize: bool) -> PyResult<Vec<Vec<f64>>> {
    let c = assimilate::sample_covariance(&samples, normalize).map_err(to_py)?;
    Ok(matrix_to_rows(&c.matrix))
}

/// `Q (Q + R)^-1` with the identity observation operator.
#[pyfunction]
fn kalman_gain(q: Vec<Vec<f64>>, r: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let wrap = |m: Matrix| CovarianceEstimate {
        provenance: assimilate::Provenance::SampleBased { samples: 0 },
        matrix: m,
    };
    let k = assimilate::kalman_gain(
        &wrap(matrix_from_rows(&q)?),
        ObservationOperator::Identity,
        &wrap(matrix_from_rows(&r)?),
    )
    .map_err(to_py)?;
    Ok(matrix_to_rows(&k))
}

#[pyfunction]
fn analysis_update(forecast: Vec<f64>, observation: Vec<f64>, gain: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    assimilate::analysis_update(&forecast, &observation, &matrix_from_rows(&gain)?).map_err(to_py)
}

/// Runs the whole pipeline, writing everything to the config's output
/// directory, and returns the summary tables keyed by name.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config: &PyConfig) -> PyResult<HashMap<String, HashMap<String, HashMap<String, f64>>>> {
    let cfg = config.inner.clone();
    let report = py.detach(move || harness::run_full_pipeline(&cfg)).map_err(to_py)?;
    let a = &report.assimilation;
    let mut out = HashMap::new();
    out.insert("training".into(), table_to_dict(&report.models.training_table().map_err(to_py)?));
    out.insert("latent".into(), table_to_dict(&a.latent_table().map_err(to_py)?));
    out.insert("physical".into(), table_to_dict(&a.physical_table().map_err(to_py)?));
    if !a.standard.is_empty() {
        out.insert("standard".into(), table_to_dict(&a.standard_table().map_err(to_py)?));
    }
    Ok(out)
}

#[pymodule]
fn lada_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyAutoencoder>()?;
    m.add_class::<PySurrogate>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(window, m)?)?;
    m.add_function(wrap_pyfunction!(kfold, m)?)?;
    m.add_function(wrap_pyfunction!(sample_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(kalman_gain, m)?)?;
    m.add_function(wrap_pyfunction!(analysis_update, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
