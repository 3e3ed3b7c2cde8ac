//! Python bindings: datasets, model fitting, conditional sampling and risk
//! curves. Results that are records on the Rust side (risk curves, fit
//! summaries) are returned as plain dicts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use qrgmm::datagen::{
    csv_ingest, synth_generate, BadRowPolicy, Covariate, FieldSchema, FmLocationScaleParams,
    FmParamConfig, RawValue, SchemaConfig,
};
use qrgmm::eval::ModelSpec;
use qrgmm::generator::ConditionalSampler;
use qrgmm::model::{AnyModel, QuantileModel};
use qrgmm::quantreg::{default_m, QuantileGrid};
use qrgmm::risk::{risk_curve, Estimator, GeneralizedLoss, RiskSpec};

create_exception!(qrgmm, QrgmmError, PyValueError);
create_exception!(qrgmm, UnseenLevelError, QrgmmError);

fn err(e: qrgmm::Error) -> PyErr {
    match e {
        qrgmm::Error::UnseenLevel { .. } => UnseenLevelError::new_err(e.to_string()),
        _ => QrgmmError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    QrgmmError::new_err(e.to_string())
}

/// Parses JSON text into Python objects.
fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

#[derive(FromPyObject)]
enum PyRaw {
    Number(f64),
    Text(String),
}

fn encode(schema: &FieldSchema, covariates: BTreeMap<String, PyRaw>) -> PyResult<Vec<Covariate>> {
    let raw = covariates
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                PyRaw::Number(x) => RawValue::Number(x),
                PyRaw::Text(s) => RawValue::Text(s),
            };
            (k, v)
        })
        .collect();
    schema.encode_named(&raw).map_err(err)
}

#[pyclass(frozen, module = "qrgmm")]
struct Dataset {
    inner: qrgmm::datagen::Dataset,
    response: String,
}

#[pymethods]
impl Dataset {
    /// Reads a CSV described by a schema TOML file.
    #[staticmethod]
    #[pyo3(signature = (path, schema, skip_bad_rows = false))]
    fn from_csv(path: PathBuf, schema: PathBuf, skip_bad_rows: bool) -> PyResult<Self> {
        let config = SchemaConfig::load(&schema).map_err(err)?;
        let policy = if skip_bad_rows {
            BadRowPolicy::Skip
        } else {
            BadRowPolicy::Error
        };
        let (inner, _) = csv_ingest(&path, &config, policy).map_err(err)?;
        Ok(Dataset {
            inner,
            response: config.response,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn field_names(&self) -> Vec<String> {
        self.inner
            .schema()
            .fields()
            .iter()
            .map(|f| f.name.clone())
            .collect()
    }

    #[getter]
    fn response(&self) -> Vec<f64> {
        self.inner.response().to_vec()
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Row `i` as a dict of field values.
    fn row<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyAny>> {
        if i >= self.inner.n() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!(
                "row {i} out of range"
            )));
        }
        to_py(py, &self.inner.schema().decode(self.inner.row(i)))
    }

    /// Random (train, test) split.
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = self.inner.split(train_fraction, seed).map_err(err)?;
        let wrap = |inner| Dataset {
            inner,
            response: self.response.clone(),
        };
        Ok((wrap(a), wrap(b)))
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .save_csv(&path, b',', &self.response)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, fields={})",
            self.inner.n(),
            self.inner.schema().len()
        )
    }
}

/// Synthetic sales data from a random FM location-scale model.
#[pyfunction]
#[pyo3(signature = (n, categories = 100, sellers = 300, continuous = 10, seed = 0, param_seed = 1))]
fn synth_sales(
    py: Python<'_>,
    n: usize,
    categories: usize,
    sellers: usize,
    continuous: usize,
    seed: u64,
    param_seed: u64,
) -> PyResult<Dataset> {
    let inner = py
        .detach(|| {
            let schema = FieldSchema::sales_layout(categories, sellers, continuous)?;
            let params =
                FmLocationScaleParams::random(&schema, &FmParamConfig::default(), param_seed)?;
            synth_generate(&params, &schema, n, seed)
        })
        .map_err(err)?;
    Ok(Dataset {
        inner,
        response: "sales".into(),
    })
}

#[pyclass(frozen, module = "qrgmm")]
struct Model {
    sampler: ConditionalSampler<AnyModel>,
    id: String,
}

impl Model {
    fn wrap(model: AnyModel) -> PyResult<Self> {
        let id = qrgmm::artifact::model_id(&model).map_err(err)?;
        Ok(Model {
            sampler: ConditionalSampler::new(model),
            id,
        })
    }

    fn model(&self) -> &AnyModel {
        self.sampler.model()
    }
}

#[pymethods]
impl Model {
    /// Fits `estimator` ("linear" or "deepfm") on `data`. `config` is a
    /// JSON object of solver or training settings.
    #[staticmethod]
    #[pyo3(signature = (data, estimator = "linear", m = None, seed = 0, config = None))]
    fn fit(
        py: Python<'_>,
        data: &Dataset,
        estimator: &str,
        m: Option<usize>,
        seed: u64,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let config = config.unwrap_or("{}");
        let spec = match estimator {
            "linear" => ModelSpec::LinearQr {
                solver: serde_json::from_str(config).map_err(json_err)?,
            },
            "deepfm" => ModelSpec::DeepFm {
                config: serde_json::from_str(config).map_err(json_err)?,
            },
            other => {
                return Err(QrgmmError::new_err(format!(
                    "unknown estimator {other:?} (expected linear or deepfm)"
                )))
            }
        };
        let d = &data.inner;
        let model = py
            .detach(|| {
                let grid = QuantileGrid::new(m.unwrap_or_else(|| default_m(d.n())))?;
                spec.fit(d, &grid, seed)
            })
            .map_err(err)?;
        Model::wrap(model)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Model::wrap(qrgmm::artifact::load(&path).map_err(err)?)
    }

    /// Writes the artifact and returns the model id.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        qrgmm::artifact::save(self.model(), &path).map_err(err)
    }

    #[getter]
    fn id(&self) -> &str {
        &self.id
    }

    #[getter]
    fn kind(&self) -> String {
        self.model().kind().to_string()
    }

    #[getter]
    fn m(&self) -> usize {
        self.model().grid().m()
    }

    #[getter]
    fn levels(&self) -> Vec<f64> {
        self.model().grid().levels()
    }

    /// Sorted quantile predictions at the grid levels.
    fn quantiles(&self, covariates: BTreeMap<String, PyRaw>) -> PyResult<Vec<f64>> {
        let x = encode(self.model().schema(), covariates)?;
        Ok(self.sampler.curve(&x).map_err(err)?.knots().to_vec())
    }

    /// `k` draws from the generated conditional distribution.
    #[pyo3(signature = (covariates, k, seed = 0))]
    fn sample(
        &self,
        py: Python<'_>,
        covariates: BTreeMap<String, PyRaw>,
        k: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let x = encode(self.model().schema(), covariates)?;
        py.detach(|| self.sampler.sample(&x, k, seed)).map_err(err)
    }

    /// Generated conditional CDF at `y`.
    fn cdf(&self, covariates: BTreeMap<String, PyRaw>, y: f64) -> PyResult<f64> {
        let x = encode(self.model().schema(), covariates)?;
        self.sampler.cdf_eval(&x, y).map_err(err)
    }

    /// Risk curve as a dict. Without `l_bar` the loan grid runs to `r`
    /// times the generated 99th percentile. `loss` is one of
    /// default_probability, expected_loss or squared_loss; `mc_k` switches
    /// to the Monte Carlo estimator.
    #[pyo3(signature = (covariates, r, l_bar = None, l_min = 0.0, points = 100, xi = None, loss = None, mc_k = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn risk_curve<'py>(
        &self,
        py: Python<'py>,
        covariates: BTreeMap<String, PyRaw>,
        r: f64,
        l_bar: Option<f64>,
        l_min: f64,
        points: usize,
        xi: Option<f64>,
        loss: Option<&str>,
        mc_k: Option<usize>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let x = encode(self.model().schema(), covariates)?;
        let gl = match loss {
            None => None,
            Some("default_probability") => Some(GeneralizedLoss::default_probability()),
            Some("expected_loss") => Some(GeneralizedLoss::expected_loss()),
            Some("squared_loss") => Some(GeneralizedLoss::squared_loss()),
            Some(other) => return Err(QrgmmError::new_err(format!("unknown loss {other:?}"))),
        };
        let estimator = match mc_k {
            Some(k) => Estimator::MonteCarlo { k, seed },
            None => Estimator::ClosedForm,
        };
        let curve = py
            .detach(|| {
                let cdf = self.sampler.curve(&x)?;
                let mut spec = match l_bar {
                    Some(l_bar) => RiskSpec::uniform(r, l_min, l_bar, points)?,
                    None => RiskSpec::auto(&cdf, r, l_min, points)?,
                };
                if let Some(xi) = xi {
                    spec = spec.with_xi(xi)?;
                }
                risk_curve(&cdf, &spec, estimator, gl.as_ref())
            })
            .map_err(err)?;
        to_py(py, &curve)
    }

    /// Empirical level of each grid quantile on `data`.
    fn calibration(&self, data: &Dataset) -> PyResult<Vec<f64>> {
        qrgmm::eval::calibration(self.model(), &data.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(id={:?}, kind={}, m={})",
            self.id,
            self.model().kind(),
            self.m()
        )
    }
}

#[pymodule]
#[pyo3(name = "qrgmm")]
fn qrgmm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", qrgmm::VERSION)?;
    m.add("QrgmmError", m.py().get_type::<QrgmmError>())?;
    m.add("UnseenLevelError", m.py().get_type::<UnseenLevelError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_sales, m)?)?;
    Ok(())
}
