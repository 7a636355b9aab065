//! Python bindings. Structured values (configs, plans, reports, manifests)
//! cross the boundary as plain dicts; tensors as flat lists of floats.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use probeforge_core::aggregators::{
    self as agg, load_checkpoint, params_sha256, probabilities, Mechanism, ProbeConfig, ProbeParams,
};
use probeforge_core::analysis;
use probeforge_core::bench::{flop_count as core_flop_count, BenchShape};
use probeforge_core::hstore::{self, batch_tight, DType, HStoreManifest, HiddenStateRecord, Split};
use probeforge_core::metrics;
use probeforge_core::synth::{generate, SynthSpec};
use probeforge_core::trainer::{self, Data, TrainPlan};
use probeforge_core::ProbeError;

create_exception!(probeforge, ProbeForgeError, PyException);
create_exception!(probeforge, NumericError, ProbeForgeError);

fn err(e: ProbeError) -> PyErr {
    match e {
        ProbeError::Config(_) => PyValueError::new_err(e.to_string()),
        e if e.is_numeric() => NumericError::new_err(e.to_string()),
        e => ProbeForgeError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn to_value(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Overlays the keys of `overrides` on the serialized `base`.
fn layered<T: Serialize + DeserializeOwned>(py: Python<'_>, base: &T, overrides: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let mut obj = match serde_json::to_value(base) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    };
    if let Some(o) = overrides {
        match to_value(py, o)? {
            Value::Object(m) => obj.extend(m),
            Value::Null => {}
            _ => return Err(PyValueError::new_err("expected a dict")),
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    serde_json::from_value(to_value(py, obj)?).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn split(s: &str) -> PyResult<Split> {
    s.parse().map_err(err)
}

fn record_dict(py: Python<'_>, r: &HiddenStateRecord) -> PyResult<Py<PyAny>> {
    let d = PyDict::new(py);
    d.set_item("id", &r.id)?;
    d.set_item("split", r.split.to_string())?;
    d.set_item("label", r.label)?;
    d.set_item("n_layers", r.n_layers)?;
    d.set_item("t", r.t)?;
    d.set_item("d", r.d)?;
    d.set_item("tensor", &r.tensor)?;
    Ok(d.into_any().unbind())
}

/// Read-only handle on a hidden-state store directory.
#[pyclass(module = "probeforge")]
struct Store {
    inner: hstore::Store,
}

#[pymethods]
impl Store {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Store {
            inner: hstore::Store::open(path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn path(&self) -> PathBuf {
        self.inner.dir().to_path_buf()
    }

    fn manifest(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.manifest())
    }

    fn split_indices(&self, name: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.split_indices(split(name)?))
    }

    /// Record `index` as a dict with a flat `[n_layers * t * d]` tensor.
    fn record(&self, py: Python<'_>, index: usize) -> PyResult<Py<PyAny>> {
        record_dict(py, &self.inner.record(index).map_err(err)?)
    }

    fn record_by_id(&self, py: Python<'_>, id: &str) -> PyResult<Py<PyAny>> {
        record_dict(py, &self.inner.record_by_id(id).map_err(err)?)
    }
}

/// Writes a store. Each record is a dict with `id`, `split`, `label`, `t` and
/// a flat `tensor` of `n_layers * t * d` floats.
#[pyfunction]
#[pyo3(signature = (path, d, n_layers, label_names, records, dtype="f32", provenance=None))]
fn write_store(
    py: Python<'_>,
    path: PathBuf,
    d: usize,
    n_layers: usize,
    label_names: Vec<String>,
    records: &Bound<'_, PyAny>,
    dtype: &str,
    provenance: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let dtype: DType = serde_json::from_value(Value::String(dtype.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown dtype {dtype:?} (f32 or f16)")))?;
    let mut header = HStoreManifest::new(d, n_layers, dtype, label_names);
    if let Some(p) = provenance {
        header.provenance = from_py(py, p)?;
    }
    let mut writer = hstore::StoreWriter::create(&path, header).map_err(err)?;
    for item in records.try_iter()? {
        let item = item?;
        let get = |k: &str| item.get_item(k);
        let rec = HiddenStateRecord::new(
            get("id")?.extract::<String>()?,
            split(&get("split")?.extract::<String>()?)?,
            get("label")?.extract()?,
            n_layers,
            get("t")?.extract()?,
            d,
            get("tensor")?.extract()?,
        )
        .map_err(err)?;
        writer.push(&rec).map_err(err)?;
    }
    to_py(py, &writer.finish().map_err(err)?)
}

/// Generates a synthetic store from a spec dict; returns its manifest.
#[pyfunction]
fn synth(py: Python<'_>, spec: &Bound<'_, PyAny>, out: PathBuf) -> PyResult<Py<PyAny>> {
    let spec: SynthSpec = from_py(py, spec)?;
    to_py(py, &generate(&spec, out).map_err(err)?)
}

/// Parameter breakdown for a config dict.
#[pyfunction]
fn count_params(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let cfg: ProbeConfig = from_py(py, config)?;
    cfg.validate().map_err(err)?;
    to_py(py, &agg::count_params(&cfg))
}

#[pyfunction]
fn flop_count(py: Python<'_>, config: &Bound<'_, PyAny>, t: usize, d: usize, n_layers: usize) -> PyResult<Py<PyAny>> {
    let cfg: ProbeConfig = from_py(py, config)?;
    let f = core_flop_count(&cfg, BenchShape { t, d, n_layers });
    let out = to_py(py, &f)?;
    out.bind(py).set_item("aggregation", f.aggregation())?;
    Ok(out)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc_scores(&scores, &positive).map_err(err)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    metrics::average_precision(&scores, &positive).map_err(err)
}

/// A trained or freshly initialized probe.
#[pyclass(module = "probeforge")]
struct Probe {
    params: ProbeParams<f32>,
}

#[pymethods]
impl Probe {
    /// Initializes a probe from a config dict.
    #[new]
    fn new(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<Self> {
        let cfg: ProbeConfig = from_py(py, config)?;
        Ok(Probe {
            params: ProbeParams::init(&cfg).map_err(err)?,
        })
    }

    /// Loads a checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Probe {
            params: load_checkpoint(path).map_err(err)?.params,
        })
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.params.config())
    }

    #[getter]
    fn sha256(&self) -> String {
        params_sha256(&self.params)
    }

    fn __len__(&self) -> usize {
        self.params.len()
    }

    /// Class probabilities for one example given as a flat `[n_layers * t * d]`
    /// tensor, plus the aggregation trace when the mechanism has one.
    #[pyo3(signature = (tensor, t))]
    fn predict(&self, py: Python<'_>, tensor: Vec<f32>, t: usize) -> PyResult<(Vec<f64>, Py<PyAny>)> {
        let cfg = self.params.config();
        let rec = HiddenStateRecord::new("input", Split::Test, 0, cfg.n_layers, t, cfg.d, tensor).map_err(err)?;
        let batch = batch_tight(std::slice::from_ref(&rec)).map_err(err)?;
        let out = agg::forward(&self.params, &batch, cfg.mechanism != Mechanism::Pooling).map_err(err)?;
        let z: Vec<f64> = out.logits.iter().map(|&v| f64::from(v)).collect();
        let trace = out.traces.and_then(|mut t| t.pop()).flatten();
        Ok((probabilities(&z, cfg.n_classes), to_py(py, &trace)?))
    }

    #[pyo3(signature = (store, split_name="test"))]
    fn evaluate(&self, py: Python<'_>, store: &Store, split_name: &str) -> PyResult<Py<PyAny>> {
        let data = Data::new(&store.inner).map_err(err)?;
        to_py(py, &trainer::evaluate(&self.params, &data, split(split_name)?).map_err(err)?)
    }

    #[pyo3(signature = (store, split_name="test"))]
    fn attention_report(&self, py: Python<'_>, store: &Store, split_name: &str) -> PyResult<Py<PyAny>> {
        let data = Data::new(&store.inner).map_err(err)?;
        to_py(py, &analysis::attention_report(&self.params, &data, split(split_name)?).map_err(err)?)
    }

    #[pyo3(signature = (store, split_name="test", top_k=3))]
    fn token_report(&self, py: Python<'_>, store: &Store, split_name: &str, top_k: usize) -> PyResult<Py<PyAny>> {
        let data = Data::new(&store.inner).map_err(err)?;
        to_py(py, &analysis::token_report(&self.params, &data, split(split_name)?, top_k).map_err(err)?)
    }
}

/// Trains a probe. `config` and `plan` are partial dicts layered over the
/// defaults; shape fields default to the store's. Writes a run directory when
/// `out` is given. Returns `(report, probe)`.
#[pyfunction]
#[pyo3(signature = (store, config=None, plan=None, out=None))]
fn train(
    py: Python<'_>,
    store: &Store,
    config: Option<&Bound<'_, PyAny>>,
    plan: Option<&Bound<'_, PyAny>>,
    out: Option<PathBuf>,
) -> PyResult<(Py<PyAny>, Probe)> {
    let m = store.inner.manifest();
    let cfg: ProbeConfig = layered(py, &ProbeConfig::new(Mechanism::ScoringGate, m.n_layers, m.d, m.n_classes()), config)?;
    let plan: TrainPlan = layered(py, &TrainPlan::default(), plan)?;
    let data = Data::new(&store.inner).map_err(err)?;
    let mut outcome = py.detach(|| trainer::train(&cfg, &plan, &data)).map_err(err)?;
    if let Some(dir) = out {
        trainer::write_run(dir, &mut outcome, Some(store.inner.dir())).map_err(err)?;
    }
    Ok((to_py(py, &outcome.report)?, Probe { params: outcome.params }))
}

#[pymodule]
fn probeforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ProbeForgeError", m.py().get_type::<ProbeForgeError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_class::<Store>()?;
    m.add_class::<Probe>()?;
    m.add_function(wrap_pyfunction!(write_store, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    Ok(())
}
