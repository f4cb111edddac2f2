//! Python bindings: datasets, run configuration, training, evaluation and
//! the interval probe.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tsrec::config::RunConfig;
use tsrec::data::{ColumnSpec, DataSplit, InteractionLog, ItemId, RtimCache, UserId};
use tsrec::eval::{
    build_eval_groups, curve_argmax, evaluate, interval_histogram, jaccard_repeat_similarity,
    probe_interval_response, CohortMetrics, DatasetStats, MetricsReport, ModelRanker, Part,
};
use tsrec::model::{load_checkpoint, save_checkpoint, train, PopRec, TsRec};
use tsrec::numerics::GradCheckOptions;
use tsrec::pipeline::{gradient_check, prepare, probe_instance};

fn py_err(e: tsrec::Error) -> PyErr {
    match e {
        tsrec::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn apply_overrides(cfg: &mut RunConfig, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
    if let Some(kw) = overrides {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            let value = match value.as_str() {
                "True" => "true".to_string(),
                "False" => "false".to_string(),
                _ => value,
            };
            cfg.set(&key, &value).map_err(py_err)?;
        }
    }
    cfg.validate().map_err(py_err)
}

/// Run configuration. Keyword arguments override the file, which overrides
/// the defaults; generator keys take a `synth.` prefix, e.g.
/// `Config(**{"d": 16, "synth.users": 50})`.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, **overrides))]
    fn new(path: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(p) = path {
            inner.apply_file(&p).map_err(py_err)?;
        }
        apply_overrides(&mut inner, overrides)?;
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)?;
        self.inner.validate().map_err(py_err)
    }

    fn to_dict(&self) -> BTreeMap<String, String> {
        self.inner.entries().into_iter().collect()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash())
    }
}

/// An interaction log with its raw id vocabularies.
#[pyclass(name = "Dataset")]
struct PyDataset {
    log: InteractionLog,
}

#[pymethods]
impl PyDataset {
    /// Planted-pattern log from the generator settings of `config`.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn synthetic(config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let synth = tsrec::synth::generate(&cfg.synth).map_err(py_err)?;
        Ok(Self { log: synth.log })
    }

    /// Loads a dataset directory or a `user_id,item_id,timestamp` CSV.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let log = if path.is_dir() {
            InteractionLog::load_dir(&path)
        } else {
            tsrec::data::ingest(&path, &ColumnSpec::default())
        }
        .map_err(py_err)?;
        Ok(Self { log })
    }

    /// Builds a log from `(user, item, timestamp)` tuples with raw ids.
    #[staticmethod]
    fn from_events(events: Vec<(String, String, i64)>) -> PyResult<Self> {
        let mut text = String::from("user_id,item_id,timestamp\n");
        for (u, i, t) in &events {
            if u.contains(',') || i.contains(',') {
                return Err(PyValueError::new_err("ids must not contain commas"));
            }
            text.push_str(&format!("{u},{i},{t}\n"));
        }
        let log = tsrec::data::ingest_reader(text.as_bytes(), &ColumnSpec::default(), "<events>".as_ref())
            .map_err(py_err)?;
        Ok(Self { log })
    }

    #[pyo3(signature = (dir, header="tsrec python"))]
    fn save(&self, dir: PathBuf, header: &str) -> PyResult<()> {
        self.log.save_dir(&dir, header).map_err(py_err)
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.log.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.log.num_items()
    }

    #[getter]
    fn num_events(&self) -> usize {
        self.log.num_events()
    }

    /// users, items, events, avg_interactions and repeat_ratio.
    fn stats(&self) -> BTreeMap<&'static str, f64> {
        let s = DatasetStats::of(&self.log);
        BTreeMap::from([
            ("users", s.users as f64),
            ("items", s.items as f64),
            ("events", s.events as f64),
            ("avg_interactions", s.avg_interactions),
            ("repeat_ratio", s.repeat_ratio),
        ])
    }

    /// Mean repeat-context Jaccard similarity, in percent.
    fn jaccard(&self) -> f64 {
        jaccard_repeat_similarity(&self.log)
    }

    /// Counts of repeat gaps per interval bin, optionally for one raw item.
    #[pyo3(signature = (p_min, bin_max, item=None))]
    fn interval_histogram(&self, p_min: i64, bin_max: u32, item: Option<&str>) -> PyResult<BTreeMap<u32, usize>> {
        if p_min <= 0 {
            return Err(PyValueError::new_err("p_min must be positive"));
        }
        let item = item.map(|raw| raw_item(&self.log, raw)).transpose()?;
        Ok(interval_histogram(&self.log, item, p_min, bin_max))
    }
}

fn raw_item(log: &InteractionLog, raw: &str) -> PyResult<ItemId> {
    log.item_vocab()
        .iter()
        .position(|v| v == raw)
        .map(|i| i as ItemId + 1)
        .ok_or_else(|| PyValueError::new_err(format!("unknown item id `{raw}`")))
}

fn raw_user(log: &InteractionLog, raw: &str) -> PyResult<UserId> {
    log.user_vocab()
        .iter()
        .position(|v| v == raw)
        .map(|i| i as UserId + 1)
        .ok_or_else(|| PyValueError::new_err(format!("unknown user id `{raw}`")))
}

fn cohort_dict(c: &CohortMetrics) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::from([("count".to_string(), c.count as f64)]);
    for (i, k) in tsrec::eval::CUTOFFS.iter().enumerate() {
        out.insert(format!("HR@{k}"), c.hr[i]);
        out.insert(format!("NDCG@{k}"), c.ndcg[i]);
    }
    out
}

fn report_dict(r: &MetricsReport) -> BTreeMap<String, BTreeMap<String, f64>> {
    BTreeMap::from([
        ("overall".to_string(), cohort_dict(&r.overall)),
        ("new".to_string(), cohort_dict(&r.new)),
        ("repeat".to_string(), cohort_dict(&r.repeat)),
    ])
}

fn parse_part(part: &str) -> PyResult<Part> {
    match part {
        "test" => Ok(Part::Test),
        "validation" | "val" => Ok(Part::Validation),
        _ => Err(PyValueError::new_err(format!("unknown part `{part}`"))),
    }
}

/// A trained model bound to the dataset split it was trained on.
#[pyclass(name = "Model")]
struct PyModel {
    model: TsRec,
    split: DataSplit,
    rtim: RtimCache,
    cfg: RunConfig,
    #[pyo3(get)]
    best_epoch: usize,
    /// One dict per epoch: epoch, train_loss, val_loss, val_hr10, val_ndcg10.
    #[pyo3(get)]
    history: Vec<BTreeMap<String, f64>>,
}

#[pymethods]
impl PyModel {
    /// Trains with early stopping; releases the GIL while training.
    #[staticmethod]
    fn train(py: Python<'_>, dataset: &PyDataset, config: &PyConfig) -> PyResult<Self> {
        let mut cfg = config.inner.clone();
        let log = dataset.log.clone();
        let (split, rtim, outcome) = py
            .allow_threads(|| -> tsrec::Result<_> {
                let (split, rtim) = prepare(&log, cfg.min_item_count, cfg.split, &mut cfg.model)?;
                let outcome = train(&cfg.model, &split, &rtim, |_| {})?;
                Ok((split, rtim, outcome))
            })
            .map_err(py_err)?;
        let history = outcome
            .history
            .iter()
            .map(|r| {
                BTreeMap::from([
                    ("epoch".to_string(), r.epoch as f64),
                    ("train_loss".to_string(), r.train_loss),
                    ("val_loss".to_string(), r.val_loss),
                    ("val_hr10".to_string(), r.val_hr10),
                    ("val_ndcg10".to_string(), r.val_ndcg10),
                ])
            })
            .collect();
        Ok(Self {
            model: outcome.model,
            split,
            rtim,
            best_epoch: outcome.best_epoch,
            history,
            cfg,
        })
    }

    /// Loads a checkpoint and re-derives the split of `dataset` under
    /// `config`'s split settings.
    #[staticmethod]
    fn load(path: PathBuf, dataset: &PyDataset, config: &PyConfig) -> PyResult<Self> {
        let model = load_checkpoint(&path).map_err(py_err)?;
        let mut cfg = config.inner.clone();
        cfg.model = model.config.clone();
        let (split, rtim) = prepare(&dataset.log, cfg.min_item_count, cfg.split, &mut cfg.model).map_err(py_err)?;
        Ok(Self {
            model,
            split,
            rtim,
            cfg,
            best_epoch: 0,
            history: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.model, &self.cfg.header(self.cfg.model.seed)).map_err(py_err)
    }

    /// Metrics by cohort, plus the same for PopRec under `"poprec"`.
    #[pyo3(signature = (part="test", negatives=None))]
    fn evaluate(&self, py: Python<'_>, part: &str, negatives: Option<usize>) -> PyResult<PyObject> {
        let part = parse_part(part)?;
        let m = &self.model.config;
        let k = negatives.unwrap_or(if part == Part::Test { m.test_negatives } else { m.val_negatives });
        let (model, pop) = py
            .allow_threads(|| -> tsrec::Result<_> {
                let groups = build_eval_groups(&self.split, part, k, &m.features(), m.seed)?;
                let model = evaluate(&ModelRanker::new(&self.model, &self.rtim)?, &groups)?;
                let baseline = PopRec::fit(&self.split.train_histories(), self.split.log.num_items());
                Ok((model, evaluate(&baseline, &groups)?))
            })
            .map_err(py_err)?;
        let out = PyDict::new_bound(py);
        for (cohort, metrics) in report_dict(&model) {
            out.set_item(cohort, metrics)?;
        }
        out.set_item("poprec", report_dict(&pop))?;
        Ok(out.into())
    }

    /// Scores of `(user, item)` at its first test event across `grid`
    /// target interval bins, as `(bin, score)` pairs.
    #[pyo3(signature = (user, item, grid=None))]
    fn probe(&self, user: &str, item: &str, grid: Option<Vec<u32>>) -> PyResult<Vec<(u32, f64)>> {
        let log = &self.split.log;
        let (u, i) = (raw_user(log, user)?, raw_item(log, item)?);
        let base = probe_instance(&self.split, u, i, &self.model.config).ok_or_else(|| {
            PyValueError::new_err("the user needs a test event and two earlier occurrences of the item")
        })?;
        let grid = grid.unwrap_or_else(|| (0..=16).collect());
        probe_interval_response(&self.model, &self.rtim, &base, &grid).map_err(py_err)
    }

    fn num_parameters(&self) -> usize {
        self.model.store.ids().map(|id| self.model.store.value(id).len()).sum()
    }
}

/// Bin with the highest score; the smallest bin wins ties.
#[pyfunction]
fn argmax_bin(curve: Vec<(u32, f64)>) -> Option<u32> {
    curve_argmax(&curve)
}

/// Maximum relative error of the full-model finite-difference check on a
/// dataset, with dropout disabled.
#[pyfunction]
#[pyo3(signature = (dataset, config, groups=4))]
fn gradcheck(dataset: &PyDataset, config: &PyConfig, groups: usize) -> PyResult<f64> {
    let mut cfg = config.inner.clone();
    cfg.model.dropout = 0.0;
    let (split, rtim) = prepare(&dataset.log, cfg.min_item_count, cfg.split, &mut cfg.model).map_err(py_err)?;
    let opts = GradCheckOptions {
        seed: cfg.model.seed,
        ..Default::default()
    };
    let report = gradient_check(&split, &rtim, &cfg.model, groups, &opts).map_err(py_err)?;
    Ok(report.max_rel_error)
}

#[pymodule]
fn pytsrec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(argmax_bin, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
