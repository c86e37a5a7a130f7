//! Python bindings.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use partseg::backend::MockBackend;
use partseg::data::{self, SyntheticSpec};
use partseg::evaluation::MetricsReport;
use partseg::matching::{self, CostMatrix};
use partseg::pipeline::{self, EvalMode};
use partseg::teacher::Teacher;
use partseg::trainer::{self, FitOptions};
use partseg::types::{BBox, LabelKind, StudentOutput, TargetSet, TeacherTarget, WeakLabel};

create_exception!(partseg_py, PartsegError, PyException);

fn err(e: partseg::Error) -> PyErr {
    PartsegError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PartsegError::new_err("ragged matrix"));
    }
    Ok(Array2::from_shape_vec((r, c), rows.concat()).expect("checked shape"))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_mode(mode: &str) -> PyResult<LabelKind> {
    mode.parse().map_err(PartsegError::new_err)
}

#[pyclass(name = "Config", module = "partseg_py")]
#[derive(Clone)]
struct PyConfig {
    inner: partseg::Config,
}

#[pymethods]
impl PyConfig {
    /// Full-scale defaults, with optional `key=value` overrides.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: partseg::Config::parse(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn desk() -> Self {
        PyConfig {
            inner: partseg::Config::desk(),
        }
    }

    /// Returns a copy with `key=value` lines applied.
    fn with_overrides(&self, text: &str) -> PyResult<Self> {
        let inner = partseg::Config::parse_over(self.inner.clone(), text)
            .and_then(partseg::Config::validate)
            .map_err(err)?;
        Ok(PyConfig { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Every field as a dict of strings.
    fn as_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for line in self.inner.to_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                d.set_item(k, v)?;
            }
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash())
    }
}

#[pyclass(name = "Dataset", module = "partseg_py")]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(&self.inner, &path).map_err(err)
    }

    /// `(train, val)` split with the given training fraction.
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = data::split_dataset(&self.inner, (train_fraction, 1.0 - train_fraction), seed).map_err(err)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn categories(&self) -> Vec<String> {
        self.inner.categories.clone()
    }

    /// Boxes of record `i` as `(x_min, y_min, x_max, y_max, category)`.
    fn boxes(&self, i: usize) -> PyResult<Vec<(f64, f64, f64, f64, usize)>> {
        let r = self
            .inner
            .records
            .get(i)
            .ok_or_else(|| PartsegError::new_err(format!("record {i} out of range")))?;
        Ok(r.weak_labels
            .iter()
            .filter_map(|l| l.bbox().map(|b| (b.x_min, b.y_min, b.x_max, b.y_max, l.category)))
            .collect())
    }
}

#[pyfunction]
#[pyo3(signature = (n_images, n_categories = 3, max_parts = 4, size = 128, seed = 0))]
fn generate_synthetic(n_images: usize, n_categories: usize, max_parts: usize, size: usize, seed: u64) -> PyDataset {
    PyDataset {
        inner: data::generate_synthetic(&SyntheticSpec {
            n_images,
            n_categories,
            max_parts,
            size,
            seed,
        }),
    }
}

#[pyclass(name = "TrainState", module = "partseg_py")]
struct PyTrainState {
    inner: trainer::TrainState,
}

#[pymethods]
impl PyTrainState {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTrainState {
            inner: trainer::load_checkpoint(&path, None).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, &path).map_err(err)
    }

    fn loss_curve(&self) -> Vec<f64> {
        self.inner.loss_curve()
    }

    fn config(&self) -> PyResult<PyConfig> {
        Ok(PyConfig {
            inner: self.inner.config().map_err(err)?,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.meta.epoch
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.meta.num_parameters
    }

    fn checksum(&self) -> PyResult<String> {
        self.inner.params.checksum().map_err(err)
    }
}

/// Trains a fresh prompter on the mock backend.
#[pyfunction]
#[pyo3(signature = (dataset, config, supervision = "box", out_dir = None))]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    config: &PyConfig,
    supervision: &str,
    out_dir: Option<PathBuf>,
) -> PyResult<PyTrainState> {
    let mode = parse_mode(supervision)?;
    let cfg = config.inner.clone();
    let ds = dataset.inner.clone();
    let state = py
        .allow_threads(move || {
            let backend = MockBackend::new(&cfg);
            let teacher = Teacher::new(&cfg);
            let opts = FitOptions { out_dir, verbose: false };
            pipeline::train(&ds, mode, &backend, &teacher, &cfg, &opts)
        })
        .map_err(err)?;
    Ok(PyTrainState { inner: state })
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("miou", r.miou)?;
    d.set_item("macc", r.macc)?;
    d.set_item("num_images", r.num_images)?;
    d.set_item("iou", r.per_category.iter().map(|c| c.iou).collect::<Vec<_>>())?;
    d.set_item("acc", r.per_category.iter().map(|c| c.acc).collect::<Vec<_>>())?;
    Ok(d)
}

/// Scores a dataset. `mode` is `student`, `oracle-box`, `oracle-point` or
/// `detsam`.
#[pyfunction]
#[pyo3(signature = (dataset, config, mode = "student", state = None, jitter = 0.0, drop = 0.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    config: &PyConfig,
    mode: &str,
    state: Option<&PyTrainState>,
    jitter: f64,
    drop: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match mode {
        "student" => EvalMode::Student,
        "oracle-box" => EvalMode::Oracle(LabelKind::Box),
        "oracle-point" => EvalMode::Oracle(LabelKind::Point),
        "detsam" => EvalMode::DetSam {
            jitter_sigma: jitter,
            drop_prob: drop,
            seed,
        },
        other => return Err(PartsegError::new_err(format!("unknown mode {other:?}"))),
    };
    let cfg = &config.inner;
    let backend = MockBackend::new(cfg);
    let teacher = Teacher::new(cfg);
    let r = pipeline::evaluate(&dataset.inner, mode, state.map(|s| &s.inner.params), &backend, &teacher, cfg)
        .map_err(err)?;
    report_dict(py, &r)
}

/// Minimum-cost assignment: `(target_to_pred, total_cost)`.
#[pyfunction]
fn hungarian_assign(costs: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let a = matching::hungarian_assign(&CostMatrix { costs: matrix(costs)? }).map_err(err)?;
    Ok((a.target_to_pred, a.total_cost))
}

/// Matched set loss. Targets are `(category, embedding)` pairs already
/// padded to the number of predictions; the no-part category is
/// `num_categories`.
#[pyfunction]
fn total_loss<'py>(
    py: Python<'py>,
    targets: Vec<(usize, Vec<f64>)>,
    class_logits: Vec<Vec<f64>>,
    prompt_tokens: Vec<Vec<f64>>,
    config: &PyConfig,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let no_part = cfg.num_categories;
    let num_real = targets.iter().filter(|(c, _)| *c != no_part).count();
    let set = TargetSet {
        targets: targets
            .into_iter()
            .map(|(category, embedding)| TeacherTarget { category, embedding })
            .collect(),
        num_real,
        no_part,
    };
    let preds = StudentOutput {
        class_logits: matrix(class_logits)?,
        prompt_tokens: matrix(prompt_tokens)?,
    };
    let (loss, assignment) = matching::total_loss(&set, &preds, cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("total", loss.total)?;
    d.set_item("cls", loss.cls)?;
    d.set_item("reg", loss.reg)?;
    d.set_item("assignment", assignment.target_to_pred)?;
    Ok(d)
}

/// Teacher embedding of a box prompt.
#[pyfunction]
fn encode_box(bbox: (f64, f64, f64, f64), category: usize, config: &PyConfig) -> PyResult<Vec<f64>> {
    let teacher = Teacher::new(&config.inner);
    let (x0, y0, x1, y1) = bbox;
    Ok(teacher
        .encode_box(&WeakLabel::boxed(BBox::new(x0, y0, x1, y1), category))
        .map_err(err)?
        .vector)
}

/// Mock-decoder logit plane for one prompt token.
#[pyfunction]
fn decode_token(token: Vec<f64>, config: &PyConfig) -> PyResult<Vec<Vec<f64>>> {
    let backend = MockBackend::new(&config.inner);
    let tokens = matrix(vec![token])?;
    let planes = backend.decode_planes(tokens.view()).map_err(err)?;
    Ok(rows(&planes.index_axis(ndarray::Axis(0), 0).to_owned()))
}

/// Semantic map for one image file, as rows of category indices.
#[pyfunction]
fn predict_image(path: PathBuf, state: &PyTrainState) -> PyResult<Vec<Vec<u16>>> {
    let cfg = state.inner.config().map_err(err)?;
    let backend = MockBackend::new(&cfg);
    let image = partseg::imageio::read_rgb_image(&path, cfg.image_size).map_err(err)?;
    let seg = partseg::inference::predict_image(&image, &state.inner.params, &backend, &cfg).map_err(err)?;
    Ok(seg.labels.rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pymodule]
fn partseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PartsegError", m.py().get_type::<PartsegError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainState>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_assign, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(encode_box, m)?)?;
    m.add_function(wrap_pyfunction!(decode_token, m)?)?;
    m.add_function(wrap_pyfunction!(predict_image, m)?)?;
    Ok(())
}
