//! Python module `glca`: faces, the generator, fixture backends, training
//! and rank-1 scoring. Structured results come back as plain dicts.
//!
//! Build with `cargo build --release -p glca-py --features extension-module`
//! and copy `libglca.so` to `glca.so` somewhere on `sys.path`.

use std::path::PathBuf;

use glca_core::evalkit::{rank1_from_features, Metric, ProbeFeatures};
use glca_core::perceptors::Perceptor;
use glca_core::trainer::{load_checkpoint, save_checkpoint, Backends, TrainingSet};
use glca_core::{AgeGroup, ConvPerceptor, FaceImage, GeneratorArch, Landmarks5, LossWeights};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: glca_core::Error) -> PyErr {
    match e {
        glca_core::Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn group(index: usize) -> PyResult<AgeGroup> {
    AgeGroup::new(index).map_err(to_py)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// HWC float image in [-1, 1].
#[pyclass(name = "Face", from_py_object)]
#[derive(Clone)]
struct PyFace(FaceImage);

#[pymethods]
impl PyFace {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        FaceImage::with_size(height, width, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn filled(size: usize, value: f32) -> PyResult<Self> {
        FaceImage::filled(size, size, value).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load_raw(path: PathBuf) -> PyResult<Self> {
        FaceImage::read_raw(&path).map(Self).map_err(to_py)
    }

    fn save_raw(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_raw(&path).map_err(to_py)
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.0.to_rgb8().save(&path).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn get(&self, row: usize, col: usize, ch: usize) -> PyResult<f32> {
        if row >= self.0.height() || col >= self.0.width() || ch >= 3 {
            return Err(PyValueError::new_err("pixel index out of range"));
        }
        Ok(self.0.get(row, col, ch))
    }

    fn downscale(&self, size: usize) -> PyResult<Self> {
        self.0.downscale(size).map(Self).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Face({}x{})", self.0.height(), self.0.width())
    }
}

/// Age in years to group index 0..3.
#[pyfunction]
fn age_to_group(age: i64) -> PyResult<usize> {
    glca_core::datapipe::age_to_group(age).map(|g| g.index()).map_err(to_py)
}

/// Aligns an image file to the 128x128 canonical face from five (x, y) landmarks.
#[pyfunction]
fn align_file(path: PathBuf, landmarks: Vec<(f64, f64)>) -> PyResult<PyFace> {
    let pts: [(f64, f64); 5] = landmarks
        .try_into()
        .map_err(|_| PyValueError::new_err("expected exactly 5 landmarks"))?;
    let lm = Landmarks5::new(pts).map_err(to_py)?;
    glca_core::datapipe::align_file(&path, &lm).map(PyFace).map_err(to_py)
}

/// (adv, identity, age, pixel) weights of a named preset.
#[pyfunction]
fn loss_weights(preset: &str) -> PyResult<(f64, f64, f64, f64)> {
    let w = LossWeights::preset(preset).ok_or_else(|| PyValueError::new_err(format!("unknown preset `{preset}`")))?;
    Ok((w.adv, w.identity, w.age, w.pixel))
}

/// `count` synthetic faces as (face, group) pairs.
#[pyfunction]
fn toy_corpus(count: usize, size: usize, seed: u64) -> Vec<(PyFace, usize)> {
    let c = glca_core::toy::toy_corpus(count, size, seed);
    c.faces.into_iter().zip(c.groups).map(|(f, g)| (PyFace(f), g.index())).collect()
}

/// Rank-1 scoring on precomputed features.
/// gallery: [(identity, features)], probes: [(identity, target_group, features)].
#[pyfunction]
#[pyo3(signature = (gallery, probes, metric = "cosine"))]
fn rank1<'py>(
    py: Python<'py>,
    gallery: Vec<(String, Vec<f32>)>,
    probes: Vec<(String, usize, Vec<f32>)>,
    metric: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let metric = match metric {
        "cosine" => Metric::Cosine,
        "euclidean" => Metric::Euclidean,
        m => return Err(PyValueError::new_err(format!("unknown metric `{m}`"))),
    };
    let probes = probes
        .into_iter()
        .map(|(identity, t, features)| Ok(ProbeFeatures { identity, target: group(t)?, features }))
        .collect::<PyResult<Vec<_>>>()?;
    let report = rank1_from_features(&gallery, &probes, metric).map_err(to_py)?;
    let text = serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

#[pyclass(name = "Generator", unsendable)]
struct PyGenerator(glca_core::Generator);

#[pymethods]
impl PyGenerator {
    /// `arch` is "standard" (128) or "compact" (any valid `image_size`).
    #[new]
    #[pyo3(signature = (arch = "compact", image_size = 32, seed = 0, zero_init_output = true))]
    fn new(arch: &str, image_size: usize, seed: u64, zero_init_output: bool) -> PyResult<Self> {
        let mut a = match arch {
            "standard" => GeneratorArch::standard(),
            "compact" => GeneratorArch::compact(image_size).map_err(to_py)?,
            other => return Err(PyValueError::new_err(format!("unknown arch `{other}`"))),
        };
        a.zero_init_output = zero_init_output;
        glca_core::Generator::new(a, glca_core::DType::F32, seed).map(Self).map_err(to_py)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.arch().image_size
    }

    fn num_params(&self) -> usize {
        self.0.params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn generate(&self, face: &PyFace, target: usize) -> PyResult<PyFace> {
        self.0.generate(&face.0, group(target)?).map(PyFace).map_err(to_py)
    }

    /// Global branch only; local branches contribute nothing.
    fn generate_ablated(&self, face: &PyFace, target: usize) -> PyResult<PyFace> {
        self.0.generate_ablated(&face.0, group(target)?).map(PyFace).map_err(to_py)
    }
}

/// Small convolutional identity/age backend.
#[pyclass(name = "Backend", unsendable)]
struct PyBackend(ConvPerceptor);

#[pymethods]
impl PyBackend {
    #[staticmethod]
    fn fixture(seed: u64, input_size: usize) -> PyResult<Self> {
        ConvPerceptor::fixture(seed, input_size).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ConvPerceptor::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    fn digest(&self) -> PyResult<String> {
        self.0.digest().map_err(to_py)
    }

    /// Fully-connected identity feature of one face.
    fn identity(&self, face: &PyFace) -> PyResult<Vec<f32>> {
        let v = glca_core::evalkit::identity_vectors(std::slice::from_ref(&face.0), &self.0).map_err(to_py)?;
        Ok(v.into_iter().next().unwrap_or_default())
    }

    fn age_logits(&self, face: &PyFace) -> PyResult<Vec<f32>> {
        let run = || -> glca_core::Result<Vec<f32>> {
            let t = face.0.to_tensor(glca_core::DType::F32)?;
            Ok(self.0.age_logits(&t)?.flatten_all()?.to_vec1::<f32>()?)
        };
        run().map_err(to_py)
    }
}

/// Trainer over an in-memory face set.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    state: glca_core::TrainState,
    set: TrainingSet,
}

fn training_set(faces: Vec<PyFace>, groups: Vec<usize>) -> PyResult<TrainingSet> {
    let groups = groups.into_iter().map(group).collect::<PyResult<Vec<_>>>()?;
    TrainingSet::new(faces.into_iter().map(|f| f.0).collect(), groups).map_err(to_py)
}

#[pymethods]
impl PyTrainer {
    /// `config` is TOML text; `overrides` maps keys to string values.
    #[new]
    #[pyo3(signature = (faces, groups, config = "", overrides = None))]
    fn new(faces: Vec<PyFace>, groups: Vec<usize>, config: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = glca_core::TrainConfig::from_text(config).map_err(to_py)?;
        if let Some(d) = overrides {
            let pairs = d
                .iter()
                .map(|(k, v)| Ok((k.extract::<String>()?, v.str()?.to_string())))
                .collect::<PyResult<Vec<_>>>()?;
            cfg = cfg.with_overrides(&pairs).map_err(to_py)?;
        }
        let state = glca_core::TrainState::new(cfg.resolved().map_err(to_py)?).map_err(to_py)?;
        Ok(Self { state, set: training_set(faces, groups)? })
    }

    /// Resumes from a checkpoint with a fresh face set.
    #[staticmethod]
    fn load(path: PathBuf, faces: Vec<PyFace>, groups: Vec<usize>) -> PyResult<Self> {
        let state = load_checkpoint(&path).map_err(to_py)?;
        Ok(Self { state, set: training_set(faces, groups)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, &path).map_err(to_py)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.state.iteration()
    }

    fn config_toml(&self) -> PyResult<String> {
        self.state.config().to_text().map_err(to_py)
    }

    /// One scheduled iteration; returns the logged record.
    fn step<'py>(&mut self, py: Python<'py>, backend: &PyBackend) -> PyResult<Bound<'py, PyAny>> {
        let rec = self.state.train_step(&self.set, Backends::shared(&backend.0)).map_err(to_py)?;
        json_to_py(py, &rec.to_json_line().map_err(to_py)?)
    }

    fn generate(&self, face: &PyFace, target: usize) -> PyResult<PyFace> {
        self.state.generator().generate(&face.0, group(target)?).map(PyFace).map_err(to_py)
    }
}

#[pymodule]
fn glca(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NUM_AGE_GROUPS", glca_core::NUM_AGE_GROUPS)?;
    m.add_class::<PyFace>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyBackend>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(age_to_group, m)?)?;
    m.add_function(wrap_pyfunction!(align_file, m)?)?;
    m.add_function(wrap_pyfunction!(loss_weights, m)?)?;
    m.add_function(wrap_pyfunction!(toy_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(rank1, m)?)?;
    Ok(())
}
