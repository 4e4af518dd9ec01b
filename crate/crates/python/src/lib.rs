//! Python bindings for the core crate.

use std::path::PathBuf;

use ctxvad::cae::{CaeConfig, MotionCae};
use ctxvad::checkpoint;
use ctxvad::datagen::{FlowMap, ObjectCube, Split};
use ctxvad::dataset::{generate_split, DataConfig};
use ctxvad::evaluation;
use ctxvad::objectives::{self, ScoreWeights};
use ctxvad::optim::{self, TrainConfig};
use ctxvad::vit::{self, ContextVit, Streams, VitConfig};
use ctxvad::VadError;
use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: VadError) -> PyErr {
    match err {
        VadError::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        VadError::Io { .. } => PyIOError::new_err(err.to_string()),
        other => PyValueError::new_err(format!("{}: {other}", other.kind())),
    }
}

/// Frame-level AUROC of `scores` against 0/1 `labels`.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    evaluation::auroc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn anomaly_score(l_pred: f64, l_recon: f64, lambda_a: f64, lambda_o: f64) -> PyResult<f64> {
    let w = ScoreWeights::new(lambda_a, lambda_o).map_err(to_py)?;
    objectives::anomaly_score(l_pred, l_recon, w).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (step, steps_per_epoch, lr=1.5e-4, min_lr=1e-5, t0_epochs=5.0, t_mult=2.0))]
fn lr_schedule(step: usize, steps_per_epoch: usize, lr: f64, min_lr: f64, t0_epochs: f64, t_mult: f64) -> f64 {
    let cfg = TrainConfig { lr, min_lr, t0_epochs, t_mult, ..TrainConfig::default() };
    optim::lr_schedule(step, &cfg, steps_per_epoch)
}

/// Indices of the hidden input frames for one seeded draw.
#[pyfunction]
fn sample_mask(ratio: f64, seed: u64) -> PyResult<Vec<usize>> {
    vit::sample_mask(ratio, seed).map(|m| m.masked).map_err(to_py)
}

#[pyfunction]
fn normalize_per_video(series: Vec<f64>) -> Vec<f64> {
    evaluation::normalize_per_video(&series)
}

/// One generated object cube with its flow map.
#[pyclass(frozen)]
struct Sample {
    cube: ObjectCube,
    flow: FlowMap,
}

#[pymethods]
impl Sample {
    #[getter]
    fn key(&self) -> String {
        self.cube.key()
    }

    #[getter]
    fn label(&self) -> u8 {
        self.cube.label
    }

    /// `5 × 3 × 32 × 32` values, frame-major.
    #[getter]
    fn frames(&self) -> Vec<f32> {
        self.cube.frames.clone()
    }

    /// `2 × 32 × 32` values.
    #[getter]
    fn flow(&self) -> Vec<f32> {
        self.flow.values.clone()
    }
}

/// Generates one split in memory; returns the samples and per-frame labels
/// keyed by video.
#[pyfunction]
#[pyo3(signature = (split, seed, videos=4))]
fn generate<'py>(py: Python<'py>, split: &str, seed: u64, videos: usize) -> PyResult<(Vec<Sample>, Bound<'py, PyDict>)> {
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(PyValueError::new_err(format!("split must be train or test, got {other}"))),
    };
    let cfg = DataConfig { train_videos: videos, test_videos: videos, ..DataConfig::default() };
    let g = generate_split(&cfg, split, seed).map_err(to_py)?;
    let labels = PyDict::new(py);
    for v in &g.manifest.videos {
        labels.set_item(&v.video_id, v.frame_labels.clone())?;
    }
    let samples = g.cubes.into_iter().zip(g.flows).map(|(cube, flow)| Sample { cube, flow }).collect();
    Ok((samples, labels))
}

/// Appearance branch.
#[pyclass(name = "ContextVit", frozen)]
struct PyContextVit(ContextVit<f32>);

#[pymethods]
impl PyContextVit {
    #[new]
    #[pyo3(signature = (streams="masked,whole,partial", seed=0, dim=128))]
    fn new(streams: &str, seed: u64, dim: usize) -> PyResult<Self> {
        let streams = Streams::parse(streams).map_err(to_py)?;
        let cfg = VitConfig { streams, dim, ..VitConfig::default() };
        ContextVit::new(cfg, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::load_appearance(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_appearance(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn streams(&self) -> String {
        self.0.config.streams.label()
    }

    /// Loss terms for one sample under the given masked frame indices.
    fn losses<'py>(&self, py: Python<'py>, sample: &Sample, masked: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
        let mask = vit::MaskPattern::from_masked(&masked).map_err(to_py)?;
        let bundle = self.0.forward(&sample.cube, &mask).map_err(to_py)?;
        let l = objectives::pred_loss(&bundle, &sample.cube).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("l_masked", l.l_masked)?;
        d.set_item("l_whole", l.l_whole)?;
        d.set_item("l_partial", l.l_partial)?;
        d.set_item("l_pred", l.l_pred)?;
        Ok(d)
    }
}

/// Motion branch.
#[pyclass(name = "MotionCae", frozen)]
struct PyMotionCae(MotionCae<f32>);

#[pymethods]
impl PyMotionCae {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> PyResult<Self> {
        MotionCae::new(CaeConfig::default(), seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::load_motion(&path).map(Self).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    fn reconstruct(&self, sample: &Sample) -> PyResult<Vec<f32>> {
        self.0.cae_forward(&sample.flow).map(|f| f.values).map_err(to_py)
    }

    fn flow_loss(&self, sample: &Sample) -> PyResult<f64> {
        let recon = self.0.cae_forward(&sample.flow).map_err(to_py)?;
        objectives::flow_loss(&recon, &sample.flow).map_err(to_py)
    }
}

#[pymodule]
fn ctxvad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_score, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_per_video, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_class::<Sample>()?;
    m.add_class::<PyContextVit>()?;
    m.add_class::<PyMotionCae>()?;
    Ok(())
}
