//! Python module `narcan`: load or synthesize videos, fit canonical models,
//! render, and score temporal consistency.

use std::path::PathBuf;

use narcan_core::frames_io::{self, CanvasSpec};
use narcan_core::metrics::{psnr_sequence, ConsistencyReport};
use narcan_core::prior::{MockPrior, MockPriorKind, PriorProvider};
use narcan_core::separation::{self, BlockMatching, SegmentModelSet};
use narcan_core::synthetic::scene_by_name;
use narcan_core::training::{self, TrainConfig};
use narcan_core::{EXIT_BACKEND, EXIT_NUMERIC};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(narcan, NarcanError, PyException);
create_exception!(narcan, BackendError, NarcanError);
create_exception!(narcan, NumericError, NarcanError);

fn to_py<E: Into<narcan_core::Error>>(e: E) -> PyErr {
    let e: narcan_core::Error = e.into();
    let msg = e.to_string();
    match e.exit_code() {
        EXIT_BACKEND => BackendError::new_err(msg),
        EXIT_NUMERIC => NumericError::new_err(msg),
        _ => NarcanError::new_err(msg),
    }
}

fn to_json(py: Python<'_>, value: &serde_json::Value) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).expect("values serialize");
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_dict<T: serde::de::DeserializeOwned>(py: Python<'_>, dict: &Bound<'_, PyDict>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (dict,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn image_rows(image: &frames_io::RgbImage) -> Vec<Vec<[f64; 3]>> {
    (0..image.height())
        .map(|y| (0..image.width()).map(|x| image.get(x, y)).collect())
        .collect()
}

/// A video as frames of `[0, 1]` RGB floats.
#[pyclass(module = "narcan")]
#[derive(Clone)]
struct Video {
    inner: frames_io::FrameSequence,
}

#[pymethods]
impl Video {
    /// Loads every file matching `pattern` in `dir`, in natural order.
    #[staticmethod]
    #[pyo3(signature = (dir, pattern = "*.png"))]
    fn load(dir: PathBuf, pattern: &str) -> PyResult<Self> {
        Ok(Self {
            inner: frames_io::load_frames(&dir, pattern).map_err(to_py)?,
        })
    }

    /// A fixture scene: homography, hybrid, translation, pan or two_shot.
    #[staticmethod]
    #[pyo3(signature = (name, frames = 20, size = 64, seed = 0))]
    fn synthetic(name: &str, frames: usize, size: usize, seed: u64) -> PyResult<Self> {
        let scene = scene_by_name(name, frames, size, seed).ok_or_else(|| PyValueError::new_err(format!("unknown scene `{name}`")))?;
        Ok(Self { inner: scene.frames })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        frames_io::save_frames(&self.inner, &dir).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Frame `t` as nested `[row][column][channel]` lists.
    fn frame(&self, t: usize) -> PyResult<Vec<Vec<[f64; 3]>>> {
        if t >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("frame {t} of {}", self.inner.len())));
        }
        Ok(image_rows(self.inner.frame(t)))
    }

    fn psnr(&self, other: &Video) -> PyResult<f64> {
        psnr_sequence(&self.inner, &other.inner).map_err(to_py)
    }

    /// Warp/interpolation errors (block-matching flow), plus PSNR/SSIM
    /// against `reference` when given.
    #[pyo3(signature = (reference = None))]
    fn consistency(&self, py: Python<'_>, reference: Option<&Video>) -> PyResult<PyObject> {
        let report = ConsistencyReport::compute(&self.inner, &mut BlockMatching::default(), reference.map(|r| &r.inner)).map_err(to_py)?;
        to_json(py, &serde_json::to_value(report).expect("report serializes"))
    }

    fn __repr__(&self) -> String {
        format!("Video({} frames, {}x{})", self.inner.len(), self.inner.width(), self.inner.height())
    }
}

/// Prior phase table.
#[pyclass(module = "narcan")]
#[derive(Clone)]
struct Schedule {
    inner: training::PriorSchedule,
}

#[pymethods]
impl Schedule {
    #[staticmethod]
    fn default() -> Self {
        Self {
            inner: training::PriorSchedule::default_schedule(),
        }
    }

    #[staticmethod]
    fn per_step(start: usize, end: usize, noise_strength: f64) -> Self {
        Self {
            inner: training::PriorSchedule::per_step(start, end, noise_strength),
        }
    }

    #[staticmethod]
    fn empty() -> Self {
        Self {
            inner: training::PriorSchedule::empty(),
        }
    }

    fn count_target_generations(&self) -> usize {
        self.inner.count_target_generations()
    }

    /// `(active, noise_strength, regenerate_target)` at `iteration`.
    fn query(&self, iteration: usize) -> (bool, f64, bool) {
        let s = self.inner.query(iteration);
        (s.active, s.noise_strength, s.regenerate_target)
    }
}

/// Trained model set: one canonical model per segment.
#[pyclass(module = "narcan")]
struct Model {
    inner: SegmentModelSet,
    reports: Vec<String>,
}

fn mock_prior(name: &str) -> PyResult<Option<MockPrior>> {
    Ok(match name {
        "none" => None,
        "identity" => Some(MockPrior::new(MockPriorKind::Identity)),
        "blur" => Some(MockPrior::new(MockPriorKind::Blur { radius: 2 })),
        other => return Err(PyValueError::new_err(format!("unknown prior `{other}`; expected none, identity or blur"))),
    })
}

#[pymethods]
impl Model {
    /// Fits `video`. `config` takes training keys (total_iters, lr_*,
    /// use_homography, fields, ...); omitted keys keep their defaults.
    #[staticmethod]
    #[pyo3(signature = (video, config = None, schedule = None, k = 1, overlap = 10, prior = "none"))]
    fn fit(
        py: Python<'_>,
        video: &Video,
        config: Option<&Bound<'_, PyDict>>,
        schedule: Option<&Schedule>,
        k: usize,
        overlap: usize,
        prior: &str,
    ) -> PyResult<Self> {
        let mut cfg: TrainConfig = match config {
            Some(d) => from_dict(py, d)?,
            None => TrainConfig::default(),
        };
        let schedule = schedule.map_or_else(training::PriorSchedule::empty, |s| s.inner.clone());
        let mut provider = mock_prior(prior)?;
        if provider.is_none() {
            cfg.use_prior = false;
        }
        let plan = separation::plan_segments(video.inner.len(), k, overlap).map_err(to_py)?;
        let frames = video.inner.clone();
        let (set, reports) = py
            .allow_threads(|| {
                let p = provider.as_mut().map(|p| p as &mut dyn PriorProvider);
                separation::train_segments(&frames, &plan, &cfg, &schedule, p)
            })
            .map_err(to_py)?;
        Ok(Self {
            inner: set,
            reports: reports.iter().map(|r| r.to_jsonl(100)).collect(),
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: separation::load_model_set(&dir).map_err(to_py)?,
            reports: Vec::new(),
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        separation::save_model_set(&self.inner, &dir, serde_json::Map::new()).map_err(to_py)
    }

    #[getter]
    fn segments(&self) -> Vec<(usize, usize)> {
        self.inner.plan.segments.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.frame_count()
    }

    /// Training logs (JSON lines), one string per segment; empty after `load`.
    #[getter]
    fn reports(&self) -> Vec<String> {
        self.reports.clone()
    }

    fn render_frame(&self, t: usize) -> PyResult<Vec<Vec<[f64; 3]>>> {
        if t >= self.inner.frame_count() {
            return Err(PyIndexError::new_err(format!("frame {t} of {}", self.inner.frame_count())));
        }
        let image = separation::render_blended(&self.inner, t).map_err(to_py)?;
        Ok(image_rows(&image))
    }

    fn render(&self, py: Python<'_>) -> PyResult<Video> {
        let inner = py.allow_threads(|| separation::render_sequence(&self.inner)).map_err(to_py)?;
        Ok(Video { inner })
    }

    /// Writes each segment's canonical image (PNG plus geometry sidecar).
    /// Returns the written paths.
    #[pyo3(signature = (path, long_side = None, margin = 0.05))]
    fn export_canonical(&self, path: PathBuf, long_side: Option<usize>, margin: f64) -> PyResult<Vec<PathBuf>> {
        let long_side = long_side.unwrap_or(2 * self.inner.height().max(self.inner.width()));
        let mut written = Vec::new();
        for (i, model) in self.inner.models.iter().enumerate() {
            let spec = CanvasSpec::covering(model.canonical_bounds(margin).map_err(to_py)?, long_side);
            let canvas = model.render_canonical_raster(&spec).map_err(to_py)?;
            let target = if self.inner.models.len() == 1 {
                path.clone()
            } else {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                path.with_file_name(format!("{stem}_{i:02}.png"))
            };
            frames_io::export_canonical(&canvas, &target).map_err(to_py)?;
            written.push(target);
        }
        Ok(written)
    }
}

/// `[(start, end), ...]` segments for `frames` frames.
#[pyfunction]
fn plan_segments(frames: usize, k: usize, overlap: usize) -> PyResult<Vec<(usize, usize)>> {
    Ok(separation::plan_segments(frames, k, overlap).map_err(to_py)?.segments)
}

/// `[(segment, weight), ...]` for frame `t` under the plan.
#[pyfunction]
fn blend_weights(frames: usize, k: usize, overlap: usize, t: usize) -> PyResult<Vec<(usize, f64)>> {
    let plan = separation::plan_segments(frames, k, overlap).map_err(to_py)?;
    separation::blend_weight(&plan, t).map_err(to_py)
}

#[pymodule]
fn narcan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Video>()?;
    m.add_class::<Schedule>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(plan_segments, m)?)?;
    m.add_function(wrap_pyfunction!(blend_weights, m)?)?;
    m.add("NarcanError", m.py().get_type::<NarcanError>())?;
    m.add("BackendError", m.py().get_type::<BackendError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    Ok(())
}
