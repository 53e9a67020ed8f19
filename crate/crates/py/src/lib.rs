//! Python bindings: scene generation, the model, training and the
//! evaluation helpers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crtnet::eval::pearson_values;
use crtnet::gradcheck::full_suite;
use crtnet::model::checkpoint::{load_model, save_model};
use crtnet::model::{BoundingBox, Crtnet, ModelConfig};
use crtnet::synth::{default_roster, ConditionTag, RgbImage, SceneConfig, SceneGenerator};
use crtnet::tensor::Rng;
use crtnet::train::{Ablation, Example, TrainConfig, Trainer};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: crtnet::Error) -> PyErr {
    match e {
        crtnet::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image_from_bytes(data: Vec<u8>, width: usize, height: usize) -> PyResult<RgbImage> {
    if data.len() != width * height * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} RGB bytes for {width}x{height}, got {}",
            width * height * 3,
            data.len()
        )));
    }
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

/// One rendered scene with its target box and label.
#[pyclass(name = "Sample", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySample {
    image: RgbImage,
    bbox: BoundingBox,
    #[pyo3(get)]
    class_id: usize,
    condition: ConditionTag,
    size_bin: String,
}

#[pymethods]
impl PySample {
    /// Interleaved 8-bit RGB, row-major.
    #[getter]
    fn image<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.image.data)
    }

    #[getter]
    fn width(&self) -> usize {
        self.image.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.image.height
    }

    /// `(x, y, w, h)`.
    #[getter]
    fn bbox(&self) -> (usize, usize, usize, usize) {
        (self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h)
    }

    #[getter]
    fn condition(&self) -> String {
        self.condition.to_string()
    }

    #[getter]
    fn size_bin(&self) -> String {
        self.size_bin.clone()
    }

    fn ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.image.to_ppm())
    }
}

impl PySample {
    fn example(&self) -> Example {
        Example {
            image: self.image.clone(),
            bbox: self.bbox,
            label: self.class_id,
            condition: self.condition,
            size_bin: self
                .size_bin
                .parse()
                .expect("size bin came from the generator"),
        }
    }
}

#[pyclass(name = "SceneGenerator", frozen)]
struct PySceneGenerator {
    inner: SceneGenerator,
}

#[pymethods]
impl PySceneGenerator {
    #[new]
    #[pyo3(signature = (lift_fraction=None, room_cue_prob=None, image_side=None))]
    fn new(
        lift_fraction: Option<f64>,
        room_cue_prob: Option<f64>,
        image_side: Option<usize>,
    ) -> PyResult<Self> {
        let mut config = SceneConfig::default();
        if let Some(v) = lift_fraction {
            config.lift_fraction = v;
        }
        if let Some(v) = room_cue_prob {
            config.room_cue_prob = v;
        }
        if let Some(v) = image_side {
            config.image_side = v;
        }
        let inner = SceneGenerator::new(default_roster(), config).map_err(py_err)?;
        Ok(PySceneGenerator { inner })
    }

    fn class_names(&self) -> Vec<String> {
        (0..self.inner.roster.len())
            .map(|i| {
                self.inner
                    .roster
                    .get(i)
                    .expect("index in range")
                    .name
                    .to_string()
            })
            .collect()
    }

    /// The same `(seed, condition, class_id)` always gives the same pixels.
    fn sample(&self, seed: u64, condition: &str, class_id: usize) -> PyResult<PySample> {
        let condition: ConditionTag = condition.parse().map_err(py_err)?;
        let s = self
            .inner
            .generate_sample(seed, condition, class_id)
            .map_err(py_err)?;
        Ok(PySample {
            image: s.image,
            bbox: s.bbox,
            class_id: s.class_id,
            condition: s.condition,
            size_bin: s.size_bin.to_string(),
        })
    }
}

#[pyclass(name = "Prediction", frozen)]
struct PyPrediction {
    #[pyo3(get)]
    y_t: Vec<f64>,
    #[pyo3(get)]
    y_tc: Vec<f64>,
    #[pyo3(get)]
    y_p: Vec<f64>,
    #[pyo3(get)]
    p: f64,
    #[pyo3(get)]
    top1: usize,
    /// `[layer][head][token]`.
    #[pyo3(get)]
    attention: Vec<Vec<Vec<f64>>>,
}

fn model_config(config: Option<BTreeMap<String, String>>, tiny: bool) -> PyResult<ModelConfig> {
    let mut cfg = if tiny {
        ModelConfig::tiny()
    } else {
        ModelConfig::default()
    };
    if let Some(kv) = config {
        cfg.apply_kv(&kv).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Crtnet,
}

#[pymethods]
impl PyModel {
    /// `config` holds `model.*` keys applied over the default or tiny size.
    #[new]
    #[pyo3(signature = (config=None, seed=1, tiny=false))]
    fn new(config: Option<BTreeMap<String, String>>, seed: u64, tiny: bool) -> PyResult<Self> {
        let cfg = model_config(config, tiny)?;
        let inner = Crtnet::new(cfg, &mut Rng::new(seed)).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(py_err)
    }

    fn config(&self) -> Vec<(String, String)> {
        self.inner.config.to_kv()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.total_scalars()
    }

    /// `image` is interleaved 8-bit RGB; `bbox` is `(x, y, w, h)`.
    fn predict(
        &self,
        image: Vec<u8>,
        width: usize,
        height: usize,
        bbox: (usize, usize, usize, usize),
    ) -> PyResult<PyPrediction> {
        let img = image_from_bytes(image, width, height)?;
        let bbox = BoundingBox::new(bbox.0, bbox.1, bbox.2, bbox.3);
        let pred = self
            .inner
            .predict(&img.to_tensor(), &bbox)
            .map_err(py_err)?;
        Ok(PyPrediction {
            top1: pred.top1(),
            y_t: pred.y_t.data().to_vec(),
            y_tc: pred.y_tc.data().to_vec(),
            y_p: pred.y_p.data().to_vec(),
            p: pred.p,
            attention: pred
                .attention
                .iter()
                .map(|layer| layer.iter().map(|h| h.data().to_vec()).collect())
                .collect(),
        })
    }

    fn predict_sample(&self, sample: &PySample) -> PyResult<PyPrediction> {
        self.predict(
            sample.image.data.clone(),
            sample.image.width,
            sample.image.height,
            sample.bbox(),
        )
    }
}

#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    /// `config` may hold `model.*` and `train.*` keys.
    #[new]
    #[pyo3(signature = (config=None, tiny=false))]
    fn new(config: Option<BTreeMap<String, String>>, tiny: bool) -> PyResult<Self> {
        let model = model_config(config.clone(), tiny)?;
        let mut train = TrainConfig::default();
        if let Some(kv) = &config {
            train.apply_kv(kv).map_err(py_err)?;
        }
        Ok(PyTrainer {
            inner: Trainer::new(model, train).map_err(py_err)?,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    /// One pass over `samples`; returns the epoch's training metrics.
    fn run_epoch(&mut self, samples: Vec<PyRef<'_, PySample>>) -> PyResult<BTreeMap<String, f64>> {
        let data: Vec<Example> = samples.iter().map(|s| s.example()).collect();
        let m = self.inner.run_epoch(&data).map_err(py_err)?;
        Ok(BTreeMap::from([
            ("loss_p".into(), m.loss_p),
            ("loss_t".into(), m.loss_t),
            ("loss_tc".into(), m.loss_tc),
            ("acc_yp".into(), m.acc_yp),
            ("acc_yt".into(), m.acc_yt),
            ("acc_ytc".into(), m.acc_ytc),
            ("mean_p".into(), m.mean_p),
        ]))
    }

    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model.clone(),
        }
    }
}

/// Pearson correlation of two equal-length sequences.
#[pyfunction]
fn pearson(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    pearson_values(&a, &b).map_err(py_err)
}

/// Finite-difference suite over seeds `0..seeds`: `(name, seed, worst, passed)`.
#[pyfunction]
#[pyo3(signature = (seeds=1))]
fn gradcheck(seeds: u64) -> PyResult<Vec<(String, u64, f64, bool)>> {
    let checks = full_suite(0..seeds).map_err(py_err)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.name.clone(), c.seed, c.worst, c.passed()))
        .collect())
}

#[pyfunction]
fn conditions() -> Vec<String> {
    ConditionTag::ALL.iter().map(|c| c.to_string()).collect()
}

#[pyfunction]
fn ablations() -> Vec<String> {
    Ablation::ALL.iter().map(|a| a.to_string()).collect()
}

#[pymodule]
fn crtnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PySceneGenerator>()?;
    m.add_class::<PyPrediction>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(conditions, m)?)?;
    m.add_function(wrap_pyfunction!(ablations, m)?)?;
    Ok(())
}
