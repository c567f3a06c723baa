//! Python module `sslab`: models, run configs, synthetic data and
//! streaming reconstruction.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sslab_core::config::RunConfig;
use sslab_core::data::{synth_strokes, GrayImage, SynthOptions};
use sslab_core::eval::{image_mse, Session};
use sslab_core::model::Model;
use sslab_core::probes::reconstruct;
use sslab_core::ssm::{ModelConfig, SsmModel};
use sslab_core::tokenize::{sample_patches, Variant};
use sslab_core::transformer::{TransformerConfig, TransformerModel};
use sslab_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_from(pixels: Vec<f64>) -> PyResult<GrayImage> {
    let side = (pixels.len() as f64).sqrt() as usize;
    if side * side != pixels.len() {
        return Err(PyValueError::new_err("pixels must form a square image"));
    }
    GrayImage::new(side, pixels).map_err(py_err)
}

/// A trained or freshly initialized model.
#[pyclass(name = "Model", module = "sslab")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: Model::load(&path).map_err(py_err)?,
        })
    }

    /// Desk-profile SSM; `variant` is "default" or "prepended".
    #[staticmethod]
    #[pyo3(signature = (seed=0, variant="default", n_blocks=4))]
    fn ssm(seed: u64, variant: &str, n_blocks: usize) -> PyResult<Self> {
        let cfg = ModelConfig {
            n_blocks,
            variant: Variant::parse(variant).map_err(py_err)?,
            ..ModelConfig::desk()
        };
        let m = SsmModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(PyModel { inner: Model::Ssm(m) })
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn transformer(seed: u64) -> PyResult<Self> {
        let m = TransformerModel::init(TransformerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(py_err)?;
        Ok(PyModel {
            inner: Model::Transformer(m),
        })
    }

    /// Copies ground truth; scores zero.
    #[staticmethod]
    fn oracle() -> Self {
        PyModel { inner: Model::Oracle }
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn param_count(&self) -> usize {
        match &self.inner {
            Model::Ssm(m) => m.param_count(),
            Model::Transformer(m) => m.param_count(),
            _ => 0,
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Dense reconstruction (row-major pixels) after streaming `n_tokens`
    /// random patches of `pixels`.
    #[pyo3(signature = (pixels, n_tokens, seed=0))]
    fn reconstruct(&self, pixels: Vec<f64>, n_tokens: usize, seed: u64) -> PyResult<Vec<f64>> {
        let img = image_from(pixels)?;
        let patches = sample_patches(&img, n_tokens, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        let mut s = Session::new(&self.inner, &img, Some(n_tokens)).map_err(py_err)?;
        s.observe_all(&patches).map_err(py_err)?;
        Ok(reconstruct(&s, img.side()).map_err(py_err)?.pixels().to_vec())
    }

    /// MSE at `vq` random queries after `vi` random patches.
    #[pyo3(signature = (pixels, vi, vq, seed=0))]
    fn mse(&self, pixels: Vec<f64>, vi: usize, vq: usize, seed: u64) -> PyResult<f64> {
        let img = image_from(pixels)?;
        image_mse(&self.inner, &img, vi, vq, seed, seed.wrapping_add(1)).map_err(py_err)
    }
}

/// Flat key=value run configuration.
#[pyclass(name = "RunConfig", module = "sslab")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_text(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn desk() -> Self {
        PyRunConfig {
            inner: RunConfig::desk(),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(py_err)?;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

/// Synthetic stroke image as row-major pixels in [0, 1].
#[pyfunction]
#[pyo3(signature = (side=64, seed=0, n_strokes=3))]
fn synth_image(side: usize, seed: u64, n_strokes: usize) -> Vec<f64> {
    let opts = SynthOptions {
        side,
        n_strokes,
        ..SynthOptions::default()
    };
    synth_strokes(&mut ChaCha8Rng::seed_from_u64(seed), &opts).pixels().to_vec()
}

#[pymodule]
fn sslab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(synth_image, m)?)?;
    Ok(())
}
