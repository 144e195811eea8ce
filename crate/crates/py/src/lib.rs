//! Python bindings. Images cross the boundary as a flat row-major list of
//! floats plus an `(n, c, h, w)` shape tuple.

use std::path::PathBuf;

use candle_core::{DType, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use uhdpromer_core::metrics::{count_flops, count_params, psnr as core_psnr, ssim as core_ssim, SsimParams};
use uhdpromer_core::model::{build_inference_model, Model, ModelConfig, Variant};
use uhdpromer_core::train::{cosine_lr as core_cosine_lr, load_checkpoint, save_checkpoint, AdamW, AdamWConfig};
use uhdpromer_core::{Error, ImageTensor};

type Shape = (usize, usize, usize, usize);
type Image = (Vec<f32>, Shape);

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument { .. }
        | Error::ShapeMismatch { .. }
        | Error::NotDivisible { .. }
        | Error::InvalidConfig(_)
        | Error::UnknownVariant(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image(data: Vec<f32>, shape: Shape) -> PyResult<ImageTensor> {
    ImageTensor::from_vec(data, shape).map_err(err)
}

fn to_py(t: &ImageTensor) -> PyResult<Image> {
    Ok((t.to_f32_vec().map_err(err)?, t.dims4()))
}

fn tensor(data: Vec<f32>, shape: Shape) -> PyResult<Tensor> {
    Ok(image(data, shape)?.into_tensor())
}

/// Model hyperparameters. Unspecified fields take the library defaults.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (channels=None, blocks=None, heads=None, shuffle=None, expansion=None, shared_mixer=None,
                        temperature_init=None, variant=None, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        channels: Option<usize>,
        blocks: Option<usize>,
        heads: Option<usize>,
        shuffle: Option<usize>,
        expansion: Option<f64>,
        shared_mixer: Option<bool>,
        temperature_init: Option<f64>,
        variant: Option<&str>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut c = ModelConfig::default();
        if let Some(v) = channels {
            c.channels = v;
        }
        if let Some(v) = blocks {
            c.blocks = v;
        }
        if let Some(v) = heads {
            c.heads = v;
        }
        if let Some(v) = shuffle {
            c.shuffle = v;
        }
        if let Some(v) = expansion {
            c.expansion = v;
        }
        if let Some(v) = shared_mixer {
            c.shared_mixer = v;
        }
        if let Some(v) = temperature_init {
            c.temperature_init = v;
        }
        if let Some(v) = variant {
            c.variant = v.parse::<Variant>().map_err(err)?;
        }
        if let Some(v) = seed {
            c.seed = v;
        }
        c.validate().map_err(err)?;
        Ok(Self { inner: c })
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn blocks(&self) -> usize {
        self.inner.blocks
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }

    #[getter]
    fn shuffle(&self) -> usize {
        self.inner.shuffle
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(channels={}, blocks={}, heads={}, shuffle={}, variant='{}', seed={})",
            c.channels, c.blocks, c.heads, c.shuffle, c.variant, c.seed
        )
    }
}

/// An inference model (no gradient tracking).
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<PyModelConfig>) -> PyResult<Self> {
        let config = config.map(|c| c.inner).unwrap_or_default();
        Ok(Self { inner: build_inference_model(&config, DType::F32).map_err(err)? })
    }

    /// Loads the weights stored in a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path, None).map_err(err)?;
        Ok(Self { inner: ckpt.model.frozen().map_err(err)? })
    }

    /// Writes the weights as a step-0 checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &AdamW::new(AdamWConfig::default()), 0, &path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.inner.config().clone() }
    }

    fn num_params(&self) -> usize {
        count_params(&self.inner).total
    }

    /// Overwrites every parameter with uniform noise in `[-scale, scale]`.
    #[pyo3(signature = (scale, seed=None))]
    fn randomize(&self, scale: f64, seed: Option<u64>) -> PyResult<()> {
        let seed = seed.unwrap_or(self.inner.config().seed);
        self.inner.params().randomize(seed, scale).map_err(err)
    }

    /// Returns `(restored, sr_image)`; `sr_image` is `None` for the cascaded variant.
    fn forward(&self, py: Python<'_>, data: Vec<f32>, shape: Shape) -> PyResult<(Image, Option<Image>)> {
        let x = image(data, shape)?;
        let out = py.detach(|| self.inner.forward(&x)).map_err(err)?;
        let sr = out.sr_image.as_ref().map(to_py).transpose()?;
        Ok((to_py(&out.restored)?, sr))
    }

    /// One `(n, channels, h / shuffle, w / shuffle)` guide map per block, after padding.
    fn ndp_maps(&self, py: Python<'_>, data: Vec<f32>, shape: Shape) -> PyResult<Vec<Image>> {
        let x = image(data, shape)?;
        let maps = py.detach(|| self.inner.ndp_maps(&x)).map_err(err)?;
        maps.iter()
            .map(|m| to_py(&ImageTensor::new(m.as_tensor().clone()).map_err(err)?))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Model({}, params={})", PyModelConfig { inner: self.inner.config().clone() }.__repr__(), self.num_params())
    }
}

/// PSNR in dB between two images of the same shape.
#[pyfunction]
#[pyo3(signature = (pred, target, shape, peak=1.0))]
fn psnr(pred: Vec<f32>, target: Vec<f32>, shape: Shape, peak: f64) -> PyResult<f64> {
    core_psnr(&tensor(pred, shape)?, &tensor(target, shape)?, peak).map_err(err)
}

/// Mean SSIM with an 11x11 Gaussian window.
#[pyfunction]
fn ssim(pred: Vec<f32>, target: Vec<f32>, shape: Shape) -> PyResult<f64> {
    core_ssim(&tensor(pred, shape)?, &tensor(target, shape)?, SsimParams::default()).map_err(err)
}

/// Learning rate at `step` of a cosine schedule.
#[pyfunction]
fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> PyResult<f64> {
    core_cosine_lr(step, total_steps, lr_init, lr_min).map_err(err)
}

/// Analytic FLOP count for one forward pass at `h x w`.
#[pyfunction]
#[pyo3(signature = (h, w, config=None))]
fn flops(h: usize, w: usize, config: Option<PyModelConfig>) -> PyResult<u64> {
    let config = config.map(|c| c.inner).unwrap_or_default();
    Ok(count_flops(&config, h, w).map_err(err)?.total_flops())
}

#[pymodule]
fn uhdpromer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
