//! Python bindings: frames, configs, checkpoints, training, and the
//! encode/decode round trip.

use std::path::PathBuf;

use emvq::objective::{ms_ssim_raster, psnr_raster, ssim_raster, SsimConfig};
use emvq::pipeline::{decode_top_only, decode_with_prior, encode_frame, DecodeMode};
use emvq::pixeldata::{load_grayscale_with, Frame};
use emvq::prior::Sampling;
use emvq::synth::{synth_frame as synth, SynthParams};
use emvq::tokenstream::{digest_hex, pack_container, parse_container, ratio_report};
use emvq::trainer::{self, frame_tiles};
use emvq::{Checkpoint, Error, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(emvq_py, EmvqError, PyException);
create_exception!(emvq_py, DigestMismatchError, EmvqError);
create_exception!(emvq_py, NonFiniteError, EmvqError);

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::InvalidArgument(_) | Error::Shape(_) => PyValueError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::DigestMismatch { .. } => DigestMismatchError::new_err(msg),
        Error::NonFinite(_) => NonFiniteError::new_err(msg),
        _ => EmvqError::new_err(msg),
    }
}

/// Grayscale frame, stored normalized to [-0.5, 0.5].
#[pyclass(name = "Frame", module = "emvq_py", from_py_object)]
#[derive(Clone)]
struct PyFrame {
    inner: Frame,
}

#[pymethods]
impl PyFrame {
    /// Builds a frame from row-major 8-bit pixels.
    #[staticmethod]
    fn from_gray8(height: usize, width: usize, pixels: &[u8]) -> PyResult<Self> {
        let inner = Frame::from_gray8(height, width, pixels).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, convert_color = false))]
    fn load(path: PathBuf, convert_color: bool) -> PyResult<Self> {
        let inner = load_grayscale_with(&path, convert_color).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn to_gray8<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_gray8())
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Frame({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Training configuration; keys match the `key=value` config file.
#[pyclass(name = "Config", module = "emvq_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = "", **overrides))]
    fn new(text: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = TrainConfig::parse(text).map_err(to_py)?;
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = match v.extract::<bool>() {
                    Ok(b) => b.to_string(),
                    Err(_) => v.str()?.to_string(),
                };
                inner.set(&key, &value).map_err(to_py)?;
            }
            inner.validate().map_err(to_py)?;
        }
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn tile_size(&self) -> usize {
        self.inner.tile_size
    }

    #[getter]
    fn levels(&self) -> Vec<u8> {
        self.inner.levels.clone()
    }
}

#[pyclass(name = "Checkpoint", module = "emvq_py")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Hex digest stamped into every container this checkpoint writes.
    #[getter]
    fn digest(&self) -> String {
        digest_hex(&self.inner.digest())
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn tile_size(&self) -> usize {
        self.inner.tile_size()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn has_prior(&self) -> bool {
        self.inner.prior.is_some()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Per-epoch log as CSV lines, header first.
    fn history_csv(&self) -> Vec<String> {
        std::iter::once(emvq::checkpoint::EpochRecord::CSV_HEADER.to_string())
            .chain(self.inner.history.iter().map(|r| r.to_csv()))
            .collect()
    }

    /// Encodes a frame at `d_s` downsampling stages and returns container bytes.
    #[pyo3(signature = (frame, d_s, checkerboard = false))]
    fn encode<'py>(
        &self,
        py: Python<'py>,
        frame: &PyFrame,
        d_s: u8,
        checkerboard: bool,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let ck = &self.inner;
        let container = encode_frame(&ck.model, ck.tile_size(), ck.digest(), &frame.inner, d_s, checkerboard)
            .map_err(to_py)?;
        let bytes = pack_container(&container).map_err(to_py)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[pyo3(signature = (data, mode = "top-only", seed = 0, temperature = None, top_k = None, force_digest = false))]
    fn decode(
        &self,
        data: &[u8],
        mode: &str,
        seed: u64,
        temperature: Option<f64>,
        top_k: Option<usize>,
        force_digest: bool,
    ) -> PyResult<PyFrame> {
        let ck = &self.inner;
        let mode: DecodeMode = mode.parse().map_err(to_py)?;
        let container = parse_container(data).map_err(to_py)?;
        let digest = ck.digest();
        if container.header.model_digest != digest && !force_digest {
            return Err(to_py(Error::DigestMismatch {
                container: digest_hex(&container.header.model_digest),
                checkpoint: digest_hex(&digest),
            }));
        }
        let inner = match mode {
            DecodeMode::TopOnly => decode_top_only(&ck.model, ck.tile_size(), &container),
            DecodeMode::Prior => {
                let prior = ck
                    .prior
                    .as_ref()
                    .ok_or_else(|| to_py(Error::Unsupported("checkpoint has no prior".into())))?;
                let vq = ck
                    .model
                    .as_vq()
                    .ok_or_else(|| to_py(Error::Unsupported("prior mode needs a learned model".into())))?;
                let sampling = match temperature {
                    Some(t) => Sampling::Temperature { temperature: t, top_k },
                    None => Sampling::Greedy,
                };
                decode_with_prior(vq, prior, &container, sampling, seed)
            }
        }
        .map_err(to_py)?;
        Ok(PyFrame { inner })
    }

    /// Trains the bottom-token prior in place; returns per-step losses.
    #[pyo3(signature = (frames, seed = 0))]
    fn train_prior(&mut self, frames: Vec<PyFrame>, seed: u64) -> PyResult<Vec<f64>> {
        let tiles = tiles_of(&frames, self.inner.tile_size())?;
        trainer::train_prior(&mut self.inner, &tiles, seed).map_err(to_py)
    }
}

fn tiles_of(frames: &[PyFrame], tile: usize) -> PyResult<Vec<emvq::pixeldata::Raster>> {
    let mut tiles = Vec::new();
    for f in frames {
        tiles.extend(frame_tiles(&f.inner, tile).map_err(to_py)?);
    }
    Ok(tiles)
}

/// Trains a model on the tiles of `frames`; returns the checkpoint and
/// per-step losses. Raises NonFiniteError if training aborted.
#[pyfunction]
fn train(config: &PyConfig, frames: Vec<PyFrame>) -> PyResult<(PyCheckpoint, Vec<f64>)> {
    let tiles = tiles_of(&frames, config.inner.tile_size)?;
    let outcome = trainer::train(&config.inner, &tiles, None).map_err(to_py)?;
    if let Some(msg) = outcome.aborted {
        return Err(NonFiniteError::new_err(msg));
    }
    Ok((PyCheckpoint { inner: outcome.checkpoint }, outcome.step_losses))
}

#[pyfunction]
#[pyo3(signature = (height, width, seed = 0))]
fn synth_frame(height: usize, width: usize, seed: u64) -> PyResult<PyFrame> {
    let inner = synth(&SynthParams::new(height, width), seed).map_err(to_py)?;
    Ok(PyFrame { inner })
}

/// Header fields and ratios of a container.
#[pyfunction]
fn container_info<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let c = parse_container(data).map_err(to_py)?;
    let h = &c.header;
    let report = ratio_report(h, data.len(), h.frame_height as usize * h.frame_width as usize);
    let d = PyDict::new(py);
    d.set_item("frame_height", h.frame_height)?;
    d.set_item("frame_width", h.frame_width)?;
    d.set_item("downsample_stages", h.downsample_stages)?;
    d.set_item("grid_rows", h.grid_rows)?;
    d.set_item("grid_cols", h.grid_cols)?;
    d.set_item("codebook_size", h.codebook_size)?;
    d.set_item("embed_dim", h.embed_dim)?;
    d.set_item("checkerboard", h.checkerboard)?;
    d.set_item("two_level_hint", h.two_level_hint)?;
    d.set_item("token_count", h.token_count)?;
    d.set_item("roi_count", c.rois.len())?;
    d.set_item("model_digest", digest_hex(&h.model_digest))?;
    d.set_item("nominal_ratio", report.nominal_ratio)?;
    d.set_item("actual_ratio", report.actual_ratio)?;
    Ok(d)
}

#[pyfunction]
fn psnr(a: &PyFrame, b: &PyFrame) -> PyResult<f64> {
    psnr_raster(a.inner.values(), b.inner.values(), 1.0).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyFrame, b: &PyFrame) -> PyResult<f64> {
    ssim_raster(a.inner.values(), b.inner.values(), &SsimConfig::default()).map_err(to_py)
}

#[pyfunction]
fn ms_ssim(a: &PyFrame, b: &PyFrame) -> PyResult<f64> {
    ms_ssim_raster(a.inner.values(), b.inner.values(), &SsimConfig::default()).map_err(to_py)
}

#[pymodule]
fn emvq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFrame>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add("EmvqError", m.py().get_type::<EmvqError>())?;
    m.add("DigestMismatchError", m.py().get_type::<DigestMismatchError>())?;
    m.add("NonFiniteError", m.py().get_type::<NonFiniteError>())?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synth_frame, m)?)?;
    m.add_function(wrap_pyfunction!(container_info, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ms_ssim, m)?)?;
    Ok(())
}
