//! Python bindings over the core pipeline: configuration, dataset
//! access, both training stages, evaluation, and the truncation rule.
//!
//! Images cross the boundary as flat row-major lists plus a shape
//! tuple, which keeps the module dependency-free on the Python side.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use tryon_core::config::{RunConfig, Strategy};
use tryon_core::types::Image;
use tryon_core::{dgt, evaluate, io, metrics, model, synth, train};

fn err(e: tryon_core::Error) -> PyErr {
    match e {
        tryon_core::Error::Io { .. } | tryon_core::Error::MissingFile(_) => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image_to_py(img: &Image) -> (Vec<f64>, (usize, usize, usize)) {
    let (h, w) = img.dims();
    (img.data.iter().cloned().collect(), (3, h, w))
}

/// Run configuration, read from TOML or built with defaults.
#[pyclass]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Config { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Config { inner: RunConfig::load(&path).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.inner.train.seed = seed;
        self.inner.data.seed = seed;
    }

    fn set_steps(&mut self, warp: usize, gen: usize) {
        self.inner.train.steps_warp = warp;
        self.inner.train.steps_gen = gen;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, steps_warp={}, steps_gen={}, batch={})",
            self.inner.train.seed,
            self.inner.train.steps_warp,
            self.inner.train.steps_gen,
            self.inner.train.batch_size
        )
    }
}

/// A generated dataset on disk.
#[pyclass]
struct Dataset {
    inner: io::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn open(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset { inner: io::Dataset::open(&path).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// (channels, height, width) of the person image at `idx`.
    fn sample_dims(&self, idx: usize) -> PyResult<(usize, usize, usize)> {
        let s = self.load(idx)?;
        let (h, w) = s.person.dims();
        Ok((3, h, w))
    }

    fn person(&self, idx: usize) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
        Ok(image_to_py(&self.load(idx)?.person))
    }

    fn garment(&self, idx: usize) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
        Ok(image_to_py(&self.load(idx)?.garment))
    }

    /// Ground-truth warped parsing labels, flat row-major.
    fn gt_parsing(&self, idx: usize) -> PyResult<(Vec<u8>, (usize, usize))> {
        let s = self.load(idx)?;
        let (h, w) = s.gt_warped_parsing.dims();
        Ok((s.gt_warped_parsing.data.iter().cloned().collect(), (h, w)))
    }
}

impl Dataset {
    fn load(&self, idx: usize) -> PyResult<tryon_core::types::WarpSample> {
        if idx >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "index {idx} out of range, dataset has {}",
                self.inner.len()
            )));
        }
        self.inner.load_sample(idx).map_err(err)
    }
}

#[pyclass]
struct WarpSummary {
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    param_hash: String,
    #[pyo3(get)]
    checkpoint: String,
    #[pyo3(get)]
    miou: Option<f64>,
    #[pyo3(get)]
    ssim: Option<f64>,
    #[pyo3(get)]
    r_diff: Option<f64>,
}

#[pyclass]
struct GenSummary {
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    checkpoint: String,
    #[pyo3(get)]
    ssim_untrained: Option<f64>,
    #[pyo3(get)]
    ssim: Option<f64>,
    #[pyo3(get)]
    mean_alpha: Option<f64>,
}

#[pyfunction]
fn generate_dataset(cfg: &Config, count: usize, out: PathBuf) -> PyResult<usize> {
    Ok(synth::generate_dataset(&cfg.inner.data, count, &out).map_err(err)?.len())
}

#[pyfunction]
#[pyo3(signature = (cfg, data, out, strategy = "dgt", global_flow = false))]
fn train_warp(
    cfg: &Config,
    data: PathBuf,
    out: PathBuf,
    strategy: &str,
    global_flow: bool,
) -> PyResult<WarpSummary> {
    let strategy = Strategy::parse(strategy).map_err(err)?;
    let s = train::train_warp(&cfg.inner, &data, &out, strategy, global_flow).map_err(err)?;
    Ok(WarpSummary {
        steps: s.steps,
        param_hash: s.param_hash,
        checkpoint: s.checkpoint.display().to_string(),
        miou: s.val.as_ref().map(|v| v.miou),
        ssim: s.val.as_ref().map(|v| v.ssim),
        r_diff: s.val.as_ref().map(|v| v.r_diff),
    })
}

#[pyfunction]
fn train_gen(cfg: &Config, data: PathBuf, warp_checkpoint: PathBuf, out: PathBuf) -> PyResult<GenSummary> {
    let s = train::train_gen(&cfg.inner, &data, &warp_checkpoint, &out).map_err(err)?;
    Ok(GenSummary {
        steps: s.steps,
        checkpoint: s.checkpoint.display().to_string(),
        ssim_untrained: s.val_untrained.as_ref().map(|v| v.ssim),
        ssim: s.val.as_ref().map(|v| v.ssim),
        mean_alpha: s.val.as_ref().map(|v| v.mean_alpha),
    })
}

/// Score a warp checkpoint. Returns (miou, ssim, r_diff, skipped).
#[pyfunction]
#[pyo3(signature = (cfg, data, warp_checkpoint, split = "all"))]
fn evaluate_warp(
    cfg: &Config,
    data: PathBuf,
    warp_checkpoint: PathBuf,
    split: &str,
) -> PyResult<(f64, f64, f64, usize)> {
    let ds = io::Dataset::open(&data).map_err(err)?;
    let samples = evaluate::load_split(&ds, split, cfg.inner.train.val_fraction).map_err(err)?;
    let (m, store) = train::load_warp_model(&cfg.inner, &warp_checkpoint).map_err(err)?;
    let ev = evaluate::evaluate_warp_samples(&m, &store, &samples).map_err(err)?;
    Ok((ev.miou, ev.ssim, ev.r_diff, ev.r_skipped))
}

/// Warp one sample and return (warped_garment, shape, parsing, parsing_shape).
#[pyfunction]
fn warp_sample(
    cfg: &Config,
    data: PathBuf,
    idx: usize,
    warp_checkpoint: PathBuf,
) -> PyResult<(Vec<f64>, (usize, usize, usize), Vec<u8>, (usize, usize))> {
    let ds = io::Dataset::open(&data).map_err(err)?;
    if idx >= ds.len() {
        return Err(PyValueError::new_err(format!("index {idx} out of range")));
    }
    let sample = ds.load_sample(idx).map_err(err)?;
    let (m, store) = train::load_warp_model(&cfg.inner, &warp_checkpoint).map_err(err)?;
    let inf = model::infer_warp(&m, &store, &sample).map_err(err)?;
    let parts = tryon_core::types::PartSet::from_garment(&sample.garment, &sample.garment_parsing)
        .map_err(err)?;
    let warped = tryon_core::warp::warp_parts(&parts, &inf.flows_full).map_err(err)?;
    let (assembled, _) = tryon_core::warp::assemble_by_parsing(&warped, &inf.parsing_full).map_err(err)?;
    let (img, shape) = image_to_py(&assembled);
    let (h, w) = inf.parsing_full.dims();
    Ok((img, shape, inf.parsing_full.data.iter().cloned().collect(), (h, w)))
}

/// The pseudo-random truncation coin for (seed, sample, epoch).
#[pyfunction]
fn dgt_coin(seed: u64, sample: u64, epoch: u64) -> f64 {
    dgt::dgt_coin(seed, sample, epoch)
}

/// Whether a sample with squeeze ratio `r_style` is truncated given a coin.
#[pyfunction]
fn truncation_decision(r_style: f64, coin: f64) -> PyResult<bool> {
    dgt::truncation_decision(r_style, coin).map_err(err)
}

/// Structural similarity of two images given as flat CHW floats.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    let to_img = |v: Vec<f64>| -> PyResult<Image> {
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[3, height, width]), v)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Image::from_dyn(arr).map_err(err)
    };
    metrics::ssim(&to_img(a)?, &to_img(b)?).map_err(err)
}

/// Hash of every parameter in a checkpoint file.
#[pyfunction]
fn checkpoint_hash(cfg: &Config, path: PathBuf, kind: &str) -> PyResult<String> {
    let store = match kind {
        "warp" => train::load_warp_model(&cfg.inner, Path::new(&path)).map_err(err)?.1,
        "gen" => train::load_generator(&cfg.inner, Path::new(&path)).map_err(err)?.1,
        other => return Err(PyValueError::new_err(format!("unknown kind {other:?}"))),
    };
    Ok(io::param_hash(&store))
}

#[pymodule]
fn tryon_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<WarpSummary>()?;
    m.add_class::<GenSummary>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_warp, m)?)?;
    m.add_function(wrap_pyfunction!(train_gen, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_warp, m)?)?;
    m.add_function(wrap_pyfunction!(warp_sample, m)?)?;
    m.add_function(wrap_pyfunction!(dgt_coin, m)?)?;
    m.add_function(wrap_pyfunction!(truncation_decision, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_hash, m)?)?;
    Ok(())
}
