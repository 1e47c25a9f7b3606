//! Python bindings for `maskquant`. Matrices cross the boundary as lists of
//! row lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use maskquant::abmp;
use maskquant::daq::{self, DaqConfig, QuantizedGroup};
use maskquant::mcs::{self, McsConfig, Schedule};
use maskquant::pipeline::{self, MemoryPreset, PipelineConfig};
use maskquant::qformat;
use maskquant::stats::{self, SaliencyMask};
use maskquant::tensor;
use maskquant::{DenseMatrix, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(to_py)
}

fn rows(m: &DenseMatrix) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn saliency(w: &DenseMatrix, mask: Option<Vec<Vec<bool>>>, lam: f64) -> PyResult<SaliencyMask> {
    let (n, m) = w.shape();
    match mask {
        None => Ok(SaliencyMask::uniform(n, m)),
        Some(mask) => {
            if mask.len() != n || mask.iter().any(|r| r.len() != m) {
                return Err(PyValueError::new_err(format!("mask must be {n}x{m}")));
            }
            SaliencyMask::from_mask(n, m, lam, mask.concat()).map_err(to_py)
        }
    }
}

/// Visible fraction at timestep `t` of `timesteps`.
#[pyfunction]
fn visibility_schedule(t: usize, timesteps: usize) -> PyResult<f64> {
    mcs::visibility_schedule(t, timesteps).map_err(to_py)
}

/// Length of the always-visible prefix.
#[pyfunction]
fn prefix_len(len: usize, gamma: f64) -> usize {
    mcs::build_prefix_set(len, gamma).len()
}

/// Masked replays as `(ids, visible, t, alpha)` tuples, sequence-major.
#[pyfunction]
#[pyo3(signature = (tokens, timesteps=8, gamma=0.25, mask_id=63, seed=0))]
fn simulate(
    py: Python<'_>,
    tokens: Vec<Vec<u32>>,
    timesteps: usize,
    gamma: f64,
    mask_id: u32,
    seed: u64,
) -> PyResult<Vec<(Vec<u32>, Vec<bool>, usize, f64)>> {
    let cfg = McsConfig {
        timesteps,
        gamma,
        schedule: Schedule::Linear,
        mask_id,
        seed,
    };
    let out = py.detach(|| mcs::simulate(&tokens, &cfg)).map_err(to_py)?;
    Ok(out.into_iter().map(|s| (s.ids, s.visible, s.t_index, s.alpha)).collect())
}

#[pyclass(name = "SecondMoment")]
struct PySecondMoment(stats::SecondMoment);

#[pymethods]
impl PySecondMoment {
    #[new]
    fn new(dim: usize) -> Self {
        Self(stats::SecondMoment::new(dim))
    }

    /// Adds `x x^T` for each column of `inputs` (features x tokens).
    fn accumulate(&mut self, inputs: Vec<Vec<f32>>) -> PyResult<()> {
        self.0.accumulate(&matrix(inputs)?).map_err(to_py)
    }

    fn merge(&self, other: &PySecondMoment) -> PyResult<PySecondMoment> {
        self.0.merge(&other.0).map(PySecondMoment).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn count(&self) -> u64 {
        self.0.count()
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        self.0.matrix().chunks(self.0.dim().max(1)).map(<[f64]>::to_vec).collect()
    }

    #[pyo3(signature = (damp_rel=0.01))]
    fn damped_inverse_diag(&self, damp_rel: f64) -> PyResult<Vec<f64>> {
        self.0.damped_inverse_diag(damp_rel).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PySecondMoment> {
        stats::SecondMoment::load(path).map(PySecondMoment).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("SecondMoment(dim={}, count={})", self.0.dim(), self.0.count())
    }
}

#[pyfunction]
fn importance_matrix(w: Vec<Vec<f32>>, d: Vec<f64>) -> PyResult<Vec<Vec<f32>>> {
    Ok(rows(&stats::importance_matrix(&matrix(w)?, &d).map_err(to_py)?))
}

/// Outlier flags of an importance matrix.
#[pyfunction]
#[pyo3(signature = (z, lam=2.0))]
fn importance_mask(z: Vec<Vec<f32>>, lam: f64) -> PyResult<Vec<Vec<bool>>> {
    let z = matrix(z)?;
    let mask = stats::build_importance_mask(&z, lam).map_err(to_py)?;
    Ok(mask.mask().chunks(z.cols().max(1)).map(<[bool]>::to_vec).collect())
}

#[pyfunction]
#[pyo3(signature = (w, w_hat, mask=None, lam=2.0))]
fn proxy_loss(w: Vec<Vec<f32>>, w_hat: Vec<Vec<f32>>, mask: Option<Vec<Vec<bool>>>, lam: f64) -> PyResult<f64> {
    let w = matrix(w)?;
    let mask = saliency(&w, mask, lam)?;
    stats::proxy_loss(&w, &matrix(w_hat)?, &mask).map_err(to_py)
}

#[pyfunction]
fn true_data_loss(w: Vec<Vec<f32>>, w_hat: Vec<Vec<f32>>, moment: &PySecondMoment) -> PyResult<f64> {
    stats::true_data_loss(&matrix(w)?, &matrix(w_hat)?, &moment.0).map_err(to_py)
}

/// Single binary term `(alpha_r, alpha_c, signs)` from closed-form init.
#[pyfunction]
fn binary_rc_init(x: Vec<Vec<f32>>) -> PyResult<(Vec<f32>, Vec<f32>, Vec<Vec<i8>>)> {
    let o = daq::binary_rc_init(&matrix(x)?).map_err(to_py)?;
    let cols = o.alpha_c.len().max(1);
    let signs = o.signs.data().chunks(cols).map(<[i8]>::to_vec).collect();
    Ok((o.alpha_r, o.alpha_c, signs))
}

/// Jointly optimal signs for fixed `(alpha_r, alpha_c)` scale pairs.
#[pyfunction]
fn update_b(w: Vec<Vec<f32>>, scales: Vec<(Vec<f32>, Vec<f32>)>) -> PyResult<Vec<Vec<Vec<i8>>>> {
    let w = matrix(w)?;
    let pairs: Vec<(&[f32], &[f32])> = scales.iter().map(|(r, c)| (r.as_slice(), c.as_slice())).collect();
    let signs = daq::update_b(&w, &pairs).map_err(to_py)?;
    Ok(signs
        .iter()
        .map(|s| s.data().chunks(w.cols().max(1)).map(<[i8]>::to_vec).collect())
        .collect())
}

#[pyclass(name = "DaqResult", frozen)]
struct PyDaqResult {
    group: QuantizedGroup,
    #[pyo3(get)]
    trace: Vec<f64>,
}

#[pymethods]
impl PyDaqResult {
    #[getter]
    fn order(&self) -> usize {
        self.group.order()
    }

    #[getter]
    fn row_mean(&self) -> Option<Vec<f32>> {
        self.group.row_mean.clone()
    }

    /// `(alpha_r, alpha_c, signs)` per binary term.
    fn terms(&self) -> Vec<(Vec<f32>, Vec<f32>, Vec<Vec<i8>>)> {
        self.group
            .orders
            .iter()
            .map(|o| {
                let cols = o.alpha_c.len().max(1);
                (
                    o.alpha_r.clone(),
                    o.alpha_c.clone(),
                    o.signs.data().chunks(cols).map(<[i8]>::to_vec).collect(),
                )
            })
            .collect()
    }

    fn dequantize(&self) -> Vec<Vec<f32>> {
        rows(&self.group.dequantize())
    }

    fn __repr__(&self) -> String {
        let (n, m) = self.group.shape();
        format!(
            "DaqResult({n}x{m}, order={}, loss {:.6e} -> {:.6e})",
            self.group.order(),
            self.trace[0],
            self.trace[self.trace.len() - 1]
        )
    }
}

#[pyfunction]
#[pyo3(signature = (w, order=2, sweeps=10, tol=1e-6, epsilon=1e-8, row_center=true, mask=None, lam=2.0))]
#[allow(clippy::too_many_arguments)]
fn daq_fit(
    py: Python<'_>,
    w: Vec<Vec<f32>>,
    order: usize,
    sweeps: usize,
    tol: f64,
    epsilon: f64,
    row_center: bool,
    mask: Option<Vec<Vec<bool>>>,
    lam: f64,
) -> PyResult<PyDaqResult> {
    let w = matrix(w)?;
    let mask = saliency(&w, mask, lam)?;
    let cfg = DaqConfig {
        order,
        sweeps,
        tol,
        epsilon,
        row_center,
    };
    let fit = py.detach(|| daq::daq_fit(&w, &mask, &cfg)).map_err(to_py)?;
    Ok(PyDaqResult {
        group: fit.group,
        trace: fit.trace,
    })
}

/// Column ranges of width `group_width` (last one may be narrower).
#[pyfunction]
fn partition(rows: usize, cols: usize, group_width: usize) -> PyResult<Vec<(usize, usize)>> {
    let p = abmp::partition(rows, cols, group_width).map_err(to_py)?;
    Ok(p.groups().iter().map(|r| (r.start, r.end)).collect())
}

/// Per-group orders with the top and bottom `ratio` of scores moved to 3 and 1.
#[pyfunction]
fn allocate(scores: Vec<f64>, ratio: f64) -> PyResult<Vec<u32>> {
    let a = abmp::allocate(&scores, ratio).map_err(to_py)?;
    Ok(a.bits.into_iter().map(u32::from).collect())
}

/// `(quantized_bytes, fp16_bytes, total_bytes, gigabytes)` of a preset:
/// `"llada8b-2bit"` or `"fp16-8b"`.
#[pyfunction]
#[pyo3(signature = (preset, group_width=128))]
fn memory_estimate(preset: &str, group_width: usize) -> PyResult<(u64, u64, u64, f64)> {
    let desc = match preset {
        "llada8b-2bit" => qformat::llada_8b_like(group_width),
        "fp16-8b" => qformat::fp16_only(8_045_000_000),
        _ => return Err(PyValueError::new_err(format!("unknown preset {preset:?}"))),
    };
    let e = qformat::memory_estimate(&desc);
    Ok((e.quantized_bytes, e.fp16_bytes, e.total_bytes, e.gigabytes()))
}

#[pyfunction]
fn qpk_memory(path: PathBuf) -> PyResult<(u64, u64)> {
    let cfg = PipelineConfig::default();
    let s = pipeline::cmd_estimate_mem(&cfg, Some(&path), None).map_err(to_py)?;
    Ok((s.estimate.quantized_bytes, s.file_bytes.unwrap_or(0)))
}

#[pyfunction]
fn write_matrix(path: PathBuf, m: Vec<Vec<f32>>) -> PyResult<()> {
    tensor::write_matrix(path, &matrix(m)?).map_err(to_py)
}

#[pyfunction]
fn read_matrix(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    Ok(rows(&tensor::read_matrix(path).map_err(to_py)?))
}

/// Calibrate, quantize and evaluate the toy model; returns the report JSON.
/// `overrides` uses the config file keys.
#[pyfunction]
#[pyo3(signature = (out_dir, overrides=None))]
fn run_pipeline(py: Python<'_>, out_dir: PathBuf, overrides: Option<BTreeMap<String, String>>) -> PyResult<String> {
    let mut cfg = PipelineConfig::default();
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(to_py)?;
    }
    cfg.out_dir = out_dir;
    py.detach(|| -> maskquant::Result<String> {
        pipeline::cmd_calib(&cfg)?;
        pipeline::cmd_quantize(&cfg)?;
        pipeline::cmd_eval(&cfg, None)?;
        Ok(pipeline::RunReport::read(cfg.report_path())?.to_json())
    })
    .map_err(to_py)
}

#[pyfunction]
fn estimate_preset_text(preset: &str) -> PyResult<String> {
    let p = match preset {
        "llada8b-2bit" => MemoryPreset::Llada8b,
        "fp16-8b" => MemoryPreset::Fp16_8b,
        _ => return Err(PyValueError::new_err(format!("unknown preset {preset:?}"))),
    };
    Ok(pipeline::cmd_estimate_mem(&PipelineConfig::default(), None, Some(p))
        .map_err(to_py)?
        .render())
}

#[pymodule]
fn maskquant_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySecondMoment>()?;
    m.add_class::<PyDaqResult>()?;
    m.add_function(wrap_pyfunction!(visibility_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(prefix_len, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(importance_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(importance_mask, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_loss, m)?)?;
    m.add_function(wrap_pyfunction!(true_data_loss, m)?)?;
    m.add_function(wrap_pyfunction!(binary_rc_init, m)?)?;
    m.add_function(wrap_pyfunction!(update_b, m)?)?;
    m.add_function(wrap_pyfunction!(daq_fit, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(memory_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_preset_text, m)?)?;
    m.add_function(wrap_pyfunction!(qpk_memory, m)?)?;
    m.add_function(wrap_pyfunction!(write_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(read_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
