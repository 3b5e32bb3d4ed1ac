//! Python module `pygmc`: config inspection, FLOPS, gate math, the
//! verification suites and short training runs.

use std::path::Path;

use gmc_core::block::ExecMode;
use gmc_core::netconfig::{load_config, NetworkConfig};
use gmc_core::network::build_network;
use gmc_core::train::{evaluate, generate_dataset, train_loop, SyntheticTask, TrainConfig, QUADRANTS};
use gmc_core::verify::{compare_sparse_to_oracle, BlockCase};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: gmc_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(path: &str) -> PyResult<NetworkConfig> {
    load_config(Path::new(path)).map_err(err)
}

/// Per-stage output sizes as `(height, width)` pairs.
#[pyfunction]
fn output_sizes(path: &str) -> PyResult<Vec<(usize, usize)>> {
    let cfg = config(path)?;
    cfg.output_sizes(cfg.input.height, cfg.input.width).map_err(err)
}

/// Per-sample cost at `k` experts: `conv_macs`, `linear_macs`, `aux_ops`.
#[pyfunction]
#[pyo3(signature = (path, k, input=None))]
fn flops<'py>(py: Python<'py>, path: &str, k: usize, input: Option<(usize, usize)>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = config(path)?;
    if let Some((h, w)) = input {
        cfg = cfg.with_input(h, w).map_err(err)?;
    }
    let r = gmc_core::flops::network_flops(&cfg.with_k(k).map_err(err)?).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("conv_macs", r.total_conv_macs)?;
    d.set_item("linear_macs", r.total_linear_macs)?;
    d.set_item("aux_ops", r.total_aux)?;
    Ok(d)
}

#[pyfunction]
fn normalize_gates(values: Vec<f64>) -> PyResult<(Vec<f64>, bool)> {
    gmc_core::gate::normalize_gates(&values).map_err(err)
}

#[pyfunction]
fn topk_select(values: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    gmc_core::gate::topk_select(&values, k).map_err(err)
}

#[pyfunction]
fn cv_squared(values: Vec<f64>) -> PyResult<f64> {
    gmc_core::gate::cv_squared(&values).map_err(err)
}

/// Largest forward and backward deviation between the sparse block and
/// the dense masked oracle over `trials` random blocks.
#[pyfunction]
#[pyo3(signature = (trials, seed=0, dtype="f64"))]
fn verify_blocks(trials: u64, seed: u64, dtype: &str) -> PyResult<(f64, f64)> {
    let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
    for s in seed..seed + trials {
        let case = BlockCase::<f64>::random(s).map_err(err)?;
        let d = match dtype {
            "f64" => compare_sparse_to_oracle(&case, None),
            "f32" => compare_sparse_to_oracle(&case.cast::<f32>(), None),
            other => return Err(PyValueError::new_err(format!("dtype must be f32 or f64, got {other}"))),
        }
        .map_err(err)?;
        fwd = fwd.max(d.forward);
        bwd = bwd.max(d.backward);
    }
    Ok((fwd, bwd))
}

/// `(name, worst relative error)` for every finite-difference check.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradient_suite(seed: u64) -> PyResult<Vec<(String, f64)>> {
    Ok(gmc_core::verify::gradient_suite(seed).map_err(err)?.into_iter().map(|c| (c.name.to_string(), c.worst)).collect())
}

/// Train on the synthetic task and report the loss trace and accuracy.
#[pyfunction]
#[pyo3(signature = (path, steps, seed, k=None, lam=0.01, n_train=1024, n_val=256))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    path: &str,
    steps: usize,
    seed: u64,
    k: Option<usize>,
    lam: f64,
    n_train: usize,
    n_val: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(path)?;
    let task = SyntheticTask {
        seed,
        image_size: cfg.input.height,
        n_colors: cfg.head.classes,
        n_positions: QUADRANTS,
        n_train,
        n_val,
    };
    let tcfg = TrainConfig { steps, seed, k: k.unwrap_or(cfg.k), lambda: lam, ..Default::default() };
    let mut net = build_network::<f64>(&cfg, seed).map_err(err)?;
    let trace = train_loop(&mut net, &task, &tcfg).map_err(err)?;
    let (_, val) = generate_dataset::<f64>(&task).map_err(err)?;
    let report = evaluate(&net, &val, tcfg.k, ExecMode::Sparse).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("losses", trace.losses())?;
    d.set_item("final_cv_squared", trace.final_cv_squared(10))?;
    d.set_item("val_accuracy", report.accuracy)?;
    d.set_item("usage", report.usage)?;
    Ok(d)
}

#[pymodule]
pub fn pygmc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(output_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_gates, m)?)?;
    m.add_function(wrap_pyfunction!(topk_select, m)?)?;
    m.add_function(wrap_pyfunction!(cv_squared, m)?)?;
    m.add_function(wrap_pyfunction!(verify_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
