//! Python bindings: the MLP, the reconstruction step, metrics, and the
//! experiment runner, close to their Rust signatures.
//!
//! Build with `cargo build -p recl-py --release`; the smoke test under
//! python/ locates the produced cdylib on its own.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use recl_core::data::write_synthetic_mnist as core_write_synthetic_mnist;
use recl_core::error::Error;
use recl_core::harness::{config_fingerprint, parse_config, run_experiment, summarize};
use recl_core::metrics::{compute_acc, compute_bwt, AccuracyMatrix};
use recl_core::model::{
    expand_head, forward, homogeneity_check, init_mlp, load_checkpoint, save_checkpoint, MlpSpec,
    ParamVector,
};
use recl_core::reconstruction::{reconstruct, ReconHyperparams};
use recl_core::tensor::Tensor;
use recl_core::tuning::{match_nearest as core_match_nearest, ssim as core_ssim};

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Bias-free ReLU multi-layer perceptron.
#[pyclass]
struct Mlp {
    params: ParamVector,
    first_layer_scale: f64,
}

#[pymethods]
impl Mlp {
    /// Fresh network: `layer_sizes` is [input, hidden..., classes].
    #[new]
    #[pyo3(signature = (layer_sizes, seed=0, first_layer_scale=1e-4))]
    fn new(layer_sizes: Vec<usize>, seed: u64, first_layer_scale: f64) -> PyResult<Self> {
        let spec = MlpSpec::new(layer_sizes, first_layer_scale).map_err(err)?;
        Ok(Mlp {
            params: init_mlp(&spec, seed),
            first_layer_scale,
        })
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = Tensor::vector(x).map_err(err)?;
        Ok(forward(&self.params, &x).map_err(err)?.data().to_vec())
    }

    /// Max |Φ(c·θ; x) − c^L·Φ(θ; x)| over the logits.
    fn homogeneity_gap(&self, x: Vec<f64>, c: f64) -> PyResult<f64> {
        let x = Tensor::vector(x).map_err(err)?;
        let (scaled, reference) = homogeneity_check(&self.params, &x, c).map_err(err)?;
        Ok(scaled
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn expand_head(&mut self, extra_classes: usize, seed: u64) -> PyResult<()> {
        self.params = expand_head(&self.params, extra_classes, seed).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.params.n_classes()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_params()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.params, self.first_layer_scale, Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (params, spec) = load_checkpoint(Path::new(path)).map_err(err)?;
        Ok(Mlp {
            params,
            first_layer_scale: spec.first_layer_scale,
        })
    }

    /// Recover training-like candidates from the frozen weights.
    /// Returns (xs, labels, lambdas) as nested lists.
    #[pyo3(signature = (m, n_rec, seed=0, lr_x=0.01, lr_lambda=0.01, sigma_x=1e-3, lambda_min=0.1, alpha=100.0))]
    #[allow(clippy::too_many_arguments)]
    fn reconstruct(
        &self,
        m: usize,
        n_rec: usize,
        seed: u64,
        lr_x: f64,
        lr_lambda: f64,
        sigma_x: f64,
        lambda_min: f64,
        alpha: f64,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>)> {
        let hp = ReconHyperparams {
            lambda_min,
            sigma_x,
            lr_x,
            lr_lambda,
            n_rec,
            m,
            alpha,
        };
        let targets: Vec<usize> = (0..self.params.n_classes()).collect();
        let out = reconstruct(&self.params, &hp, &targets, seed).map_err(err)?;
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..t.rows().unwrap())
                .map(|i| t.row_slice(i).to_vec())
                .collect()
        };
        Ok((
            rows(&out.candidates.xs),
            out.candidates.labels.clone(),
            rows(&out.candidates.lambdas),
        ))
    }
}

/// Global single-window structural similarity over equal-length vectors.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = Tensor::vector(a).map_err(err)?;
    let b = Tensor::vector(b).map_err(err)?;
    core_ssim(&a, &b).map_err(err)
}

/// Per-reference index of the closest candidate (standardized L2).
#[pyfunction]
fn match_nearest(references: Vec<Vec<f64>>, candidates: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let to_matrix = |rows: Vec<Vec<f64>>| -> PyResult<Tensor> {
        let r = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Tensor::matrix(r, d, flat).map_err(err)
    };
    core_match_nearest(&to_matrix(references)?, &to_matrix(candidates)?).map_err(err)
}

/// ACC and BWT from (trained_up_to, evaluated, accuracy) triples, 0-based.
#[pyfunction]
fn continual_metrics(entries: Vec<(usize, usize, f64)>, trained: usize) -> PyResult<(f64, Option<f64>)> {
    let mut matrix = AccuracyMatrix::new();
    for (t, e, acc) in entries {
        matrix.record(t, e, acc).map_err(err)?;
    }
    let acc = compute_acc(&matrix, trained).map_err(err)?;
    let bwt = if trained >= 1 {
        Some(compute_bwt(&matrix, trained).map_err(err)?)
    } else {
        None
    };
    Ok((acc, bwt))
}

/// Run an experiment from config text; returns the summary as a JSON string.
#[pyfunction]
fn run_experiment_text(config_text: &str) -> PyResult<String> {
    let cfg = parse_config(config_text).map_err(err)?;
    let result = run_experiment(&cfg).map_err(err)?;
    if result.seed_runs.is_empty() {
        let (seed, message) = &result.failures[0];
        return Err(PyValueError::new_err(format!(
            "all seeds failed; seed {seed}: {message}"
        )));
    }
    let summary = summarize(std::slice::from_ref(&result));
    serde_json::to_string_pretty(&summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Fingerprint of the canonicalized config text.
#[pyfunction]
fn fingerprint(config_text: &str) -> PyResult<String> {
    let cfg = parse_config(config_text).map_err(err)?;
    Ok(config_fingerprint(&cfg))
}

/// Write a deterministic IDX stand-in dataset plus manifest; returns the
/// manifest path.
#[pyfunction]
#[pyo3(signature = (dir, n_train_per_class=100, n_test_per_class=50, seed=0))]
fn write_synthetic_mnist(
    dir: &str,
    n_train_per_class: usize,
    n_test_per_class: usize,
    seed: u64,
) -> PyResult<String> {
    let path = core_write_synthetic_mnist(Path::new(dir), n_train_per_class, n_test_per_class, seed)
        .map_err(err)?;
    Ok(path.display().to_string())
}

#[pymodule]
fn recl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mlp>()?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(match_nearest, m)?)?;
    m.add_function(wrap_pyfunction!(continual_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_text, m)?)?;
    m.add_function(wrap_pyfunction!(fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_mnist, m)?)?;
    Ok(())
}
