//! Python bindings for the segmentation toolkit: fingerprinting, candidate
//! kernel matrices, metrics, synthetic data generation, and checkpointed
//! model inference. Structured results cross the boundary as JSON strings so
//! callers can `json.loads` them.

use msa2net::data;
use msa2net::fingerprint::{self, build_candidate_matrix, FingerprintFile, KernelCandidateMatrix};
use msa2net::metrics::{self, BinaryMask, HausdorffMode};
use msa2net::train::{self, Checkpoint, RunConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::{Path, PathBuf};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// [Q1, Q2, Q3, P95] of a sample list (linear interpolation at q·(n−1)).
#[pyfunction]
fn quartile_stats(samples: Vec<f64>) -> PyResult<[f64; 4]> {
    fingerprint::quartile_stats(&samples).map_err(value_err)
}

/// Per-class area proportions of a label mask (classes 1..num_classes).
#[pyfunction]
fn area_proportions(
    mask: Vec<u8>,
    height: usize,
    width: usize,
    num_classes: usize,
) -> PyResult<Vec<f64>> {
    fingerprint::area_proportions(&mask, height, width, num_classes).map_err(value_err)
}

/// Nearest odd kernel size for a raw candidate value (ties up, clamped).
#[pyfunction]
fn quantize_odd(value: f64) -> usize {
    fingerprint::quantize_odd(value)
}

/// Candidate kernel matrix for pooled quartiles, as JSON
/// {base, shift, raw, quantized}.
#[pyfunction]
fn candidate_matrix(pooled_quartiles: [f64; 4]) -> PyResult<String> {
    let mut shift = [0.0; 4];
    for (s, q) in shift.iter_mut().zip(pooled_quartiles) {
        *s = 1.0 + q;
    }
    let matrix = KernelCandidateMatrix::from_shift(shift);
    serde_json::to_string(&matrix).map_err(runtime_err)
}

/// Fingerprint a dataset directory (manifest.json layout); returns the same
/// JSON document the CLI writes.
#[pyfunction]
fn fingerprint_dataset(dataset_dir: &str) -> PyResult<String> {
    let (manifest, root) = data::read_manifest(Path::new(dataset_dir)).map_err(value_err)?;
    let stems = manifest.all_stems();
    let samples: Vec<data::Sample> = stems
        .iter()
        .map(|s| data::load_pair(&root, s, manifest.num_classes))
        .collect::<Result<_, _>>()
        .map_err(value_err)?;
    let fp = fingerprint::fingerprint_dataset(
        dataset_dir,
        samples
            .iter()
            .map(|s| (s.stem.clone(), s.mask.as_slice(), s.height, s.width)),
        manifest.num_classes,
    )
    .map_err(value_err)?;
    serde_json::to_string(&FingerprintFile::new(&fp)).map_err(runtime_err)
}

/// Dice coefficient between two binary masks (nonzero = foreground).
#[pyfunction]
fn dice(pred: Vec<u8>, truth: Vec<u8>, height: usize, width: usize) -> PyResult<f64> {
    let p = BinaryMask::new(height, width, pred.iter().map(|&v| v != 0).collect());
    let t = BinaryMask::new(height, width, truth.iter().map(|&v| v != 0).collect());
    metrics::dice(&p, &t).map_err(value_err)
}

/// HD95 between two binary masks; None when either mask is empty.
#[pyfunction]
fn hd95(pred: Vec<u8>, truth: Vec<u8>, height: usize, width: usize) -> PyResult<Option<f64>> {
    let p = BinaryMask::new(height, width, pred.iter().map(|&v| v != 0).collect());
    let t = BinaryMask::new(height, width, truth.iter().map(|&v| v != 0).collect());
    metrics::hd95(&p, &t, HausdorffMode::Percentile95).map_err(value_err)
}

/// Generate a synthetic dataset from a SyntheticSpec JSON string.
#[pyfunction]
fn generate_dataset(spec_json: &str, count: usize, out_dir: &str) -> PyResult<()> {
    let spec: data::SyntheticSpec = serde_json::from_str(spec_json).map_err(value_err)?;
    data::generate(&spec, count, Path::new(out_dir)).map_err(runtime_err)?;
    Ok(())
}

/// Run training from a run-config JSON string; returns a summary JSON with
/// the checkpoint path and the kernel schedule.
#[pyfunction]
fn train_run(config_json: &str) -> PyResult<String> {
    let config: RunConfig = serde_json::from_str(config_json).map_err(value_err)?;
    let outcome = train::train(&config).map_err(runtime_err)?;
    let summary = serde_json::json!({
        "checkpoint": outcome.checkpoint_path,
        "log": outcome.log_path,
        "best_metric": outcome.checkpoint.best_metric,
        "best_epoch": outcome.checkpoint.epoch,
        "kernel_schedule": outcome.checkpoint.model.kernel_schedule_report(),
    });
    Ok(summary.to_string())
}

/// A checkpointed segmentation model.
#[pyclass]
struct Model {
    checkpoint: Checkpoint,
}

#[pymethods]
impl Model {
    /// Load a checkpoint written by training.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let checkpoint = Checkpoint::load(&PathBuf::from(path)).map_err(runtime_err)?;
        Ok(Model { checkpoint })
    }

    /// Segment a PNG image; returns (labels, height, width).
    fn predict(&self, image_path: &str) -> PyResult<(Vec<u8>, usize, usize)> {
        let result = train::predict_image(&self.checkpoint.model, Path::new(image_path))
            .map_err(runtime_err)?;
        Ok((result.labels, result.height, result.width))
    }

    /// Per-pixel probabilities (row-major H×W×C) for a PNG image.
    fn predict_probabilities(&self, image_path: &str) -> PyResult<(Vec<f64>, usize, usize, usize)> {
        let result = train::predict_image(&self.checkpoint.model, Path::new(image_path))
            .map_err(runtime_err)?;
        Ok((
            result.probabilities,
            result.height,
            result.width,
            result.num_classes,
        ))
    }

    /// Kernel schedule report as JSON ({bridge, decoder_stages}).
    fn kernel_schedule(&self) -> PyResult<String> {
        serde_json::to_string(&self.checkpoint.model.kernel_schedule_report()).map_err(runtime_err)
    }

    /// The candidate matrix the model was built with, as JSON.
    fn candidate_matrix(&self) -> PyResult<String> {
        serde_json::to_string(&self.checkpoint.model.config.candidate_matrix).map_err(runtime_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.checkpoint.model.config.num_classes
    }

    #[getter]
    fn guidance(&self) -> String {
        self.checkpoint.model.config.guidance.to_string()
    }
}

/// Candidate matrix directly from a fingerprint JSON document.
#[pyfunction]
fn candidate_matrix_from_fingerprint(fingerprint_json: &str) -> PyResult<String> {
    let file: FingerprintFile = serde_json::from_str(fingerprint_json).map_err(value_err)?;
    let matrix = build_candidate_matrix(&file.fingerprint());
    serde_json::to_string(&matrix).map_err(runtime_err)
}

#[pymodule]
fn msa2net_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quartile_stats, m)?)?;
    m.add_function(wrap_pyfunction!(area_proportions, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_odd, m)?)?;
    m.add_function(wrap_pyfunction!(candidate_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(candidate_matrix_from_fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(fingerprint_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
