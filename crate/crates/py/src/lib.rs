//! Python bindings for the cross-modality metric learning toolkit.
//!
//! Exposes the pooling operators, the triplet and identification losses, the
//! PK batch sampler, the synthetic data generator, CMC/mAP evaluation, and a
//! whole-experiment entry point driven by a TOML configuration string.
//! Matrices cross the boundary as nested `list[list[float]]`.

use ndarray::{Array2, Array3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dgtl_core::config::RunConfig;
use dgtl_core::data::{DatasetIndex, IndexEntry, Modality};
use dgtl_core::error::Error;
use dgtl_core::eval::{evaluate, EvalSet};
use dgtl_core::losses::{self, FeatureBatch};
use dgtl_core::pipeline::run_experiment;
use dgtl_core::pooling::{self, PoolingMethod};
use dgtl_core::sampler::{build_epoch, SamplerConfig};
use dgtl_core::synth::{generate, SyntheticSpec};

/// `(sample_id, identity, modality_code, flat_values)`.
type SampleRow = (u64, u32, String, Vec<f64>);

fn to_py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix_from(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows have inconsistent lengths"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, dim), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix_to(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn map_from(values: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Array3<f64>> {
    Array3::from_shape_vec(shape, values).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn modalities_from(codes: Vec<String>) -> PyResult<Vec<Modality>> {
    codes
        .iter()
        .map(|c| Modality::parse(c).map_err(to_py_err))
        .collect()
}

fn batch_from(
    features: Vec<Vec<f64>>,
    identities: Vec<u32>,
    modalities: Vec<String>,
) -> PyResult<FeatureBatch> {
    FeatureBatch::new(matrix_from(features)?, identities, modalities_from(modalities)?)
        .map_err(to_py_err)
}

/// Pool an `H x W x C` map (row-major flat values) to one value per channel.
#[pyfunction]
#[pyo3(signature = (values, shape, method, gem_p = 3.0))]
fn pool_forward(
    values: Vec<f64>,
    shape: (usize, usize, usize),
    method: &str,
    gem_p: f64,
) -> PyResult<Vec<f64>> {
    let map = map_from(values, shape)?;
    let method = PoolingMethod::parse(method, gem_p).map_err(to_py_err)?;
    Ok(pooling::pool_forward(&map, &method)
        .map_err(to_py_err)?
        .to_vec())
}

/// Gradient of `pool_forward` with respect to the map, flattened row-major.
#[pyfunction]
#[pyo3(signature = (values, shape, method, upstream, gem_p = 3.0))]
fn pool_backward(
    values: Vec<f64>,
    shape: (usize, usize, usize),
    method: &str,
    upstream: Vec<f64>,
    gem_p: f64,
) -> PyResult<Vec<f64>> {
    let map = map_from(values, shape)?;
    let method = PoolingMethod::parse(method, gem_p).map_err(to_py_err)?;
    let upstream = ndarray::Array1::from_vec(upstream);
    let grad = pooling::pool_backward(&map, &method, &upstream.view()).map_err(to_py_err)?;
    Ok(grad.into_iter().collect())
}

/// Smoothed pairwise Euclidean distance matrix.
#[pyfunction]
fn pairwise_euclidean(features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = matrix_from(features)?;
    let d = losses::pairwise_euclidean(&m.view()).map_err(to_py_err)?;
    Ok(matrix_to(&d))
}

/// Sample-based hard-mining triplet loss; returns `(loss, grad)`.
#[pyfunction]
fn fine_triplet(
    features: Vec<Vec<f64>>,
    identities: Vec<u32>,
    modalities: Vec<String>,
    margin: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let batch = batch_from(features, identities, modalities)?;
    let result = losses::fine_triplet(&batch, margin).map_err(to_py_err)?;
    Ok((result.loss, matrix_to(&result.grad)))
}

/// Center-based hetero-center triplet loss; returns `(loss, grad)`.
#[pyfunction]
fn hetero_center_triplet(
    features: Vec<Vec<f64>>,
    identities: Vec<u32>,
    modalities: Vec<String>,
    margin: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let batch = batch_from(features, identities, modalities)?;
    let result = losses::hetero_center_triplet(&batch, margin).map_err(to_py_err)?;
    Ok((result.loss, matrix_to(&result.grad)))
}

/// Per-identity per-modality centroids; returns `(identities, centers)` with
/// rows `[id0_visible, id0_thermal, id1_visible, ...]`.
#[pyfunction]
fn compute_centers(
    features: Vec<Vec<f64>>,
    identities: Vec<u32>,
    modalities: Vec<String>,
) -> PyResult<(Vec<u32>, Vec<Vec<f64>>)> {
    let batch = batch_from(features, identities, modalities)?;
    let centers = losses::compute_centers(&batch).map_err(to_py_err)?;
    Ok((centers.identities, matrix_to(&centers.centers)))
}

/// Mean softmax cross-entropy; returns `(loss, grad)`.
#[pyfunction]
fn id_loss(logits: Vec<Vec<f64>>, classes: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let m = matrix_from(logits)?;
    let (loss, grad) = losses::id_loss(&m.view(), &classes).map_err(to_py_err)?;
    Ok((loss, matrix_to(&grad)))
}

/// Plan one epoch of identity-balanced PK batches.
///
/// `entries` are `(sample_id, identity, modality)` rows; returns one list of
/// such rows per batch, in slot order.
#[pyfunction]
fn plan_epoch(
    entries: Vec<(u64, u32, String)>,
    p: usize,
    k: usize,
    seed: u64,
) -> PyResult<Vec<Vec<(u64, u32, String)>>> {
    let index = DatasetIndex::new(
        entries
            .into_iter()
            .map(|(sample_id, identity, modality)| {
                Ok(IndexEntry {
                    sample_id,
                    identity,
                    modality: Modality::parse(&modality).map_err(to_py_err)?,
                })
            })
            .collect::<PyResult<Vec<_>>>()?,
    )
    .map_err(to_py_err)?;
    let batches = build_epoch(&index, &SamplerConfig { p, k, seed }).map_err(to_py_err)?;
    Ok(batches
        .into_iter()
        .map(|b| {
            b.slots
                .iter()
                .zip(&b.identities)
                .zip(&b.modalities)
                .map(|((&sid, &id), &m)| (sid, id, m.code().to_string()))
                .collect()
        })
        .collect())
}

/// Generate a synthetic two-modality dataset; returns rows of
/// `(sample_id, identity, modality, flat_values)`.
#[pyfunction]
#[pyo3(signature = (num_identities, samples_per_identity_per_modality, input_shape, identity_scale = 1.0, modality_offset_scale = 0.5, noise_scale = 0.1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    num_identities: usize,
    samples_per_identity_per_modality: usize,
    input_shape: (usize, usize, usize),
    identity_scale: f64,
    modality_offset_scale: f64,
    noise_scale: f64,
    seed: u64,
) -> PyResult<Vec<SampleRow>> {
    let dataset = generate(&SyntheticSpec {
        num_identities,
        samples_per_identity_per_modality,
        input_shape,
        identity_scale,
        modality_offset_scale,
        noise_scale,
        seed,
    })
    .map_err(to_py_err)?;
    Ok(dataset
        .samples()
        .iter()
        .map(|s| {
            (
                s.sample_id,
                s.identity,
                s.modality.code().to_string(),
                s.data.iter().copied().collect(),
            )
        })
        .collect())
}

/// CMC/mAP for one query-modality to gallery-modality direction.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn evaluate_retrieval<'py>(
    py: Python<'py>,
    query_features: Vec<Vec<f64>>,
    query_identities: Vec<u32>,
    query_modality: &str,
    gallery_features: Vec<Vec<f64>>,
    gallery_identities: Vec<u32>,
    gallery_modality: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let n_query = query_identities.len();
    let n_gallery = gallery_identities.len();
    let set = EvalSet::new(
        batch_from(query_features, query_identities, vec![query_modality.into(); n_query])?,
        batch_from(
            gallery_features,
            gallery_identities,
            vec![gallery_modality.into(); n_gallery],
        )?,
    )
    .map_err(to_py_err)?;
    let result = evaluate(&set).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("rank1", result.rank(1))?;
    out.set_item("rank5", result.rank(5))?;
    out.set_item("rank10", result.rank(10))?;
    out.set_item("rank20", result.rank(20))?;
    out.set_item("mAP", result.map)?;
    out.set_item("cmc", result.cmc.clone())?;
    out.set_item("per_query_ap", result.per_query_ap.clone())?;
    Ok(out)
}

/// Run a full experiment (train plus held-out evaluation) from TOML
/// configuration text; returns the loss trajectory and retrieval metrics.
#[pyfunction]
fn run_experiment_toml<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let config = RunConfig::from_toml_str(config_toml).map_err(to_py_err)?;
    let experiment = run_experiment(&config, None, |_| {}).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("steps", experiment.history.records.len())?;
    out.set_item(
        "l_all",
        experiment
            .history
            .records
            .iter()
            .map(|r| r.l_all)
            .collect::<Vec<f64>>(),
    )?;
    let eval = PyDict::new(py);
    for feature in &experiment.eval.features {
        let per_feature = PyDict::new(py);
        for direction in &feature.directions {
            let metrics = PyDict::new(py);
            metrics.set_item("rank1", direction.rank1)?;
            metrics.set_item("rank5", direction.rank5)?;
            metrics.set_item("rank10", direction.rank10)?;
            metrics.set_item("mAP", direction.map)?;
            let key = format!("{}_to_{}", direction.query_modality, direction.query_modality.other());
            per_feature.set_item(key, metrics)?;
        }
        eval.set_item(&feature.feature, per_feature)?;
    }
    out.set_item("eval", eval)?;
    Ok(out)
}

#[pymodule]
fn dgtl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pool_forward, m)?)?;
    m.add_function(wrap_pyfunction!(pool_backward, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_euclidean, m)?)?;
    m.add_function(wrap_pyfunction!(fine_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(hetero_center_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(compute_centers, m)?)?;
    m.add_function(wrap_pyfunction!(id_loss, m)?)?;
    m.add_function(wrap_pyfunction!(plan_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_toml, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
