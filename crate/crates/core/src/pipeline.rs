//! End-to-end experiment pipeline: resolve data, split, train, and score the
//! held-out split in both query directions with both retrieval features.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, DatasetIndex, Modality};
use crate::embedder::{Embedder, FeatureChoice};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSet};
use crate::losses::FeatureBatch;
use crate::trainer::{train_with_observer, StepRecord, TrainHistory};

/// Retrieval metrics for one query direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionEval {
    /// Modality of the queries; the gallery is the other modality.
    pub query_modality: Modality,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
}

/// Both directions for one feature choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureEval {
    pub feature: String,
    pub directions: Vec<DirectionEval>,
}

impl FeatureEval {
    pub fn direction(&self, query_modality: Modality) -> &DirectionEval {
        self.directions
            .iter()
            .find(|d| d.query_modality == query_modality)
            .expect("both directions evaluated")
    }

    /// Metrics averaged over the two query directions.
    pub fn mean_metrics(&self) -> (f64, f64, f64, f64) {
        let n = self.directions.len() as f64;
        let sum = self.directions.iter().fold((0.0, 0.0, 0.0, 0.0), |acc, d| {
            (
                acc.0 + d.rank1,
                acc.1 + d.rank5,
                acc.2 + d.rank10,
                acc.3 + d.map,
            )
        });
        (sum.0 / n, sum.1 / n, sum.2 / n, sum.3 / n)
    }
}

/// Evaluation of one model over a held-out split: two features, two
/// directions each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub features: Vec<FeatureEval>,
}

impl EvalSummary {
    pub fn feature(&self, choice: FeatureChoice) -> &FeatureEval {
        self.features
            .iter()
            .find(|f| f.feature == choice.name())
            .expect("both features evaluated")
    }
}

/// Extract normalized features for the samples of one modality in `index`.
fn modality_features(
    model: &Embedder,
    dataset: &Dataset,
    index: &DatasetIndex,
    modality: Modality,
    which: FeatureChoice,
) -> Result<FeatureBatch> {
    let entries: Vec<_> = index
        .entries
        .iter()
        .filter(|e| e.modality == modality)
        .collect();
    if entries.is_empty() {
        return Err(Error::data(format!("no {modality} samples in the eval split")));
    }
    let samples = entries
        .iter()
        .map(|e| {
            dataset
                .get(e.sample_id)
                .ok_or_else(|| Error::data(format!("sample {} not in dataset", e.sample_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let extracted = model.extract_features(&samples, which)?;
    FeatureBatch::new(
        extracted.features,
        entries.iter().map(|e| e.identity).collect(),
        entries.iter().map(|e| e.modality).collect(),
    )
}

/// Score a trained model on an eval split: both directions, both features.
pub fn evaluate_model(
    model: &Embedder,
    dataset: &Dataset,
    eval_index: &DatasetIndex,
) -> Result<EvalSummary> {
    let mut features = Vec::new();
    for which in FeatureChoice::BOTH {
        let visible = modality_features(model, dataset, eval_index, Modality::Visible, which)?;
        let thermal = modality_features(model, dataset, eval_index, Modality::Thermal, which)?;
        let mut directions = Vec::new();
        for query_modality in Modality::BOTH {
            let (query, gallery) = match query_modality {
                Modality::Visible => (visible.clone(), thermal.clone()),
                Modality::Thermal => (thermal.clone(), visible.clone()),
            };
            let result = evaluate(&EvalSet::new(query, gallery)?)?;
            directions.push(DirectionEval {
                query_modality,
                rank1: result.rank(1),
                rank5: result.rank(5),
                rank10: result.rank(10),
                rank20: result.rank(20),
                map: result.map,
            });
        }
        features.push(FeatureEval {
            feature: which.name().to_string(),
            directions,
        });
    }
    Ok(EvalSummary { features })
}

/// A finished experiment.
pub struct Experiment {
    pub model: Embedder,
    pub history: TrainHistory,
    pub eval: EvalSummary,
    pub train_index: DatasetIndex,
    pub eval_index: DatasetIndex,
}

/// Train per `config` and evaluate on the held-out split.
///
/// The dataset is resolved from the config; the split holds out
/// `eval.holdout_per_identity` samples per `(identity, modality)` group.
pub fn run_experiment(
    config: &RunConfig,
    checkpoint_path: Option<std::path::PathBuf>,
    observer: impl FnMut(&StepRecord),
) -> Result<Experiment> {
    let dataset = config.resolve_dataset()?;
    run_experiment_on(config, &dataset, checkpoint_path, observer)
}

/// [`run_experiment`] against an already-resolved dataset.
pub fn run_experiment_on(
    config: &RunConfig,
    dataset: &Dataset,
    checkpoint_path: Option<std::path::PathBuf>,
    observer: impl FnMut(&StepRecord),
) -> Result<Experiment> {
    check_shapes(config, dataset)?;
    let (train_index, eval_index) = dataset
        .index()
        .split_holdout(config.eval.holdout_per_identity)?;
    let num_identities = train_index.distinct_identities().len();
    let train_cfg = config.to_train_config(num_identities, checkpoint_path)?;
    let (model, history) = train_with_observer(
        dataset,
        &train_index,
        &train_cfg,
        Some(config.echo()),
        observer,
    )?;
    let eval = evaluate_model(&model, dataset, &eval_index)?;
    Ok(Experiment {
        model,
        history,
        eval,
        train_index,
        eval_index,
    })
}

fn check_shapes(config: &RunConfig, dataset: &Dataset) -> Result<()> {
    if config.embedder.input_shape != dataset.input_shape() {
        return Err(Error::config(format!(
            "embedder.input_shape {:?} does not match the dataset's {:?}",
            config.embedder.input_shape,
            dataset.input_shape()
        )));
    }
    Ok(())
}

/// Evaluate an untrained (freshly initialized) model on the same split; the
/// baseline the trained numbers are compared against.
pub fn evaluate_untrained(config: &RunConfig, dataset: &Dataset) -> Result<EvalSummary> {
    check_shapes(config, dataset)?;
    let (train_index, eval_index) = dataset
        .index()
        .split_holdout(config.eval.holdout_per_identity)?;
    let num_identities = train_index.distinct_identities().len();
    let embedder_cfg = config.embedder.to_config(num_identities)?;
    let model = Embedder::new(embedder_cfg)?;
    evaluate_model(&model, dataset, &eval_index)
}

/// Boolean feature-matrix sanity check used by a few consumers.
pub fn all_rows_unit_norm(features: &Array2<f64>, tolerance: f64) -> bool {
    features.rows().into_iter().all(|row| {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm - 1.0).abs() <= tolerance
    })
}
