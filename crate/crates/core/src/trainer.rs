//! Deterministic training loop: sampler -> embedder -> losses -> momentum
//! SGD, plus a finite-difference gradient checker for the whole model.
//!
//! Each epoch re-plans its batches from a seed derived as
//! `derive_seed(sampler.seed, epoch)`, so a run is a pure function of the
//! configuration and checkpointed runs can resume bitwise.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::{Dataset, DatasetIndex, MiniBatch};
use crate::embedder::{Embedder, EmbedderConfig, Mode, ParameterGradients, Parameters};
use crate::error::{Error, Result};
use crate::losses::{dgtl_total, LossConfig};
use crate::rng;
use crate::sampler::{build_epoch, SamplerConfig};
use crate::synth::SyntheticSpec;

/// Documented ceiling on the epoch count; this is a desk-scale toolkit.
pub const MAX_EPOCHS: usize = 100_000;

/// Pass threshold of the full-model gradient check.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

/// Finite-difference step of the gradient check.
pub const GRAD_CHECK_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sampler: SamplerConfig,
    pub embedder: EmbedderConfig,
    pub loss: LossConfig,
    /// Progress-print stride for front ends; the history always records
    /// every step.
    pub log_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::config(format!(
                "epochs must be in 1..={MAX_EPOCHS}, got {}",
                self.epochs
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be at least 1"));
        }
        self.sampler.validate()?;
        self.embedder.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// One training step's loss values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub l_f_tri: f64,
    pub l_c_tri: f64,
    pub l_id_fine: f64,
    pub l_id_coarse: f64,
    pub l_all: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    /// Mean `l_all` over one epoch's records.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.l_all)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// The momentum-SGD update rule applied to every trainable scalar:
/// `v <- momentum*v + g + weight_decay*theta; theta <- theta - lr*v`.
pub fn momentum_sgd_step(
    theta: &mut f64,
    velocity: &mut f64,
    grad: f64,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) {
    *velocity = momentum * *velocity + grad + weight_decay * *theta;
    *theta -= learning_rate * *velocity;
}

fn apply_update(
    params: &mut Parameters,
    velocity: &mut ParameterGradients,
    grads: &ParameterGradients,
    cfg: &TrainConfig,
) {
    let grad_layers = grads.flat_layers();
    for (((_, theta), (_, v)), (_, g)) in params
        .flat_layers_mut()
        .into_iter()
        .zip(velocity.flat_layers_mut())
        .zip(grad_layers)
    {
        for i in 0..theta.len() {
            momentum_sgd_step(
                &mut theta[i],
                &mut v[i],
                g[i],
                cfg.learning_rate,
                cfg.momentum,
                cfg.weight_decay,
            );
        }
    }
}

fn class_indices(index: &DatasetIndex, cfg: &TrainConfig) -> Result<Vec<u32>> {
    let identities = index.distinct_identities();
    if identities.len() != cfg.embedder.num_identities {
        return Err(Error::config(format!(
            "embedder.num_identities = {} but the training index has {} identities",
            cfg.embedder.num_identities,
            identities.len()
        )));
    }
    Ok(identities)
}

/// Train a fresh model over `index` (tensors come from `dataset`).
pub fn train(
    dataset: &Dataset,
    index: &DatasetIndex,
    cfg: &TrainConfig,
) -> Result<(Embedder, TrainHistory)> {
    train_with_observer(dataset, index, cfg, None, |_| {})
}

/// [`train`] with a per-step observer and an optional run-config echo for
/// the final checkpoint.
pub fn train_with_observer(
    dataset: &Dataset,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    run_config_echo: Option<serde_json::Value>,
    observer: impl FnMut(&StepRecord),
) -> Result<(Embedder, TrainHistory)> {
    cfg.validate()?;
    index.validate()?;
    let model = Embedder::new(cfg.embedder.clone())?;
    let velocity = ParameterGradients::zeros_like(&model.params);
    run_loop(
        dataset, index, cfg, model, velocity, 0, 0, run_config_echo, observer,
    )
}

/// Continue a checkpointed run; requires the checkpoint to carry optimizer
/// state and to match `cfg.embedder`.
pub fn train_resume(
    dataset: &Dataset,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    checkpoint: Checkpoint,
) -> Result<(Embedder, TrainHistory)> {
    cfg.validate()?;
    index.validate()?;
    if checkpoint.config != cfg.embedder {
        return Err(Error::config(
            "checkpoint embedder config differs from the training config",
        ));
    }
    let optimizer = checkpoint.optimizer.clone().ok_or_else(|| {
        Error::state("checkpoint has no optimizer state; cannot resume training")
    })?;
    let run_echo = checkpoint.run_config.clone();
    let model = checkpoint.into_embedder()?;
    run_loop(
        dataset,
        index,
        cfg,
        model,
        optimizer.velocity,
        optimizer.next_epoch,
        optimizer.next_batch,
        run_echo,
        |_| {},
    )
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    dataset: &Dataset,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    mut model: Embedder,
    mut velocity: ParameterGradients,
    start_epoch: usize,
    start_batch: usize,
    run_config_echo: Option<serde_json::Value>,
    mut observer: impl FnMut(&StepRecord),
) -> Result<(Embedder, TrainHistory)> {
    let identities = class_indices(index, cfg)?;
    let class_of = |identity: u32| -> usize {
        identities.binary_search(&identity).expect("identity in index")
    };

    let mut history = TrainHistory::default();
    let mut step = 0usize;
    for epoch in start_epoch..cfg.epochs {
        let epoch_sampler = SamplerConfig {
            seed: rng::derive_seed(cfg.sampler.seed, epoch as u64),
            ..cfg.sampler
        };
        let batches = build_epoch(index, &epoch_sampler)?;
        let first_batch = if epoch == start_epoch { start_batch } else { 0 };
        for (batch_idx, spec) in batches.iter().enumerate().skip(first_batch) {
            let samples = spec
                .slots
                .iter()
                .map(|sid| {
                    dataset
                        .get(*sid)
                        .ok_or_else(|| Error::data(format!("sample {sid} not in dataset")))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = MiniBatch::from_samples(&samples);
            let classes: Vec<usize> = batch.identities.iter().map(|&id| class_of(id)).collect();

            let with_step = |e: Error| match e {
                Error::Numerical(msg) => Error::numerical(format!(
                    "step {step} (epoch {epoch}, batch {batch_idx}): {msg}"
                )),
                other => other,
            };
            let outputs = model.forward(&batch, Mode::Train).map_err(with_step)?;
            let report = dgtl_total(
                &outputs,
                &batch.identities,
                &batch.modalities,
                &classes,
                &cfg.loss,
            )
            .map_err(with_step)?;
            let grads = model.backward(&report.grads).map_err(with_step)?;
            apply_update(&mut model.params, &mut velocity, &grads, cfg);

            let record = StepRecord {
                epoch,
                batch: batch_idx,
                l_f_tri: report.l_f_tri,
                l_c_tri: report.l_c_tri,
                l_id_fine: report.l_id_fine,
                l_id_coarse: report.l_id_coarse,
                l_all: report.l_all,
            };
            observer(&record);
            history.records.push(record);
            step += 1;
        }
    }

    if let Some(path) = &cfg.checkpoint_path {
        let mut checkpoint = Checkpoint::new(cfg.embedder.clone(), model.params.clone());
        checkpoint.optimizer = Some(OptimizerState {
            velocity: velocity.clone(),
            next_epoch: cfg.epochs,
            next_batch: 0,
        });
        checkpoint.run_config = run_config_echo.or_else(|| serde_json::to_value(cfg).ok());
        checkpoint.save(path)?;
    }
    Ok((model, history))
}

/// Snapshot of a mid-run optimizer for custom checkpointing.
pub fn make_checkpoint(
    cfg: &TrainConfig,
    params: Parameters,
    velocity: ParameterGradients,
    next_epoch: usize,
    next_batch: usize,
) -> Checkpoint {
    let mut checkpoint = Checkpoint::new(cfg.embedder.clone(), params);
    checkpoint.optimizer = Some(OptimizerState {
        velocity,
        next_epoch,
        next_batch,
    });
    checkpoint
}

/// Relative error with an absolute floor: discrepancies below `5e-5 * floor`
/// never fail, genuine mismatches on well-scaled gradients always do.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Outcome of a full-model gradient check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: String,
    pub checked: usize,
    /// Coordinates excluded because the finite-difference probe crossed a
    /// mining/argmax/hinge boundary.
    pub excluded: Vec<String>,
    /// Mining tie already present at the unperturbed point.
    pub nominal_tie: bool,
    pub per_layer: Vec<LayerCheck>,
    pub threshold: f64,
    pub pass: bool,
}

/// Full-model finite-difference check on a synthetic batch derived from
/// `seed`. `params_per_layer` coordinates are drawn per trainable array.
pub fn grad_check(
    cfg: &TrainConfig,
    params_per_layer: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let batch_size = 2 * cfg.sampler.p * cfg.sampler.k;
    if batch_size > 16 || cfg.embedder.feature_dim > 16 {
        return Err(Error::config(format!(
            "gradient checking wants a small config: batch {batch_size} (max 16), feature_dim {} (max 16)",
            cfg.embedder.feature_dim
        )));
    }
    if cfg.embedder.num_identities < cfg.sampler.p {
        return Err(Error::config(
            "embedder.num_identities must cover the sampled identities",
        ));
    }

    let data_spec = SyntheticSpec {
        num_identities: cfg.sampler.p,
        samples_per_identity_per_modality: cfg.sampler.k,
        input_shape: cfg.embedder.input_shape,
        identity_scale: 1.0,
        modality_offset_scale: 0.7,
        noise_scale: 0.25,
        seed,
    };
    let dataset = crate::synth::generate(&data_spec)?;
    let samples: Vec<&crate::data::LabeledSample> = dataset.samples().iter().collect();
    let batch = MiniBatch::from_samples(&samples);
    let classes: Vec<usize> = batch.identities.iter().map(|&id| id as usize).collect();

    let model = Embedder::new(cfg.embedder.clone())?;
    grad_check_model(&model, &batch, &classes, &cfg.loss, params_per_layer, seed)
}

/// Gradient check against an explicit model and batch.
pub fn grad_check_model(
    model: &Embedder,
    batch: &MiniBatch,
    classes: &[usize],
    loss_cfg: &LossConfig,
    params_per_layer: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let eval = |params: &Parameters| -> Result<(f64, Vec<u64>)> {
        let mut m = Embedder::from_parts(model.config().clone(), params.clone())?;
        let outputs = m.forward(batch, Mode::Train)?;
        let report = dgtl_total(&outputs, &batch.identities, &batch.modalities, classes, loss_cfg)?;
        let mut signature = m.last_pool_signature();
        signature.extend(&report.signature);
        Ok((report.l_all, signature))
    };

    // Analytic gradients at the nominal point.
    let (analytic, nominal_tie) = {
        let mut m = Embedder::from_parts(model.config().clone(), model.params.clone())?;
        let outputs = m.forward(batch, Mode::Train)?;
        let report = dgtl_total(&outputs, &batch.identities, &batch.modalities, classes, loss_cfg)?;
        let grads = m.backward(&report.grads)?;
        (grads, report.tie)
    };

    let mut r = rng::seeded(rng::derive_seed(seed, 0x6772_6164));
    let analytic_layers = analytic.flat_layers();
    let mut max_rel_error = 0.0f64;
    let mut worst_coordinate = String::from("none");
    let mut checked = 0usize;
    let mut excluded = Vec::new();
    let mut per_layer = Vec::new();

    for (li, (name, values)) in model.params.flat_layers().iter().enumerate() {
        let picks: Vec<usize> = if values.len() <= params_per_layer {
            (0..values.len()).collect()
        } else {
            rng::sample_without_replacement(&mut r, values.len(), params_per_layer)
        };
        let mut layer_max = 0.0f64;
        let mut layer_checked = 0usize;
        for &pi in &picks {
            let coordinate = format!("{name}[{pi}]");
            let mut plus = model.params.clone();
            plus.flat_layers_mut()[li].1[pi] += GRAD_CHECK_STEP;
            let (loss_plus, sig_plus) = eval(&plus)?;
            let mut minus = model.params.clone();
            minus.flat_layers_mut()[li].1[pi] -= GRAD_CHECK_STEP;
            let (loss_minus, sig_minus) = eval(&minus)?;
            if sig_plus != sig_minus {
                excluded.push(coordinate);
                continue;
            }
            let numeric = (loss_plus - loss_minus) / (2.0 * GRAD_CHECK_STEP);
            let ana = analytic_layers[li].1[pi];
            let rel = relative_error(ana, numeric);
            if rel > layer_max {
                layer_max = rel;
            }
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_coordinate = coordinate.clone();
            }
            checked += 1;
            layer_checked += 1;
        }
        per_layer.push(LayerCheck {
            layer: name.clone(),
            checked: layer_checked,
            max_rel_error: layer_max,
        });
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst_coordinate,
        checked,
        excluded,
        nominal_tie,
        per_layer,
        threshold: GRAD_CHECK_THRESHOLD,
        pass: max_rel_error <= GRAD_CHECK_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::Fusion;
    use crate::pooling::PoolingMethod;

    fn small_config(checkpoint_path: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            sampler: SamplerConfig { p: 2, k: 2, seed: 3 },
            embedder: EmbedderConfig {
                input_shape: (3, 3, 2),
                spec_layers: vec![4],
                shared_layers: vec![4],
                feature_dim: 4,
                num_identities: 4,
                fusion: Fusion::Sum,
                pool_fine: PoolingMethod::Avg,
                pool_coarse: PoolingMethod::Avg,
                bn_epsilon: 1e-5,
                seed: 9,
            },
            loss: LossConfig::default(),
            log_every: 1,
            checkpoint_path,
        }
    }

    fn small_dataset(seed: u64) -> Dataset {
        crate::synth::generate(&SyntheticSpec {
            num_identities: 4,
            samples_per_identity_per_modality: 4,
            input_shape: (3, 3, 2),
            identity_scale: 1.0,
            modality_offset_scale: 1.5,
            noise_scale: 0.2,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn momentum_rule_on_a_one_parameter_probe() {
        let (lr, momentum, wd) = (0.1, 0.9, 0.01);
        let mut theta = 1.0f64;
        let mut v = 0.0f64;
        let grads = [0.5f64, -0.2, 0.1];

        let mut expect_theta = 1.0f64;
        let mut expect_v = 0.0f64;
        for g in grads {
            momentum_sgd_step(&mut theta, &mut v, g, lr, momentum, wd);
            expect_v = momentum * expect_v + g + wd * expect_theta;
            expect_theta -= lr * expect_v;
            assert_eq!(theta, expect_theta);
            assert_eq!(v, expect_v);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_trainable_parameters_untouched() {
        let dataset = small_dataset(1);
        let mut cfg = small_config(None);
        cfg.learning_rate = 0.0;
        cfg.epochs = 1;
        let initial = crate::embedder::init(&cfg.embedder).unwrap();
        let (model, _) = train(&dataset, &dataset.index(), &cfg).unwrap();
        for ((name, a), (_, b)) in initial.flat_layers().iter().zip(model.params.flat_layers()) {
            assert_eq!(*a, b, "{name} changed under lr = 0");
        }
    }

    #[test]
    fn identical_configs_reproduce_identical_histories() {
        let dataset = small_dataset(2);
        let cfg = small_config(None);
        let (_, h1) = train(&dataset, &dataset.index(), &cfg).unwrap();
        let (_, h2) = train(&dataset, &dataset.index(), &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.records.len(), 2 * 2); // epochs * ceil(4 identities / P=2)
    }

    #[test]
    fn history_covers_every_epoch_and_batch() {
        let dataset = small_dataset(3);
        let mut cfg = small_config(None);
        cfg.epochs = 3;
        let (_, history) = train(&dataset, &dataset.index(), &cfg).unwrap();
        assert_eq!(history.records.len(), 6);
        for (i, record) in history.records.iter().enumerate() {
            assert_eq!(record.epoch, i / 2);
            assert_eq!(record.batch, i % 2);
            assert!(record.l_all.is_finite());
            assert!(
                (record.l_all
                    - (record.l_f_tri + record.l_c_tri + record.l_id_fine + record.l_id_coarse))
                    .abs()
                    < 1e-15
            );
        }
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let dataset = small_dataset(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.json");

        // Uninterrupted: 4 epochs.
        let mut full_cfg = small_config(None);
        full_cfg.epochs = 4;
        let (full_model, full_history) = train(&dataset, &dataset.index(), &full_cfg).unwrap();

        // First leg: 1 epoch, checkpointed.
        let mut first_cfg = small_config(Some(path.clone()));
        first_cfg.epochs = 1;
        train(&dataset, &dataset.index(), &first_cfg).unwrap();

        // Second leg resumes to epoch 4 (6 further steps).
        let checkpoint = Checkpoint::load(&path).unwrap();
        let mut resume_cfg = small_config(None);
        resume_cfg.epochs = 4;
        let (resumed_model, resumed_history) =
            train_resume(&dataset, &dataset.index(), &resume_cfg, checkpoint).unwrap();

        assert_eq!(resumed_history.records.len(), 6);
        assert_eq!(&full_history.records[2..], &resumed_history.records[..]);
        assert_eq!(full_model.params, resumed_model.params);
    }

    #[test]
    fn exploding_run_aborts_with_step_index() {
        let dataset = small_dataset(5);
        let mut cfg = small_config(None);
        cfg.learning_rate = 1e14;
        cfg.epochs = 50;
        let err = train(&dataset, &dataset.index(), &cfg).unwrap_err();
        match err {
            Error::Numerical(msg) => assert!(msg.contains("step "), "{msg}"),
            other => panic!("expected numerical error, got {other}"),
        }
    }

    #[test]
    fn grad_check_passes_on_a_small_random_config() {
        let cfg = small_config(None);
        let report = grad_check(&cfg, 20, 11).unwrap();
        assert!(
            report.pass,
            "max {} at {} (excluded {:?})",
            report.max_rel_error, report.worst_coordinate, report.excluded
        );
        assert!(report.checked >= 20);
    }

    #[test]
    fn grad_check_rejects_large_configs() {
        let mut cfg = small_config(None);
        cfg.sampler.p = 8;
        cfg.sampler.k = 4;
        cfg.embedder.num_identities = 8;
        assert!(matches!(grad_check(&cfg, 5, 1), Err(Error::Config(_))));
    }

    use crate::data::Modality;
    use crate::embedder::Mode;
    use ndarray::Array3;

    /// Two identities, K = 1, both modality rows of an identity fed the same
    /// input, thermal stream parameters copied from the visible stream. Every
    /// identity's rows then coincide exactly in feature space.
    fn coincident_rows_setup(
        num_identities: usize,
        separation: f64,
    ) -> (Embedder, MiniBatch, Vec<usize>) {
        let mut cfg = small_config(None);
        cfg.embedder.num_identities = num_identities;
        let mut model = Embedder::new(cfg.embedder.clone()).unwrap();
        model.params.thermal_stream = model.params.visible_stream.clone();

        let mut inputs = Vec::new();
        let mut identities = Vec::new();
        let mut modalities = Vec::new();
        let mut sample_ids = Vec::new();
        for identity in 0..num_identities as u32 {
            let base = Array3::from_shape_fn((3, 3, 2), |(h, w, c)| {
                separation * identity as f64 + 0.1 * (h + 2 * w + c) as f64
            });
            for m in Modality::BOTH {
                inputs.push(base.clone());
                identities.push(identity);
                modalities.push(m);
                sample_ids.push(inputs.len() as u64);
            }
        }
        let classes: Vec<usize> = identities.iter().map(|&i| i as usize).collect();
        let batch = MiniBatch {
            sample_ids,
            identities,
            modalities,
            inputs,
        };
        (model, batch, classes)
    }

    /// Flat minimum: coincident same-identity rows satisfy both triplet
    /// margins with lots of room, and classifiers scaled from the observed
    /// features saturate the identification losses to exactly zero.
    #[test]
    fn grad_check_reports_all_zero_at_a_zero_loss_configuration() {
        let (mut model, batch, classes) = coincident_rows_setup(2, 5.0);

        // saturate the classifiers from the features the model produces
        let outputs = model.forward(&batch, Mode::Train).unwrap();
        let scale = 1e8;
        for (features, classifier) in [
            (&outputs.f_bn, &mut model.params.classifier_fine),
            (&outputs.f_bnf, &mut model.params.classifier_coarse),
        ] {
            for class in 0..2usize {
                let row = classes.iter().position(|&c| c == class).unwrap();
                for d in 0..features.ncols() {
                    classifier[(d, class)] = scale * features[(row, d)];
                }
            }
        }

        let outputs = model.forward(&batch, Mode::Train).unwrap();
        let report_losses = dgtl_total(
            &outputs,
            &batch.identities,
            &batch.modalities,
            &classes,
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(report_losses.l_all, 0.0, "engineered loss must be exactly zero");
        let grads = model.backward(&report_losses.grads).unwrap();
        for (name, slice) in grads.flat_layers() {
            assert!(slice.iter().all(|g| *g == 0.0), "{name} has nonzero gradient");
        }

        let report =
            grad_check_model(&model, &batch, &classes, &LossConfig::default(), 10, 3).unwrap();
        assert_eq!(report.max_rel_error, 0.0, "worst {}", report.worst_coordinate);
        assert!(report.checked > 0);
        assert!(report.excluded.is_empty());
    }

    /// With both rows of the negative identity coincident, two negative
    /// candidates tie exactly; probing a visible-stream parameter breaks the
    /// tie differently at +h and -h, so those coordinates are excluded.
    #[test]
    fn grad_check_detects_and_excludes_engineered_mining_ties() {
        let (model, batch, classes) = coincident_rows_setup(2, 0.3);
        let report =
            grad_check_model(&model, &batch, &classes, &LossConfig::default(), 12, 4).unwrap();
        assert!(report.nominal_tie, "coincident rows must register as a tie");
        assert!(
            !report.excluded.is_empty(),
            "tie-crossing coordinates should be excluded"
        );
        assert!(
            report.excluded.iter().any(|c| c.starts_with("visible.")
                || c.starts_with("thermal.")
                || c.starts_with("shared.")),
            "{:?}",
            report.excluded
        );
        // coordinates that survive the exclusion still check out
        assert!(report.pass, "max rel {}", report.max_rel_error);
    }
}
