//! Small two-stream embedding network.
//!
//! Images from the two modalities pass through modality-specific per-pixel
//! affine layers (separate parameters per modality), then shared layers, all
//! followed by softplus so the pre-pooling map stays strictly positive. The
//! resulting `H x W x C` map is pooled twice (fine and coarse branch), the
//! fine branch goes through a batch-norm neck to `f_bn`, the coarse pooled
//! feature is fused with `f_bn` and normalized again to `f_bnf`, and each
//! branch feeds its own bias-free linear classifier.
//!
//! Training-mode forward caches every intermediate; `backward` then produces
//! exact analytic gradients for all parameters, including the terms through
//! the batch statistics.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::batchnorm::{BatchNorm, BatchNormCache};
use crate::data::{LabeledSample, MiniBatch, Modality};
use crate::error::{Error, Result};
use crate::pooling::{self, PoolingMethod};
use crate::rng;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid; the softplus derivative.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How the coarse pooled feature is combined with `f_bn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Sum,
    #[serde(rename = "cat")]
    Concat,
}

impl Fusion {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" => Ok(Fusion::Sum),
            "cat" | "concat" => Ok(Fusion::Concat),
            other => Err(Error::config(format!("unknown fusion {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Fusion::Sum => "sum",
            Fusion::Concat => "cat",
        }
    }
}

/// Network architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    /// Input tensor shape `(H, W, C0)`.
    pub input_shape: (usize, usize, usize),
    /// Widths of the modality-specific per-pixel affine layers.
    pub spec_layers: Vec<usize>,
    /// Widths of the shared per-pixel affine layers; the final width is the
    /// feature dimension.
    pub shared_layers: Vec<usize>,
    /// Channels of the pre-pooling map, `C`.
    pub feature_dim: usize,
    /// Number of identity classes for the classifiers.
    pub num_identities: usize,
    pub fusion: Fusion,
    pub pool_fine: PoolingMethod,
    pub pool_coarse: PoolingMethod,
    pub bn_epsilon: f64,
    pub seed: u64,
}

impl EmbedderConfig {
    /// Channel widths along the full layer chain, input first.
    pub fn chain_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.input_shape.2];
        widths.extend_from_slice(&self.spec_layers);
        widths.extend_from_slice(&self.shared_layers);
        widths
    }

    /// Dimension of the fused feature `C'`.
    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            Fusion::Sum => self.feature_dim,
            Fusion::Concat => 2 * self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c0) = self.input_shape;
        if h == 0 || w == 0 || c0 == 0 {
            return Err(Error::config(format!(
                "input_shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("feature_dim must be at least 2"));
        }
        if self.num_identities < 2 {
            return Err(Error::config("num_identities must be at least 2"));
        }
        if self.spec_layers.iter().chain(&self.shared_layers).any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        let widths = self.chain_widths();
        let last = *widths.last().unwrap();
        if last != self.feature_dim {
            return Err(Error::config(format!(
                "final layer width {last} must equal feature_dim {}",
                self.feature_dim
            )));
        }
        if !(self.bn_epsilon.is_finite() && self.bn_epsilon > 0.0) {
            return Err(Error::config(format!(
                "bn_epsilon must be positive, got {}",
                self.bn_epsilon
            )));
        }
        for pool in [&self.pool_fine, &self.pool_coarse] {
            if let PoolingMethod::Gem { p } = pool {
                if !(p.is_finite() && *p > 0.0) {
                    return Err(Error::config(format!("gem exponent must be positive, got {p}")));
                }
            }
        }
        // Sum fusion requires equal branch dimensions; both branches pool
        // the same C-channel map here, so the requirement holds by
        // construction and there is nothing to check.
        Ok(())
    }
}

/// Per-pixel affine layer: `out[h, w, :] = W in[h, w, :] + b`.
///
/// Also used as the value container for gradients and optimizer velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    /// `(c_out, c_in)`.
    pub weight: Array2<f64>,
    /// `(c_out,)`.
    pub bias: Array1<f64>,
}

impl AffineLayer {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        AffineLayer {
            weight: Array2::zeros((c_out, c_in)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        AffineLayer {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// All trainable and stateful arrays of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub visible_stream: Vec<AffineLayer>,
    pub thermal_stream: Vec<AffineLayer>,
    pub shared: Vec<AffineLayer>,
    pub bn_fine: BatchNorm,
    pub bn_fused: BatchNorm,
    /// `(C, num_identities)`, no bias.
    pub classifier_fine: Array2<f64>,
    /// `(C', num_identities)`, no bias.
    pub classifier_coarse: Array2<f64>,
}

impl Parameters {
    fn stream(&self, modality: Modality) -> &[AffineLayer] {
        match modality {
            Modality::Visible => &self.visible_stream,
            Modality::Thermal => &self.thermal_stream,
        }
    }

    /// Trainable arrays as named flat slices, in a fixed order.
    ///
    /// Batch-norm betas and running statistics are not trainable and are not
    /// listed.
    pub fn flat_layers(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (prefix, layers) in [
            ("visible", &self.visible_stream),
            ("thermal", &self.thermal_stream),
            ("shared", &self.shared),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), as_slice(&layer.weight)));
                out.push((format!("{prefix}.{i}.bias"), layer.bias.as_slice().unwrap()));
            }
        }
        out.push(("bn_fine.gamma".into(), self.bn_fine.gamma.as_slice().unwrap()));
        out.push(("bn_fused.gamma".into(), self.bn_fused.gamma.as_slice().unwrap()));
        out.push(("classifier_fine".into(), as_slice(&self.classifier_fine)));
        out.push(("classifier_coarse".into(), as_slice(&self.classifier_coarse)));
        out
    }

    /// Mutable variant of [`Parameters::flat_layers`], same order.
    pub fn flat_layers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (prefix, layers) in [
            ("visible", &mut self.visible_stream),
            ("thermal", &mut self.thermal_stream),
            ("shared", &mut self.shared),
        ] {
            for (i, layer) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), as_slice_mut(&mut layer.weight)));
                out.push((format!("{prefix}.{i}.bias"), layer.bias.as_slice_mut().unwrap()));
            }
        }
        out.push(("bn_fine.gamma".into(), self.bn_fine.gamma.as_slice_mut().unwrap()));
        out.push(("bn_fused.gamma".into(), self.bn_fused.gamma.as_slice_mut().unwrap()));
        out.push(("classifier_fine".into(), as_slice_mut(&mut self.classifier_fine)));
        out.push(("classifier_coarse".into(), as_slice_mut(&mut self.classifier_coarse)));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flat_layers().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    /// Check that the array shapes match `config`.
    pub fn validate_against(&self, config: &EmbedderConfig) -> Result<()> {
        let widths = config.chain_widths();
        let n_spec = config.spec_layers.len();
        for (name, stream) in [
            ("visible", &self.visible_stream),
            ("thermal", &self.thermal_stream),
        ] {
            if stream.len() != n_spec {
                return Err(Error::shape(format!(
                    "{name} stream has {} layers, config wants {n_spec}",
                    stream.len()
                )));
            }
        }
        if self.shared.len() != config.shared_layers.len() {
            return Err(Error::shape(format!(
                "shared stage has {} layers, config wants {}",
                self.shared.len(),
                config.shared_layers.len()
            )));
        }
        let check_chain = |layers: &[AffineLayer], offset: usize| -> Result<()> {
            for (i, layer) in layers.iter().enumerate() {
                let c_in = widths[offset + i];
                let c_out = widths[offset + i + 1];
                if layer.weight.dim() != (c_out, c_in) || layer.bias.len() != c_out {
                    return Err(Error::shape(format!(
                        "layer {} expected ({c_out}, {c_in}), got {:?}",
                        offset + i,
                        layer.weight.dim()
                    )));
                }
            }
            Ok(())
        };
        check_chain(&self.visible_stream, 0)?;
        check_chain(&self.thermal_stream, 0)?;
        check_chain(&self.shared, n_spec)?;
        let c = config.feature_dim;
        let cf = config.fused_dim();
        if self.bn_fine.dim() != c || self.bn_fused.dim() != cf {
            return Err(Error::shape("batch norm dimensions do not match config"));
        }
        if self.classifier_fine.dim() != (c, config.num_identities)
            || self.classifier_coarse.dim() != (cf, config.num_identities)
        {
            return Err(Error::shape("classifier dimensions do not match config"));
        }
        if self.bn_fine.running_var.iter().chain(self.bn_fused.running_var.iter()).any(|v| *v < 0.0)
        {
            return Err(Error::numerical("negative running variance"));
        }
        Ok(())
    }
}

fn as_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("arrays are standard layout")
}

fn as_slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("arrays are standard layout")
}

/// Gradients for every trainable array in [`Parameters`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterGradients {
    pub visible_stream: Vec<AffineLayer>,
    pub thermal_stream: Vec<AffineLayer>,
    pub shared: Vec<AffineLayer>,
    pub bn_fine_gamma: Array1<f64>,
    pub bn_fused_gamma: Array1<f64>,
    pub classifier_fine: Array2<f64>,
    pub classifier_coarse: Array2<f64>,
}

impl ParameterGradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        ParameterGradients {
            visible_stream: params.visible_stream.iter().map(|l| l.zeros_like()).collect(),
            thermal_stream: params.thermal_stream.iter().map(|l| l.zeros_like()).collect(),
            shared: params.shared.iter().map(|l| l.zeros_like()).collect(),
            bn_fine_gamma: Array1::zeros(params.bn_fine.dim()),
            bn_fused_gamma: Array1::zeros(params.bn_fused.dim()),
            classifier_fine: Array2::zeros(params.classifier_fine.raw_dim()),
            classifier_coarse: Array2::zeros(params.classifier_coarse.raw_dim()),
        }
    }

    /// Same naming and order as [`Parameters::flat_layers`].
    pub fn flat_layers(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (prefix, layers) in [
            ("visible", &self.visible_stream),
            ("thermal", &self.thermal_stream),
            ("shared", &self.shared),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), as_slice(&layer.weight)));
                out.push((format!("{prefix}.{i}.bias"), layer.bias.as_slice().unwrap()));
            }
        }
        out.push(("bn_fine.gamma".into(), self.bn_fine_gamma.as_slice().unwrap()));
        out.push(("bn_fused.gamma".into(), self.bn_fused_gamma.as_slice().unwrap()));
        out.push(("classifier_fine".into(), as_slice(&self.classifier_fine)));
        out.push(("classifier_coarse".into(), as_slice(&self.classifier_coarse)));
        out
    }

    pub fn flat_layers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (prefix, layers) in [
            ("visible", &mut self.visible_stream),
            ("thermal", &mut self.thermal_stream),
            ("shared", &mut self.shared),
        ] {
            for (i, layer) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), as_slice_mut(&mut layer.weight)));
                out.push((format!("{prefix}.{i}.bias"), layer.bias.as_slice_mut().unwrap()));
            }
        }
        out.push(("bn_fine.gamma".into(), self.bn_fine_gamma.as_slice_mut().unwrap()));
        out.push(("bn_fused.gamma".into(), self.bn_fused_gamma.as_slice_mut().unwrap()));
        out.push(("classifier_fine".into(), as_slice_mut(&mut self.classifier_fine)));
        out.push(("classifier_coarse".into(), as_slice_mut(&mut self.classifier_coarse)));
        out
    }
}

/// Every named feature stage of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Fine-branch pooled features, batch x C.
    pub f_p_fine: Array2<f64>,
    /// Coarse-branch pooled features, batch x C.
    pub f_p_coarse: Array2<f64>,
    /// Batch-normalized fine features, batch x C.
    pub f_bn: Array2<f64>,
    /// Fused features (coarse pooled with `f_bn`), batch x C'.
    pub f_fused: Array2<f64>,
    /// Batch-normalized fused features, batch x C'.
    pub f_bnf: Array2<f64>,
    pub logits_fine: Array2<f64>,
    pub logits_coarse: Array2<f64>,
}

/// Gradients flowing into the forward outputs; zero where a loss does not
/// touch a stage.
#[derive(Debug, Clone)]
pub struct OutputGradients {
    pub f_p_fine: Array2<f64>,
    pub f_p_coarse: Array2<f64>,
    pub f_bn: Array2<f64>,
    pub f_fused: Array2<f64>,
    pub f_bnf: Array2<f64>,
    pub logits_fine: Array2<f64>,
    pub logits_coarse: Array2<f64>,
}

impl OutputGradients {
    pub fn zeros_like(outputs: &ForwardOutputs) -> Self {
        OutputGradients {
            f_p_fine: Array2::zeros(outputs.f_p_fine.raw_dim()),
            f_p_coarse: Array2::zeros(outputs.f_p_coarse.raw_dim()),
            f_bn: Array2::zeros(outputs.f_bn.raw_dim()),
            f_fused: Array2::zeros(outputs.f_fused.raw_dim()),
            f_bnf: Array2::zeros(outputs.f_bnf.raw_dim()),
            logits_fine: Array2::zeros(outputs.logits_fine.raw_dim()),
            logits_coarse: Array2::zeros(outputs.logits_coarse.raw_dim()),
        }
    }
}

/// Forward / eval mode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which normalized feature to extract for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureChoice {
    #[serde(rename = "f_bn")]
    FBn,
    #[serde(rename = "f_bnf")]
    FBnf,
}

impl FeatureChoice {
    pub const BOTH: [FeatureChoice; 2] = [FeatureChoice::FBn, FeatureChoice::FBnf];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f_bn" => Ok(FeatureChoice::FBn),
            "f_bnf" => Ok(FeatureChoice::FBnf),
            other => Err(Error::config(format!("unknown feature choice {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureChoice::FBn => "f_bn",
            FeatureChoice::FBnf => "f_bnf",
        }
    }
}

/// L2-normalized feature rows plus the indices of rows that were zero (left
/// as zero rather than divided).
#[derive(Debug, Clone)]
pub struct ExtractedFeatures {
    pub features: Array2<f64>,
    pub zero_rows: Vec<usize>,
}

#[derive(Debug)]
struct SampleTrace {
    /// Input to each affine layer, chain order.
    inputs: Vec<Array3<f64>>,
    /// Pre-activation of each affine layer.
    preacts: Vec<Array3<f64>>,
}

#[derive(Debug)]
struct ForwardCache {
    modalities: Vec<Modality>,
    traces: Vec<SampleTrace>,
    maps: Vec<Array3<f64>>,
    bn_fine_cache: BatchNormCache,
    bn_fused_cache: BatchNormCache,
    f_bn: Array2<f64>,
    f_bnf: Array2<f64>,
    /// Row-major argmax picks of any max pools, for non-smoothness detection.
    pool_picks: Vec<u64>,
}

/// The embedding network: configuration, parameters, and the cache linking a
/// training forward to its backward.
#[derive(Debug)]
pub struct Embedder {
    config: EmbedderConfig,
    pub params: Parameters,
    cache: Option<ForwardCache>,
}

/// Draw the initial parameters for a configuration.
///
/// Weights and biases are uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in))`,
/// drawn from a ChaCha8 stream seeded by `config.seed` in a fixed order:
/// visible stream, thermal stream, shared stage (per layer: weight row-major,
/// then bias), then the fine and coarse classifiers. Batch-norm layers start
/// at gamma 1, beta 0, running statistics (0, 1).
pub fn init(config: &EmbedderConfig) -> Result<Parameters> {
    config.validate()?;
    let mut r = rng::seeded(config.seed);
    let widths = config.chain_widths();
    let n_spec = config.spec_layers.len();

    let draw_chain = |r: &mut rng::ChaCha8Rng, from: usize, to: usize| -> Vec<AffineLayer> {
        (from..to)
            .map(|i| {
                let (c_in, c_out) = (widths[i], widths[i + 1]);
                let half = (1.0 / c_in as f64).sqrt();
                let mut layer = AffineLayer::zeros(c_out, c_in);
                for o in 0..c_out {
                    for k in 0..c_in {
                        layer.weight[(o, k)] = rng::uniform_symmetric(r, half);
                    }
                }
                for o in 0..c_out {
                    layer.bias[o] = rng::uniform_symmetric(r, half);
                }
                layer
            })
            .collect()
    };

    let visible_stream = draw_chain(&mut r, 0, n_spec);
    let thermal_stream = draw_chain(&mut r, 0, n_spec);
    let shared = draw_chain(&mut r, n_spec, widths.len() - 1);

    let c = config.feature_dim;
    let cf = config.fused_dim();
    let n_id = config.num_identities;
    let draw_classifier = |r: &mut rng::ChaCha8Rng, rows: usize| -> Array2<f64> {
        let half = (1.0 / rows as f64).sqrt();
        let mut w = Array2::zeros((rows, n_id));
        for i in 0..rows {
            for j in 0..n_id {
                w[(i, j)] = rng::uniform_symmetric(r, half);
            }
        }
        w
    };
    let classifier_fine = draw_classifier(&mut r, c);
    let classifier_coarse = draw_classifier(&mut r, cf);

    Ok(Parameters {
        visible_stream,
        thermal_stream,
        shared,
        bn_fine: BatchNorm::new(c, config.bn_epsilon),
        bn_fused: BatchNorm::new(cf, config.bn_epsilon),
        classifier_fine,
        classifier_coarse,
    })
}

fn affine_forward(layer: &AffineLayer, input: &Array3<f64>) -> Array3<f64> {
    let (h, w, c_in) = input.dim();
    let c_out = layer.bias.len();
    let mut z = Array3::zeros((h, w, c_out));
    for i in 0..h {
        for j in 0..w {
            for o in 0..c_out {
                let mut acc = layer.bias[o];
                for k in 0..c_in {
                    acc += layer.weight[(o, k)] * input[(i, j, k)];
                }
                z[(i, j, o)] = acc;
            }
        }
    }
    z
}

/// Backward through one `softplus(affine(.))` layer; accumulates parameter
/// gradients and returns the gradient on the layer input.
fn affine_softplus_backward(
    layer: &AffineLayer,
    input: &Array3<f64>,
    preact: &Array3<f64>,
    d_out: &Array3<f64>,
    grad: &mut AffineLayer,
) -> Array3<f64> {
    let (h, w, c_in) = input.dim();
    let c_out = layer.bias.len();
    let mut d_in = Array3::zeros((h, w, c_in));
    for i in 0..h {
        for j in 0..w {
            for o in 0..c_out {
                let dz = d_out[(i, j, o)] * sigmoid(preact[(i, j, o)]);
                grad.bias[o] += dz;
                for k in 0..c_in {
                    grad.weight[(o, k)] += dz * input[(i, j, k)];
                    d_in[(i, j, k)] += dz * layer.weight[(o, k)];
                }
            }
        }
    }
    d_in
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        let params = init(&config)?;
        Ok(Embedder {
            config,
            params,
            cache: None,
        })
    }

    /// Rebuild an embedder from checkpointed parts.
    pub fn from_parts(config: EmbedderConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.validate_against(&config)?;
        Ok(Embedder {
            config,
            params,
            cache: None,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn check_batch(&self, batch: &MiniBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::data("forward on an empty batch"));
        }
        for (i, input) in batch.inputs.iter().enumerate() {
            if input.dim() != self.config.input_shape {
                return Err(Error::shape(format!(
                    "batch slot {i} has shape {:?}, config wants {:?}",
                    input.dim(),
                    self.config.input_shape
                )));
            }
        }
        if batch.modalities.len() != batch.inputs.len() {
            return Err(Error::shape("batch modality list length mismatch"));
        }
        Ok(())
    }

    /// Run one sample through its modality stream and the shared stage,
    /// recording inputs and pre-activations.
    fn trace_sample(&self, input: &Array3<f64>, modality: Modality) -> (SampleTrace, Array3<f64>) {
        let stream = self.params.stream(modality);
        let mut inputs = Vec::new();
        let mut preacts = Vec::new();
        let mut act = input.clone();
        for layer in stream.iter().chain(self.params.shared.iter()) {
            let z = affine_forward(layer, &act);
            inputs.push(act);
            act = z.mapv(softplus);
            preacts.push(z);
        }
        (SampleTrace { inputs, preacts }, act)
    }

    /// Training-mode forward: uses batch statistics, updates running
    /// statistics, and caches intermediates for [`Embedder::backward`].
    /// Eval mode delegates to [`Embedder::forward_eval`] and drops any cache
    /// so a stale backward cannot follow.
    pub fn forward(&mut self, batch: &MiniBatch, mode: Mode) -> Result<ForwardOutputs> {
        if mode == Mode::Eval {
            self.cache = None;
            return self.forward_eval(batch);
        }
        self.check_batch(batch)?;
        let n = batch.len();
        let c = self.config.feature_dim;

        let mut traces = Vec::with_capacity(n);
        let mut maps = Vec::with_capacity(n);
        for (input, &modality) in batch.inputs.iter().zip(&batch.modalities) {
            let (trace, map) = self.trace_sample(input, modality);
            traces.push(trace);
            maps.push(map);
        }

        let mut f_p_fine = Array2::zeros((n, c));
        let mut f_p_coarse = Array2::zeros((n, c));
        let mut pool_picks = Vec::new();
        for (i, map) in maps.iter().enumerate() {
            let fine = pooling::pool_forward(map, &self.config.pool_fine)?;
            let coarse = pooling::pool_forward(map, &self.config.pool_coarse)?;
            f_p_fine.row_mut(i).assign(&fine);
            f_p_coarse.row_mut(i).assign(&coarse);
            let (_, w, _) = map.dim();
            for pool in [&self.config.pool_fine, &self.config.pool_coarse] {
                if matches!(pool, PoolingMethod::Max) {
                    for (h_i, w_i) in pooling::max_argmax(map) {
                        pool_picks.push((h_i * w + w_i) as u64);
                    }
                }
            }
        }

        let (f_bn, bn_fine_cache) = self.params.bn_fine.forward_train(&f_p_fine)?;
        let f_fused = fuse(self.config.fusion, &f_p_coarse, &f_bn);
        let (f_bnf, bn_fused_cache) = self.params.bn_fused.forward_train(&f_fused)?;
        let logits_fine = f_bn.dot(&self.params.classifier_fine);
        let logits_coarse = f_bnf.dot(&self.params.classifier_coarse);

        self.cache = Some(ForwardCache {
            modalities: batch.modalities.clone(),
            traces,
            maps,
            bn_fine_cache,
            bn_fused_cache,
            f_bn: f_bn.clone(),
            f_bnf: f_bnf.clone(),
            pool_picks,
        });

        Ok(ForwardOutputs {
            f_p_fine,
            f_p_coarse,
            f_bn,
            f_fused,
            f_bnf,
            logits_fine,
            logits_coarse,
        })
    }

    /// Read-only forward with running statistics; a pure function of the
    /// parameters and the batch.
    pub fn forward_eval(&self, batch: &MiniBatch) -> Result<ForwardOutputs> {
        self.check_batch(batch)?;
        let n = batch.len();
        let c = self.config.feature_dim;
        let mut f_p_fine = Array2::zeros((n, c));
        let mut f_p_coarse = Array2::zeros((n, c));
        for (i, (input, &modality)) in batch.inputs.iter().zip(&batch.modalities).enumerate() {
            let (_, map) = self.trace_sample(input, modality);
            f_p_fine
                .row_mut(i)
                .assign(&pooling::pool_forward(&map, &self.config.pool_fine)?);
            f_p_coarse
                .row_mut(i)
                .assign(&pooling::pool_forward(&map, &self.config.pool_coarse)?);
        }
        let f_bn = self.params.bn_fine.forward_eval(&f_p_fine)?;
        let f_fused = fuse(self.config.fusion, &f_p_coarse, &f_bn);
        let f_bnf = self.params.bn_fused.forward_eval(&f_fused)?;
        let logits_fine = f_bn.dot(&self.params.classifier_fine);
        let logits_coarse = f_bnf.dot(&self.params.classifier_coarse);
        Ok(ForwardOutputs {
            f_p_fine,
            f_p_coarse,
            f_bn,
            f_fused,
            f_bnf,
            logits_fine,
            logits_coarse,
        })
    }

    /// Argmax picks of any max pooling in the last training forward; part of
    /// the non-smoothness signature used by gradient checking.
    pub fn last_pool_signature(&self) -> Vec<u64> {
        self.cache
            .as_ref()
            .map(|c| c.pool_picks.clone())
            .unwrap_or_default()
    }

    /// Exact analytic parameter gradients for the cached training forward,
    /// given gradients on any subset of the forward outputs.
    pub fn backward(&mut self, upstream: &OutputGradients) -> Result<ParameterGradients> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("backward without a cached training forward"))?;
        let n = cache.modalities.len();
        let c = self.config.feature_dim;
        if upstream.f_bn.nrows() != n {
            return Err(Error::shape(format!(
                "upstream gradients are for batch {}, cache holds {n}",
                upstream.f_bn.nrows()
            )));
        }

        let mut grads = ParameterGradients::zeros_like(&self.params);

        // Coarse classifier and second batch norm.
        grads.classifier_coarse = cache.f_bnf.t().dot(&upstream.logits_coarse);
        let mut d_f_bnf = upstream.f_bnf.clone();
        d_f_bnf += &upstream.logits_coarse.dot(&self.params.classifier_coarse.t());
        let (d_fused_bn, dgamma_fused) = self
            .params
            .bn_fused
            .backward(&cache.bn_fused_cache, &d_f_bnf)?;
        grads.bn_fused_gamma = dgamma_fused;
        let d_f_fused = &upstream.f_fused + &d_fused_bn;

        // Fusion split.
        let (mut d_f_p_coarse, d_f_bn_from_fusion) = match self.config.fusion {
            Fusion::Sum => (d_f_fused.clone(), d_f_fused),
            Fusion::Concat => {
                let coarse = d_f_fused.slice(ndarray::s![.., ..c]).to_owned();
                let bn = d_f_fused.slice(ndarray::s![.., c..]).to_owned();
                (coarse, bn)
            }
        };
        d_f_p_coarse += &upstream.f_p_coarse;

        // Fine classifier and the batch-norm neck.
        grads.classifier_fine = cache.f_bn.t().dot(&upstream.logits_fine);
        let mut d_f_bn = upstream.f_bn.clone();
        d_f_bn += &upstream.logits_fine.dot(&self.params.classifier_fine.t());
        d_f_bn += &d_f_bn_from_fusion;
        let (d_fine_bn, dgamma_fine) = self
            .params
            .bn_fine
            .backward(&cache.bn_fine_cache, &d_f_bn)?;
        grads.bn_fine_gamma = dgamma_fine;
        let d_f_p_fine = &upstream.f_p_fine + &d_fine_bn;

        // Through the pools and the layer chains, per sample.
        let n_spec = self.config.spec_layers.len();
        for i in 0..n {
            let map = &cache.maps[i];
            let fine_up = d_f_p_fine.row(i);
            let coarse_up = d_f_p_coarse.row(i);
            let mut d_act = pooling::pool_backward(map, &self.config.pool_fine, &fine_up)?;
            d_act = d_act + pooling::pool_backward(map, &self.config.pool_coarse, &coarse_up)?;

            let modality = cache.modalities[i];
            let trace = &cache.traces[i];
            let total_layers = trace.inputs.len();
            for l in (0..total_layers).rev() {
                let (layer, grad_slot) = if l >= n_spec {
                    (
                        &self.params.shared[l - n_spec],
                        &mut grads.shared[l - n_spec],
                    )
                } else {
                    match modality {
                        Modality::Visible => (
                            &self.params.visible_stream[l],
                            &mut grads.visible_stream[l],
                        ),
                        Modality::Thermal => (
                            &self.params.thermal_stream[l],
                            &mut grads.thermal_stream[l],
                        ),
                    }
                };
                d_act = affine_softplus_backward(
                    layer,
                    &trace.inputs[l],
                    &trace.preacts[l],
                    &d_act,
                    grad_slot,
                );
            }
        }
        Ok(grads)
    }

    /// L2-normalized retrieval features from an eval-mode forward.
    ///
    /// Zero rows are left at zero and reported in `zero_rows`.
    pub fn extract_features(
        &self,
        samples: &[&LabeledSample],
        which: FeatureChoice,
    ) -> Result<ExtractedFeatures> {
        if samples.is_empty() {
            return Err(Error::data("extract_features on an empty sample list"));
        }
        let batch = MiniBatch::from_samples(samples);
        let outputs = self.forward_eval(&batch)?;
        let raw = match which {
            FeatureChoice::FBn => outputs.f_bn,
            FeatureChoice::FBnf => outputs.f_bnf,
        };
        let mut features = raw;
        let mut zero_rows = Vec::new();
        for (i, mut row) in features.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::numerical(format!("non-finite feature row {i}")));
            }
            if norm == 0.0 {
                zero_rows.push(i);
            } else {
                row.mapv_inplace(|v| v / norm);
            }
        }
        Ok(ExtractedFeatures { features, zero_rows })
    }
}

fn fuse(fusion: Fusion, f_p_coarse: &Array2<f64>, f_bn: &Array2<f64>) -> Array2<f64> {
    match fusion {
        Fusion::Sum => f_p_coarse + f_bn,
        Fusion::Concat => {
            let n = f_p_coarse.nrows();
            let c = f_p_coarse.ncols();
            let mut out = Array2::zeros((n, 2 * c));
            out.slice_mut(ndarray::s![.., ..c]).assign(f_p_coarse);
            out.slice_mut(ndarray::s![.., c..]).assign(f_bn);
            out
        }
    }
}
