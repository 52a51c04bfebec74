//! Training objectives: sample-based hard-mining triplet loss, center-based
//! hetero-center triplet loss, softmax identification loss, and their
//! composition across the two feature branches.
//!
//! Both triplet losses are written as sums over anchors (not means), and every
//! loss returns the exact (sub)gradient with respect to its feature input.
//! Euclidean distances are smoothed as `sqrt(sq + DIST_EPSILON)` so the
//! gradient stays finite at coincident points.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::embedder::{ForwardOutputs, OutputGradients};
use crate::error::{Error, Result};

/// Additive smoothing inside the distance square root.
pub const DIST_EPSILON: f64 = 1e-12;

/// Two mining candidates closer than this are reported as a tie.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// A feature matrix with its per-row labels.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub features: Array2<f64>,
    pub identities: Vec<u32>,
    pub modalities: Vec<Modality>,
}

impl FeatureBatch {
    pub fn new(
        features: Array2<f64>,
        identities: Vec<u32>,
        modalities: Vec<Modality>,
    ) -> Result<Self> {
        let n = features.nrows();
        if identities.len() != n || modalities.len() != n {
            return Err(Error::shape(format!(
                "batch has {n} feature rows but {} identities / {} modalities",
                identities.len(),
                modalities.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("feature batch contains non-finite values"));
        }
        Ok(FeatureBatch {
            features,
            identities,
            modalities,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Smoothed Euclidean distance matrix: `d_ij = sqrt(||x_i - x_j||^2 + eps)`.
///
/// Symmetric; the diagonal equals `sqrt(DIST_EPSILON)` rather than exactly
/// zero, which keeps the derivative finite at coincident rows.
pub fn pairwise_euclidean(features: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("non-finite feature values"));
    }
    let n = features.nrows();
    let mut dist = Array2::zeros((n, n));
    for i in 0..n {
        dist[(i, i)] = DIST_EPSILON.sqrt();
        for j in (i + 1)..n {
            let mut sq = 0.0;
            for d in 0..features.ncols() {
                let diff = features[(i, d)] - features[(j, d)];
                sq += diff * diff;
            }
            let v = (sq + DIST_EPSILON).sqrt();
            dist[(i, j)] = v;
            dist[(j, i)] = v;
        }
    }
    Ok(dist)
}

/// One mined triplet: the chosen positive/negative (row index into whatever
/// the anchor set is) and whether the hinge was active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningPick {
    pub positive: usize,
    pub negative: usize,
    pub active: bool,
}

/// Loss value, feature gradient, mining picks, and a tie flag.
///
/// `tie` is set when some non-selected mining candidate (or the hinge
/// boundary itself) lies within [`TIE_TOLERANCE`]; at such points the loss is
/// not differentiable and finite-difference checks are expected to disagree.
#[derive(Debug, Clone)]
pub struct TripletResult {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub picks: Vec<MiningPick>,
    pub tie: bool,
}

impl TripletResult {
    /// Compact encoding of the mining decisions, used to detect when a
    /// finite-difference probe crosses a non-smooth boundary.
    pub fn signature(&self) -> Vec<u64> {
        self.picks
            .iter()
            .flat_map(|p| [p.positive as u64, p.negative as u64, p.active as u64])
            .collect()
    }
}

/// Add the gradient of `d(i, j)` (smoothed distance) scaled by `weight` to
/// rows `i` and `j` of `grad`.
fn add_distance_grad(
    grad: &mut Array2<f64>,
    features: &ArrayView2<f64>,
    dist: &Array2<f64>,
    i: usize,
    j: usize,
    weight: f64,
) {
    let d = dist[(i, j)];
    for k in 0..features.ncols() {
        let g = weight * (features[(i, k)] - features[(j, k)]) / d;
        grad[(i, k)] += g;
        grad[(j, k)] -= g;
    }
}

/// Sample-based hard-mining triplet loss, summed over all anchors.
///
/// For every anchor the hardest positive is the farthest row of the same
/// identity (the anchor itself included; its zero self-distance never wins
/// unless all positives coincide) and the hardest negative is the nearest row
/// of any other identity. Mining is modality-agnostic. Ties break toward the
/// lowest row index.
pub fn fine_triplet(batch: &FeatureBatch, margin: f64) -> Result<TripletResult> {
    check_margin(margin)?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::data("empty feature batch"));
    }
    let ids = &batch.identities;
    {
        let mut counts = std::collections::HashMap::new();
        for &id in ids {
            *counts.entry(id).or_insert(0usize) += 1;
        }
        if counts.len() < 2 {
            return Err(Error::data("fine triplet needs at least 2 identities"));
        }
        if let Some((&id, _)) = counts.iter().find(|(_, &c)| c < 2) {
            return Err(Error::data(format!(
                "identity {id} has a single row; hard positive mining needs at least 2"
            )));
        }
    }

    let features = batch.features.view();
    let dist = pairwise_euclidean(&features)?;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(features.raw_dim());
    let mut picks = Vec::with_capacity(n);
    let mut tie = false;

    for a in 0..n {
        let mut hardest_pos = usize::MAX;
        let mut dp = f64::NEG_INFINITY;
        let mut hardest_neg = usize::MAX;
        let mut dn = f64::INFINITY;
        for r in 0..n {
            let d = dist[(a, r)];
            if ids[r] == ids[a] {
                if d > dp {
                    dp = d;
                    hardest_pos = r;
                } else if hardest_pos != r && (d - dp).abs() < TIE_TOLERANCE {
                    tie = true;
                }
            } else if d < dn {
                dn = d;
                hardest_neg = r;
            } else if hardest_neg != r && (d - dn).abs() < TIE_TOLERANCE {
                tie = true;
            }
        }
        let hinge = margin + dp - dn;
        if hinge.abs() < TIE_TOLERANCE && hinge != 0.0 {
            tie = true;
        }
        let active = hinge > 0.0;
        if active {
            loss += hinge;
            add_distance_grad(&mut grad, &features, &dist, a, hardest_pos, 1.0);
            add_distance_grad(&mut grad, &features, &dist, a, hardest_neg, -1.0);
        }
        picks.push(MiningPick {
            positive: hardest_pos,
            negative: hardest_neg,
            active,
        });
    }
    Ok(TripletResult {
        loss,
        grad,
        picks,
        tie,
    })
}

/// Per-identity per-modality feature centroids.
///
/// Row layout: identity `i` (in first-appearance order) occupies rows `2i`
/// (visible) and `2i + 1` (thermal). `members[r]` lists the batch rows
/// averaged into center row `r`.
#[derive(Debug, Clone)]
pub struct CenterSet {
    pub identities: Vec<u32>,
    pub centers: Array2<f64>,
    pub members: Vec<Vec<usize>>,
}

impl CenterSet {
    pub fn row(&self, identity_pos: usize, modality: Modality) -> usize {
        identity_pos * 2 + modality as usize
    }
}

/// Arithmetic mean of each `(identity, modality)` group.
pub fn compute_centers(batch: &FeatureBatch) -> Result<CenterSet> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::data("empty feature batch"));
    }
    let mut identities: Vec<u32> = Vec::new();
    for &id in &batch.identities {
        if !identities.contains(&id) {
            identities.push(id);
        }
    }
    let dim = batch.features.ncols();
    let rows = identities.len() * 2;
    let mut centers = Array2::zeros((rows, dim));
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); rows];
    for (row_idx, (&id, &m)) in batch
        .identities
        .iter()
        .zip(batch.modalities.iter())
        .enumerate()
    {
        let pos = identities.iter().position(|&x| x == id).unwrap();
        members[pos * 2 + m as usize].push(row_idx);
    }
    for (r, group) in members.iter().enumerate() {
        if group.is_empty() {
            let identity = identities[r / 2];
            let modality = Modality::BOTH[r % 2];
            return Err(Error::data(format!(
                "identity {identity} has no {modality} rows in the batch"
            )));
        }
        let scale = 1.0 / group.len() as f64;
        for &row in group {
            for d in 0..dim {
                centers[(r, d)] += batch.features[(row, d)] * scale;
            }
        }
    }
    Ok(CenterSet {
        identities,
        centers,
        members,
    })
}

/// Center-based hetero-center triplet loss, summed over identities.
///
/// For each identity, two hinge terms: one anchored at the visible center and
/// one at the thermal center. The positive distance is the identity's own
/// cross-modality center pair; the negative is the nearest center of any
/// other identity, either modality. The gradient flows through the center
/// means back to every contributing sample row.
pub fn hetero_center_triplet(batch: &FeatureBatch, margin: f64) -> Result<TripletResult> {
    check_margin(margin)?;
    let centers = compute_centers(batch)?;
    let p = centers.identities.len();
    if p < 2 {
        return Err(Error::data(
            "hetero-center triplet needs at least 2 identities",
        ));
    }
    let cviews = centers.centers.view();
    let dist = pairwise_euclidean(&cviews)?;
    let mut loss = 0.0;
    let mut center_grad = Array2::zeros(centers.centers.raw_dim());
    let mut picks = Vec::with_capacity(2 * p);
    let mut tie = false;

    for i in 0..p {
        for anchor_mod in Modality::BOTH {
            let anchor = centers.row(i, anchor_mod);
            let positive = centers.row(i, anchor_mod.other());
            let dp = dist[(anchor, positive)];
            let mut hardest_neg = usize::MAX;
            let mut dn = f64::INFINITY;
            for j in 0..p {
                if j == i {
                    continue;
                }
                for neg_mod in Modality::BOTH {
                    let r = centers.row(j, neg_mod);
                    let d = dist[(anchor, r)];
                    if d < dn {
                        dn = d;
                        hardest_neg = r;
                    } else if hardest_neg != r && (d - dn).abs() < TIE_TOLERANCE {
                        tie = true;
                    }
                }
            }
            let hinge = margin + dp - dn;
            if hinge.abs() < TIE_TOLERANCE && hinge != 0.0 {
                tie = true;
            }
            let active = hinge > 0.0;
            if active {
                loss += hinge;
                add_distance_grad(&mut center_grad, &cviews, &dist, anchor, positive, 1.0);
                add_distance_grad(&mut center_grad, &cviews, &dist, anchor, hardest_neg, -1.0);
            }
            picks.push(MiningPick {
                positive,
                negative: hardest_neg,
                active,
            });
        }
    }

    // Chain through the means: each member row receives grad(center) / |group|.
    let mut grad = Array2::zeros(batch.features.raw_dim());
    for (r, group) in centers.members.iter().enumerate() {
        let scale = 1.0 / group.len() as f64;
        for &row in group {
            for d in 0..batch.features.ncols() {
                grad[(row, d)] += center_grad[(r, d)] * scale;
            }
        }
    }
    Ok(TripletResult {
        loss,
        grad,
        picks,
        tie,
    })
}

fn check_margin(margin: f64) -> Result<()> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::config(format!(
            "margin must be finite and non-negative, got {margin}"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss and its gradient `(softmax - onehot) / batch` on the
/// logits.
pub fn id_loss(logits: &ArrayView2<f64>, classes: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    let k = logits.ncols();
    if classes.len() != n {
        return Err(Error::shape(format!(
            "{n} logit rows but {} class labels",
            classes.len()
        )));
    }
    if n == 0 {
        return Err(Error::data("empty logits"));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let class = classes[i];
        if class >= k {
            return Err(Error::range(format!(
                "class index {class} out of range for {k} classes (row {i})"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for &z in row.iter() {
            sum_exp += (z - max).exp();
        }
        let lse = max + sum_exp.ln();
        loss += (lse - row[class]) * inv_n;
        for j in 0..k {
            let softmax = (row[j] - lse).exp();
            grad[(i, j)] = (softmax - if j == class { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss, grad))
}

/// Which triplet loss runs on a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletKind {
    /// Sample-based hard-mining triplet (margin `m`).
    Sample,
    /// Center-based hetero-center triplet (margin `mc`).
    Center,
}

/// How the two triplet losses are arranged across the branches.
///
/// The `FineOnly*` rows use the fine branch alone (single-branch baselines);
/// the two-letter rows name the triplet kind on the fine then coarse branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arrangement {
    #[serde(rename = "fine_only_f")]
    FineOnlyF,
    #[serde(rename = "fine_only_c")]
    FineOnlyC,
    #[serde(rename = "fine_only_fc")]
    FineOnlyFc,
    #[serde(rename = "f2f")]
    F2F,
    #[serde(rename = "c2c")]
    C2C,
    #[serde(rename = "c2f")]
    C2F,
    #[serde(rename = "f2c")]
    F2C,
}

impl Arrangement {
    pub const ALL: [Arrangement; 7] = [
        Arrangement::FineOnlyF,
        Arrangement::FineOnlyC,
        Arrangement::FineOnlyFc,
        Arrangement::F2F,
        Arrangement::C2C,
        Arrangement::C2F,
        Arrangement::F2C,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fine_only_f" => Ok(Arrangement::FineOnlyF),
            "fine_only_c" => Ok(Arrangement::FineOnlyC),
            "fine_only_fc" => Ok(Arrangement::FineOnlyFc),
            "f2f" => Ok(Arrangement::F2F),
            "c2c" => Ok(Arrangement::C2C),
            "c2f" => Ok(Arrangement::C2F),
            "f2c" => Ok(Arrangement::F2C),
            other => Err(Error::config(format!("unknown arrangement {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arrangement::FineOnlyF => "fine_only_f",
            Arrangement::FineOnlyC => "fine_only_c",
            Arrangement::FineOnlyFc => "fine_only_fc",
            Arrangement::F2F => "f2f",
            Arrangement::C2C => "c2c",
            Arrangement::C2F => "c2f",
            Arrangement::F2C => "f2c",
        }
    }

    /// Does the coarse branch carry losses at all?
    pub fn is_dual(&self) -> bool {
        matches!(
            self,
            Arrangement::F2F | Arrangement::C2C | Arrangement::C2F | Arrangement::F2C
        )
    }

    /// Triplet kinds applied on the fine branch.
    pub fn fine_kinds(&self) -> &'static [TripletKind] {
        match self {
            Arrangement::FineOnlyF | Arrangement::F2F | Arrangement::F2C => &[TripletKind::Sample],
            Arrangement::FineOnlyC | Arrangement::C2C | Arrangement::C2F => &[TripletKind::Center],
            Arrangement::FineOnlyFc => &[TripletKind::Sample, TripletKind::Center],
        }
    }

    /// Triplet kind applied on the coarse branch, if any.
    pub fn coarse_kind(&self) -> Option<TripletKind> {
        match self {
            Arrangement::F2F => Some(TripletKind::Sample),
            Arrangement::C2C => Some(TripletKind::Center),
            Arrangement::C2F => Some(TripletKind::Sample),
            Arrangement::F2C => Some(TripletKind::Center),
            _ => None,
        }
    }
}

/// Feature the fine-branch triplet loss reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FineFeature {
    /// Pooled feature, before the batch-norm neck.
    #[serde(rename = "f_p")]
    Pooled,
    /// Batch-normalized feature.
    #[serde(rename = "f_bn")]
    Normalized,
}

impl FineFeature {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f_p" => Ok(FineFeature::Pooled),
            "f_bn" => Ok(FineFeature::Normalized),
            other => Err(Error::config(format!("unknown fine feature {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FineFeature::Pooled => "f_p",
            FineFeature::Normalized => "f_bn",
        }
    }
}

/// Feature the coarse-branch triplet loss reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoarseFeature {
    /// Fused feature, before the second batch norm.
    #[serde(rename = "f_pf")]
    Fused,
    /// Batch-normalized fused feature.
    #[serde(rename = "f_bnf")]
    Normalized,
}

impl CoarseFeature {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f_pf" => Ok(CoarseFeature::Fused),
            "f_bnf" => Ok(CoarseFeature::Normalized),
            other => Err(Error::config(format!("unknown coarse feature {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CoarseFeature::Fused => "f_pf",
            CoarseFeature::Normalized => "f_bnf",
        }
    }
}

/// Full loss configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Margin `m` of the sample-based triplet loss.
    pub margin_fine: f64,
    /// Margin `mc` of the center-based triplet loss.
    pub margin_coarse: f64,
    pub arrangement: Arrangement,
    pub fine_feature: FineFeature,
    pub coarse_feature: CoarseFeature,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_fine: 0.3,
            margin_coarse: 0.3,
            arrangement: Arrangement::F2C,
            fine_feature: FineFeature::Pooled,
            coarse_feature: CoarseFeature::Normalized,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_margin(self.margin_fine)?;
        check_margin(self.margin_coarse)?;
        Ok(())
    }

    fn margin_for(&self, kind: TripletKind) -> f64 {
        match kind {
            TripletKind::Sample => self.margin_fine,
            TripletKind::Center => self.margin_coarse,
        }
    }
}

/// All loss terms of one step, with gradients routed onto the forward
/// outputs they were computed from.
///
/// `l_f_tri` is the total sample-based triplet value and `l_c_tri` the total
/// center-based one, wherever the arrangement applied them; terms that are
/// inactive under the arrangement are zero. `l_all` is computed as
/// `l_f_tri + l_c_tri + l_id_fine + l_id_coarse` in that order.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_f_tri: f64,
    pub l_c_tri: f64,
    pub l_id_fine: f64,
    pub l_id_coarse: f64,
    pub l_all: f64,
    pub grads: OutputGradients,
    /// Mining-tie flag aggregated over all triplet terms.
    pub tie: bool,
    /// Mining signature of every triplet term, in evaluation order.
    pub signature: Vec<u64>,
}

fn run_triplet(batch: &FeatureBatch, kind: TripletKind, margin: f64) -> Result<TripletResult> {
    match kind {
        TripletKind::Sample => fine_triplet(batch, margin),
        TripletKind::Center => hetero_center_triplet(batch, margin),
    }
}

/// Compose the configured losses over one forward pass.
///
/// `identities`/`modalities` drive triplet grouping; `classes` are the
/// contiguous class indices for the identification losses.
pub fn dgtl_total(
    outputs: &ForwardOutputs,
    identities: &[u32],
    modalities: &[Modality],
    classes: &[usize],
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let n = outputs.f_p_fine.nrows();
    if identities.len() != n || modalities.len() != n || classes.len() != n {
        return Err(Error::shape(format!(
            "labels ({}, {}, {}) do not match batch size {n}",
            identities.len(),
            modalities.len(),
            classes.len()
        )));
    }

    let mut grads = OutputGradients::zeros_like(outputs);
    let mut l_f_tri = 0.0;
    let mut l_c_tri = 0.0;
    let mut tie = false;
    let mut signature = Vec::new();

    let fine_input = match cfg.fine_feature {
        FineFeature::Pooled => &outputs.f_p_fine,
        FineFeature::Normalized => &outputs.f_bn,
    };
    let fine_batch = FeatureBatch::new(
        fine_input.clone(),
        identities.to_vec(),
        modalities.to_vec(),
    )?;
    for &kind in cfg.arrangement.fine_kinds() {
        let result = run_triplet(&fine_batch, kind, cfg.margin_for(kind))?;
        match kind {
            TripletKind::Sample => l_f_tri += result.loss,
            TripletKind::Center => l_c_tri += result.loss,
        }
        let target = match cfg.fine_feature {
            FineFeature::Pooled => &mut grads.f_p_fine,
            FineFeature::Normalized => &mut grads.f_bn,
        };
        *target += &result.grad;
        tie |= result.tie;
        signature.extend(result.signature());
    }

    if let Some(kind) = cfg.arrangement.coarse_kind() {
        let coarse_input = match cfg.coarse_feature {
            CoarseFeature::Fused => &outputs.f_fused,
            CoarseFeature::Normalized => &outputs.f_bnf,
        };
        let coarse_batch = FeatureBatch::new(
            coarse_input.clone(),
            identities.to_vec(),
            modalities.to_vec(),
        )?;
        let result = run_triplet(&coarse_batch, kind, cfg.margin_for(kind))?;
        match kind {
            TripletKind::Sample => l_f_tri += result.loss,
            TripletKind::Center => l_c_tri += result.loss,
        }
        let target = match cfg.coarse_feature {
            CoarseFeature::Fused => &mut grads.f_fused,
            CoarseFeature::Normalized => &mut grads.f_bnf,
        };
        *target += &result.grad;
        tie |= result.tie;
        signature.extend(result.signature());
    }

    let (l_id_fine, g_id_fine) = id_loss(&outputs.logits_fine.view(), classes)?;
    grads.logits_fine += &g_id_fine;

    let l_id_coarse = if cfg.arrangement.is_dual() {
        let (l, g) = id_loss(&outputs.logits_coarse.view(), classes)?;
        grads.logits_coarse += &g;
        l
    } else {
        0.0
    };

    let l_all = l_f_tri + l_c_tri + l_id_fine + l_id_coarse;
    if !l_all.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite loss: f_tri={l_f_tri} c_tri={l_c_tri} id_fine={l_id_fine} id_coarse={l_id_coarse}"
        )));
    }
    Ok(LossReport {
        l_f_tri,
        l_c_tri,
        l_id_fine,
        l_id_coarse,
        l_all,
        grads,
        tie,
        signature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;

    fn pk_batch(p: usize, k: usize, dim: usize, seed: u64, spread: f64) -> FeatureBatch {
        let mut r = rng::seeded(seed);
        let n = p * 2 * k;
        let mut features = Array2::zeros((n, dim));
        let mut identities = Vec::with_capacity(n);
        let mut modalities = Vec::with_capacity(n);
        let mut row = 0;
        for identity in 0..p as u32 {
            let center: Vec<f64> = (0..dim).map(|_| 10.0 * rng::uniform_f64(&mut r)).collect();
            for m in Modality::BOTH {
                for _ in 0..k {
                    for d in 0..dim {
                        features[(row, d)] = center[d] + spread * rng::standard_normal(&mut r);
                    }
                    identities.push(identity);
                    modalities.push(m);
                    row += 1;
                }
            }
        }
        FeatureBatch::new(features, identities, modalities).unwrap()
    }

    fn constant_batch(p: usize, k: usize, dim: usize) -> FeatureBatch {
        let n = p * 2 * k;
        let features = Array2::from_elem((n, dim), 1.5);
        let mut identities = Vec::new();
        let mut modalities = Vec::new();
        for identity in 0..p as u32 {
            for m in Modality::BOTH {
                for _ in 0..k {
                    identities.push(identity);
                    modalities.push(m);
                }
            }
        }
        FeatureBatch::new(features, identities, modalities).unwrap()
    }

    // Exhaustive oracle for the sample-based triplet loss: enumerate every
    // candidate positive and negative per anchor with plain loops.
    fn fine_triplet_oracle(batch: &FeatureBatch, margin: f64) -> f64 {
        let n = batch.len();
        let f = &batch.features;
        let dist = |i: usize, j: usize| -> f64 {
            let mut sq = 0.0;
            for d in 0..f.ncols() {
                let diff = f[(i, d)] - f[(j, d)];
                sq += diff * diff;
            }
            (sq + DIST_EPSILON).sqrt()
        };
        let mut total = 0.0;
        for a in 0..n {
            let mut dp = f64::NEG_INFINITY;
            let mut dn = f64::INFINITY;
            for r in 0..n {
                if batch.identities[r] == batch.identities[a] {
                    dp = dp.max(dist(a, r));
                } else {
                    dn = dn.min(dist(a, r));
                }
            }
            total += (margin + dp - dn).max(0.0);
        }
        total
    }

    // Exhaustive oracle for the hetero-center triplet loss.
    #[allow(clippy::needless_range_loop)]
    fn hetero_center_oracle(batch: &FeatureBatch, margin: f64) -> f64 {
        let mut ids: Vec<u32> = Vec::new();
        for &id in &batch.identities {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let dim = batch.features.ncols();
        let center = |id: u32, m: Modality| -> Vec<f64> {
            let rows: Vec<usize> = (0..batch.len())
                .filter(|&r| batch.identities[r] == id && batch.modalities[r] == m)
                .collect();
            let mut c = vec![0.0; dim];
            for &r in &rows {
                for d in 0..dim {
                    c[d] += batch.features[(r, d)] / rows.len() as f64;
                }
            }
            c
        };
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (sq + DIST_EPSILON).sqrt()
        };
        let mut total = 0.0;
        for &i in &ids {
            for anchor_mod in Modality::BOTH {
                let anchor = center(i, anchor_mod);
                let positive = center(i, anchor_mod.other());
                let dp = dist(&anchor, &positive);
                let mut dn = f64::INFINITY;
                for &j in &ids {
                    if j == i {
                        continue;
                    }
                    for neg_mod in Modality::BOTH {
                        dn = dn.min(dist(&anchor, &center(j, neg_mod)));
                    }
                }
                total += (margin + dp - dn).max(0.0);
            }
        }
        total
    }

    #[test]
    fn pairwise_identical_rows_are_near_zero() {
        let f = Array2::from_elem((3, 4), 2.0);
        let d = pairwise_euclidean(&f.view()).unwrap();
        for v in d.iter() {
            assert!(*v <= DIST_EPSILON.sqrt() * 1.0001, "{v}");
        }
    }

    #[test]
    fn pairwise_unit_basis_rows() {
        let mut f = Array2::zeros((2, 3));
        f[(0, 0)] = 1.0;
        f[(1, 1)] = 1.0;
        let d = pairwise_euclidean(&f.view()).unwrap();
        assert!((d[(0, 1)] - 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(d[(0, 1)], d[(1, 0)]);
    }

    #[test]
    fn pairwise_matches_naive_loop_oracle() {
        let mut r = rng::seeded(77);
        let f = Array2::from_shape_fn((6, 4), |_| 5.0 * rng::standard_normal(&mut r));
        let d = pairwise_euclidean(&f.view()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let sq: f64 = (0..4).map(|k| (f[(i, k)] - f[(j, k)]).powi(2)).sum();
                let expect = (sq + DIST_EPSILON).sqrt();
                assert!((d[(i, j)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fine_triplet_degenerate_batch_hits_margin_exactly() {
        let batch = constant_batch(2, 1, 3);
        let result = fine_triplet(&batch, 0.3).unwrap();
        // 2*P*K anchors, each hinge exactly at the margin; eps cancels.
        assert!((result.loss - 1.2).abs() < 1e-9, "{}", result.loss);
        assert!(result.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn fine_triplet_separated_identities_is_zero_with_zero_grad() {
        let mut features = Array2::zeros((4, 2));
        features[(0, 0)] = 100.0;
        features[(1, 0)] = 100.0;
        features[(2, 0)] = -100.0;
        features[(3, 0)] = -100.0;
        let batch = FeatureBatch::new(
            features,
            vec![0, 0, 1, 1],
            vec![
                Modality::Visible,
                Modality::Thermal,
                Modality::Visible,
                Modality::Thermal,
            ],
        )
        .unwrap();
        let result = fine_triplet(&batch, 0.3).unwrap();
        assert_eq!(result.loss, 0.0);
        assert!(result.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn fine_triplet_rejects_single_row_identity() {
        let features = Array2::zeros((3, 2));
        let batch = FeatureBatch::new(
            features,
            vec![0, 0, 1],
            vec![Modality::Visible, Modality::Thermal, Modality::Visible],
        )
        .unwrap();
        assert!(matches!(fine_triplet(&batch, 0.3), Err(Error::Data(_))));
    }

    #[test]
    fn fine_triplet_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let batch = pk_batch(2, 2, 4, seed, 1.0);
            let result = fine_triplet(&batch, 0.3).unwrap();
            let expect = fine_triplet_oracle(&batch, 0.3);
            assert!(
                (result.loss - expect).abs() < 1e-9,
                "seed {seed}: {} vs {expect}",
                result.loss
            );
        }
    }

    #[test]
    fn compute_centers_k1_centers_equal_rows() {
        let batch = pk_batch(3, 1, 4, 5, 1.0);
        let centers = compute_centers(&batch).unwrap();
        for (r, group) in centers.members.iter().enumerate() {
            assert_eq!(group.len(), 1);
            for d in 0..4 {
                assert_eq!(centers.centers[(r, d)], batch.features[(group[0], d)]);
            }
        }
    }

    #[test]
    fn compute_centers_midpoint() {
        let mut features = Array2::zeros((4, 2));
        features[(1, 0)] = 2.0;
        features[(1, 1)] = 4.0;
        // rows 0, 1 visible id 0; rows 2, 3 thermal id 0... needs both mods per id
        let batch = FeatureBatch::new(
            features,
            vec![0, 0, 0, 0],
            vec![
                Modality::Visible,
                Modality::Visible,
                Modality::Thermal,
                Modality::Thermal,
            ],
        )
        .unwrap();
        let centers = compute_centers(&batch).unwrap();
        assert_eq!(centers.centers[(0, 0)], 1.0);
        assert_eq!(centers.centers[(0, 1)], 2.0);
    }

    #[test]
    fn compute_centers_matches_naive_group_means() {
        let batch = pk_batch(4, 3, 5, 13, 2.0);
        let centers = compute_centers(&batch).unwrap();
        for (pos, &id) in centers.identities.iter().enumerate() {
            for m in Modality::BOTH {
                let rows: Vec<usize> = (0..batch.len())
                    .filter(|&r| batch.identities[r] == id && batch.modalities[r] == m)
                    .collect();
                let r = centers.row(pos, m);
                for d in 0..5 {
                    let mean: f64 =
                        rows.iter().map(|&row| batch.features[(row, d)]).sum::<f64>()
                            / rows.len() as f64;
                    assert!((centers.centers[(r, d)] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn compute_centers_rejects_missing_group() {
        let features = Array2::zeros((3, 2));
        let batch = FeatureBatch::new(
            features,
            vec![0, 0, 1],
            vec![Modality::Visible, Modality::Thermal, Modality::Visible],
        )
        .unwrap();
        assert!(matches!(compute_centers(&batch), Err(Error::Data(_))));
    }

    #[test]
    fn hetero_center_degenerate_batch_hits_margin_exactly() {
        let batch = constant_batch(2, 2, 3);
        let result = hetero_center_triplet(&batch, 0.3).unwrap();
        // 2 terms per identity, each exactly mc.
        assert!((result.loss - 1.2).abs() < 1e-9, "{}", result.loss);
    }

    #[test]
    fn hetero_center_satisfied_margins_give_zero() {
        // Per identity both modality centers coincide; identities far apart.
        let mut features = Array2::zeros((4, 2));
        features[(0, 0)] = 50.0;
        features[(1, 0)] = 50.0;
        features[(2, 0)] = -50.0;
        features[(3, 0)] = -50.0;
        let batch = FeatureBatch::new(
            features,
            vec![0, 0, 1, 1],
            vec![
                Modality::Visible,
                Modality::Thermal,
                Modality::Visible,
                Modality::Thermal,
            ],
        )
        .unwrap();
        let result = hetero_center_triplet(&batch, 0.3).unwrap();
        assert_eq!(result.loss, 0.0);
        assert!(result.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn hetero_center_rejects_single_identity() {
        let batch = constant_batch(1, 2, 3);
        assert!(matches!(
            hetero_center_triplet(&batch, 0.3),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn hetero_center_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let batch = pk_batch(3, 2, 4, 1000 + seed, 1.5);
            let result = hetero_center_triplet(&batch, 0.4).unwrap();
            let expect = hetero_center_oracle(&batch, 0.4);
            assert!(
                (result.loss - expect).abs() < 1e-9,
                "seed {seed}: {} vs {expect}",
                result.loss
            );
        }
    }

    fn fd_feature_grad(
        batch: &FeatureBatch,
        eval: &dyn Fn(&FeatureBatch) -> f64,
        at: (usize, usize),
        step: f64,
    ) -> f64 {
        let mut plus = batch.clone();
        plus.features[at] += step;
        let mut minus = batch.clone();
        minus.features[at] -= step;
        (eval(&plus) - eval(&minus)) / (2.0 * step)
    }

    #[test]
    fn fine_triplet_grad_matches_finite_differences() {
        let batch = pk_batch(3, 2, 4, 42, 1.0);
        let result = fine_triplet(&batch, 0.6).unwrap();
        assert!(!result.tie, "test batch should be tie-free");
        let eval = |b: &FeatureBatch| fine_triplet(b, 0.6).unwrap().loss;
        let mut r = rng::seeded(5);
        for _ in 0..12 {
            let at = (
                rng::bounded(&mut r, batch.len() as u64) as usize,
                rng::bounded(&mut r, 4) as usize,
            );
            let num = fd_feature_grad(&batch, &eval, at, 1e-5);
            let ana = result.grad[at];
            let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-5);
            assert!(rel < 1e-5, "at {at:?}: fd {num} vs analytic {ana}");
        }
    }

    #[test]
    fn hetero_center_grad_matches_finite_differences() {
        let batch = pk_batch(3, 2, 4, 4242, 1.0);
        let result = hetero_center_triplet(&batch, 0.8).unwrap();
        assert!(!result.tie, "test batch should be tie-free");
        let eval = |b: &FeatureBatch| hetero_center_triplet(b, 0.8).unwrap().loss;
        let mut r = rng::seeded(6);
        for _ in 0..12 {
            let at = (
                rng::bounded(&mut r, batch.len() as u64) as usize,
                rng::bounded(&mut r, 4) as usize,
            );
            let num = fd_feature_grad(&batch, &eval, at, 1e-5);
            let ana = result.grad[at];
            let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-5);
            assert!(rel < 1e-5, "at {at:?}: fd {num} vs analytic {ana}");
        }
    }

    #[test]
    fn id_loss_uniform_logits_is_ln_n() {
        let logits = Array2::zeros((4, 5));
        let (loss, _) = id_loss(&logits.view(), &[0, 1, 2, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn id_loss_saturated_correct_is_tiny() {
        let mut logits = Array2::zeros((3, 4));
        for (i, &c) in [0usize, 2, 3].iter().enumerate() {
            logits[(i, c)] = 1000.0;
        }
        let (loss, _) = id_loss(&logits.view(), &[0, 2, 3]).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn id_loss_matches_log_sum_exp_oracle_and_fd() {
        let mut r = rng::seeded(99);
        let logits = Array2::from_shape_fn((6, 5), |_| 3.0 * rng::standard_normal(&mut r));
        let classes = [0usize, 4, 2, 2, 1, 3];
        let (loss, grad) = id_loss(&logits.view(), &classes).unwrap();
        // naive oracle, no max subtraction
        let mut expect = 0.0;
        for i in 0..6 {
            let sum: f64 = (0..5).map(|j| logits[(i, j)].exp()).sum();
            expect += (sum.ln() - logits[(i, classes[i])]) / 6.0;
        }
        assert!((loss - expect).abs() < 1e-10);

        for probe in [(0, 0), (2, 3), (5, 4), (3, 2)] {
            let mut plus = logits.clone();
            plus[probe] += 1e-6;
            let mut minus = logits.clone();
            minus[probe] -= 1e-6;
            let (lp, _) = id_loss(&plus.view(), &classes).unwrap();
            let (lm, _) = id_loss(&minus.view(), &classes).unwrap();
            let num = (lp - lm) / 2e-6;
            assert!(
                (num - grad[probe]).abs() < 1e-6,
                "{probe:?}: {num} vs {}",
                grad[probe]
            );
        }
    }

    #[test]
    fn id_loss_rejects_out_of_range_class() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(
            id_loss(&logits.view(), &[0, 3]),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn triplet_losses_are_translation_invariant() {
        let batch = pk_batch(3, 2, 4, 7, 1.0);
        let mut shifted = batch.clone();
        for mut row in shifted.features.rows_mut() {
            for d in 0..row.len() {
                row[d] += 17.25;
            }
        }
        let f0 = fine_triplet(&batch, 0.3).unwrap().loss;
        let f1 = fine_triplet(&shifted, 0.3).unwrap().loss;
        assert!((f0 - f1).abs() < 1e-9);
        let c0 = hetero_center_triplet(&batch, 0.3).unwrap().loss;
        let c1 = hetero_center_triplet(&shifted, 0.3).unwrap().loss;
        assert!((c0 - c1).abs() < 1e-9);
    }

    #[test]
    fn triplet_losses_are_monotone_in_margin() {
        let batch = pk_batch(3, 2, 4, 8, 1.0);
        let mut prev_f = 0.0;
        let mut prev_c = 0.0;
        for margin in [0.0, 0.1, 0.3, 0.7, 1.5] {
            let f = fine_triplet(&batch, margin).unwrap().loss;
            let c = hetero_center_triplet(&batch, margin).unwrap().loss;
            assert!(f >= prev_f - 1e-12);
            assert!(c >= prev_c - 1e-12);
            prev_f = f;
            prev_c = c;
        }
    }
}
