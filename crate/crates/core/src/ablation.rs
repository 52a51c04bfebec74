//! Ablation sweeps: enumerate configuration cells along one axis and run the
//! experiment pipeline per cell with a shared seed.
//!
//! The axes mirror the study structure the toolkit reproduces:
//!   - `arrangement`: the three single-branch baselines plus f2f, c2c, c2f,
//!     f2c (7 cells);
//!   - `pooling`: every (fine, coarse) pooling pair (9 cells);
//!   - `bnneck_routing`: the five feature-routing rows (two single-branch,
//!     three dual-branch);
//!   - `fusion`: sum vs. concatenation (2 cells);
//!   - `margin_mc`: a grid over the coarse margin.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::embedder::FeatureChoice;
use crate::error::{Error, Result};
use crate::losses::Arrangement;
use crate::pipeline::run_experiment_on;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Arrangement,
    Pooling,
    BnneckRouting,
    Fusion,
    MarginMc,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Arrangement,
        AblationAxis::Pooling,
        AblationAxis::BnneckRouting,
        AblationAxis::Fusion,
        AblationAxis::MarginMc,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arrangement" => Ok(AblationAxis::Arrangement),
            "pooling" => Ok(AblationAxis::Pooling),
            "bnneck_routing" => Ok(AblationAxis::BnneckRouting),
            "fusion" => Ok(AblationAxis::Fusion),
            "margin_mc" => Ok(AblationAxis::MarginMc),
            other => Err(Error::config(format!("unknown ablation axis {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Arrangement => "arrangement",
            AblationAxis::Pooling => "pooling",
            AblationAxis::BnneckRouting => "bnneck_routing",
            AblationAxis::Fusion => "fusion",
            AblationAxis::MarginMc => "margin_mc",
        }
    }
}

/// Default grid for the coarse-margin sweep.
pub const DEFAULT_MC_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// One cell: an id and the full configuration to run.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub cell_id: String,
    pub config: RunConfig,
}

/// Enumerate the cells of an axis over a base configuration. Every cell
/// shares the base seeds.
pub fn cells(axis: AblationAxis, base: &RunConfig, mc_grid: &[f64]) -> Result<Vec<AblationCell>> {
    let mut out = Vec::new();
    match axis {
        AblationAxis::Arrangement => {
            for arrangement in Arrangement::ALL {
                let mut config = base.clone();
                config.loss.arrangement = arrangement;
                out.push(AblationCell {
                    cell_id: arrangement.name().to_string(),
                    config,
                });
            }
        }
        AblationAxis::Pooling => {
            for fine in ["avg", "max", "gem"] {
                for coarse in ["avg", "max", "gem"] {
                    let mut config = base.clone();
                    config.embedder.pool_fine = fine.into();
                    config.embedder.pool_coarse = coarse.into();
                    out.push(AblationCell {
                        cell_id: format!("{fine}-{coarse}"),
                        config,
                    });
                }
            }
        }
        AblationAxis::BnneckRouting => {
            // Two single-branch rows: sample triplet on f_p or f_bn, no
            // coarse branch.
            for fine in ["f_p", "f_bn"] {
                let mut config = base.clone();
                config.loss.arrangement = Arrangement::FineOnlyF;
                config.loss.fine_feature = crate::losses::FineFeature::parse(fine)?;
                out.push(AblationCell {
                    cell_id: format!("{fine}|x"),
                    config,
                });
            }
            // Three dual-branch routings under the f2c arrangement.
            for (fine, coarse) in [("f_p", "f_pf"), ("f_bn", "f_bnf"), ("f_p", "f_bnf")] {
                let mut config = base.clone();
                config.loss.arrangement = Arrangement::F2C;
                config.loss.fine_feature = crate::losses::FineFeature::parse(fine)?;
                config.loss.coarse_feature = crate::losses::CoarseFeature::parse(coarse)?;
                out.push(AblationCell {
                    cell_id: format!("{fine}|{coarse}"),
                    config,
                });
            }
        }
        AblationAxis::Fusion => {
            for fusion in ["sum", "cat"] {
                let mut config = base.clone();
                config.embedder.fusion = fusion.into();
                out.push(AblationCell {
                    cell_id: fusion.to_string(),
                    config,
                });
            }
        }
        AblationAxis::MarginMc => {
            if mc_grid.is_empty() {
                return Err(Error::config("margin_mc sweep needs a non-empty grid"));
            }
            for &mc in mc_grid {
                if !(mc.is_finite() && mc >= 0.0) {
                    return Err(Error::config(format!("bad margin {mc} in sweep grid")));
                }
                let mut config = base.clone();
                config.loss.margin_coarse = mc;
                out.push(AblationCell {
                    cell_id: format!("mc_{mc}"),
                    config,
                });
            }
        }
    }
    Ok(out)
}

/// Schema-stable result row: one per (cell, feature), metrics averaged over
/// the two query directions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRow {
    pub cell_id: String,
    pub feature: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// Sweep outcome; failed cells are kept aside so partial results survive.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub rows: Vec<CellRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell_id: String,
    pub error: String,
}

/// Run every cell of an axis. The dataset is resolved once from the base
/// configuration and shared; each cell trains from scratch.
pub fn run_axis(
    axis: AblationAxis,
    base: &RunConfig,
    mc_grid: &[f64],
    mut on_cell: impl FnMut(&str),
) -> Result<AblationOutcome> {
    let dataset = base.resolve_dataset()?;
    let mut outcome = AblationOutcome::default();
    for cell in cells(axis, base, mc_grid)? {
        on_cell(&cell.cell_id);
        match run_experiment_on(&cell.config, &dataset, None, |_| {}) {
            Ok(experiment) => {
                for choice in FeatureChoice::BOTH {
                    let feature = experiment.eval.feature(choice);
                    let (rank1, rank5, rank10, map) = feature.mean_metrics();
                    outcome.rows.push(CellRow {
                        cell_id: cell.cell_id.clone(),
                        feature: choice.name().to_string(),
                        rank1,
                        rank5,
                        rank10,
                        map,
                    });
                }
            }
            Err(e) => outcome.failures.push(CellFailure {
                cell_id: cell.cell_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok(outcome)
}

/// Render rows as an aligned text table.
pub fn format_table(rows: &[CellRow]) -> String {
    let mut width = "cell_id".len();
    for row in rows {
        width = width.max(row.cell_id.len());
    }
    let mut out = format!(
        "{:<width$}  {:<6}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "cell_id", "feature", "rank1", "rank5", "rank10", "mAP"
    );
    for row in rows {
        out.push_str(&format!(
            "{:<width$}  {:<6}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}\n",
            row.cell_id, row.feature, row.rank1, row.rank5, row.rank10, row.map
        ));
    }
    out
}
