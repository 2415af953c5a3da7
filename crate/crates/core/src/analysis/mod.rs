//! Post-hoc analyses of trained checkpoints: per-group weight sensitivity and
//! the singular-value energy of finetuning deltas.

mod energy;
mod rank_report;
mod sensitivity;

pub use energy::{accumulative_energy, energy_curves, EnergyAnalysis, EnergyCurve};
pub use rank_report::{rank_strategy_report, RankReport, RankRow, StrategySummary, LOW_ENERGY_FLAG};
pub use sensitivity::{sensitivity, sensitivity_all_params, GroupSimilarity, SensitivityReport};

use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// Both checkpoints must describe the same network, tensor for tensor.
fn check_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    if a.config != b.config {
        return Err(Error::Compatibility(
            "checkpoints were built from different model configs".into(),
        ));
    }
    if a.backbone.len() != b.backbone.len() {
        return Err(Error::Compatibility(format!(
            "backbone tensor counts differ: {} vs {}",
            a.backbone.len(),
            b.backbone.len()
        )));
    }
    for (x, y) in a.backbone.iter().zip(&b.backbone) {
        if x.name != y.name || x.group != y.group || x.tensor.shape() != y.tensor.shape() {
            return Err(Error::Compatibility(format!(
                "tensor `{}` {:?} does not match `{}` {:?}",
                x.name,
                x.tensor.shape(),
                y.name,
                y.tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Leading component of a parameter name, e.g. `enc0` or `mid`.
fn stage_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}
