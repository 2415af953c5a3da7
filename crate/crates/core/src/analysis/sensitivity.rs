use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::check_compatible;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::nn::LayerGroup;
use crate::numerics::{cosine_similarity, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSimilarity {
    pub group: LayerGroup,
    /// Unweighted mean of the per-tensor cosine similarities.
    pub mean: f64,
    /// Number of tensors averaged.
    pub count: usize,
}

/// Cosine similarity of shared weights before and after finetuning, one
/// entry per layer group present in the checkpoints (in `LayerGroup::ALL` order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub groups: Vec<GroupSimilarity>,
}

impl SensitivityReport {
    pub fn get(&self, group: LayerGroup) -> Option<&GroupSimilarity> {
        self.groups.iter().find(|g| g.group == group)
    }

    pub fn mean(&self, group: LayerGroup) -> Option<f64> {
        self.get(group).map(|g| g.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,label,mean_cosine,tensors\n");
        for g in &self.groups {
            let _ = writeln!(s, "{},{},{:.6},{}", g.group.key(), g.group.label(), g.mean, g.count);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Cosine similarity with conventions for zero tensors: two zero tensors are
/// identical (1), a zero against a nonzero tensor counts as orthogonal (0).
fn tensor_similarity(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    match cosine_similarity(a, b) {
        Err(Error::Degenerate(_)) => Ok(if a.is_zero() && b.is_zero() { 1.0 } else { 0.0 }),
        r => r,
    }
}

/// LayerNorm's additive shift; the only bias vector in the network.
fn is_shift(name: &str) -> bool {
    name.ends_with(".beta")
}

/// Average cosine similarity of the shared weights, grouped by layer group.
/// LayerNorm contributes its scale only; see [`sensitivity_all_params`].
pub fn sensitivity(reference: &Checkpoint, finetuned: &Checkpoint) -> Result<SensitivityReport> {
    sensitivity_with(reference, finetuned, false)
}

/// Like [`sensitivity`], but LayerNorm shifts are averaged in as well.
pub fn sensitivity_all_params(reference: &Checkpoint, finetuned: &Checkpoint) -> Result<SensitivityReport> {
    sensitivity_with(reference, finetuned, true)
}

fn sensitivity_with(reference: &Checkpoint, finetuned: &Checkpoint, shifts: bool) -> Result<SensitivityReport> {
    check_compatible(reference, finetuned)?;
    let mut sums = [(0.0f64, 0usize); LayerGroup::ALL.len()];
    for (a, b) in reference.backbone.iter().zip(&finetuned.backbone) {
        if !shifts && is_shift(&a.name) {
            continue;
        }
        let slot = LayerGroup::ALL
            .iter()
            .position(|g| *g == a.group)
            .expect("group in ALL");
        sums[slot].0 += tensor_similarity(&a.tensor, &b.tensor)?;
        sums[slot].1 += 1;
    }
    let groups = LayerGroup::ALL
        .iter()
        .zip(sums)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(&group, (s, count))| GroupSimilarity {
            group,
            mean: s / count as f64,
            count,
        })
        .collect();
    Ok(SensitivityReport { groups })
}
