use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RankStrategy;
use crate::error::Result;
use crate::nn::LayerGroup;

/// What each layer group gets per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTreatment {
    /// One tensor shared by every task.
    Shared,
    /// Shared backbone plus an additive low-rank bias per task.
    Biased,
    /// A dense tensor per task, no shared backbone.
    Replaced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationPolicy {
    pub groups: BTreeMap<LayerGroup, GroupTreatment>,
    pub rank: RankStrategy,
}

impl Default for ModulationPolicy {
    /// Biases everywhere except the image embedder and the layer norms, constant rank 4.
    fn default() -> Self {
        let groups = LayerGroup::ALL
            .into_iter()
            .map(|g| {
                let t = match g {
                    LayerGroup::ImageEmbedder | LayerGroup::LayerNorm => GroupTreatment::Shared,
                    _ => GroupTreatment::Biased,
                };
                (g, t)
            })
            .collect();
        Self {
            groups,
            rank: RankStrategy::default(),
        }
    }
}

impl ModulationPolicy {
    pub fn treatment(&self, group: LayerGroup) -> GroupTreatment {
        // LayerNorm vectors have no matrix form to factorize.
        if group == LayerGroup::LayerNorm {
            return GroupTreatment::Shared;
        }
        self.groups.get(&group).copied().unwrap_or(GroupTreatment::Shared)
    }

    pub fn with_treatment(mut self, group: LayerGroup, treatment: GroupTreatment) -> Self {
        self.groups.insert(group, treatment);
        self
    }

    pub fn with_rank(mut self, rank: RankStrategy) -> Self {
        self.rank = rank;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.rank.validate()
    }

    /// Short stable digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("policy serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spares_embedder_and_norms() {
        let p = ModulationPolicy::default();
        assert_eq!(p.treatment(LayerGroup::ImageEmbedder), GroupTreatment::Shared);
        assert_eq!(p.treatment(LayerGroup::LayerNorm), GroupTreatment::Shared);
        for g in [
            LayerGroup::OutputLayer,
            LayerGroup::UpDownSampling,
            LayerGroup::ChannelReduction,
            LayerGroup::QkvProjection,
            LayerGroup::PostAttnProjection,
            LayerGroup::FfnProjection,
        ] {
            assert_eq!(p.treatment(g), GroupTreatment::Biased, "{g}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModulationPolicy::default();
        let b = ModulationPolicy::default().with_rank(RankStrategy::proportional(0.25));
        assert_eq!(a.hash(), ModulationPolicy::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
