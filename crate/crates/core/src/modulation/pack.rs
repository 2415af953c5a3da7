use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_container, write_container, Container, ModulatedWeight, TaskId};
use crate::error::{Error, Result};
use crate::nn::LayerGroup;
use crate::numerics::Tensor;

pub const PACK_KIND: &str = "bias_pack";

#[derive(Debug, Clone, PartialEq)]
pub enum PackLayerKind {
    LowRank { down: Tensor<f32>, up: Tensor<f32> },
    Replacement { dense: Tensor<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackLayer {
    pub name: String,
    pub group: LayerGroup,
    /// `(n_α, n_β)` of the weight this layer modulates.
    pub weight_shape: (usize, usize),
    pub kind: PackLayerKind,
}

impl PackLayer {
    pub fn rank(&self) -> Option<usize> {
        match &self.kind {
            PackLayerKind::LowRank { down, .. } => Some(down.shape()[1]),
            PackLayerKind::Replacement { .. } => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.kind {
            PackLayerKind::LowRank { down, up } => down.len() + up.len(),
            PackLayerKind::Replacement { dense } => dense.len(),
        }
    }
}

/// Everything one task adds on top of a backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasPack {
    pub task: TaskId,
    pub policy_hash: String,
    pub layers: Vec<PackLayer>,
}

#[derive(Serialize, Deserialize)]
struct PackManifest {
    task: TaskId,
    policy_hash: String,
    layers: Vec<LayerManifest>,
}

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    name: String,
    group: LayerGroup,
    shape: [usize; 2],
    /// Absent for dense replacements.
    rank: Option<usize>,
}

impl BiasPack {
    /// Collects `task`'s tensors from every weight that carries them.
    pub fn extract<'a>(
        weights: impl IntoIterator<Item = &'a ModulatedWeight<f32>>,
        task: &TaskId,
        policy_hash: impl Into<String>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for w in weights {
            let kind = if let Some(b) = w.bias(task) {
                PackLayerKind::LowRank {
                    down: b.down.clone(),
                    up: b.up.clone(),
                }
            } else if let Some(d) = w.replacement(task) {
                PackLayerKind::Replacement { dense: d.clone() }
            } else {
                continue;
            };
            layers.push(PackLayer {
                name: w.name().to_string(),
                group: w.group(),
                weight_shape: w.dims(),
                kind,
            });
        }
        if layers.is_empty() {
            return Err(Error::UnknownTask {
                task: task.to_string(),
                registered: Vec::new(),
            });
        }
        Ok(Self {
            task: task.clone(),
            policy_hash: policy_hash.into(),
            layers,
        })
    }

    /// Installs the pack onto `weights`.
    ///
    /// `expected` lists, for each weight the policy modulates, its name and
    /// the rank the policy assigns (`None` for dense replacement). Nothing is
    /// modified unless every layer checks out.
    pub fn merge_into(
        &self,
        weights: &mut [&mut ModulatedWeight<f32>],
        policy_hash: &str,
        expected: &[(String, Option<usize>)],
    ) -> Result<()> {
        if self.policy_hash != policy_hash {
            return Err(Error::Compatibility(format!(
                "pack policy {} does not match backbone policy {policy_hash}",
                self.policy_hash
            )));
        }
        if self.layers.len() != expected.len() {
            let first = expected
                .iter()
                .find(|(n, _)| !self.layers.iter().any(|l| &l.name == n))
                .map(|(n, _)| n.clone())
                .or_else(|| self.layers.get(expected.len()).map(|l| l.name.clone()))
                .unwrap_or_default();
            return Err(Error::Compatibility(format!(
                "pack has {} layers, backbone policy expects {}; first offending layer `{first}`",
                self.layers.len(),
                expected.len()
            )));
        }
        for (layer, (name, rank)) in self.layers.iter().zip(expected) {
            let w = weights.iter().find(|w| w.name() == layer.name);
            let ok = &layer.name == name
                && layer.rank() == *rank
                && w.is_some_and(|w| w.dims() == layer.weight_shape && w.group() == layer.group)
                && match &layer.kind {
                    PackLayerKind::LowRank { down, up } => {
                        down.shape() == [layer.weight_shape.0, rank.unwrap_or(0)]
                            && up.shape() == [rank.unwrap_or(0), layer.weight_shape.1]
                    }
                    PackLayerKind::Replacement { dense } => {
                        dense.shape() == [layer.weight_shape.0, layer.weight_shape.1]
                    }
                };
            if !ok {
                return Err(Error::Compatibility(format!(
                    "pack layer `{}` does not match the backbone",
                    layer.name
                )));
            }
        }
        for layer in &self.layers {
            let w = weights
                .iter_mut()
                .find(|w| w.name() == layer.name)
                .expect("checked above");
            w.remove_task(&self.task);
            match &layer.kind {
                PackLayerKind::LowRank { down, up } => w.insert_bias(&self.task, down.clone(), up.clone())?,
                PackLayerKind::Replacement { dense } => w.insert_replacement(&self.task, dense.clone())?,
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(PackLayer::param_count).sum()
    }

    pub fn to_container(&self) -> Result<Container> {
        let manifest = PackManifest {
            task: self.task.clone(),
            policy_hash: self.policy_hash.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerManifest {
                    name: l.name.clone(),
                    group: l.group,
                    shape: [l.weight_shape.0, l.weight_shape.1],
                    rank: l.rank(),
                })
                .collect(),
        };
        let mut c = Container::new(PACK_KIND, serde_json::to_value(manifest)?);
        for l in &self.layers {
            match &l.kind {
                PackLayerKind::LowRank { down, up } => {
                    c.push(format!("{}.b1", l.name), down.clone());
                    c.push(format!("{}.b2", l.name), up.clone());
                }
                PackLayerKind::Replacement { dense } => c.push(format!("{}.replacement", l.name), dense.clone()),
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != PACK_KIND {
            return Err(Error::Format(format!("expected a bias pack, found `{}`", c.kind)));
        }
        let manifest: PackManifest = serde_json::from_value(c.meta.clone())?;
        let fetch = |name: String| {
            c.tensor(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("pack is missing tensor `{name}`")))
        };
        let layers = manifest
            .layers
            .into_iter()
            .map(|l| {
                let kind = match l.rank {
                    Some(_) => PackLayerKind::LowRank {
                        down: fetch(format!("{}.b1", l.name))?,
                        up: fetch(format!("{}.b2", l.name))?,
                    },
                    None => PackLayerKind::Replacement {
                        dense: fetch(format!("{}.replacement", l.name))?,
                    },
                };
                Ok(PackLayer {
                    name: l.name,
                    group: l.group,
                    weight_shape: (l.shape[0], l.shape[1]),
                    kind,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task: manifest.task,
            policy_hash: manifest.policy_hash,
            layers,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_container()?.encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::decode(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::RankStrategy;

    fn weights() -> Vec<ModulatedWeight<f32>> {
        let mut a = ModulatedWeight::new("a", LayerGroup::FfnProjection, Tensor::filled([4, 6], 0.5)).unwrap();
        let mut b = ModulatedWeight::new("b", LayerGroup::OutputLayer, Tensor::filled([3, 4], -0.5)).unwrap();
        let t = TaskId::new("deblur");
        a.attach_bias(&t, RankStrategy::constant(2), 1).unwrap();
        b.attach_bias(&t, RankStrategy::constant(2), 2).unwrap();
        a.bias_mut(&t).unwrap().up = Tensor::filled([2, 6], 0.1);
        vec![a, b]
    }

    #[test]
    fn extract_merge_round_trip() {
        let src = weights();
        let t = TaskId::new("deblur");
        let pack = BiasPack::extract(&src, &t, "h").unwrap();
        assert_eq!(pack.param_count(), 2 * (4 + 6) + 2 * (3 + 4));

        let decoded = BiasPack::decode(&pack.encode().unwrap()).unwrap();
        assert_eq!(decoded, pack);

        let mut dst: Vec<ModulatedWeight<f32>> = src
            .iter()
            .map(|w| ModulatedWeight::new(w.name(), w.group(), w.general().clone()).unwrap())
            .collect();
        let expected = vec![("a".to_string(), Some(2)), ("b".to_string(), Some(2))];
        let mut refs: Vec<&mut ModulatedWeight<f32>> = dst.iter_mut().collect();
        decoded.merge_into(&mut refs, "h", &expected).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let es = s.effective_weight(Some(&t)).unwrap();
            let ed = d.effective_weight(Some(&t)).unwrap();
            assert!(es.bitwise_eq(&ed));
        }
    }

    #[test]
    fn merge_rejects_mismatches() {
        let src = weights();
        let t = TaskId::new("deblur");
        let pack = BiasPack::extract(&src, &t, "h").unwrap();
        let expected = vec![("a".to_string(), Some(2)), ("b".to_string(), Some(2))];

        let mut other = [
            ModulatedWeight::new("a", LayerGroup::FfnProjection, Tensor::<f32>::zeros([5, 6])).unwrap(),
            ModulatedWeight::new("b", LayerGroup::OutputLayer, Tensor::<f32>::zeros([3, 4])).unwrap(),
        ];
        let mut refs: Vec<&mut ModulatedWeight<f32>> = other.iter_mut().collect();
        let err = pack.merge_into(&mut refs, "h", &expected).unwrap_err();
        assert!(matches!(&err, Error::Compatibility(m) if m.contains("`a`")), "{err}");
        assert!(!refs[1].has_task(&t), "no partial merge");

        let err = pack.merge_into(&mut refs, "other", &expected).unwrap_err();
        assert!(matches!(err, Error::Compatibility(_)));
    }

    #[test]
    fn file_size_accounts_for_parameters() {
        let pack = BiasPack::extract(&weights(), &TaskId::new("deblur"), "h").unwrap();
        let bytes = pack.encode().unwrap();
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + manifest_len + 4 * pack.param_count());
    }
}
