use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulation::TaskId;
use crate::numerics::{Scalar, Tensor};

/// The eight parameter categories of the weight-sensitivity taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    ImageEmbedder,
    OutputLayer,
    UpDownSampling,
    ChannelReduction,
    QkvProjection,
    PostAttnProjection,
    FfnProjection,
    LayerNorm,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 8] = [
        LayerGroup::ImageEmbedder,
        LayerGroup::OutputLayer,
        LayerGroup::UpDownSampling,
        LayerGroup::ChannelReduction,
        LayerGroup::QkvProjection,
        LayerGroup::PostAttnProjection,
        LayerGroup::FfnProjection,
        LayerGroup::LayerNorm,
    ];

    pub fn key(self) -> &'static str {
        match self {
            LayerGroup::ImageEmbedder => "image_embedder",
            LayerGroup::OutputLayer => "output_layer",
            LayerGroup::UpDownSampling => "up_down_sampling",
            LayerGroup::ChannelReduction => "channel_reduction",
            LayerGroup::QkvProjection => "qkv_projection",
            LayerGroup::PostAttnProjection => "post_attn_projection",
            LayerGroup::FfnProjection => "ffn_projection",
            LayerGroup::LayerNorm => "layer_norm",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LayerGroup::ImageEmbedder => "Image Embedder",
            LayerGroup::OutputLayer => "Output Layer",
            LayerGroup::UpDownSampling => "UpSampling & DownSampling",
            LayerGroup::ChannelReduction => "Channel Reduction",
            LayerGroup::QkvProjection => "Query-Key-Value Projection",
            LayerGroup::PostAttnProjection => "Post-Attention Projection",
            LayerGroup::FfnProjection => "Feed-Forward-Network Projection",
            LayerGroup::LayerNorm => "LayerNorm",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.key() == key)
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// What a parameter tensor is, relative to the weight it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "role", content = "task", rename_all = "snake_case")]
pub enum ParamRole {
    Backbone,
    BiasDown(TaskId),
    BiasUp(TaskId),
    Replacement(TaskId),
}

impl ParamRole {
    pub fn task(&self) -> Option<&TaskId> {
        match self {
            ParamRole::Backbone => None,
            ParamRole::BiasDown(t) | ParamRole::BiasUp(t) | ParamRole::Replacement(t) => Some(t),
        }
    }
}

/// Stable identity of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub name: String,
    pub role: ParamRole,
}

impl ParamId {
    pub fn backbone(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role: ParamRole::Backbone,
        }
    }

    pub fn with_role(name: impl Into<String>, role: ParamRole) -> Self {
        Self {
            name: name.into(),
            role,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.role {
            ParamRole::Backbone => write!(f, "{}", self.name),
            ParamRole::BiasDown(t) => write!(f, "{}@{t}.b1", self.name),
            ParamRole::BiasUp(t) => write!(f, "{}@{t}.b2", self.name),
            ParamRole::Replacement(t) => write!(f, "{}@{t}.replacement", self.name),
        }
    }
}

/// Read-only view handed to parameter visitors.
pub struct ParamView<'a, T> {
    pub id: ParamId,
    pub group: LayerGroup,
    pub tensor: &'a Tensor<T>,
}

/// Mutable view handed to parameter visitors.
pub struct ParamViewMut<'a, T> {
    pub id: ParamId,
    pub group: LayerGroup,
    pub tensor: &'a mut Tensor<T>,
}

/// Accumulated loss gradients keyed by parameter.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T> Default for Grads<T> {
    fn default() -> Self {
        Self { map: BTreeMap::new() }
    }
}

impl<T: Scalar> Grads<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        match self.map.get_mut(&id) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.map.insert(id, grad);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor<T>> {
        self.map.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Sums `other` into `self`, entry by entry.
    pub fn merge(&mut self, other: Grads<T>) -> Result<()> {
        for (id, g) in other.map {
            self.accumulate(id, g)?;
        }
        Ok(())
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&ParamId) -> bool) {
        self.map.retain(|id, _| keep(id));
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn require(&self, id: &ParamId) -> Result<&Tensor<T>> {
        self.map
            .get(id)
            .ok_or_else(|| Error::State(format!("no gradient recorded for {id}")))
    }
}
