use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TinyIpt, TinyIptConfig};
use crate::error::{Error, Result};
use crate::modulation::{read_container, write_container, BiasPack, Container, TaskId, PACK_KIND};
use crate::nn::{LayerGroup, Module, ParamRole};
use crate::numerics::Tensor;

const CHECKPOINT_KIND: &str = "checkpoint";

/// One shared tensor of a saved model.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneTensor {
    pub name: String,
    pub group: LayerGroup,
    pub tensor: Tensor<f32>,
}

/// Serializable snapshot of a model: configuration, backbone and one pack per
/// task that owns tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TinyIptConfig,
    pub tasks: Vec<TaskId>,
    pub backbone: Vec<BackboneTensor>,
    pub packs: Vec<BiasPack>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TinyIptConfig,
    tasks: Vec<TaskId>,
    backbone: Vec<(String, LayerGroup)>,
    packs: Vec<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_model(model: &TinyIpt<f32>) -> Result<Self> {
        let mut backbone = Vec::new();
        model.visit_params(&mut |p| {
            if p.id.role == ParamRole::Backbone {
                backbone.push(BackboneTensor {
                    name: p.id.name.clone(),
                    group: p.group,
                    tensor: p.tensor.clone(),
                });
            }
        });
        let mut packs = Vec::new();
        for task in model.tasks() {
            if model.weights().iter().any(|w| w.has_task(task)) {
                packs.push(model.extract_pack(task)?);
            }
        }
        Ok(Self {
            config: model.config().clone(),
            tasks: model.tasks().to_vec(),
            backbone,
            packs,
        })
    }

    /// Rebuilds the model. Every backbone tensor must match the configured
    /// architecture by name and shape.
    pub fn to_model(&self) -> Result<TinyIpt<f32>> {
        let mut model = TinyIpt::<f32>::build(self.config.clone(), 0)?;
        let mut expected = 0usize;
        let mut problem = None;
        model.visit_params_mut(&mut |p| {
            if p.id.role != ParamRole::Backbone || problem.is_some() {
                return;
            }
            expected += 1;
            match self.backbone.iter().find(|b| b.name == p.id.name) {
                Some(b) if b.tensor.shape() == p.tensor.shape() && b.group == p.group => {
                    *p.tensor = b.tensor.clone();
                }
                Some(_) => problem = Some(format!("backbone tensor `{}` has the wrong shape or group", p.id.name)),
                None => problem = Some(format!("checkpoint is missing backbone tensor `{}`", p.id.name)),
            }
        });
        if let Some(p) = problem {
            return Err(Error::Compatibility(p));
        }
        if expected != self.backbone.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} backbone tensors, architecture has {expected}",
                self.backbone.len()
            )));
        }
        for task in &self.tasks {
            model.register_task(task)?;
        }
        for pack in &self.packs {
            model.merge_pack(pack)?;
        }
        Ok(model)
    }

    pub fn backbone_tensor(&self, name: &str) -> Option<&BackboneTensor> {
        self.backbone.iter().find(|b| b.name == name)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = Vec::new();
        let mut pack_meta = Vec::new();
        for pack in &self.packs {
            let c = pack.to_container()?;
            pack_meta.push(c.meta);
            for (name, t) in c.tensors {
                tensors.push((format!("{}/{name}", pack.task), t));
            }
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            tasks: self.tasks.clone(),
            backbone: self.backbone.iter().map(|b| (b.name.clone(), b.group)).collect(),
            packs: pack_meta,
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta)?);
        for b in &self.backbone {
            c.push(b.name.clone(), b.tensor.clone());
        }
        c.tensors.extend(tensors);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a checkpoint, found `{}`", c.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        let backbone = meta
            .backbone
            .into_iter()
            .map(|(name, group)| {
                let tensor = c
                    .tensor(&name)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
                Ok(BackboneTensor { name, group, tensor })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut packs = Vec::new();
        for pm in meta.packs {
            let task: TaskId = serde_json::from_value(pm.get("task").cloned().unwrap_or_default())?;
            let prefix = format!("{task}/");
            let mut pc = Container::new(PACK_KIND, pm);
            for (name, t) in &c.tensors {
                if let Some(rest) = name.strip_prefix(&prefix) {
                    pc.push(rest, t.clone());
                }
            }
            packs.push(BiasPack::from_container(&pc)?);
        }
        Ok(Self {
            config: meta.config,
            tasks: meta.tasks,
            backbone,
            packs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

impl TinyIpt<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.to_model()
    }
}
