use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradations::TaskSpec;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::TinyIptConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One shared backbone trained on every task; no task-specific tensors.
    PlainMixed,
    /// Plain mixed training for half the budget, then bias-only finetuning per task.
    TwoStage,
    /// Backbone and the active task's bias updated in the same step.
    Synchronous,
    /// Only the single task's bias trains; everything else is frozen.
    BiasOnlyFinetune,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::PlainMixed => "Plain Mixed Training",
            Regime::TwoStage => "+ Ft. Bias",
            Regime::Synchronous => "Sync. Training",
            Regime::BiasOnlyFinetune => "Bias-only Finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to `min_lr` over the phase.
    Cosine {
        min_lr: f64,
    },
}

impl LrSchedule {
    /// Learning rate at `step` of a phase of `total` steps.
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { min_lr } => {
                let progress = if total <= 1 {
                    0.0
                } else {
                    step.min(total - 1) as f64 / (total - 1) as f64
                };
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub tasks: Vec<TaskSpec>,
    /// Total optimizer steps, shared by every phase of the regime.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub loss: LossKind,
    /// Rescale the gradient to at most this global norm.
    pub max_grad_norm: Option<f64>,
    /// Validate every this many steps; 0 validates only at the end of each phase.
    pub val_every: usize,
    pub val_samples: usize,
    pub model: TinyIptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Synchronous,
            tasks: vec![TaskSpec::denoise(25.0), TaskSpec::deblur()],
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine { min_lr: 1e-6 },
            seed: 0,
            loss: LossKind::L1,
            max_grad_norm: None,
            val_every: 0,
            val_samples: 16,
            model: TinyIptConfig::default(),
        }
    }
}

fn bad<T>(path: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        path: path.into(),
        message: message.into(),
    })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.tasks.len();
        match self.regime {
            Regime::PlainMixed | Regime::TwoStage | Regime::Synchronous if n < 2 => {
                return bad(
                    "tasks",
                    format!("{:?} training needs at least 2 tasks, got {n}", self.regime),
                );
            }
            Regime::BiasOnlyFinetune if n != 1 => {
                return bad("tasks", format!("bias-only finetuning takes exactly 1 task, got {n}"));
            }
            _ => {}
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate().or_else(|e| bad(&format!("tasks[{i}]"), e.to_string()))?;
            if self.tasks[..i].iter().any(|u| u.id == t.id) {
                return bad(&format!("tasks[{i}].id"), format!("duplicate task `{}`", t.id));
            }
        }
        if self.steps == 0 {
            return bad("steps", "must be positive");
        }
        if self.regime == Regime::TwoStage && self.steps < 2 * n {
            return bad("steps", "two-stage training needs at least two steps per task");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive and finite");
        }
        if let LrSchedule::Cosine { min_lr } = self.lr_schedule {
            if !(0.0..=self.learning_rate).contains(&min_lr) {
                return bad("lr_schedule.min_lr", "must lie in [0, learning_rate]");
            }
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return bad("max_grad_norm", "must be positive");
            }
        }
        if self.val_samples == 0 {
            return bad("val_samples", "must be positive");
        }
        self.model.validate()
    }

    /// Parses and validates a JSON document; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).or_else(|e| {
            let path = e.path().to_string();
            bad(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes).or_else(|_| bad(".", "config is not UTF-8"))?;
        Self::from_json(&text)
    }
}
