//! Procedural clean images and the degradations that define each task.
//!
//! Images are `3 × H × W` tensors with values in `[0, 1]`. Every operator is a
//! pure function of its inputs and seed.

mod io;
mod metrics;
mod ops;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulation::TaskId;
use crate::numerics::Tensor;
use crate::rng;

pub use io::{read_manifest, read_png, write_manifest, write_png, DatasetEntry};
pub use metrics::{psnr, EvalChannel};
pub(crate) use ops::reflect;
pub use ops::{
    apply_haze, apply_motion_blur, apply_noise, apply_rain, apply_snow, haze_depth, motion_kernel, RainParams,
    SnowParams,
};
pub use synth::{synth_clean, MIN_CLEAN_STD};

/// Degradation family and its parameters. Ranges are sampled per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Gaussian noise with σ on the 0–255 scale.
    Denoise {
        sigma: f64,
    },
    /// Linear motion blur; the angle (degrees) is drawn from `angle_range`.
    Deblur {
        kernel_len: usize,
        angle_range: [f64; 2],
    },
    Derain(RainParams),
    /// Scattering coefficient and airlight drawn from their ranges.
    Dehaze {
        beta_range: [f64; 2],
        airlight_range: [f64; 2],
    },
    Desnow(SnowParams),
}

/// A named task: the id the model is keyed by plus how its inputs are made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    #[serde(flatten)]
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn new(id: impl Into<TaskId>, kind: TaskKind) -> Self {
        Self { id: id.into(), kind }
    }

    pub fn denoise(sigma: f64) -> Self {
        let id = if sigma == 25.0 {
            "denoise".to_string()
        } else {
            format!("denoise{sigma}")
        };
        Self::new(TaskId::new(id), TaskKind::Denoise { sigma })
    }

    pub fn deblur() -> Self {
        Self::new(
            "deblur",
            TaskKind::Deblur {
                kernel_len: 5,
                angle_range: [0.0, 45.0],
            },
        )
    }

    pub fn derain() -> Self {
        Self::new("derain", TaskKind::Derain(RainParams::default()))
    }

    pub fn dehaze() -> Self {
        Self::new(
            "dehaze",
            TaskKind::Dehaze {
                beta_range: [0.6, 1.4],
                airlight_range: [0.75, 0.95],
            },
        )
    }

    pub fn desnow() -> Self {
        Self::new("desnow", TaskKind::Desnow(SnowParams::default()))
    }

    /// The five tasks with their default parameters.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::denoise(25.0),
            Self::deblur(),
            Self::derain(),
            Self::dehaze(),
            Self::desnow(),
        ]
    }

    /// Looks up one of [`standard`](Self::standard) by id; `denoise{σ}`
    /// (e.g. `denoise50`) selects another noise level.
    pub fn by_name(name: &str) -> Result<Self> {
        let sigma = name.strip_prefix("denoise").and_then(|s| s.parse::<f64>().ok());
        if let Some(sigma) = sigma.filter(|s| *s > 0.0 && s.is_finite()) {
            return Ok(Self::denoise(sigma));
        }
        Self::standard()
            .into_iter()
            .find(|t| t.id.as_str() == name)
            .ok_or_else(|| Error::UnknownTask {
                task: name.to_string(),
                registered: Self::standard().iter().map(|t| t.id.to_string()).collect(),
            })
    }

    pub fn eval_channel(&self) -> EvalChannel {
        match self.kind {
            TaskKind::Derain(_) => EvalChannel::LumaY,
            _ => EvalChannel::Rgb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(format!("task `{}`: {m}", self.id)));
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        match &self.kind {
            TaskKind::Denoise { sigma } if !(*sigma > 0.0) => bad(format!("sigma must be positive, got {sigma}")),
            TaskKind::Deblur { kernel_len, .. } if kernel_len % 2 == 0 => {
                bad(format!("kernel length must be odd, got {kernel_len}"))
            }
            TaskKind::Deblur { angle_range, .. } if !range_ok(*angle_range) => bad("invalid angle range".into()),
            TaskKind::Derain(p) => p.validate().or_else(|e| bad(e.to_string())),
            TaskKind::Desnow(p) => p.validate().or_else(|e| bad(e.to_string())),
            TaskKind::Dehaze {
                beta_range,
                airlight_range,
            } => {
                if !range_ok(*beta_range) || beta_range[0] <= 0.0 {
                    bad("beta range must be positive".into())
                } else if !range_ok(*airlight_range) || airlight_range[0] < 0.7 || airlight_range[1] > 1.0 {
                    bad("airlight must lie in [0.7, 1.0]".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Degrades `clean`; a pure function of `(clean, self, seed)`.
    pub fn apply(&self, clean: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        use rand::Rng;
        let mut r = rng::stream(rng::derive_named(seed, "task-params"));
        let pick = |r: &mut rng::Rng, [lo, hi]: [f64; 2]| if hi > lo { r.random_range(lo..hi) } else { lo };
        match &self.kind {
            TaskKind::Denoise { sigma } => Ok(apply_noise(clean, *sigma, seed)),
            TaskKind::Deblur {
                kernel_len,
                angle_range,
            } => {
                let angle = pick(&mut r, *angle_range);
                apply_motion_blur(clean, *kernel_len, angle, seed)
            }
            TaskKind::Derain(p) => apply_rain(clean, p, seed),
            TaskKind::Dehaze {
                beta_range,
                airlight_range,
            } => {
                let beta = pick(&mut r, *beta_range);
                let a = pick(&mut r, *airlight_range);
                apply_haze(clean, beta, a, seed)
            }
            TaskKind::Desnow(p) => apply_snow(clean, p, seed),
        }
    }
}

/// A clean image, its degraded version and the seed that made both.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub clean: Tensor<f32>,
    pub degraded: Tensor<f32>,
    pub task: TaskId,
    pub seed: u64,
}

impl SamplePair {
    /// Synthesizes the clean image and degrades it, both from `seed`.
    pub fn generate(task: &TaskSpec, seed: u64, height: usize, width: usize) -> Result<Self> {
        let clean = synth_clean(rng::derive_named(seed, "clean"), height, width);
        let degraded = task.apply(&clean, rng::derive_named(seed, "degrade"))?;
        Ok(Self {
            clean,
            degraded,
            task: task.id.clone(),
            seed,
        })
    }
}

/// Seed of sample `index` in a stream rooted at `global`.
pub fn sample_seed(global: u64, index: u64) -> u64 {
    rng::derive_seed(global, index)
}

/// Generates `n` pairs for `task` in parallel; pair `i` uses `sample_seed(global, i)`.
pub fn generate_pairs(task: &TaskSpec, global: u64, n: usize, height: usize, width: usize) -> Result<Vec<SamplePair>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| SamplePair::generate(task, sample_seed(global, i), height, width))
        .collect()
}
