use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the rank of a task bias is chosen for a weight of shape `n_α × n_β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RankStrategy {
    /// The same rank for every weight, clamped to `min(n_α, n_β)`.
    Constant { r: usize },
    /// `Round(p · min(n_α, n_β))`, at least 1.
    Proportional { p: f64 },
}

impl RankStrategy {
    pub fn constant(r: usize) -> Self {
        RankStrategy::Constant { r }
    }

    pub fn proportional(p: f64) -> Self {
        RankStrategy::Proportional { p }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RankStrategy::Constant { r: 0 } => Err(Error::Parameter("constant rank must be positive".into())),
            RankStrategy::Proportional { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Parameter(format!("rank proportion {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn rank_for(&self, rows: usize, cols: usize) -> usize {
        let full = rows.min(cols);
        match *self {
            RankStrategy::Constant { r } => r.min(full),
            RankStrategy::Proportional { p } => ((p * full as f64).round() as usize).clamp(1, full),
        }
    }
}

impl Default for RankStrategy {
    fn default() -> Self {
        RankStrategy::Constant { r: 4 }
    }
}

impl fmt::Display for RankStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankStrategy::Constant { r } => write!(f, "constant({r})"),
            RankStrategy::Proportional { p } => write!(f, "proportional({p})"),
        }
    }
}

/// Trainable parameters a set of biased weights would cost under `strategy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasBudget {
    pub params: usize,
    pub dense_params: usize,
}

impl BiasBudget {
    /// Bias parameters as a fraction of the dense parameters they modulate.
    pub fn fraction(&self) -> f64 {
        if self.dense_params == 0 {
            0.0
        } else {
            self.params as f64 / self.dense_params as f64
        }
    }
}

/// `Σ r·(n_α + n_β)` over `shapes`, with `r` chosen per shape.
pub fn bias_param_count(shapes: &[(usize, usize)], strategy: RankStrategy) -> BiasBudget {
    shapes.iter().fold(
        BiasBudget {
            params: 0,
            dense_params: 0,
        },
        |acc, &(rows, cols)| BiasBudget {
            params: acc.params + strategy.rank_for(rows, cols) * (rows + cols),
            dense_params: acc.dense_params + rows * cols,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_clamps_and_proportional_rounds() {
        assert_eq!(RankStrategy::constant(4).rank_for(32, 64), 4);
        assert_eq!(RankStrategy::constant(40).rank_for(32, 64), 32);
        assert_eq!(RankStrategy::proportional(0.25).rank_for(32, 64), 8);
        assert_eq!(RankStrategy::proportional(0.01).rank_for(3, 144), 1);
        assert_eq!(RankStrategy::proportional(0.5).rank_for(3, 10), 2);
    }

    #[test]
    fn validation() {
        assert!(RankStrategy::constant(0).validate().is_err());
        assert!(RankStrategy::proportional(0.0).validate().is_err());
        assert!(RankStrategy::proportional(1.5).validate().is_err());
        assert!(RankStrategy::proportional(1.0).validate().is_ok());
    }

    #[test]
    fn param_counts() {
        let b = bias_param_count(&[(8, 8)], RankStrategy::constant(8));
        assert_eq!(b.params, 128);
        assert_eq!(b.fraction(), 2.0);

        let b = bias_param_count(&[(100, 100)], RankStrategy::constant(4));
        assert_eq!(b.params, 800);
        assert!((b.fraction() - 0.08).abs() < 1e-12);

        let b = bias_param_count(&[], RankStrategy::constant(4));
        assert_eq!(b.params, 0);
        assert_eq!(b.fraction(), 0.0);
    }

    #[test]
    fn conv_matrix_view_budget() {
        // 16×8×3×3 kernel seen as 16×72
        let b = bias_param_count(&[(16, 72)], RankStrategy::constant(2));
        assert_eq!(b.params, 176);
        assert_eq!(b.dense_params, 1152);
    }
}
