//! Per-task low-rank weight biases on a shared backbone.
//!
//! A modulated weight computes `W' = W_general + B1·B2` for the active task,
//! with `B1: n_α×r` and `B2: r×n_β`. Convolution kernels are factorized in
//! their `C_out × (C_in·k·k)` matrix view.

mod container;
mod pack;
mod policy;
mod rank;
mod weight;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub use container::{read_container, write_container, Container, TensorEntry, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use pack::{BiasPack, PackLayer, PackLayerKind, PACK_KIND};
pub use policy::{GroupTreatment, ModulationPolicy};
pub use rank::{bias_param_count, BiasBudget, RankStrategy};
pub use weight::{LowRankBias, ModulatedWeight, ModulationMode, BIAS_INIT_STD};

/// Name of a task, e.g. `denoise`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(name: impl Into<String>) -> Self {
        TaskId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId::new(s)
    }
}

/// Flattens a `C_out × C_in × k × k` kernel into `C_out × (C_in·k·k)`.
pub fn conv_as_matrix<T: Scalar>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    match kernel.shape() {
        &[c_out, c_in, kh, kw] => kernel.clone().reshape([c_out, c_in * kh * kw]),
        other => Err(Error::Dimension(format!("expected a 4-D kernel, got shape {other:?}"))),
    }
}

/// Inverse of [`conv_as_matrix`] for a square `k×k` kernel.
pub fn matrix_as_conv<T: Scalar>(matrix: &Tensor<T>, c_in: usize, k: usize) -> Result<Tensor<T>> {
    let (c_out, cols) = matrix.dims2()?;
    if cols != c_in * k * k {
        return Err(Error::Dimension(format!(
            "matrix {:?} is not a view of a {c_out}×{c_in}×{k}×{k} kernel",
            matrix.shape()
        )));
    }
    matrix.clone().reshape([c_out, c_in, k, k])
}
