use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) struct ConvRecord<T> {
    pub cols: Vec<T>,
    pub weight: Tensor<T>,
    pub in_shape: [usize; 3],
}

pub(crate) struct LinearRecord<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
}

pub(crate) struct NormRecord<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub in_shape: Vec<usize>,
}

pub(crate) struct AttentionRecord<T> {
    pub x: Tensor<T>,
    pub qkv: Vec<T>,
    pub attn: Vec<T>,
    pub mixed: Vec<T>,
    pub w_qkv: Tensor<T>,
    pub w_proj: Tensor<T>,
}

pub(crate) struct FfnRecord<T> {
    pub x: Tensor<T>,
    pub pre: Vec<T>,
    pub act: Vec<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

pub(crate) struct UpRecord<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
}

pub(crate) enum Record<T> {
    Conv(ConvRecord<T>),
    Linear(LinearRecord<T>),
    Norm(NormRecord<T>),
    Attention(AttentionRecord<T>),
    Ffn(FfnRecord<T>),
    Down(ConvRecord<T>),
    Up(UpRecord<T>),
}

impl<T> Record<T> {
    fn kind(&self) -> &'static str {
        match self {
            Record::Conv(_) => "conv2d",
            Record::Linear(_) => "linear",
            Record::Norm(_) => "layernorm",
            Record::Attention(_) => "channel_attention",
            Record::Ffn(_) => "ffn",
            Record::Down(_) => "downsample",
            Record::Up(_) => "upsample",
        }
    }
}

/// Forward activations for exactly one backward pass.
///
/// Layers push records during forward; backward pops them in reverse order.
pub struct GradientTape<T> {
    records: Vec<Record<T>>,
    recording: bool,
    consumed: bool,
}

impl<T> Default for GradientTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> GradientTape<T> {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that drops everything; for inference.
    pub fn inference() -> Self {
        Self {
            records: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn push(&mut self, record: Record<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::State("tape already used for a backward pass".into()));
        }
        if self.recording {
            self.records.push(record);
        }
        Ok(())
    }

    /// Marks the tape as used; a second call is an error.
    pub fn begin_backward(&mut self) -> Result<()> {
        if self.consumed {
            return Err(Error::State("tape already used for a backward pass".into()));
        }
        if !self.recording {
            return Err(Error::State("inference tape holds no activations".into()));
        }
        self.consumed = true;
        Ok(())
    }

    pub(crate) fn pop(&mut self, expected: &'static str) -> Result<Record<T>> {
        if !self.consumed {
            return Err(Error::State("backward step before begin_backward".into()));
        }
        let record = self
            .records
            .pop()
            .ok_or_else(|| Error::State(format!("tape exhausted while expecting {expected}")))?;
        if record.kind() != expected {
            return Err(Error::State(format!(
                "tape out of order: expected {expected}, found {}",
                record.kind()
            )));
        }
        Ok(record)
    }
}
