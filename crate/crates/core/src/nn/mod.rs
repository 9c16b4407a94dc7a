//! Deterministic f32 tensor operations and the layers used by the models.
//!
//! Sequence layers work on row-major `[len, batch, features]` buffers so a
//! recurrence step touches one contiguous block of rows. Frame-based 2-D
//! layers work on `[steps, freqs, channels]`.

mod archive;
mod attention;
mod layers;
pub mod math;

pub use archive::{WeightArchive, FORMAT_VERSION, MAGIC};
pub use attention::{
    attention_weights, causal_attention, sinusoidal_encoding, KvCache, MaskedSelfAttention,
};
pub use layers::{
    causal_conv2d, deconv2d, refold_time, unfold_time, CausalConv2d, CausalDeconv2d,
    ConvHistory, ConvTranspose1d, Direction, GroupNorm, LayerNorm, Linear, Lstm, LstmState,
    Init, PRelu, ParamSlot, StackedLstm, Unfolded, Visitor,
};
pub(crate) use layers::{unfold_positions, unfold_strided};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("weight archive parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("duplicate weight `{0}`")]
    DuplicateWeight(String),
    #[error("unexpected weight `{0}` not used by the model")]
    UnexpectedWeight(String),
    #[error("weight `{name}` has dims {got:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Dense row-major f32 tensor; the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, NnError> {
        let n = checked_numel(&dims)
            .ok_or_else(|| NnError::Shape(format!("dims {dims:?} overflow")))?;
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f32) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
                acc * d + i
            })
    }

    /// Reorders axes; `perm[k]` names the source axis of output axis `k`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.dims.len());
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let mut src_strides = vec![1usize; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            src_strides[k] = src_strides[k + 1] * self.dims[k + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; out_dims.len()];
        for _ in 0..self.data.len() {
            let o: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(self.data[o]);
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < out_dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor {
            dims: out_dims,
            data: out,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

pub(crate) fn checked_numel(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Debug-only NaN/Inf guard after a layer.
#[inline]
pub(crate) fn debug_check_finite(name: &str, data: &[f32]) {
    if cfg!(debug_assertions) {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            panic!("non-finite activation after {name} at index {i}");
        }
    }
}
