//! Differentiable layers used by the discharge model: time-axis 1-D convolution,
//! LSTM and fully connected layers, each with an analytic backward pass, plus a
//! finite-difference gradient checker.
//!
//! Sequence inputs are channel-major: a single sequence is `[C × T]` and a batch
//! of `N` sequences is `[C × N × T]`. Every operation is pure.

mod conv;
mod dense;
pub(crate) mod gemm;
mod gradcheck;
mod lstm;

use rand::Rng;
use thiserror::Error;

pub use conv::{Conv1d, ConvCache, ConvGrads};
pub use dense::{Dense, DenseCache, DenseGrads};
pub use gradcheck::{grad_check, grad_check_with, relative_error};
pub use lstm::{Lstm, LstmCache, LstmGrads, LstmOutput};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{layer}: {dim} expected {expected}, got {actual}")]
    Shape {
        layer: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{layer}: {what} must have rank {expected}, got rank {actual}")]
    Rank {
        layer: &'static str,
        what: &'static str,
        expected: &'static str,
        actual: usize,
    },
    #[error("conv1d: window length {length} is shorter than kernel size {kernel}")]
    WindowTooShort { length: usize, kernel: usize },
    #[error("backward called with a mismatched forward cache: expected {expected}, found {found}")]
    CacheMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output; relu uses 0 at the kink.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `(C, N, T)` of a `[C × T]` or `[C × N × T]` sequence tensor.
pub(crate) fn seq_dims(input: &Tensor, layer: &'static str) -> Result<(usize, usize, usize), NnError> {
    match *input.dims() {
        [c, t] => Ok((c, 1, t)),
        [c, n, t] => Ok((c, n, t)),
        _ => Err(NnError::Rank {
            layer,
            what: "input",
            expected: "2 or 3",
            actual: input.rank(),
        }),
    }
}

pub(crate) fn glorot_fill<R: Rng + ?Sized>(values: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in values {
        *v = rng.random_range(-limit..limit);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d,
    Lstm,
    Dense,
}

/// Parameters of one layer of any supported kind.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv1d(Conv1d),
    Lstm(Lstm),
    Dense(Dense),
}

#[derive(Debug, Clone)]
pub enum ForwardCache {
    Conv1d(ConvCache),
    Lstm(LstmCache),
    Dense(DenseCache),
}

impl ForwardCache {
    fn kind_name(&self) -> &'static str {
        match self {
            ForwardCache::Conv1d(_) => "conv1d cache",
            ForwardCache::Lstm(_) => "lstm cache",
            ForwardCache::Dense(_) => "dense cache",
        }
    }
}

/// Analytic gradients of a scalar loss for one layer.
#[derive(Debug, Clone)]
pub struct GradBundle {
    /// Keyed by the same names as [`LayerParams::named_tensors`].
    pub params: Vec<(&'static str, Tensor)>,
    pub input: Tensor,
}

impl LayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Conv1d(_) => LayerKind::Conv1d,
            LayerParams::Lstm(_) => LayerKind::Lstm,
            LayerParams::Dense(_) => LayerKind::Dense,
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            LayerParams::Conv1d(l) => vec![("kernel", l.kernel()), ("bias", l.bias())],
            LayerParams::Lstm(l) => vec![("w_ih", l.w_ih()), ("w_hh", l.w_hh()), ("bias", l.bias())],
            LayerParams::Dense(l) => vec![("weight", l.weight()), ("bias", l.bias())],
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            LayerParams::Conv1d(l) => {
                let [k, b] = l.tensors_mut();
                vec![("kernel", k), ("bias", b)]
            }
            LayerParams::Lstm(l) => {
                let [a, b, c] = l.tensors_mut();
                vec![("w_ih", a), ("w_hh", b), ("bias", c)]
            }
            LayerParams::Dense(l) => {
                let [w, b] = l.tensors_mut();
                vec![("weight", w), ("bias", b)]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Forward pass. LSTM layers start from zero state and return the hidden sequence.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardCache), NnError> {
        match self {
            LayerParams::Conv1d(l) => {
                let (out, cache) = l.forward_cached(input)?;
                Ok((out, ForwardCache::Conv1d(cache)))
            }
            LayerParams::Lstm(l) => {
                let (out, cache) = l.forward_cached(input, None, None)?;
                Ok((out.hidden, ForwardCache::Lstm(cache)))
            }
            LayerParams::Dense(l) => {
                let (out, cache) = l.forward_cached(input)?;
                Ok((out, ForwardCache::Dense(cache)))
            }
        }
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<GradBundle, NnError> {
        match (self, cache) {
            (LayerParams::Conv1d(l), ForwardCache::Conv1d(c)) => {
                let g = l.backward(c, upstream)?;
                Ok(GradBundle {
                    params: vec![("kernel", g.kernel), ("bias", g.bias)],
                    input: g.input,
                })
            }
            (LayerParams::Lstm(l), ForwardCache::Lstm(c)) => {
                let g = l.backward(c, upstream)?;
                Ok(GradBundle {
                    params: vec![("w_ih", g.w_ih), ("w_hh", g.w_hh), ("bias", g.bias)],
                    input: g.input,
                })
            }
            (LayerParams::Dense(l), ForwardCache::Dense(c)) => {
                let g = l.backward(c, upstream)?;
                Ok(GradBundle {
                    params: vec![("weight", g.weight), ("bias", g.bias)],
                    input: g.input,
                })
            }
            (layer, cache) => Err(NnError::CacheMismatch {
                expected: match layer.kind() {
                    LayerKind::Conv1d => "conv1d cache",
                    LayerKind::Lstm => "lstm cache",
                    LayerKind::Dense => "dense cache",
                },
                found: cache.kind_name(),
            }),
        }
    }
}
