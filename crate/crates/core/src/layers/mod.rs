//! Cross-layer integration.
//!
//! Every layer `j` computes a preliminary output `h̃_j` with its base
//! computation, aggregates the outputs of all earlier layers into `a_j`
//! with an integrator, and emits `h_j = LayerNorm(ReLU(h̃_j + a_j))`.
//!
//! Integration is position-wise: tensors of shape `[batch, time, d]` are
//! treated as `batch·time` independent rows, so the query at step τ only
//! attends to predecessors at step τ.

mod arch1;
mod arch2;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use arch1::{arch1_integrate, arch1_integrate_with_weights, Arch1Integrator};
pub use arch2::{arch2_integrate, arch2_integrate_with_weights, Arch2Integrator};

use crate::autodiff::{lstm_sequence, LstmParams, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outputs `h_1..h_{j-1}` of the layers completed so far.
#[derive(Clone, Debug, Default)]
pub struct LayerState {
    outputs: Vec<Var>,
}

impl LayerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the next layer's output; all entries must share one shape.
    pub fn push(&mut self, h: Var) -> Result<()> {
        if let Some(first) = self.outputs.first() {
            if first.shape() != h.shape() {
                return Err(Error::dim(
                    "layer_state",
                    format!("layer output {:?} differs from earlier {:?}", h.shape(), first.shape()),
                ));
            }
        }
        self.outputs.push(h);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn outputs(&self) -> &[Var] {
        &self.outputs
    }

    pub fn last(&self) -> Option<&Var> {
        self.outputs.last()
    }
}

/// Optional learnable task vector, a candidate in Architecture 1.
#[derive(Clone, Debug, Default)]
pub struct TaskEmbedding {
    pub t: Option<Var>,
}

impl TaskEmbedding {
    pub fn absent() -> Self {
        Self { t: None }
    }

    pub fn present(&self) -> bool {
        self.t.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Var,
    pub bias: Var,
    pub eps: f64,
}

/// `h_j = LayerNorm(ReLU(h̃_j + a_j))`.
pub fn layer_update(h_tilde: &Var, a: &Var, ln: &LayerNormParams) -> Result<Var> {
    if h_tilde.shape() != a.shape() {
        return Err(Error::dim(
            "layer_update",
            format!("h̃ {:?} and a {:?} differ", h_tilde.shape(), a.shape()),
        ));
    }
    h_tilde.add(a)?.relu()?.layer_norm(&ln.gain, &ln.bias, ln.eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Lstm,
    Mlp,
}

impl FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(BaseKind::Lstm),
            "mlp" => Ok(BaseKind::Mlp),
            other => Err(Error::Config(format!("unknown base kind `{other}` (expected lstm or mlp)"))),
        }
    }
}

impl fmt::Display for BaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseKind::Lstm => "lstm",
            BaseKind::Mlp => "mlp",
        })
    }
}

/// A layer's own computation producing `h̃_j`.
#[derive(Clone, Debug)]
pub enum BaseLayer {
    /// Full hidden sequence `[batch, time, d]` from zero initial state.
    Lstm(LstmParams),
    /// `ReLU(x·W + b)` on `[batch, d_in]`.
    Mlp { weight: Var, bias: Var },
}

impl BaseLayer {
    pub fn kind(&self) -> BaseKind {
        match self {
            BaseLayer::Lstm(_) => BaseKind::Lstm,
            BaseLayer::Mlp { .. } => BaseKind::Mlp,
        }
    }
}

pub fn base_forward(x: &Var, base: &BaseLayer) -> Result<Var> {
    match base {
        BaseLayer::Lstm(p) => lstm_sequence(x, p),
        BaseLayer::Mlp { weight, bias } => {
            if x.shape().len() != 2 {
                return Err(Error::dim("mlp", format!("input {:?} must be [batch, d_in]", x.shape())));
            }
            x.matmul(weight)?.add_bias(bias)?.relu()
        }
    }
}

/// Flattens `[..., d]` to `[rows, d]`.
pub(crate) fn as_rows(x: &Var) -> Result<Var> {
    let shape = x.shape();
    let d = *shape.last().expect("non-empty shape");
    let rows = shape.iter().product::<usize>() / d;
    x.reshape(&[rows, d])
}

/// Zero tensor on the same tape with the given shape.
pub(crate) fn zeros_like(x: &Var, shape: Vec<usize>) -> Var {
    x.tape().constant(Tensor::zeros(shape))
}
