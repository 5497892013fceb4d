//! Scalar-expression differentiation engine for small dense networks.
//!
//! Expressions live in a [`Graph`]: an append-only arena of vector-valued
//! nodes in topological order. Scalars are length-one vectors. The engine
//! supports:
//!
//! * forward evaluation ([`Graph::evaluate`]),
//! * derivatives with respect to a scalar input, built symbolically as new
//!   graph nodes so the result is itself differentiable
//!   ([`Graph::input_derivative`], [`Graph::tangent`]),
//! * reverse-mode gradients with respect to every parameter
//!   ([`Graph::param_gradient`]), which also works on roots produced by
//!   `input_derivative` and therefore yields mixed second derivatives.
//!
//! Batched work over many samples goes through [`Program`], which evaluates
//! the parameter-only ("static") part of the graph once per parameter state
//! and only re-runs the input-dependent part per sample.

mod graph;
mod program;
mod tangent;

pub use graph::{Graph, NodeId, Op};
pub use program::{Program, Workspace};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("input slot {slot} is unbound ({available} inputs supplied)")]
    UnboundInput { slot: usize, available: usize },
    #[error("parameter block {offset}..{end} is unbound ({available} parameters supplied)")]
    UnboundParam {
        offset: usize,
        end: usize,
        available: usize,
    },
    #[error("non-finite value at node {node} ({op}); path to root: {path:?}")]
    NonFinite {
        node: usize,
        op: &'static str,
        path: Vec<usize>,
    },
    #[error("node {0} is not a scalar")]
    NotScalar(usize),
    #[error("input slot {0} does not exist in the graph")]
    NoSuchInput(usize),
}

/// Values bound to the leaves of a graph.
#[derive(Debug, Clone, Copy)]
pub struct Bindings<'a> {
    pub inputs: &'a [f64],
    pub params: &'a [f64],
}

impl<'a> Bindings<'a> {
    pub fn new(inputs: &'a [f64], params: &'a [f64]) -> Self {
        Bindings { inputs, params }
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable `1 / (1 + e^-x)`.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Non-negative reparameterization of a raw weight.
#[inline]
pub fn nonneg(raw: f64, eps: f64) -> f64 {
    if raw >= 0.0 {
        raw + (-eps).exp()
    } else {
        (raw - eps).exp()
    }
}

#[inline]
pub(crate) fn nonneg_slope(raw: f64, eps: f64) -> f64 {
    if raw >= 0.0 {
        1.0
    } else {
        (raw - eps).exp()
    }
}

#[cfg(test)]
mod tests;
