//! Graph registrar: explicit, parameterized computation-graph templates.
//!
//! A [`GraphTemplate`] is built once per model with symbolic dimensions,
//! in-place pairs, aliases, barriers and chunk loops. Freezing validates it;
//! instantiating a [`FrozenTemplate`] against concrete bindings yields a
//! [`ConcreteGraph`] whose chunk loops are unrolled into per-iteration op
//! instances.

mod concrete;
mod expr;
mod template;

pub use concrete::{ConcreteGraph, InstantiationError, OpInstance, TensorInstance};
pub use expr::{Bindings, ExprError, ExprParseError, SymbolicDim};
pub use template::{
    AliasConstraint, Barrier, BuildError, ChunkLoop, FrozenTemplate, GraphTemplate, OpDecl, OpId,
    TemplateParseError, TensorDecl, TensorId,
};

/// Builds a [`Bindings`] map from `(symbol, value)` pairs.
pub fn bindings<'a>(pairs: impl IntoIterator<Item = (&'a str, u64)>) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
