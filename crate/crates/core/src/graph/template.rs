use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::expr::SymbolicDim;
use crate::component::Component;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub id: String,
    pub shape: Vec<SymbolicDim>,
    pub element_size: u64,
    #[serde(default)]
    pub tag: Component,
    /// Weights and prompt embeddings live outside the transient workspace.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub graph_input: bool,
}

impl TensorDecl {
    pub fn new(id: impl Into<String>, shape: Vec<SymbolicDim>, element_size: u64, tag: Component) -> Self {
        TensorDecl { id: id.into(), shape, element_size, tag, graph_input: false }
    }

    pub fn input(id: impl Into<String>, shape: Vec<SymbolicDim>, element_size: u64, tag: Component) -> Self {
        TensorDecl { graph_input: true, ..TensorDecl::new(id, shape, element_size, tag) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpDecl {
    pub id: String,
    #[serde(default)]
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    /// output id -> input id whose storage the output reuses.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub in_place: BTreeMap<String, String>,
}

impl OpDecl {
    pub fn new(id: impl Into<String>, kind: impl Into<String>) -> Self {
        OpDecl {
            id: id.into(),
            kind: kind.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            in_place: BTreeMap::new(),
        }
    }

    pub fn inputs<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.inputs.extend(ids.into_iter().map(Into::into));
        self
    }

    pub fn outputs<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.outputs.extend(ids.into_iter().map(Into::into));
        self
    }

    pub fn in_place(mut self, output: impl Into<String>, input: impl Into<String>) -> Self {
        self.in_place.insert(output.into(), input.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasConstraint {
    pub producer: String,
    pub consumer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Barrier {
    pub tensors: Vec<String>,
    pub release_after: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLoop {
    pub body_ops: Vec<String>,
    pub trip_count: String,
    /// Symbols rebound to `ceil(sym / trip_count)` for tensors produced in the body.
    #[serde(default)]
    pub chunked_dims: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("undeclared symbol `{symbol}` in {context}")]
    UnknownSymbol { symbol: String, context: String },
    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),
    #[error("duplicate op `{0}`")]
    DuplicateOp(String),
    #[error("tensor `{tensor}` has element_size 0")]
    ZeroElementSize { tensor: String },
    #[error("op `{op}` references undeclared tensor `{tensor}`")]
    DanglingTensor { op: String, tensor: String },
    #[error("op `{op}` reads `{tensor}` before any op produces it")]
    ForwardReference { op: String, tensor: String },
    #[error("tensor `{tensor}` is produced by both `{first}` and `{second}`")]
    MultipleProducers { tensor: String, first: String, second: String },
    #[error("op `{op}` writes graph input `{tensor}`")]
    WritesGraphInput { op: String, tensor: String },
    #[error("op `{op}`: in-place pair {output} <- {input} must name one of its outputs and one of its inputs")]
    BadInPlace { op: String, output: String, input: String },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("alias {producer} -> {consumer}: {reason}")]
    BadAlias { producer: String, consumer: String, reason: String },
    #[error("chunk loop body is empty")]
    EmptyLoop,
    #[error("chunk loop body {0:?} is not a contiguous run of ops")]
    NonContiguousLoop(Vec<String>),
    #[error("chunk loop body overlaps another loop at op `{0}`")]
    OverlappingLoops(String),
    #[error("unknown trip-count symbol `{0}`")]
    UnknownTripSymbol(String),
    #[error("loop input `{tensor}` has no barrier spanning the loop ending at `{last_op}`")]
    MissingLoopBarrier { tensor: String, last_op: String },
}

/// A parameterized computation-graph template under construction.
///
/// Ops are kept in insertion order, which is the execution order. Call
/// [`GraphTemplate::freeze`] to validate cross-item rules and obtain an
/// immutable, shareable [`FrozenTemplate`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct GraphTemplate {
    symbols: Vec<String>,
    tensors: Vec<TensorDecl>,
    ops: Vec<OpDecl>,
    aliases: Vec<AliasConstraint>,
    barriers: Vec<Barrier>,
    chunk_loops: Vec<ChunkLoop>,
    #[serde(skip)]
    index: Index,
}

#[derive(Debug, Clone, Default)]
struct Index {
    tensor: HashMap<String, usize>,
    op: HashMap<String, usize>,
    producer: Vec<Option<usize>>,
    loop_of_op: Vec<Option<usize>>,
}

/// Identifies an op by its position in a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub usize);

impl GraphTemplate {
    pub fn new<I, S>(symbols: I) -> Result<Self, BuildError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut t = GraphTemplate::default();
        for s in symbols {
            let s = s.into();
            if t.symbols.contains(&s) {
                return Err(BuildError::DuplicateSymbol(s));
            }
            t.symbols.push(s);
        }
        Ok(t)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn tensors(&self) -> &[TensorDecl] {
        &self.tensors
    }

    pub fn ops(&self) -> &[OpDecl] {
        &self.ops
    }

    pub fn aliases(&self) -> &[AliasConstraint] {
        &self.aliases
    }

    pub fn barriers(&self) -> &[Barrier] {
        &self.barriers
    }

    pub fn chunk_loops(&self) -> &[ChunkLoop] {
        &self.chunk_loops
    }

    pub fn has_symbol(&self, s: &str) -> bool {
        self.symbols.iter().any(|x| x == s)
    }

    pub fn tensor_index(&self, id: &str) -> Option<usize> {
        self.index.tensor.get(id).copied()
    }

    pub fn op_index(&self, id: &str) -> Option<usize> {
        self.index.op.get(id).copied()
    }

    /// Op that produces tensor `t`, if any.
    pub fn producer(&self, t: usize) -> Option<usize> {
        self.index.producer[t]
    }

    /// Chunk loop containing op `op`, if any.
    pub fn loop_of_op(&self, op: usize) -> Option<usize> {
        self.index.loop_of_op[op]
    }

    /// Chunk loop whose body produces tensor `t`.
    pub fn loop_of_tensor(&self, t: usize) -> Option<usize> {
        self.producer(t).and_then(|op| self.loop_of_op(op))
    }

    pub fn add_tensor(&mut self, decl: TensorDecl) -> Result<TensorId, BuildError> {
        if self.index.tensor.contains_key(&decl.id) {
            return Err(BuildError::DuplicateTensor(decl.id));
        }
        if decl.element_size == 0 {
            return Err(BuildError::ZeroElementSize { tensor: decl.id });
        }
        for dim in &decl.shape {
            for s in dim.symbols() {
                if !self.has_symbol(s) {
                    return Err(BuildError::UnknownSymbol {
                        symbol: s.to_string(),
                        context: format!("shape of `{}`", decl.id),
                    });
                }
            }
        }
        let id = self.tensors.len();
        self.index.tensor.insert(decl.id.clone(), id);
        self.index.producer.push(None);
        self.tensors.push(decl);
        Ok(TensorId(id))
    }

    pub fn add_op(&mut self, op: OpDecl) -> Result<OpId, BuildError> {
        if self.index.op.contains_key(&op.id) {
            return Err(BuildError::DuplicateOp(op.id));
        }
        let lookup = |t: &String| {
            self.tensor_index(t).ok_or_else(|| BuildError::DanglingTensor {
                op: op.id.clone(),
                tensor: t.clone(),
            })
        };
        for t in &op.inputs {
            let ti = lookup(t)?;
            if !self.tensors[ti].graph_input && self.index.producer[ti].is_none() {
                return Err(BuildError::ForwardReference { op: op.id.clone(), tensor: t.clone() });
            }
        }
        let mut seen = HashSet::new();
        for t in &op.outputs {
            let ti = lookup(t)?;
            if self.tensors[ti].graph_input {
                return Err(BuildError::WritesGraphInput { op: op.id.clone(), tensor: t.clone() });
            }
            if let Some(p) = self.index.producer[ti] {
                return Err(BuildError::MultipleProducers {
                    tensor: t.clone(),
                    first: self.ops[p].id.clone(),
                    second: op.id.clone(),
                });
            }
            if !seen.insert(t) || op.inputs.contains(t) {
                return Err(BuildError::MultipleProducers {
                    tensor: t.clone(),
                    first: op.id.clone(),
                    second: op.id.clone(),
                });
            }
        }
        for (out, inp) in &op.in_place {
            if !op.outputs.contains(out) || !op.inputs.contains(inp) {
                return Err(BuildError::BadInPlace {
                    op: op.id.clone(),
                    output: out.clone(),
                    input: inp.clone(),
                });
            }
        }
        let id = self.ops.len();
        for t in &op.outputs {
            let ti = self.index.tensor[t];
            self.index.producer[ti] = Some(id);
        }
        self.index.op.insert(op.id.clone(), id);
        self.index.loop_of_op.push(None);
        self.ops.push(op);
        Ok(OpId(id))
    }

    pub fn add_alias(&mut self, producer: impl Into<String>, consumer: impl Into<String>) -> Result<(), BuildError> {
        let (producer, consumer) = (producer.into(), consumer.into());
        let bad = |reason: &str| BuildError::BadAlias {
            producer: producer.clone(),
            consumer: consumer.clone(),
            reason: reason.to_string(),
        };
        let (Some(p), Some(c)) = (self.tensor_index(&producer), self.tensor_index(&consumer)) else {
            return Err(bad("undeclared tensor"));
        };
        if p == c {
            return Err(bad("a tensor cannot alias itself"));
        }
        if self.tensors[p].graph_input || self.tensors[c].graph_input {
            return Err(bad("graph inputs live outside the workspace"));
        }
        self.aliases.push(AliasConstraint { producer, consumer });
        Ok(())
    }

    pub fn add_barrier<I, S>(&mut self, tensors: I, release_after: impl Into<String>) -> Result<(), BuildError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tensors: Vec<String> = tensors.into_iter().map(Into::into).collect();
        let release_after = release_after.into();
        for t in &tensors {
            if self.tensor_index(t).is_none() {
                return Err(BuildError::UnknownTensor(t.clone()));
            }
        }
        if self.op_index(&release_after).is_none() {
            return Err(BuildError::UnknownOp(release_after));
        }
        self.barriers.push(Barrier { tensors, release_after });
        Ok(())
    }

    pub fn add_chunk_loop(&mut self, lp: ChunkLoop) -> Result<(), BuildError> {
        if lp.body_ops.is_empty() {
            return Err(BuildError::EmptyLoop);
        }
        if !self.has_symbol(&lp.trip_count) {
            return Err(BuildError::UnknownTripSymbol(lp.trip_count));
        }
        for d in &lp.chunked_dims {
            if !self.has_symbol(d) || *d == lp.trip_count {
                return Err(BuildError::UnknownSymbol {
                    symbol: d.clone(),
                    context: "chunked_dims".to_string(),
                });
            }
        }
        let mut positions = Vec::with_capacity(lp.body_ops.len());
        for o in &lp.body_ops {
            positions.push(self.op_index(o).ok_or_else(|| BuildError::UnknownOp(o.clone()))?);
        }
        if positions.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(BuildError::NonContiguousLoop(lp.body_ops));
        }
        for &p in &positions {
            if self.index.loop_of_op[p].is_some() {
                return Err(BuildError::OverlappingLoops(self.ops[p].id.clone()));
            }
        }
        let li = self.chunk_loops.len();
        for &p in &positions {
            self.index.loop_of_op[p] = Some(li);
        }
        self.chunk_loops.push(lp);
        Ok(())
    }

    /// Position range `[first, last]` of a loop body.
    pub fn loop_range(&self, li: usize) -> (usize, usize) {
        let body = &self.chunk_loops[li].body_ops;
        (self.index.op[&body[0]], self.index.op[&body[body.len() - 1]])
    }

    /// Checks the rules that span several items and seals the template.
    pub fn freeze(self) -> Result<FrozenTemplate, BuildError> {
        for a in &self.aliases {
            let p = self.index.tensor[&a.producer];
            let c = self.index.tensor[&a.consumer];
            if self.loop_of_tensor(p) != self.loop_of_tensor(c) {
                return Err(BuildError::BadAlias {
                    producer: a.producer.clone(),
                    consumer: a.consumer.clone(),
                    reason: "aliased tensors must belong to the same loop body (or none)".to_string(),
                });
            }
        }
        for li in 0..self.chunk_loops.len() {
            let (first, last) = self.loop_range(li);
            for op in &self.ops[first..=last] {
                for t in &op.inputs {
                    let ti = self.index.tensor[t];
                    if self.tensors[ti].graph_input || self.loop_of_tensor(ti) == Some(li) {
                        continue;
                    }
                    let covered = self.barriers.iter().any(|b| {
                        b.tensors.contains(t) && self.index.op[&b.release_after] >= last
                    });
                    if !covered {
                        return Err(BuildError::MissingLoopBarrier {
                            tensor: t.clone(),
                            last_op: self.ops[last].id.clone(),
                        });
                    }
                }
            }
        }
        Ok(FrozenTemplate(Arc::new(self)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serializes")
    }

    /// Parses the JSON template format and replays it through the builder so
    /// every construction rule is enforced.
    pub fn from_json(text: &str) -> Result<GraphTemplate, TemplateParseError> {
        let raw: RawTemplate = serde_json::from_str(text)?;
        let mut t = GraphTemplate::new(raw.symbols)?;
        for d in raw.tensors {
            t.add_tensor(d)?;
        }
        for o in raw.ops {
            t.add_op(o)?;
        }
        for a in raw.aliases {
            t.add_alias(a.producer, a.consumer)?;
        }
        for b in raw.barriers {
            t.add_barrier(b.tensors, b.release_after)?;
        }
        for lp in raw.chunk_loops {
            t.add_chunk_loop(lp)?;
        }
        Ok(t)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    #[serde(default)]
    symbols: Vec<String>,
    #[serde(default)]
    tensors: Vec<TensorDecl>,
    #[serde(default)]
    ops: Vec<OpDecl>,
    #[serde(default)]
    aliases: Vec<AliasConstraint>,
    #[serde(default)]
    barriers: Vec<Barrier>,
    #[serde(default)]
    chunk_loops: Vec<ChunkLoop>,
}

#[derive(Debug, Error)]
pub enum TemplateParseError {
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// A validated, immutable template. Cheap to clone and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct FrozenTemplate(Arc<GraphTemplate>);

impl Deref for FrozenTemplate {
    type Target = GraphTemplate;

    fn deref(&self) -> &GraphTemplate {
        &self.0
    }
}

impl Serialize for FrozenTemplate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}
