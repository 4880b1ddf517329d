use std::collections::HashMap;

use thiserror::Error;

use super::expr::{Bindings, ExprError};
use super::template::FrozenTemplate;
use crate::component::Component;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstantiationError {
    #[error("missing binding for symbol `{0}`")]
    MissingBinding(String),
    #[error("trip count `{0}` must be at least 1")]
    ZeroTripCount(String),
    #[error("tensor `{tensor}`: {source}")]
    Shape { tensor: String, source: ExprError },
    #[error("byte size of `{0}` overflows")]
    Overflow(String),
    #[error("{relation} {a} ({a_bytes} B) and {b} ({b_bytes} B) differ in size")]
    SizeMismatch {
        relation: &'static str,
        a: String,
        b: String,
        a_bytes: u64,
        b_bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInstance {
    /// Index of the declaring [`TensorDecl`](super::TensorDecl).
    pub decl: usize,
    pub iteration: Option<u32>,
    pub bytes: u64,
    pub tag: Component,
    pub graph_input: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpInstance {
    pub decl: usize,
    pub loop_index: Option<usize>,
    pub iteration: Option<u32>,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    /// (output instance, input instance) storage-sharing pairs.
    pub in_place: Vec<(usize, usize)>,
    /// Component the op's memory is attributed to: tag of its largest output,
    /// falling back to its largest input.
    pub component: Component,
}

/// A template with every symbol bound and chunk loops unrolled into
/// iteration-indexed op instances.
#[derive(Debug, Clone)]
pub struct ConcreteGraph {
    template: FrozenTemplate,
    bindings: Bindings,
    pub tensors: Vec<TensorInstance>,
    pub ops: Vec<OpInstance>,
    /// (producer instance, consumer instance)
    pub aliases: Vec<(usize, usize)>,
    /// (tensor instances, timeline position after which they may be released)
    pub barriers: Vec<(Vec<usize>, usize)>,
}

impl ConcreteGraph {
    pub fn template(&self) -> &FrozenTemplate {
        &self.template
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }

    pub fn tensor_name(&self, inst: usize) -> String {
        let t = &self.tensors[inst];
        let id = &self.template.tensors()[t.decl].id;
        match t.iteration {
            Some(i) => format!("{id}#{i}"),
            None => id.clone(),
        }
    }

    pub fn op_name(&self, pos: usize) -> String {
        let o = &self.ops[pos];
        let id = &self.template.ops()[o.decl].id;
        match o.iteration {
            Some(i) => format!("{id}#{i}"),
            None => id.clone(),
        }
    }

    pub fn op_kind(&self, pos: usize) -> &str {
        &self.template.ops()[self.ops[pos].decl].kind
    }

    /// True when every op reads only tensors produced at an earlier position
    /// (or graph inputs).
    pub fn is_topologically_ordered(&self) -> bool {
        let mut produced_at = vec![None; self.tensors.len()];
        for (pos, op) in self.ops.iter().enumerate() {
            for &o in &op.outputs {
                produced_at[o] = Some(pos);
            }
        }
        self.ops.iter().enumerate().all(|(pos, op)| {
            op.inputs.iter().all(|&i| {
                self.tensors[i].graph_input || produced_at[i].is_some_and(|p| p < pos)
            })
        })
    }
}

impl FrozenTemplate {
    /// Binds every symbol and unrolls chunk loops.
    ///
    /// Bindings for symbols the template does not declare are ignored.
    pub fn instantiate(&self, bindings: &Bindings) -> Result<ConcreteGraph, InstantiationError> {
        for s in self.symbols() {
            if !bindings.contains_key(s) {
                return Err(InstantiationError::MissingBinding(s.clone()));
            }
        }
        let trips: Vec<u32> = self
            .chunk_loops()
            .iter()
            .map(|lp| {
                let k = bindings[&lp.trip_count];
                if k == 0 {
                    Err(InstantiationError::ZeroTripCount(lp.trip_count.clone()))
                } else {
                    u32::try_from(k).map_err(|_| InstantiationError::Overflow(lp.trip_count.clone()))
                }
            })
            .collect::<Result<_, _>>()?;

        let loop_bindings: Vec<Bindings> = self
            .chunk_loops()
            .iter()
            .map(|lp| {
                let k = bindings[&lp.trip_count];
                let mut b = bindings.clone();
                for d in &lp.chunked_dims {
                    let v = b[d];
                    b.insert(d.clone(), v.div_ceil(k));
                }
                b
            })
            .collect();

        let decl_bytes: Vec<u64> = self
            .tensors()
            .iter()
            .enumerate()
            .map(|(ti, decl)| {
                let b = match self.loop_of_tensor(ti) {
                    Some(li) => &loop_bindings[li],
                    None => bindings,
                };
                decl.shape.iter().try_fold(decl.element_size, |acc, d| {
                    let v = d.eval(b).map_err(|source| InstantiationError::Shape {
                        tensor: decl.id.clone(),
                        source,
                    })?;
                    acc.checked_mul(v).ok_or_else(|| InstantiationError::Overflow(decl.id.clone()))
                })
            })
            .collect::<Result<_, _>>()?;

        for op in self.ops() {
            for (out, inp) in &op.in_place {
                let (o, i) = (self.tensor_index(out).unwrap(), self.tensor_index(inp).unwrap());
                if decl_bytes[o] != decl_bytes[i] {
                    return Err(InstantiationError::SizeMismatch {
                        relation: "in-place pair",
                        a: out.clone(),
                        b: inp.clone(),
                        a_bytes: decl_bytes[o],
                        b_bytes: decl_bytes[i],
                    });
                }
            }
        }
        for a in self.aliases() {
            let (p, c) = (self.tensor_index(&a.producer).unwrap(), self.tensor_index(&a.consumer).unwrap());
            if decl_bytes[p] != decl_bytes[c] {
                return Err(InstantiationError::SizeMismatch {
                    relation: "alias",
                    a: a.producer.clone(),
                    b: a.consumer.clone(),
                    a_bytes: decl_bytes[p],
                    b_bytes: decl_bytes[c],
                });
            }
        }

        let mut u = Unroller {
            template: self,
            decl_bytes: &decl_bytes,
            trips: &trips,
            instances: HashMap::new(),
            tensors: Vec::new(),
            ops: Vec::new(),
            last_pos_of_op: vec![0; self.ops().len()],
        };
        let mut pos = 0;
        while pos < self.ops().len() {
            match self.loop_of_op(pos) {
                Some(li) => {
                    let (first, last) = self.loop_range(li);
                    for it in 0..trips[li] {
                        for q in first..=last {
                            u.emit(q, Some((li, it)));
                        }
                    }
                    pos = last + 1;
                }
                None => {
                    u.emit(pos, None);
                    pos += 1;
                }
            }
        }

        let mut aliases = Vec::new();
        for a in self.aliases() {
            let (p, c) = (self.tensor_index(&a.producer).unwrap(), self.tensor_index(&a.consumer).unwrap());
            let iters: Vec<Option<u32>> = match self.loop_of_tensor(p) {
                Some(li) => (0..trips[li]).map(Some).collect(),
                None => vec![None],
            };
            for it in iters {
                if let (Some(&pi), Some(&ci)) = (u.instances.get(&(p, it)), u.instances.get(&(c, it))) {
                    aliases.push((pi, ci));
                }
            }
        }

        let barriers = self
            .barriers()
            .iter()
            .map(|b| {
                let members = b
                    .tensors
                    .iter()
                    .flat_map(|t| {
                        let ti = self.tensor_index(t).unwrap();
                        u.all_instances(ti)
                    })
                    .collect();
                (members, u.last_pos_of_op[self.op_index(&b.release_after).unwrap()])
            })
            .collect();

        let Unroller { tensors, ops, .. } = u;
        Ok(ConcreteGraph {
            template: self.clone(),
            bindings: bindings.clone(),
            tensors,
            ops,
            aliases,
            barriers,
        })
    }
}

struct Unroller<'a> {
    template: &'a FrozenTemplate,
    decl_bytes: &'a [u64],
    trips: &'a [u32],
    instances: HashMap<(usize, Option<u32>), usize>,
    tensors: Vec<TensorInstance>,
    ops: Vec<OpInstance>,
    last_pos_of_op: Vec<usize>,
}

impl Unroller<'_> {
    fn instance(&mut self, t: usize, iteration: Option<u32>) -> usize {
        let decl = &self.template.tensors()[t];
        let (tensors, decl_bytes) = (&mut self.tensors, self.decl_bytes);
        *self.instances.entry((t, iteration)).or_insert_with(|| {
            tensors.push(TensorInstance {
                decl: t,
                iteration,
                bytes: decl_bytes[t],
                tag: decl.tag,
                graph_input: decl.graph_input,
            });
            tensors.len() - 1
        })
    }

    /// Iteration under which op `ctx` sees tensor `t`.
    fn resolve(&self, t: usize, ctx: Option<(usize, u32)>) -> Option<u32> {
        let li = self.template.loop_of_tensor(t)?;
        match ctx {
            Some((cur, it)) if cur == li => Some(it),
            _ => Some(self.trips[li] - 1),
        }
    }

    fn emit(&mut self, op: usize, ctx: Option<(usize, u32)>) {
        let decl = &self.template.ops()[op];
        let idx = |u: &mut Self, id: &String| {
            let t = u.template.tensor_index(id).unwrap();
            let it = u.resolve(t, ctx);
            u.instance(t, it)
        };
        let inputs: Vec<usize> = decl.inputs.iter().map(|id| idx(self, id)).collect();
        let outputs: Vec<usize> = decl.outputs.iter().map(|id| idx(self, id)).collect();
        let in_place = decl
            .in_place
            .iter()
            .map(|(o, i)| (idx(self, o), idx(self, i)))
            .collect();
        let largest = |ids: &[usize]| {
            ids.iter()
                .copied()
                .reduce(|a, b| if self.tensors[b].bytes > self.tensors[a].bytes { b } else { a })
                .map(|i| self.tensors[i].tag)
        };
        let component = largest(&outputs).or_else(|| largest(&inputs)).unwrap_or_default();
        self.last_pos_of_op[op] = self.ops.len();
        self.ops.push(OpInstance {
            decl: op,
            loop_index: ctx.map(|(li, _)| li),
            iteration: ctx.map(|(_, it)| it),
            inputs,
            outputs,
            in_place,
            component,
        });
    }

    fn all_instances(&self, t: usize) -> Vec<usize> {
        match self.template.loop_of_tensor(t) {
            Some(li) => (0..self.trips[li])
                .filter_map(|it| self.instances.get(&(t, Some(it))).copied())
                .collect(),
            None => self.instances.get(&(t, None)).copied().into_iter().collect(),
        }
    }
}
