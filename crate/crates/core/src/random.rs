//! Seeded random graph templates for property checks.
//!
//! Graphs mix symbolic shapes, graph inputs, in-place ops, aliases, barriers
//! and at most one chunk loop, and are always valid by construction.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::graph::{bindings, Bindings, ChunkLoop, ConcreteGraph, FrozenTemplate, GraphTemplate, OpDecl, SymbolicDim, TensorDecl};
use crate::liveness::{analyze, LifetimeTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Upper bound on storage groups after instantiation.
    pub max_groups: usize,
    pub max_ops: usize,
    /// Allow a chunk loop.
    pub loops: bool,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams { max_groups: 64, max_ops: 32, loops: true }
    }
}

#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub template: FrozenTemplate,
    pub bindings: Bindings,
    pub graph: ConcreteGraph,
    pub table: LifetimeTable,
}

const SHAPES: &[&str] = &["A", "B", "A*B", "A+B", "16", "ceil(A, 2)", "3*A", "B+5"];

fn shape(s: &str) -> Vec<SymbolicDim> {
    s.split('|').map(SymbolicDim::from).collect()
}

struct Tensor {
    name: String,
    shape: &'static str,
    elem: u64,
    in_loop: bool,
}

/// Draws templates until one instantiates within `p.max_groups` groups.
pub fn random_graph<R: Rng>(rng: &mut R, p: GraphParams) -> RandomGraph {
    let mut max_ops = p.max_ops.max(1);
    loop {
        let (template, b) = random_template(rng, max_ops, p.loops);
        let graph = template.instantiate(&b).expect("generated template instantiates");
        let table = analyze(&graph).expect("generated graph has no alias cycle");
        if table.len() <= p.max_groups {
            return RandomGraph { template, bindings: b, graph, table };
        }
        max_ops = (max_ops * 3 / 4).max(1);
    }
}

fn random_template<R: Rng>(rng: &mut R, max_ops: usize, loops: bool) -> (FrozenTemplate, Bindings) {
    let mut t = GraphTemplate::new(["A", "B", "K"]).expect("fresh symbols");
    let n_ops = rng.gen_range(1..=max_ops);
    let lp = (loops && n_ops >= 3 && rng.gen_bool(0.5)).then(|| {
        let start = rng.gen_range(1..n_ops - 1);
        (start, rng.gen_range(start..n_ops - 1))
    });
    let in_loop = |i: usize| lp.is_some_and(|(s, e)| s <= i && i <= e);

    let mut avail: Vec<Tensor> = Vec::new();
    for i in 0..rng.gen_range(0..=2) {
        let s = *SHAPES.choose(rng).unwrap();
        let name = format!("in{i}");
        t.add_tensor(TensorDecl::input(name.clone(), shape(s), 4, Component::Other)).unwrap();
        avail.push(Tensor { name, shape: s, elem: 4, in_loop: false });
    }
    let n_inputs = avail.len();
    let mut loop_reads: Vec<String> = Vec::new();
    let mut body = Vec::new();

    for i in 0..n_ops {
        let id = format!("op{i}");
        let inside = in_loop(i);
        let mut op = OpDecl::new(&id, "op");
        let mut reads = Vec::new();
        if !avail.is_empty() {
            for _ in 0..rng.gen_range(0..=3) {
                let pick = if rng.gen_bool(0.6) {
                    avail.len() - 1 - rng.gen_range(0..avail.len().min(4))
                } else {
                    rng.gen_range(0..avail.len())
                };
                if !reads.contains(&pick) {
                    reads.push(pick);
                }
            }
        }
        op = op.inputs(reads.iter().map(|&r| avail[r].name.clone()));
        if inside {
            for &r in &reads {
                if r >= n_inputs && !avail[r].in_loop {
                    loop_reads.push(avail[r].name.clone());
                }
            }
        }

        let mut outs = Vec::new();
        for o in 0..rng.gen_range(1..=2) {
            let name = format!("t{i}_{o}");
            let tag = *Component::ALL.choose(rng).unwrap();
            let donor = reads.iter().copied().find(|&r| r >= n_inputs && avail[r].in_loop == inside);
            let (s, elem, in_place) = match donor {
                Some(r) if o == 0 && !inside && rng.gen_bool(0.3) => (avail[r].shape, avail[r].elem, Some(avail[r].name.clone())),
                _ => (*SHAPES.choose(rng).unwrap(), *[1, 2, 4].choose(rng).unwrap(), None),
            };
            t.add_tensor(TensorDecl::new(name.clone(), shape(s), elem, tag)).unwrap();
            if let Some(src) = in_place {
                op = op.in_place(name.clone(), src);
            }
            outs.push(Tensor { name, shape: s, elem, in_loop: inside });
        }
        op = op.outputs(outs.iter().map(|o| o.name.clone()));
        t.add_op(op).unwrap();
        if inside {
            body.push(id);
        }

        if !inside && rng.gen_bool(0.1) {
            let fresh = &outs[0];
            let earlier = avail.iter().skip(n_inputs).filter(|a| !a.in_loop && a.shape == fresh.shape && a.elem == fresh.elem);
            if let Some(prev) = earlier.collect::<Vec<_>>().choose(rng) {
                t.add_alias(prev.name.clone(), fresh.name.clone()).unwrap();
            }
        }
        avail.extend(outs);
    }

    if let Some((_, e)) = lp {
        loop_reads.sort();
        loop_reads.dedup();
        let last = format!("op{e}");
        if !loop_reads.is_empty() {
            t.add_barrier(loop_reads, last).unwrap();
        }
        let chunked_dims = if rng.gen_bool(0.5) { vec!["A".to_string()] } else { vec![] };
        t.add_chunk_loop(ChunkLoop { body_ops: body, trip_count: "K".into(), chunked_dims }).unwrap();
    }
    if rng.gen_bool(0.2) && avail.len() > n_inputs {
        let who = avail[rng.gen_range(n_inputs..avail.len())].name.clone();
        let until = format!("op{}", rng.gen_range(0..n_ops));
        t.add_barrier([who], until).unwrap();
    }

    let b = bindings([("A", rng.gen_range(1..=24)), ("B", rng.gen_range(1..=12)), ("K", rng.gen_range(1..=3))]);
    (t.freeze().expect("generated template freezes"), b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn graphs_respect_group_cap_and_are_reproducible() {
        let p = GraphParams { max_groups: 10, ..GraphParams::default() };
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = random_graph(&mut a, p);
            let y = random_graph(&mut b, p);
            assert!(x.table.len() <= 10);
            assert!(x.graph.is_topologically_ordered());
            assert_eq!(x.template.to_json(), y.template.to_json());
            assert_eq!(x.bindings, y.bindings);
        }
    }

    #[test]
    fn generator_exercises_every_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut loops, mut aliases, mut in_place) = (0, 0, 0);
        for _ in 0..300 {
            let g = random_graph(&mut rng, GraphParams::default());
            loops += usize::from(!g.template.chunk_loops().is_empty());
            aliases += usize::from(!g.template.aliases().is_empty());
            in_place += usize::from(g.template.ops().iter().any(|o| !o.in_place.is_empty()));
        }
        assert!(loops > 30 && aliases > 30 && in_place > 30, "{loops} {aliases} {in_place}");
    }
}
