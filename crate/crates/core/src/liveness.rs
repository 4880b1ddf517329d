//! Storage lifetimes over the unrolled op timeline.
//!
//! Tensor instances connected by in-place pairs or aliases are merged into a
//! [`StorageGroup`]. A group is live from the op that first defines any
//! member through the last op that touches any member (inclusive), extended
//! by barriers.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::component::Component;
use crate::graph::ConcreteGraph;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("alias cycle through tensor `{0}`")]
    AliasCycle(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageGroup {
    pub id: usize,
    /// Tensor instance indices; empty for tables built from raw intervals.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<usize>,
    pub size: u64,
    pub tag: Component,
    pub def: usize,
    pub last_use: usize,
}

impl StorageGroup {
    pub fn overlaps(&self, other: &StorageGroup) -> bool {
        self.def <= other.last_use && other.def <= self.last_use
    }

    pub fn is_live_at(&self, t: usize) -> bool {
        self.def <= t && t <= self.last_use
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LifetimeTable {
    pub groups: Vec<StorageGroup>,
    pub timeline_len: usize,
    group_of: Vec<Option<usize>>,
}

impl LifetimeTable {
    /// Builds a table straight from `(size, def, last_use)` triples.
    pub fn from_intervals(intervals: &[(u64, usize, usize)]) -> Self {
        let groups: Vec<StorageGroup> = intervals
            .iter()
            .enumerate()
            .map(|(id, &(size, def, last_use))| {
                assert!(def <= last_use, "interval [{def}, {last_use}] is reversed");
                StorageGroup { id, members: Vec::new(), size, tag: Component::Other, def, last_use }
            })
            .collect();
        let timeline_len = groups.iter().map(|g| g.last_use + 1).max().unwrap_or(0);
        LifetimeTable { groups, timeline_len, group_of: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Storage group holding tensor instance `inst`; `None` for graph inputs.
    pub fn group_of(&self, inst: usize) -> Option<usize> {
        self.group_of.get(inst).copied().flatten()
    }

    /// Live bytes at every timeline position.
    pub fn live_profile(&self) -> Vec<u64> {
        let mut diff = vec![0i128; self.timeline_len + 1];
        for g in &self.groups {
            diff[g.def] += g.size as i128;
            diff[g.last_use + 1] -= g.size as i128;
        }
        let mut acc = 0i128;
        diff[..self.timeline_len]
            .iter()
            .map(|d| {
                acc += d;
                acc as u64
            })
            .collect()
    }

    /// True if some logits group and some FFN group are live at the same time.
    /// Chunk search assumes these peaks are sequential.
    pub fn chunkable_peaks_overlap(&self) -> bool {
        let of = |c| self.groups.iter().filter(move |g| g.tag == c);
        of(Component::Logits).any(|l| of(Component::Ffn).any(|f| l.overlaps(f)))
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group_id", "size_bytes", "def", "last_use", "tag"])?;
        for g in &self.groups {
            out.write_record([
                g.id.to_string(),
                g.size.to_string(),
                g.def.to_string(),
                g.last_use.to_string(),
                g.tag.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Maximum over timeline positions of the bytes simultaneously live.
pub fn max_live(table: &LifetimeTable) -> u64 {
    table.live_profile().into_iter().max().unwrap_or(0)
}

pub fn analyze(g: &ConcreteGraph) -> Result<LifetimeTable, AnalysisError> {
    let n = g.tensors.len();
    check_alias_cycles(g)?;

    let mut uf = UnionFind::new(n);
    for op in &g.ops {
        for &(o, i) in &op.in_place {
            uf.union(o, i);
        }
    }
    for &(p, c) in &g.aliases {
        uf.union(p, c);
    }

    let mut def = vec![usize::MAX; n];
    let mut last = vec![0usize; n];
    for (pos, op) in g.ops.iter().enumerate() {
        for &o in &op.outputs {
            def[o] = def[o].min(pos);
            last[o] = last[o].max(pos);
        }
        for &i in &op.inputs {
            last[i] = last[i].max(pos);
        }
    }
    for (members, release) in &g.barriers {
        for &m in members {
            last[m] = last[m].max(*release);
        }
    }

    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for t in 0..n {
        by_root[uf.find(t)].push(t);
    }
    let mut groups: Vec<StorageGroup> = by_root
        .into_iter()
        .filter(|m| !m.is_empty() && m.iter().all(|&t| !g.tensors[t].graph_input))
        .map(|members| {
            let dominant = members
                .iter()
                .copied()
                .reduce(|a, b| if g.tensors[b].bytes > g.tensors[a].bytes { b } else { a })
                .unwrap();
            let d = members.iter().map(|&t| def[t]).min().unwrap();
            let l = members.iter().map(|&t| last[t]).max().unwrap().max(d);
            StorageGroup {
                id: 0,
                size: g.tensors[dominant].bytes,
                tag: g.tensors[dominant].tag,
                def: d,
                last_use: l,
                members,
            }
        })
        .collect();
    groups.sort_by_key(|gr| (gr.def, gr.members[0]));

    let mut group_of = vec![None; n];
    for (id, gr) in groups.iter_mut().enumerate() {
        gr.id = id;
        for &m in &gr.members {
            group_of[m] = Some(id);
        }
    }
    Ok(LifetimeTable { groups, timeline_len: g.ops.len(), group_of })
}

fn check_alias_cycles(g: &ConcreteGraph) -> Result<(), AnalysisError> {
    let n = g.tensors.len();
    let mut adj = vec![Vec::new(); n];
    for &(p, c) in &g.aliases {
        adj[p].push(c);
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; n];
    for start in 0..n {
        if state[start] != 0 || adj[start].is_empty() {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&w) = adj[v].get(*next) {
                *next += 1;
                match state[w] {
                    0 => {
                        state[w] = 1;
                        stack.push((w, 0));
                    }
                    1 => return Err(AnalysisError::AliasCycle(g.tensor_name(w))),
                    _ => {}
                }
            } else {
                state[v] = 2;
                stack.pop();
            }
        }
    }
    Ok(())
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::component::Component::*;
    use crate::graph::{bindings, ChunkLoop, GraphTemplate, OpDecl, SymbolicDim, TensorDecl};

    fn chain(alias: bool) -> ConcreteGraph {
        let mut t = GraphTemplate::new(Vec::<String>::new()).unwrap();
        t.add_tensor(TensorDecl::new("a", vec![SymbolicDim::lit(16)], 1, Hidden)).unwrap();
        t.add_tensor(TensorDecl::new("b", vec![SymbolicDim::lit(16)], 1, Ffn)).unwrap();
        t.add_op(OpDecl::new("op0", "x").outputs(["a"])).unwrap();
        t.add_op(OpDecl::new("op1", "x").inputs(["a"]).outputs(["b"])).unwrap();
        if alias {
            t.add_alias("a", "b").unwrap();
        }
        t.freeze().unwrap().instantiate(&Default::default()).unwrap()
    }

    #[test]
    fn chain_lifetimes() {
        let table = analyze(&chain(false)).unwrap();
        let iv: Vec<_> = table.groups.iter().map(|g| (g.def, g.last_use)).collect();
        assert_eq!(iv, [(0, 1), (1, 1)]);
        assert_eq!(max_live(&table), 32);
    }

    #[test]
    fn alias_merges_groups() {
        let table = analyze(&chain(true)).unwrap();
        assert_eq!(table.len(), 1);
        let g = &table.groups[0];
        assert_eq!((g.def, g.last_use, g.size), (0, 1, 16));
        assert_eq!(table.group_of(0), table.group_of(1));
    }

    #[test]
    fn alias_cycle_is_reported() {
        let mut t = GraphTemplate::new(Vec::<String>::new()).unwrap();
        for id in ["a", "b", "c"] {
            t.add_tensor(TensorDecl::new(id, vec![SymbolicDim::lit(4)], 1, Hidden)).unwrap();
        }
        t.add_op(OpDecl::new("o", "x").outputs(["a", "b", "c"])).unwrap();
        t.add_alias("a", "b").unwrap();
        t.add_alias("b", "c").unwrap();
        let g = t.clone().freeze().unwrap().instantiate(&Default::default()).unwrap();
        assert_eq!(analyze(&g).unwrap().len(), 1, "chains are merged transitively");
        t.add_alias("c", "a").unwrap();
        let g = t.freeze().unwrap().instantiate(&Default::default()).unwrap();
        assert!(matches!(analyze(&g), Err(AnalysisError::AliasCycle(_))));
    }

    #[test]
    fn max_live_sweeps_every_position() {
        assert_eq!(max_live(&LifetimeTable::default()), 0);
        let t = LifetimeTable::from_intervals(&[(128, 0, 2), (64, 1, 3), (128, 3, 4)]);
        assert_eq!(max_live(&t), 192);
        assert_eq!(max_live(&LifetimeTable::from_intervals(&[(77, 3, 3)])), 77);
    }

    #[test]
    fn dead_tensor_occupies_its_defining_op() {
        let mut t = GraphTemplate::new(Vec::<String>::new()).unwrap();
        t.add_tensor(TensorDecl::new("dead", vec![SymbolicDim::lit(8)], 1, Other)).unwrap();
        t.add_op(OpDecl::new("n0", "x")).unwrap();
        t.add_op(OpDecl::new("o", "x").outputs(["dead"])).unwrap();
        let g = t.freeze().unwrap().instantiate(&Default::default()).unwrap();
        let table = analyze(&g).unwrap();
        assert_eq!((table.groups[0].def, table.groups[0].last_use), (1, 1));
    }

    /// Loop input H read by every iteration; barrier released after the final
    /// body op. Brute force: the last timeline position holding a `sample` op.
    #[test]
    fn barrier_covers_every_iteration() {
        let mut t = GraphTemplate::new(["K_logits"]).unwrap();
        t.add_tensor(TensorDecl::new("H", vec![SymbolicDim::lit(32)], 1, Hidden)).unwrap();
        t.add_tensor(TensorDecl::new("lg", vec![SymbolicDim::lit(8)], 1, Logits)).unwrap();
        t.add_op(OpDecl::new("pre", "x").outputs(["H"])).unwrap();
        t.add_op(OpDecl::new("idle", "x")).unwrap();
        t.add_op(OpDecl::new("lm", "x").outputs(["lg"])).unwrap();
        t.add_op(OpDecl::new("sample", "x").inputs(["lg", "H"])).unwrap();
        t.add_op(OpDecl::new("pad", "x")).unwrap();
        t.add_chunk_loop(ChunkLoop {
            body_ops: vec!["lm".into(), "sample".into(), "pad".into()],
            trip_count: "K_logits".into(),
            chunked_dims: vec![],
        })
        .unwrap();
        t.add_barrier(["H"], "pad").unwrap();
        let g = t.freeze().unwrap().instantiate(&bindings([("K_logits", 3)])).unwrap();
        let last_body = (0..g.ops.len()).rev().find(|&p| g.op_kind(p) == "x" && g.ops[p].iteration == Some(2)).unwrap();
        assert_eq!(last_body, 10);
        let table = analyze(&g).unwrap();
        let h = table.group_of(0).unwrap();
        assert_eq!((table.groups[h].def, table.groups[h].last_use), (0, 10));
        // per-iteration chunk tensors never overlap each other
        let chunks: Vec<_> = table.groups.iter().filter(|g| g.tag == Logits).collect();
        assert_eq!(chunks.len(), 3);
        for (i, a) in chunks.iter().enumerate() {
            for b in &chunks[i + 1..] {
                assert!(!a.overlaps(b));
            }
        }
    }

    #[test]
    fn csv_dump_has_header() {
        let mut buf = Vec::new();
        LifetimeTable::from_intervals(&[(4, 0, 1)]).write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "group_id,size_bytes,def,last_use,tag\n0,4,0,1,other\n");
    }
}
