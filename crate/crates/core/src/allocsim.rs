//! Baseline allocation: a caching segment allocator and a myopic planner
//! that drives it one subgraph at a time.
//!
//! The allocator keeps every segment it ever created (until
//! [`CachingAllocator::release_cache`]), serves requests best-fit from cached
//! free blocks and only coalesces neighbours inside one segment. Shrinking
//! request sizes across diffusion steps therefore strand free space that a
//! later, larger request cannot use.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::ChunkConfig;
use crate::error::Result;
use crate::graph::{bindings, ConcreteGraph};
use crate::liveness::{analyze, LifetimeTable};
use crate::planner::plan_first_fit;
use crate::workload::{build_layer_template, ModelConfig, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UsageError {
    #[error("allocation of zero bytes")]
    ZeroSize,
    #[error("block {0} is not live (double free or unknown handle)")]
    NotLive(u64),
    #[error("allocator invariant broken: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatorConfig {
    /// A cached block is split only if the remainder is at least this large.
    pub split_threshold: u64,
    /// New segments are sized `round_up(request, segment_granularity)`.
    pub segment_granularity: u64,
    /// Check every invariant after each event.
    #[serde(default)]
    pub verify: bool,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig { split_threshold: 512, segment_granularity: 2 << 20, verify: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockHandle(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    size: u64,
    owner: Option<BlockHandle>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: usize,
    pub size: u64,
    /// offset -> block
    blocks: BTreeMap<u64, Block>,
}

impl Segment {
    /// `(offset, size, free)` for each block in address order.
    pub fn blocks(&self) -> impl Iterator<Item = (u64, u64, bool)> + '_ {
        self.blocks.iter().map(|(&o, b)| (o, b.size, b.owner.is_none()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Alloc,
    Free,
    Release,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::Alloc => "alloc",
            EventKind::Free => "free",
            EventKind::Release => "release",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub op: EventKind,
    pub bytes: u64,
    pub segment_id: usize,
    pub offset: u64,
    /// Reserved and allocated bytes after the event.
    pub reserved: u64,
    pub allocated: u64,
}

#[derive(Debug, Clone)]
pub struct CachingAllocator {
    config: AllocatorConfig,
    segments: Vec<Option<Segment>>,
    live: BTreeMap<BlockHandle, (usize, u64)>,
    next_handle: u64,
    reserved: u64,
    allocated: u64,
    reserved_peak: u64,
    segments_created: usize,
    events: Vec<Event>,
}

impl CachingAllocator {
    pub fn new(config: AllocatorConfig) -> Self {
        assert!(config.segment_granularity > 0, "segment granularity must be positive");
        CachingAllocator {
            config,
            segments: Vec::new(),
            live: BTreeMap::new(),
            next_handle: 0,
            reserved: 0,
            allocated: 0,
            reserved_peak: 0,
            segments_created: 0,
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> AllocatorConfig {
        self.config
    }

    pub fn reserved(&self) -> u64 {
        self.reserved
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    pub fn reserved_peak(&self) -> u64 {
        self.reserved_peak
    }

    pub fn segments_created(&self) -> usize {
        self.segments_created
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().flatten()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Best-fit allocation from cached blocks, or a fresh segment on a miss.
    pub fn alloc(&mut self, bytes: u64) -> Result<BlockHandle, UsageError> {
        if bytes == 0 {
            return Err(UsageError::ZeroSize);
        }
        let best = self
            .segments()
            .flat_map(|s| s.blocks.iter().map(move |(&o, b)| (s.id, o, b)))
            .filter(|(_, _, b)| b.owner.is_none() && b.size >= bytes)
            .min_by_key(|&(sid, o, b)| (b.size, sid, o))
            .map(|(sid, o, _)| (sid, o));
        let (sid, offset) = match best {
            Some(hit) => hit,
            None => {
                let size = bytes.div_ceil(self.config.segment_granularity) * self.config.segment_granularity;
                let id = self.segments.len();
                let blocks = BTreeMap::from([(0, Block { size, owner: None })]);
                self.segments.push(Some(Segment { id, size, blocks }));
                self.segments_created += 1;
                self.reserved += size;
                self.reserved_peak = self.reserved_peak.max(self.reserved);
                (id, 0)
            }
        };

        let handle = BlockHandle(self.next_handle);
        self.next_handle += 1;
        let threshold = self.config.split_threshold;
        let seg = self.segments[sid].as_mut().expect("live segment");
        let remainder = seg.blocks[&offset].size - bytes;
        if remainder >= threshold.max(1) {
            seg.blocks.insert(offset + bytes, Block { size: remainder, owner: None });
        }
        let block = seg.blocks.get_mut(&offset).expect("block exists");
        if remainder >= threshold.max(1) {
            block.size = bytes;
        }
        block.owner = Some(handle);
        let size = block.size;
        self.allocated += size;
        self.live.insert(handle, (sid, offset));
        self.log(EventKind::Alloc, size, sid, offset)?;
        Ok(handle)
    }

    /// Frees a block and merges it with free neighbours in the same segment.
    pub fn free(&mut self, handle: BlockHandle) -> Result<(), UsageError> {
        let (sid, mut offset) = self.live.remove(&handle).ok_or(UsageError::NotLive(handle.0))?;
        let seg = self.segments[sid].as_mut().expect("live segment");
        let freed = seg.blocks[&offset].size;
        seg.blocks.get_mut(&offset).expect("block exists").owner = None;

        if let Some((&next, b)) = seg.blocks.range(offset + 1..).next() {
            if b.owner.is_none() && next == offset + freed {
                let n = seg.blocks.remove(&next).expect("next block").size;
                seg.blocks.get_mut(&offset).expect("block exists").size += n;
            }
        }
        if let Some((&prev, b)) = seg.blocks.range(..offset).next_back() {
            if b.owner.is_none() && prev + b.size == offset {
                let n = seg.blocks.remove(&offset).expect("block").size;
                seg.blocks.get_mut(&prev).expect("prev block").size += n;
                offset = prev;
            }
        }
        self.allocated -= freed;
        self.log(EventKind::Free, freed, sid, offset)
    }

    /// Returns every fully free segment to the device.
    pub fn release_cache(&mut self) -> Result<u64, UsageError> {
        let mut released = 0;
        for i in 0..self.segments.len() {
            let empty = matches!(&self.segments[i], Some(s) if s.blocks.len() == 1 && s.blocks[&0].owner.is_none());
            if empty {
                let size = self.segments[i].take().expect("segment").size;
                self.reserved -= size;
                released += size;
                self.log(EventKind::Release, size, i, 0)?;
            }
        }
        Ok(released)
    }

    fn log(&mut self, op: EventKind, bytes: u64, segment_id: usize, offset: u64) -> Result<(), UsageError> {
        self.events.push(Event {
            op,
            bytes,
            segment_id,
            offset,
            reserved: self.reserved,
            allocated: self.allocated,
        });
        if self.config.verify {
            self.check_invariants()?;
        }
        Ok(())
    }

    /// Blocks tile each segment, free neighbours are merged, and the byte
    /// counters match the segment contents.
    pub fn check_invariants(&self) -> Result<(), UsageError> {
        let bad = |m: String| Err(UsageError::Invariant(m));
        let (mut reserved, mut allocated, mut free) = (0u64, 0u64, 0u64);
        for s in self.segments() {
            let mut cursor = 0;
            let mut prev_free = false;
            for (o, size, is_free) in s.blocks() {
                if o != cursor {
                    return bad(format!("segment {} has a gap or overlap at {o}", s.id));
                }
                if size == 0 {
                    return bad(format!("segment {} has an empty block at {o}", s.id));
                }
                if is_free && prev_free {
                    return bad(format!("segment {} has unmerged free blocks at {o}", s.id));
                }
                prev_free = is_free;
                cursor += size;
                if is_free {
                    free += size;
                } else {
                    allocated += size;
                }
            }
            if cursor != s.size {
                return bad(format!("segment {} blocks cover {cursor} of {} bytes", s.id, s.size));
            }
            reserved += s.size;
        }
        if reserved != self.reserved || allocated != self.allocated {
            return bad(format!(
                "counters reserved={} allocated={} but segments hold {reserved}/{allocated}",
                self.reserved, self.allocated
            ));
        }
        if allocated + free != reserved {
            return bad("allocated + free != reserved".into());
        }
        for (&h, &(sid, o)) in &self.live {
            let owner = self.segments[sid].as_ref().and_then(|s| s.blocks.get(&o)).and_then(|b| b.owner);
            if owner != Some(h) {
                return bad(format!("handle {} does not own its block", h.0));
            }
        }
        Ok(())
    }

    pub fn write_events_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["event_index", "op", "bytes", "segment_id", "offset", "reserved", "allocated"])?;
        for (i, e) in self.events.iter().enumerate() {
            out.write_record([
                i.to_string(),
                e.op.as_str().to_string(),
                e.bytes.to_string(),
                e.segment_id.to_string(),
                e.offset.to_string(),
                e.reserved.to_string(),
                e.allocated.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Where a step's op list is cut into independently planned subgraphs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakPolicy {
    /// The whole step is one subgraph.
    None,
    /// A break before every chunk loop: each FFN block and the logits block.
    #[default]
    Default,
    /// Breaks before the listed op positions.
    Custom(Vec<usize>),
}

impl BreakPolicy {
    /// Sorted subgraph start positions, always beginning with 0.
    pub fn starts(&self, g: &ConcreteGraph) -> Vec<usize> {
        let mut starts = vec![0];
        match self {
            BreakPolicy::None => {}
            BreakPolicy::Default => {
                let mut seen = None;
                for (pos, op) in g.ops.iter().enumerate() {
                    if op.loop_index.is_some() && op.loop_index != seen {
                        starts.push(pos);
                    }
                    seen = op.loop_index;
                }
            }
            BreakPolicy::Custom(at) => starts.extend(at.iter().copied().filter(|&p| p < g.ops.len())),
        }
        starts.sort_unstable();
        starts.dedup();
        starts
    }
}

/// Replays one step as a sequence of myopically planned subgraphs.
///
/// Groups whose lifetime stays inside one subgraph are packed first-fit into
/// a single arena that is allocated when the subgraph starts and freed when
/// it ends. Groups that cross a break are allocated on their own when the
/// defining subgraph starts and freed when the subgraph of their last use
/// ends. Returns the peak of allocated bytes.
pub fn replay_myopic_step(
    alloc: &mut CachingAllocator,
    g: &ConcreteGraph,
    table: &LifetimeTable,
    policy: &BreakPolicy,
    alignment: u64,
) -> Result<u64> {
    let starts = policy.starts(g);
    let t_len = table.timeline_len;
    let sub_of = |t: usize| starts.partition_point(|&s| s <= t) - 1;
    let n_sub = starts.len();

    let mut internal: Vec<Vec<(u64, usize, usize)>> = vec![Vec::new(); n_sub];
    let mut escaping_def: Vec<Vec<(u64, usize)>> = vec![Vec::new(); n_sub];
    let mut escaping_end: Vec<Vec<usize>> = vec![Vec::new(); n_sub];
    for gr in table.groups.iter().filter(|gr| gr.size > 0) {
        let (a, b) = (sub_of(gr.def), sub_of(gr.last_use.min(t_len.saturating_sub(1))));
        if a == b {
            internal[a].push((gr.size, gr.def, gr.last_use));
        } else {
            escaping_def[a].push((gr.size, gr.id));
            escaping_end[b].push(gr.id);
        }
    }

    let mut handles = BTreeMap::new();
    let mut peak = alloc.allocated();
    for s in 0..n_sub {
        let arena = if internal[s].is_empty() {
            None
        } else {
            let local = LifetimeTable::from_intervals(&internal[s]);
            let size = plan_first_fit(&local, alignment)?.workspace_size;
            (size > 0).then(|| alloc.alloc(size)).transpose()?
        };
        for &(size, id) in &escaping_def[s] {
            handles.insert(id, alloc.alloc(size)?);
        }
        peak = peak.max(alloc.allocated());
        if let Some(h) = arena {
            alloc.free(h)?;
        }
        for id in &escaping_end[s] {
            alloc.free(handles.remove(id).expect("escaping group allocated"))?;
        }
    }
    Ok(peak)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInflation {
    pub step: u32,
    pub masked: u64,
    /// Reserved bytes once the step finishes.
    pub reserved: u64,
    pub theoretical_peak: u64,
    pub inflation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationReport {
    pub reserved_peak: u64,
    /// Largest global-plan workspace over the run.
    pub theoretical_peak: u64,
    pub inflation_rate: f64,
    pub per_step: Vec<StepInflation>,
    pub segments_created: usize,
    pub events: usize,
}

fn inflation(reserved: u64, theoretical: u64) -> f64 {
    reserved as f64 / theoretical as f64 - 1.0
}

/// Runs every diffusion step of `scen` through the myopic baseline, with
/// chunking disabled, on a fresh allocator.
pub fn run_myopic(cfg: &ModelConfig, scen: &ScenarioConfig, policy: &BreakPolicy) -> Result<InflationReport> {
    let mut alloc = CachingAllocator::new(AllocatorConfig::default());
    run_myopic_on(&mut alloc, cfg, scen, policy)
}

/// Like [`run_myopic`] but on a caller-supplied allocator, whose cache and
/// event log carry over.
pub fn run_myopic_on(
    alloc: &mut CachingAllocator,
    cfg: &ModelConfig,
    scen: &ScenarioConfig,
    policy: &BreakPolicy,
) -> Result<InflationReport> {
    let template = build_layer_template(cfg)?;
    let l = scen.context_len;
    let mut per_step = Vec::new();
    let mut theoretical_peak = 0;
    for (n, m) in scen.mask_schedule()?.into_iter().enumerate() {
        let g = template.instantiate(&ChunkConfig::DISABLED.apply(&bindings([("L", l), ("M", m)])))?;
        let table = analyze(&g)?;
        let planned = plan_first_fit(&table, scen.alignment)?.workspace_size;
        replay_myopic_step(alloc, &g, &table, policy, scen.alignment)?;
        theoretical_peak = theoretical_peak.max(planned);
        per_step.push(StepInflation {
            step: n as u32,
            masked: m,
            reserved: alloc.reserved(),
            theoretical_peak: planned,
            inflation_rate: inflation(alloc.reserved(), planned),
        });
    }
    Ok(InflationReport {
        reserved_peak: alloc.reserved_peak(),
        theoretical_peak,
        inflation_rate: inflation(alloc.reserved_peak(), theoretical_peak),
        per_step,
        segments_created: alloc.segments_created(),
        events: alloc.events().len(),
    })
}
