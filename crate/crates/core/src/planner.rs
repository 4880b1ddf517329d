//! Offset assignment for storage groups in one contiguous workspace.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::component::Component;
use crate::liveness::{max_live, LifetimeTable, StorageGroup};

pub const DEFAULT_ALIGNMENT: u64 = 256;
pub const DEFAULT_EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("alignment {0} is not a power of two")]
    BadAlignment(u64),
    #[error("{groups} groups exceed the exact planner limit of {limit}")]
    TooLarge { groups: usize, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("plan has no entry for group {0}")]
    MissingGroup(usize),
    #[error("plan entry for group {id} has size {plan} but the table says {table}")]
    SizeMismatch { id: usize, plan: u64, table: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: usize,
    pub offset: u64,
    pub size: u64,
    pub def: usize,
    pub last_use: usize,
    pub tag: Component,
}

impl PlanEntry {
    pub fn end(&self) -> u64 {
        self.offset + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub alignment: u64,
    pub workspace_size: u64,
    pub groups: Vec<PlanEntry>,
}

impl MemoryPlan {
    fn from_offsets(table: &LifetimeTable, alignment: u64, offsets: &[u64]) -> Self {
        let groups: Vec<PlanEntry> = table
            .groups
            .iter()
            .zip(offsets)
            .map(|(g, &offset)| PlanEntry {
                id: g.id,
                offset,
                size: g.size,
                def: g.def,
                last_use: g.last_use,
                tag: g.tag,
            })
            .collect();
        let workspace_size = groups.iter().map(PlanEntry::end).max().unwrap_or(0);
        MemoryPlan { alignment, workspace_size, groups }
    }

    pub fn entry(&self, id: usize) -> Option<&PlanEntry> {
        self.groups.get(id).filter(|e| e.id == id).or_else(|| self.groups.iter().find(|e| e.id == id))
    }

    /// Highest address in use at every timeline position.
    pub fn extent_profile(&self, timeline_len: usize) -> Vec<u64> {
        let mut extent = vec![0u64; timeline_len];
        for e in &self.groups {
            for x in &mut extent[e.def..=e.last_use.min(timeline_len.saturating_sub(1))] {
                *x = (*x).max(e.end());
            }
        }
        extent
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub workspace_size: u64,
    pub lower_bound: u64,
    #[serde(with = "micros")]
    pub planning_time: Duration,
    pub group_count: usize,
}

mod micros {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_micros() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_micros)
    }
}

fn align_up(x: u64, a: u64) -> u64 {
    x.div_ceil(a) * a
}

fn check_alignment(alignment: u64) -> Result<(), PlanError> {
    if alignment == 0 || !alignment.is_power_of_two() {
        return Err(PlanError::BadAlignment(alignment));
    }
    Ok(())
}

/// Lowest aligned offset where `size` bytes fit between `occupied` ranges.
/// `occupied` must be sorted by start offset.
fn lowest_gap(occupied: &[(u64, u64)], size: u64, alignment: u64) -> u64 {
    let mut cursor = 0;
    for &(start, end) in occupied {
        if align_up(cursor, alignment) + size <= start {
            break;
        }
        cursor = cursor.max(end);
    }
    align_up(cursor, alignment)
}

/// First-fit placement.
///
/// Groups are placed in `(def asc, size desc, id asc)` order, each at the
/// lowest aligned offset that does not collide with an already placed group
/// whose lifetime overlaps.
pub fn plan_first_fit(table: &LifetimeTable, alignment: u64) -> Result<MemoryPlan, PlanError> {
    check_alignment(alignment)?;
    let groups = &table.groups;
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| (groups[i].def, std::cmp::Reverse(groups[i].size), groups[i].id));

    let mut offsets = vec![0u64; groups.len()];
    let mut placed: Vec<usize> = Vec::with_capacity(groups.len());
    let mut occupied = Vec::new();
    for &i in &order {
        let g = &groups[i];
        occupied.clear();
        occupied.extend(
            placed
                .iter()
                .filter(|&&j| groups[j].overlaps(g) && groups[j].size > 0)
                .map(|&j| (offsets[j], offsets[j] + groups[j].size)),
        );
        occupied.sort_unstable();
        offsets[i] = lowest_gap(&occupied, g.size, alignment);
        placed.push(i);
    }
    Ok(MemoryPlan::from_offsets(table, alignment, &offsets))
}

/// Optimal placement by branch and bound, for small tables.
///
/// Every optimal packing can be replayed by placing its groups in ascending
/// offset order, each at the lowest feasible aligned offset. The search
/// therefore branches over which group to place next, always at its lowest
/// feasible offset (0 or the top of a lifetime-overlapping placed group),
/// pruning branches whose height reaches the incumbent and stopping once the
/// incumbent meets the `max_live` lower bound.
pub fn plan_exact(table: &LifetimeTable, alignment: u64, limit: usize) -> Result<MemoryPlan, PlanError> {
    check_alignment(alignment)?;
    let n = table.len();
    if n > limit {
        return Err(PlanError::TooLarge { groups: n, limit });
    }
    let groups = &table.groups;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (groups[i].def, std::cmp::Reverse(groups[i].size), groups[i].id));
    let sorted: Vec<&StorageGroup> = order.iter().map(|&i| &groups[i]).collect();

    let mut search = Exact {
        groups: sorted,
        alignment,
        lower_bound: max_live(table),
        offsets: vec![None; n],
        best: u64::MAX,
        best_offsets: vec![0; n],
    };
    search.best = search.trivial_bound();
    search.best_offsets = search.stacked_offsets();
    search.dfs(0, None);

    let mut offsets = vec![0u64; n];
    for (k, &i) in order.iter().enumerate() {
        offsets[i] = search.best_offsets[k];
    }
    Ok(MemoryPlan::from_offsets(table, alignment, &offsets))
}

struct Exact<'a> {
    groups: Vec<&'a StorageGroup>,
    alignment: u64,
    lower_bound: u64,
    offsets: Vec<Option<u64>>,
    best: u64,
    best_offsets: Vec<u64>,
}

impl Exact<'_> {
    fn stacked_offsets(&self) -> Vec<u64> {
        let mut acc = 0;
        self.groups
            .iter()
            .map(|g| {
                let o = acc;
                acc = align_up(acc + g.size, self.alignment);
                o
            })
            .collect()
    }

    fn trivial_bound(&self) -> u64 {
        let offs = self.stacked_offsets();
        self.groups.iter().zip(offs).map(|(g, o)| o + g.size).max().unwrap_or(0)
    }

    fn lowest_offset(&self, k: usize) -> u64 {
        let g = self.groups[k];
        let mut occupied: Vec<(u64, u64)> = self
            .offsets
            .iter()
            .enumerate()
            .filter_map(|(j, o)| {
                let o = (*o)?;
                let h = self.groups[j];
                (h.size > 0 && h.overlaps(g)).then_some((o, o + h.size))
            })
            .collect();
        occupied.sort_unstable();
        lowest_gap(&occupied, g.size, self.alignment)
    }

    fn dfs(&mut self, height: u64, prev: Option<usize>) {
        if self.best == self.lower_bound {
            return;
        }
        if self.offsets.iter().all(Option::is_some) {
            if height < self.best {
                self.best = height;
                self.best_offsets = self.offsets.iter().map(|o| o.unwrap()).collect();
            }
            return;
        }
        let n = self.groups.len();
        let mut tried: Vec<(u64, usize, usize)> = Vec::new();
        for k in 0..n {
            if self.offsets[k].is_some() {
                continue;
            }
            let g = self.groups[k];
            // Adjacent placements of lifetime-disjoint groups commute; keep
            // only the ordering with ascending index.
            if let Some(p) = prev {
                if k < p && !self.groups[p].overlaps(g) {
                    continue;
                }
            }
            let key = (g.size, g.def, g.last_use);
            if tried.contains(&key) {
                continue;
            }
            tried.push(key);
            let off = self.lowest_offset(k);
            let h = height.max(off + g.size);
            if h >= self.best {
                continue;
            }
            self.offsets[k] = Some(off);
            self.dfs(h, Some(k));
            self.offsets[k] = None;
            if self.best == self.lower_bound {
                return;
            }
        }
    }
}

/// Runs `plan_first_fit` and records timing and the lower bound.
pub fn plan_with_stats(table: &LifetimeTable, alignment: u64, exact: Option<usize>) -> Result<(MemoryPlan, PlanStats), PlanError> {
    let start = Instant::now();
    let plan = match exact {
        Some(limit) => plan_exact(table, alignment, limit)?,
        None => plan_first_fit(table, alignment)?,
    };
    let stats = PlanStats {
        workspace_size: plan.workspace_size,
        lower_bound: max_live(table),
        planning_time: start.elapsed(),
        group_count: table.len(),
    };
    Ok((plan, stats))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Overlap { a: usize, b: usize },
    Misaligned { group: usize, offset: u64 },
    BeyondWorkspace { group: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a plan against the lifetimes it was made for.
pub fn validate(plan: &MemoryPlan, table: &LifetimeTable) -> Result<ValidationReport, ValidationError> {
    let mut entries = Vec::with_capacity(table.len());
    for g in &table.groups {
        let e = plan.entry(g.id).ok_or(ValidationError::MissingGroup(g.id))?;
        if e.size != g.size {
            return Err(ValidationError::SizeMismatch { id: g.id, plan: e.size, table: g.size });
        }
        entries.push((g, e));
    }
    let mut violations = Vec::new();
    for &(g, e) in &entries {
        if plan.alignment > 0 && e.offset % plan.alignment != 0 {
            violations.push(Violation::Misaligned { group: g.id, offset: e.offset });
        }
        if e.end() > plan.workspace_size {
            violations.push(Violation::BeyondWorkspace { group: g.id });
        }
    }
    for (i, &(g, e)) in entries.iter().enumerate() {
        for &(h, f) in &entries[i + 1..] {
            let addr = e.size > 0 && f.size > 0 && e.offset < f.end() && f.offset < e.end();
            if addr && g.overlaps(h) {
                violations.push(Violation::Overlap { a: g.id, b: h.id });
            }
        }
    }
    Ok(ValidationReport { violations })
}
