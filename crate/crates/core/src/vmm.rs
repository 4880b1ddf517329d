//! Contiguous virtual workspace with lazily committed physical pages.
//!
//! A [`Workspace`] reserves one virtual range up front and commits a prefix
//! of it, page by page, up to whatever the current plan needs. The OS backend
//! maps the range `PROT_NONE` and flips the committed prefix read/write; the
//! simulated backend keeps the same accounting without touching memory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ConcreteGraph;
use crate::liveness::{analyze, LifetimeTable};
use crate::planner::MemoryPlan;

pub const HOST_PAGE: u64 = 64 << 10;
pub const DEVICE_PAGE: u64 = 2 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmmError {
    #[error("cannot reserve {bytes} bytes: {reason}")]
    Resource { bytes: u64, reason: String },
    #[error("commit of {requested} bytes exceeds the {reserved}-byte reservation")]
    Capacity { requested: u64, reserved: u64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Accounting only.
    #[default]
    Sim,
    /// A real anonymous mapping.
    Os,
}

#[derive(Debug)]
struct Mapping {
    base: *mut u8,
    len: usize,
}

// The mapping is owned exclusively by its workspace.
unsafe impl Send for Mapping {}

impl Drop for Mapping {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.base.cast(), self.len);
        }
    }
}

#[derive(Debug)]
pub struct Workspace {
    reserved_bytes: u64,
    committed_bytes: u64,
    page_size: u64,
    mapping: Option<Mapping>,
}

fn os_page_size() -> u64 {
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 { p as u64 } else { 4096 }
}

fn os_error(what: &str) -> String {
    format!("{what}: {}", std::io::Error::last_os_error())
}

impl Workspace {
    /// Reserves `reserved_bytes`, rounded up to a whole page, with nothing committed.
    pub fn reserve(reserved_bytes: u64, page_size: u64, backend: Backend) -> Result<Workspace, VmmError> {
        if !page_size.is_power_of_two() {
            return Err(VmmError::Precondition(format!("page size {page_size} is not a power of two")));
        }
        if reserved_bytes == 0 {
            return Err(VmmError::Precondition("reservation must be positive".into()));
        }
        let reserved_bytes = reserved_bytes
            .checked_next_multiple_of(page_size)
            .ok_or_else(|| VmmError::Resource { bytes: reserved_bytes, reason: "size overflows".into() })?;
        let mapping = match backend {
            Backend::Sim => None,
            Backend::Os => {
                if page_size & (os_page_size() - 1) != 0 {
                    return Err(VmmError::Precondition(format!(
                        "page size {page_size} is not a multiple of the host page {}",
                        os_page_size()
                    )));
                }
                let len = usize::try_from(reserved_bytes)
                    .map_err(|_| VmmError::Resource { bytes: reserved_bytes, reason: "exceeds address space".into() })?;
                let base = unsafe {
                    libc::mmap(
                        std::ptr::null_mut(),
                        len,
                        libc::PROT_NONE,
                        libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                        -1,
                        0,
                    )
                };
                if base == libc::MAP_FAILED {
                    return Err(VmmError::Resource { bytes: reserved_bytes, reason: os_error("mmap") });
                }
                Some(Mapping { base: base.cast(), len })
            }
        };
        Ok(Workspace { reserved_bytes, committed_bytes: 0, page_size, mapping })
    }

    pub fn backend(&self) -> Backend {
        if self.mapping.is_some() { Backend::Os } else { Backend::Sim }
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved_bytes
    }

    pub fn committed_bytes(&self) -> u64 {
        self.committed_bytes
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    /// Grows or shrinks the committed prefix to `ceil(target / page) * page`.
    pub fn commit_to(&mut self, target_bytes: u64) -> Result<(), VmmError> {
        if target_bytes > self.reserved_bytes {
            return Err(VmmError::Capacity { requested: target_bytes, reserved: self.reserved_bytes });
        }
        let new = target_bytes.next_multiple_of(self.page_size);
        let old = self.committed_bytes;
        if let Some(m) = &self.mapping {
            let (lo, hi) = (old.min(new) as usize, old.max(new) as usize);
            if lo != hi {
                let at = unsafe { m.base.add(lo) }.cast();
                let len = hi - lo;
                if new > old {
                    if unsafe { libc::mprotect(at, len, libc::PROT_READ | libc::PROT_WRITE) } != 0 {
                        return Err(VmmError::Resource { bytes: new, reason: os_error("mprotect") });
                    }
                } else {
                    let ok = unsafe {
                        libc::madvise(at, len, libc::MADV_DONTNEED) == 0 && libc::mprotect(at, len, libc::PROT_NONE) == 0
                    };
                    if !ok {
                        return Err(VmmError::Resource { bytes: new, reason: os_error("decommit") });
                    }
                }
            }
        }
        self.committed_bytes = new;
        Ok(())
    }

    /// The committed prefix; empty for the simulated backend.
    fn committed_slice(&mut self) -> &mut [u8] {
        match &self.mapping {
            Some(m) => unsafe { std::slice::from_raw_parts_mut(m.base, self.committed_bytes as usize) },
            None => &mut [],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// A group's range reaches past the planned workspace.
    OutOfRange { group: usize, end: u64, workspace_size: u64 },
    /// `victim` was still live when `writer` overwrote part of it.
    Clobber { victim: usize, writer: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionFault {
    pub op_index: usize,
    pub op: String,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub ops_executed: usize,
    pub faults: Vec<ExecutionFault>,
    pub committed_bytes: u64,
    pub workspace_size: u64,
}

impl ExecutionReport {
    pub fn is_clean(&self) -> bool {
        self.faults.is_empty()
    }
}

/// 8-byte canary for a group.
fn canary(group: usize) -> [u8; 8] {
    (group as u64 ^ 0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9).to_le_bytes()
}

/// Walks the ops of `g` in order against the placement in `plan`.
///
/// Each op reads its input groups and writes its output groups. A write
/// stamps the group's canary over its whole range; a read checks it. After
/// each write, every other live group sharing addresses with the written
/// range is checked too, so a clobber is caught even if the victim is never
/// read again. The simulated backend derives the same faults from the plan
/// alone.
pub fn execute_plan(ws: &mut Workspace, plan: &MemoryPlan, g: &ConcreteGraph) -> crate::error::Result<ExecutionReport> {
    let table = analyze(g)?;
    let touches: Vec<(Vec<usize>, Vec<usize>)> = g
        .ops
        .iter()
        .map(|op| {
            let map = |ts: &[usize]| {
                let mut v: Vec<usize> = ts.iter().filter_map(|&t| table.group_of(t)).collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            (map(&op.inputs), map(&op.outputs))
        })
        .collect();
    let names: Vec<String> = (0..g.ops.len()).map(|i| g.op_name(i)).collect();
    Ok(execute_table(ws, plan, &table, &touches, &names)?)
}

/// [`execute_plan`] over a bare lifetime table. `touches[t]` lists the groups
/// read and written by op `t`; `names[t]` labels faults.
pub fn execute_table(
    ws: &mut Workspace,
    plan: &MemoryPlan,
    table: &LifetimeTable,
    touches: &[(Vec<usize>, Vec<usize>)],
    names: &[String],
) -> Result<ExecutionReport, VmmError> {
    if ws.committed_bytes < plan.workspace_size {
        return Err(VmmError::Precondition(format!(
            "plan needs {} bytes but only {} are committed",
            plan.workspace_size, ws.committed_bytes
        )));
    }
    if touches.len() != table.timeline_len || names.len() != touches.len() {
        return Err(VmmError::Precondition("touch list does not match the timeline".into()));
    }
    let range = |id: usize| plan.entry(id).map(|e| (e.offset, e.offset + e.size));
    let groups = &table.groups;
    let workspace_size = plan.workspace_size;
    let os = ws.backend() == Backend::Os;
    let mem = ws.committed_slice();

    let mut faults = Vec::new();
    let mut written = vec![false; groups.len()];
    let mut out_of_range = vec![false; groups.len()];
    let mut reported = std::collections::BTreeSet::new();
    for (t, (reads, writes)) in touches.iter().enumerate() {
        let mut fault = |kind: FaultKind| faults.push(ExecutionFault { op_index: t, op: names[t].clone(), kind });
        for &id in reads.iter().chain(writes) {
            let Some((_, end)) = range(id) else { continue };
            if end > workspace_size && !out_of_range[id] {
                out_of_range[id] = true;
                fault(FaultKind::OutOfRange { group: id, end, workspace_size });
            }
        }
        let usable = |id: usize| matches!(range(id), Some((s, e)) if e <= workspace_size && e > s) && !out_of_range[id];

        if os {
            for &id in reads.iter().filter(|&&id| written[id] && usable(id)) {
                let (s, e) = range(id).unwrap();
                if !holds_canary(&mem[s as usize..e as usize], id) {
                    let writer = last_writer(table, plan, id, t).unwrap_or(id);
                    if reported.insert((id, writer)) {
                        fault(FaultKind::Clobber { victim: id, writer });
                    }
                }
            }
        }
        for &id in writes.iter().filter(|&&id| usable(id)) {
            let (s, e) = range(id).unwrap();
            if os {
                let c = canary(id);
                for (i, b) in mem[s as usize..e as usize].iter_mut().enumerate() {
                    *b = c[i % 8];
                }
            }
            written[id] = true;
            for victim in (0..groups.len()).filter(|&v| v != id && written[v] && groups[v].is_live_at(t) && usable(v)) {
                let (vs, ve) = range(victim).unwrap();
                if vs >= e || s >= ve {
                    continue;
                }
                let clobbered = if os {
                    let (lo, hi) = (vs.max(s) as usize, ve.min(e) as usize);
                    !holds_canary_at(&mem[lo..hi], victim, lo - vs as usize)
                } else {
                    true
                };
                if clobbered && reported.insert((victim, id)) {
                    fault(FaultKind::Clobber { victim, writer: id });
                }
            }
        }
    }
    Ok(ExecutionReport { ops_executed: touches.len(), faults, committed_bytes: ws.committed_bytes, workspace_size })
}

fn holds_canary(bytes: &[u8], group: usize) -> bool {
    holds_canary_at(bytes, group, 0)
}

/// `bytes` starts `skew` bytes into the group's range.
fn holds_canary_at(bytes: &[u8], group: usize, skew: usize) -> bool {
    let c = canary(group);
    bytes.iter().enumerate().all(|(i, &b)| b == c[(i + skew) % 8])
}

/// Most recently defined live group that overlaps `victim` in address.
fn last_writer(table: &LifetimeTable, plan: &MemoryPlan, victim: usize, t: usize) -> Option<usize> {
    let v = plan.entry(victim)?;
    table
        .groups
        .iter()
        .filter(|g| g.id != victim && g.def <= t && g.def >= table.groups[victim].def)
        .filter(|g| plan.entry(g.id).is_some_and(|e| e.offset < v.end() && v.offset < e.end()))
        .max_by_key(|g| g.def)
        .map(|g| g.id)
}
