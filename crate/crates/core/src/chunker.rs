//! Lazy chunking: pick the smallest `(K_logits, K_FFN)` whose planned peak
//! fits a memory budget.
//!
//! Chunking starts disabled at `(1, 1)`. The bottleneck-driven search only
//! ever increments the chunk count of the component that owns the current
//! peak, since shrinking any other component cannot lower it. The exhaustive
//! grid search is kept as a reference.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::error::Result;
use crate::graph::{Bindings, FrozenTemplate};
use crate::liveness::analyze;
use crate::planner::plan_first_fit;

pub const K_LOGITS: &str = "K_logits";
pub const K_FFN: &str = "K_FFN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub k_logits: u32,
    pub k_ffn: u32,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig::DISABLED
    }
}

impl ChunkConfig {
    pub const DISABLED: ChunkConfig = ChunkConfig { k_logits: 1, k_ffn: 1 };

    pub fn new(k_logits: u32, k_ffn: u32) -> Self {
        assert!(k_logits >= 1 && k_ffn >= 1, "chunk counts start at 1");
        ChunkConfig { k_logits, k_ffn }
    }

    pub fn get(self, c: Component) -> Option<u32> {
        match c {
            Component::Logits => Some(self.k_logits),
            Component::Ffn => Some(self.k_ffn),
            _ => None,
        }
    }

    fn bumped(self, c: Component) -> ChunkConfig {
        match c {
            Component::Logits => ChunkConfig { k_logits: self.k_logits + 1, ..self },
            Component::Ffn => ChunkConfig { k_ffn: self.k_ffn + 1, ..self },
            _ => self,
        }
    }

    /// Sum of chunk counts; the default minimality objective.
    pub fn splits(self) -> u32 {
        self.k_logits + self.k_ffn
    }

    /// Extra-launch cost of chunking: `(k_logits + k_ffn - 2) * eps`.
    pub fn overhead_score(self, eps: f64) -> f64 {
        f64::from(self.splits() - 2) * eps
    }

    pub fn apply(self, bindings: &Bindings) -> Bindings {
        let mut b = bindings.clone();
        b.insert(K_LOGITS.to_string(), u64::from(self.k_logits));
        b.insert(K_FFN.to_string(), u64::from(self.k_ffn));
        b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakReport {
    /// Planned workspace size: the highest address in use at any instant.
    pub total_peak: u64,
    /// Per-component peak of the bytes held by that component's tensors.
    pub components: BTreeMap<Component, u64>,
    /// Per-component peak of the total footprint while that component's ops run.
    pub phase_peaks: BTreeMap<Component, u64>,
    /// Component whose op runs at the peak instant.
    pub bottleneck: Component,
    /// Highest footprint reached while only non-chunkable components run.
    pub floor: u64,
}

/// Anything that can report the planned peak for a chunk configuration.
pub trait PeakModel: Sync {
    fn evaluate(&self, config: ChunkConfig) -> Result<PeakReport>;
}

/// Peak model backed by a graph template, the liveness pass and the
/// first-fit planner.
#[derive(Debug, Clone)]
pub struct TemplatePeak<'a> {
    pub template: &'a FrozenTemplate,
    pub bindings: Bindings,
    pub alignment: u64,
}

impl PeakModel for TemplatePeak<'_> {
    fn evaluate(&self, config: ChunkConfig) -> Result<PeakReport> {
        evaluate_peak(self.template, &self.bindings, config, self.alignment)
    }
}

pub fn evaluate_peak(template: &FrozenTemplate, bindings: &Bindings, config: ChunkConfig, alignment: u64) -> Result<PeakReport> {
    let graph = template.instantiate(&config.apply(bindings))?;
    let table = analyze(&graph)?;
    let plan = plan_first_fit(&table, alignment)?;
    let t_len = table.timeline_len;
    let extent = plan.extent_profile(t_len);

    let mut tag_diff: BTreeMap<Component, Vec<i128>> = BTreeMap::new();
    for g in &table.groups {
        let d = tag_diff.entry(g.tag).or_insert_with(|| vec![0; t_len + 1]);
        d[g.def] += i128::from(g.size);
        d[g.last_use + 1] -= i128::from(g.size);
    }
    let components = tag_diff
        .into_iter()
        .map(|(c, d)| {
            let mut acc = 0i128;
            let peak = d.iter().map(|x| {
                acc += x;
                acc
            });
            (c, peak.max().unwrap_or(0) as u64)
        })
        .collect();

    let mut phase_peaks: BTreeMap<Component, u64> = BTreeMap::new();
    let mut peak_pos = 0;
    for (t, &e) in extent.iter().enumerate() {
        let p = phase_peaks.entry(graph.ops[t].component).or_default();
        *p = (*p).max(e);
        if e > extent[peak_pos] {
            peak_pos = t;
        }
    }
    let floor = phase_peaks
        .iter()
        .filter(|(c, _)| !c.is_chunkable())
        .map(|(_, &p)| p)
        .max()
        .unwrap_or(0);
    Ok(PeakReport {
        total_peak: plan.workspace_size,
        components,
        phase_peaks,
        bottleneck: graph.ops.get(peak_pos).map(|o| o.component).unwrap_or_default(),
        floor,
    })
}

/// Closed-form peak model: `max(floor, ceil(logits / K_logits), ceil(ffn / K_FFN))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPeak {
    pub floor: u64,
    pub logits: u64,
    pub ffn: u64,
}

impl PeakModel for SyntheticPeak {
    fn evaluate(&self, c: ChunkConfig) -> Result<PeakReport> {
        let logits = self.logits.div_ceil(u64::from(c.k_logits));
        let ffn = self.ffn.div_ceil(u64::from(c.k_ffn));
        let total = self.floor.max(logits).max(ffn);
        let bottleneck = if self.floor >= total {
            Component::Other
        } else if logits >= ffn {
            Component::Logits
        } else {
            Component::Ffn
        };
        let components: BTreeMap<_, _> =
            [(Component::Other, self.floor), (Component::Logits, logits), (Component::Ffn, ffn)].into();
        Ok(PeakReport {
            total_peak: total,
            phase_peaks: components.clone(),
            components,
            bottleneck,
            floor: self.floor,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infeasibility {
    /// The peak sits on a component chunking cannot shrink.
    Floor,
    /// The bottleneck's chunk count hit the search cap.
    ChunkCap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchOutcome {
    /// `None` when no configuration fits.
    pub config: Option<ChunkConfig>,
    /// Last configuration evaluated (the answer when feasible).
    pub last_config: ChunkConfig,
    pub evaluations: u32,
    pub final_peak: u64,
    pub floor: u64,
    pub infeasibility: Option<Infeasibility>,
}

impl SearchOutcome {
    pub fn is_feasible(&self) -> bool {
        self.config.is_some()
    }
}

impl Serialize for SearchOutcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire {
            k_logits: Option<u32>,
            k_ffn: Option<u32>,
            evaluations: u32,
            final_peak: u64,
            floor: u64,
            feasible: bool,
        }
        Wire {
            k_logits: self.config.map(|c| c.k_logits),
            k_ffn: self.config.map(|c| c.k_ffn),
            evaluations: self.evaluations,
            final_peak: self.final_peak,
            floor: self.floor,
            feasible: self.is_feasible(),
        }
        .serialize(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    /// Largest chunk count either component may reach.
    pub max_k: u32,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { max_k: 1024 }
    }
}

/// Online bottleneck-driven search.
pub fn search_bottleneck(model: &dyn PeakModel, budget: u64, opts: SearchOptions) -> Result<SearchOutcome> {
    let mut config = ChunkConfig::DISABLED;
    let mut report = model.evaluate(config)?;
    let mut evaluations = 1;
    loop {
        let b = report.bottleneck;
        let infeasibility = if report.total_peak <= budget {
            None
        } else if !b.is_chunkable() || report.total_peak <= report.floor {
            Some(Infeasibility::Floor)
        } else if config.get(b).unwrap() >= opts.max_k {
            Some(Infeasibility::ChunkCap)
        } else {
            config = config.bumped(b);
            report = model.evaluate(config)?;
            evaluations += 1;
            continue;
        };
        return Ok(SearchOutcome {
            config: infeasibility.is_none().then_some(config),
            last_config: config,
            evaluations,
            final_peak: report.total_peak,
            floor: report.floor,
            infeasibility,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Fewest total splits, `k_logits + k_ffn`.
    #[default]
    Sum,
    /// Smallest largest chunk count.
    Max,
}

/// Exhaustive search over `[1, k_max]^2`; evaluates every grid point.
pub fn search_bruteforce(model: &dyn PeakModel, budget: u64, k_max: u32, objective: Objective) -> Result<SearchOutcome> {
    assert!(k_max >= 1);
    let grid: Vec<ChunkConfig> = (1..=k_max)
        .flat_map(|l| (1..=k_max).map(move |f| ChunkConfig::new(l, f)))
        .collect();
    let reports: Vec<PeakReport> = grid
        .par_iter()
        .map(|&c| model.evaluate(c))
        .collect::<Result<_>>()?;
    let score = |c: ChunkConfig| match objective {
        Objective::Sum => c.splits(),
        Objective::Max => c.k_logits.max(c.k_ffn),
    };
    let best = grid
        .iter()
        .zip(&reports)
        .filter(|(_, r)| r.total_peak <= budget)
        .min_by_key(|(c, _)| (score(**c), c.k_logits, c.k_ffn));
    let evaluations = grid.len() as u32;
    Ok(match best {
        Some((&c, r)) => SearchOutcome {
            config: Some(c),
            last_config: c,
            evaluations,
            final_peak: r.total_peak,
            floor: r.floor,
            infeasibility: None,
        },
        None => {
            let last = reports.last().unwrap();
            SearchOutcome {
                config: None,
                last_config: *grid.last().unwrap(),
                evaluations,
                final_peak: last.total_peak,
                floor: last.floor,
                infeasibility: Some(if last.total_peak <= last.floor {
                    Infeasibility::Floor
                } else {
                    Infeasibility::ChunkCap
                }),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1 << 20;

    fn synth(floor: u64, logits: u64, ffn: u64) -> SyntheticPeak {
        SyntheticPeak { floor: floor * MB, logits: logits * MB, ffn: ffn * MB }
    }

    #[test]
    fn bottleneck_search_hand_run() {
        let out = search_bottleneck(&synth(96, 400, 200), 250 * MB, SearchOptions::default()).unwrap();
        assert_eq!(out.config, Some(ChunkConfig::new(2, 1)));
        assert_eq!(out.final_peak, 200 * MB);
        assert_eq!(out.evaluations, 2);
    }

    #[test]
    fn below_floor_is_infeasible() {
        let m = synth(96, 400, 200);
        let out = search_bottleneck(&m, 90 * MB, SearchOptions::default()).unwrap();
        assert_eq!(out.config, None);
        assert_eq!(out.infeasibility, Some(Infeasibility::Floor));
        assert!(out.floor > 90 * MB);
        let bf = search_bruteforce(&m, 90 * MB, 8, Objective::Sum).unwrap();
        assert_eq!(bf.config, None);
    }

    #[test]
    fn lazy_when_budget_suffices() {
        let out = search_bottleneck(&synth(96, 400, 200), 400 * MB, SearchOptions::default()).unwrap();
        assert_eq!(out.config, Some(ChunkConfig::DISABLED));
        assert_eq!(out.evaluations, 1);
    }

    #[test]
    fn bruteforce_matches_hand_cases() {
        let bf = search_bruteforce(&synth(96, 400, 200), 250 * MB, 64, Objective::Sum).unwrap();
        assert_eq!(bf.config, Some(ChunkConfig::new(2, 1)));
        assert_eq!(bf.evaluations, 64 * 64);
        let bf = search_bruteforce(&synth(50, 100, 300), 160 * MB, 16, Objective::Sum).unwrap();
        assert_eq!(bf.config, Some(ChunkConfig::new(1, 2)));
        let bb = search_bottleneck(&synth(50, 100, 300), 160 * MB, SearchOptions::default()).unwrap();
        assert_eq!(bb.config, bf.config);
    }

    #[test]
    fn chunk_cap_stops_search() {
        let out = search_bottleneck(&synth(1, 1000, 1), 10 * MB, SearchOptions { max_k: 4 }).unwrap();
        assert_eq!(out.infeasibility, Some(Infeasibility::ChunkCap));
        assert_eq!(out.last_config, ChunkConfig::new(4, 1));
    }

    #[test]
    fn outcome_wire_format() {
        let out = search_bottleneck(&synth(96, 400, 200), 250 * MB, SearchOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&out).unwrap();
        assert_eq!(v["k_logits"], 2);
        assert_eq!(v["k_ffn"], 1);
        assert_eq!(v["feasible"], true);
        assert_eq!(v["floor"], 96 * MB);
    }

    #[test]
    fn overhead_score_counts_extra_splits() {
        assert_eq!(ChunkConfig::DISABLED.overhead_score(0.5), 0.0);
        assert_eq!(ChunkConfig::new(3, 2).overhead_score(0.5), 1.5);
    }
}
