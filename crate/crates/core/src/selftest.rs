//! Seeded property suite behind `memplan selftest`.
//!
//! Every case draws from its own RNG, derived from the seed, the property and
//! the case index, so a run is reproducible in full and cases can run in
//! parallel. The first failing case of each property is kept as a
//! counterexample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chunker::{search_bottleneck, search_bruteforce, Objective, SearchOptions, SyntheticPeak};
use crate::kernel::{gather_gemm, gemm_reference, max_rel_error, GatherGemmProblem, Matrix, Tiles};
use crate::liveness::{max_live, LifetimeTable};
use crate::planner::{plan_exact, plan_first_fit, validate, MemoryPlan, PlanError};
use crate::random::{random_graph, GraphParams, RandomGraph};
use crate::vmm::{execute_plan, Backend, Workspace, HOST_PAGE};

pub const DEFAULT_SEED: u64 = 0x6d6f_7361;

/// Deliberate bugs for checking that the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InjectedFault {
    /// Plan against lifetimes that end one op early.
    PlannerOffByOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelftestOptions {
    pub seed: u64,
    pub plan_cases: usize,
    pub oracle_cases: usize,
    pub chunk_cases: usize,
    pub kernel_cases: usize,
    pub vmm_cases: usize,
    pub inject: Option<InjectedFault>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            seed: DEFAULT_SEED,
            plan_cases: 1000,
            oracle_cases: 200,
            chunk_cases: 500,
            kernel_cases: 500,
            vmm_cases: 200,
            inject: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// First failing case, replayable with the same seed.
    pub counterexample: Option<Value>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub inject: Option<InjectedFault>,
    pub properties: Vec<PropertyResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyResult::passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:>7} {:>9}  status\n", "property", "cases", "failures");
        for p in &self.properties {
            let status = if p.passed() { "pass" } else { "FAIL" };
            s += &format!("{:<28} {:>7} {:>9}  {status}\n", p.name, p.cases, p.failures);
        }
        s
    }
}

/// RNG for one case of one property.
pub fn case_rng(seed: u64, property: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(property);
    rng.set_word_pos(case as u128 * (1 << 24));
    ChaCha8Rng::seed_from_u64(rng.gen())
}

fn run_property<F>(name: &str, cases: usize, check: F) -> PropertyResult
where
    F: Fn(usize) -> Result<(), Value> + Sync + Send,
{
    let outcomes: Vec<Result<(), Value>> = (0..cases).into_par_iter().map(&check).collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    let counterexample = outcomes.into_iter().enumerate().find_map(|(i, o)| {
        o.err().map(|mut v| {
            v["case"] = json!(i);
            v
        })
    });
    PropertyResult { name: name.into(), cases, failures, counterexample }
}

fn graph_json(g: &RandomGraph) -> Value {
    json!({
        "template": serde_json::from_str::<Value>(&g.template.to_json()).expect("template JSON"),
        "bindings": g.bindings,
    })
}

/// The injected planner bug: every lifetime loses its last op.
fn off_by_one_plan(table: &LifetimeTable, alignment: u64) -> Result<MemoryPlan, PlanError> {
    let mut short = table.clone();
    for g in &mut short.groups {
        g.last_use = g.last_use.saturating_sub(1).max(g.def);
    }
    plan_first_fit(&short, alignment)
}

pub fn run(opts: &SelftestOptions) -> SelftestReport {
    let seed = opts.seed;
    let mut properties = Vec::new();

    properties.push(run_property("plan_validity", opts.plan_cases, |i| {
        let mut rng = case_rng(seed, 1, i);
        let g = random_graph(&mut rng, GraphParams::default());
        let alignment = [1, 8, 256][rng.gen_range(0..3)];
        let plan = match opts.inject {
            Some(InjectedFault::PlannerOffByOne) => off_by_one_plan(&g.table, alignment),
            None => plan_first_fit(&g.table, alignment),
        };
        let fail = |why: Value| {
            let mut v = graph_json(&g);
            v["alignment"] = json!(alignment);
            v["violations"] = why;
            v
        };
        let plan = plan.map_err(|e| fail(json!(e.to_string())))?;
        let report = validate(&plan, &g.table).map_err(|e| fail(json!(e.to_string())))?;
        if report.is_ok() { Ok(()) } else { Err(fail(json!(report.violations))) }
    }));

    properties.push(run_property("oracle_dominance", opts.oracle_cases, |i| {
        let mut rng = case_rng(seed, 2, i);
        let g = random_graph(&mut rng, GraphParams { max_groups: 10, max_ops: 10, loops: true });
        let ff = plan_first_fit(&g.table, 1).map_err(|e| json!(e.to_string()))?;
        let ex = plan_exact(&g.table, 1, 10).map_err(|e| json!(e.to_string()))?;
        let lb = max_live(&g.table);
        let valid = validate(&ex, &g.table).is_ok_and(|r| r.is_ok());
        if lb <= ex.workspace_size && ex.workspace_size <= ff.workspace_size && valid {
            Ok(())
        } else {
            let mut v = graph_json(&g);
            v["first_fit"] = json!(ff.workspace_size);
            v["exact"] = json!(ex.workspace_size);
            v["max_live"] = json!(lb);
            Err(v)
        }
    }));

    properties.push(run_property("chunk_search_equivalence", opts.chunk_cases, |i| {
        let mut rng = case_rng(seed, 3, i);
        let floor = rng.gen_range(1..1000);
        let model = SyntheticPeak { floor, logits: rng.gen_range(0..20_000), ffn: rng.gen_range(0..20_000) };
        let budget = rng.gen_range(floor / 2..3000);
        let k_max = 16;
        let fail = |why: String| json!({"model": model, "budget": budget, "error": why});
        let fast = search_bottleneck(&model, budget, SearchOptions { max_k: k_max }).map_err(|e| fail(e.to_string()))?;
        let brute = search_bruteforce(&model, budget, k_max, Objective::Sum).map_err(|e| fail(e.to_string()))?;
        let bounded = fast.config.is_none_or(|c| fast.evaluations < c.splits());
        if fast.config == brute.config && bounded {
            Ok(())
        } else {
            Err(json!({"model": model, "budget": budget, "bottleneck": fast, "brute": brute}))
        }
    }));

    properties.push(run_property("kernel_oracle", opts.kernel_cases, |i| {
        let mut rng = case_rng(seed, 4, i);
        let (n, d, v) = (rng.gen_range(1..24), rng.gen_range(1..24), rng.gen_range(1..24));
        let mut mat = |r: usize, c: usize| {
            Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<f64>>()).expect("shape")
        };
        let (h, w) = (mat(n, d), mat(d, v));
        let idx: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
        let want = gemm_reference(&h.select_rows(&idx).expect("in range"), &w).expect("dims");
        let tiles = [Tiles::new(1, 1, 1), Tiles::new(2, 3, 5), Tiles::new(4, 8, 4), Tiles::new(32, 32, 32)];
        let mut first: Option<Matrix<f64>> = None;
        for t in tiles {
            let (got, scratch) = gather_gemm(&GatherGemmProblem { h: &h, w: &w, mask_idx: &idx, tiles: t })
                .map_err(|e| json!(e.to_string()))?;
            let same = first.as_ref().is_none_or(|f| f.data() == got.data());
            if max_rel_error(&got, &want) > 1e-12 || !same || scratch.peak > t.scratch_bound() {
                return Err(json!({"n": n, "d": d, "v": v, "mask_idx": idx, "tiles": t, "scratch": scratch}));
            }
            first.get_or_insert(got);
        }
        Ok(())
    }));

    properties.push(run_property("vmm_tightness", opts.vmm_cases, |i| {
        let mut rng = case_rng(seed, 5, i);
        let g = random_graph(&mut rng, GraphParams::default());
        let plan = plan_first_fit(&g.table, 256).map_err(|e| json!(e.to_string()))?;
        let backend = if i % 10 == 0 { Backend::Os } else { Backend::Sim };
        let fail = |why: String| {
            let mut v = graph_json(&g);
            v["error"] = json!(why);
            v
        };
        let mut ws = Workspace::reserve(1 << 30, HOST_PAGE, backend).map_err(|e| fail(e.to_string()))?;
        ws.commit_to(plan.workspace_size).map_err(|e| fail(e.to_string()))?;
        if ws.committed_bytes() - plan.workspace_size >= ws.page_size() {
            return Err(fail(format!("committed {} for workspace {}", ws.committed_bytes(), plan.workspace_size)));
        }
        let report = execute_plan(&mut ws, &plan, &g.graph).map_err(|e| fail(e.to_string()))?;
        if report.is_clean() {
            Ok(())
        } else {
            Err(fail(serde_json::to_string(&report.faults).expect("faults serialize")))
        }
    }));

    SelftestReport { seed, inject: opts.inject, properties }
}
