//! Acceptance suite: one numbered criterion per check, each printing a single
//! PASS/FAIL line. Run with `cargo test -p memplan --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use memplan::allocsim::{run_myopic, run_myopic_on, AllocatorConfig, BreakPolicy, CachingAllocator, EventKind};
use memplan::chunker::{
    evaluate_peak, search_bottleneck, search_bruteforce, ChunkConfig, Objective, PeakModel, PeakReport, SearchOptions,
};
use memplan::graph::{bindings, FrozenTemplate};
use memplan::kernel::{gather_gemm, gather_gemm_par, gemm_reference, max_rel_error, GatherGemmProblem, Matrix, Tiles};
use memplan::liveness::{analyze, LifetimeTable};
use memplan::planner::{plan_exact, plan_first_fit, validate, MemoryPlan, DEFAULT_ALIGNMENT};
use memplan::random::{random_graph, GraphParams};
use memplan::vmm::{execute_plan, Backend, FaultKind, Workspace, DEVICE_PAGE, HOST_PAGE};
use memplan::workload::{
    build_layer_template, find_lmax, par_curve, FeatureSet, LogitsMode, ModelConfig, ScenarioConfig, ShiftMode,
};
use memplan::Component;

const SEED: u64 = 0x00ac_ce97;
const MIB: u64 = 1 << 20;

type Check = Result<String, String>;

fn rng(stream: u64, case: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED ^ (stream << 48) ^ case as u64)
}

fn presets() -> Vec<ModelConfig> {
    ModelConfig::toy_presets()
}

fn short(cfg: &ModelConfig) -> &str {
    cfg.name.split_whitespace().next().unwrap_or(&cfg.name)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

/// Independent soundness oracle: lifetime-overlapping groups never share bytes,
/// every offset is aligned and every group sits inside the workspace.
fn overlap_free(plan: &MemoryPlan, table: &LifetimeTable) -> Result<(), String> {
    let mut at: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for e in &plan.groups {
        at.insert(e.id, (e.offset, e.size));
    }
    for g in &table.groups {
        let &(o, s) = at.get(&g.id).ok_or(format!("group {} unplaced", g.id))?;
        ensure(s == g.size, || format!("group {} size {s} != {}", g.id, g.size))?;
        ensure(o % plan.alignment.max(1) == 0, || format!("group {} offset {o} unaligned", g.id))?;
        ensure(o + s <= plan.workspace_size, || format!("group {} ends past the workspace", g.id))?;
    }
    for (i, a) in table.groups.iter().enumerate() {
        for b in &table.groups[i + 1..] {
            let live = a.def <= b.last_use && b.def <= a.last_use;
            let (ao, bo) = (at[&a.id].0, at[&b.id].0);
            let bytes = ao < bo + b.size && bo < ao + a.size && a.size > 0 && b.size > 0;
            ensure(!(live && bytes), || format!("groups {} and {} collide", a.id, b.id))?;
        }
    }
    Ok(())
}

fn sweep_max_live(table: &LifetimeTable) -> u64 {
    let end = table.groups.iter().map(|g| g.last_use + 1).max().unwrap_or(0);
    (0..end)
        .map(|t| table.groups.iter().filter(|g| g.def <= t && t <= g.last_use).map(|g| g.size).sum())
        .max()
        .unwrap_or(0)
}

fn c1_plan_soundness() -> Check {
    let start = Instant::now();
    let n = 1000;
    let errors: Vec<String> = (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let mut r = rng(1, i);
            let g = random_graph(&mut r, GraphParams { max_groups: 64, ..GraphParams::default() });
            let align = [1, 8, 64, 256][i % 4];
            let run = || -> Result<(), String> {
                ensure(g.table.len() <= 64, || format!("{} groups", g.table.len()))?;
                let plan = plan_first_fit(&g.table, align).map_err(|e| e.to_string())?;
                let report = validate(&plan, &g.table).map_err(|e| e.to_string())?;
                ensure(report.is_ok(), || format!("{} violations", report.violations.len()))?;
                overlap_free(&plan, &g.table)
            };
            run().err().map(|e| format!("graph {i}: {e}"))
        })
        .collect();
    ensure(errors.is_empty(), || format!("{} of {n} failed; first: {}", errors.len(), errors[0]))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("{n} graphs, 0 violations, {:.2?}", start.elapsed()))
}

fn c2_oracle_dominance() -> Check {
    let start = Instant::now();
    let n = 200;
    let strict = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(2, i);
            let g = random_graph(&mut r, GraphParams { max_groups: 10, max_ops: 12, loops: true });
            let ff = plan_first_fit(&g.table, 1).map_err(|e| e.to_string())?;
            let ex = plan_exact(&g.table, 1, 10).map_err(|e| e.to_string())?;
            overlap_free(&ex, &g.table).map_err(|e| format!("exact plan {i}: {e}"))?;
            let lb = sweep_max_live(&g.table);
            ensure(lb <= ex.workspace_size && ex.workspace_size <= ff.workspace_size, || {
                format!("case {i}: max_live {lb}, exact {}, first-fit {}", ex.workspace_size, ff.workspace_size)
            })?;
            Ok(usize::from(ex.workspace_size < ff.workspace_size))
        })
        .collect::<Result<Vec<usize>, String>>()?
        .into_iter()
        .sum::<usize>();

    let mut chains = 0;
    for cfg in presets() {
        for logits in [LogitsMode::Eager, LogitsMode::MaskOnly] {
            for shift in [ShiftMode::None, ShiftMode::Concat, ShiftMode::InPlace] {
                let t = build_layer_template(&cfg.with_variants(logits, shift)).map_err(|e| e.to_string())?;
                for (l, m) in [(64, 32), (1024, 100), (4096, 2048)] {
                    for c in [ChunkConfig::DISABLED, ChunkConfig::new(2, 3), ChunkConfig::new(4, 1)] {
                        let g = t.instantiate(&c.apply(&bindings([("L", l), ("M", m)]))).map_err(|e| e.to_string())?;
                        let table = analyze(&g).map_err(|e| e.to_string())?;
                        let ff = plan_first_fit(&table, 1).map_err(|e| e.to_string())?.workspace_size;
                        let ex = plan_exact(&table, 1, usize::MAX).map_err(|e| e.to_string())?.workspace_size;
                        let lb = sweep_max_live(&table);
                        ensure(ff == lb && ex == lb, || {
                            format!("{} {logits:?}/{shift:?} L={l} M={m} {c:?}: ff {ff} exact {ex} max_live {lb}", short(&cfg))
                        })?;
                        chains += 1;
                    }
                }
            }
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{n} random cases (exact < first-fit on {strict}), {chains} layer graphs with first-fit = exact = max_live, {:.2?}",
        start.elapsed()
    ))
}

/// All 256 grid points of one instance, evaluated once and shared by both searches.
struct Grid(BTreeMap<(u32, u32), PeakReport>);

impl PeakModel for Grid {
    fn evaluate(&self, c: ChunkConfig) -> memplan::Result<PeakReport> {
        Ok(self.0[&(c.k_logits, c.k_ffn)].clone())
    }
}

impl Grid {
    fn component(&self, kl: u32, kf: u32, c: Component) -> u64 {
        self.0[&(kl, kf)].components.get(&c).copied().unwrap_or(0)
    }

    /// Each chunked component's bytes strictly shrink with its own chunk count.
    fn monotone(&self, k_max: u32) -> bool {
        (1..k_max).all(|k| {
            self.component(k + 1, 1, Component::Logits) < self.component(k, 1, Component::Logits)
                && self.component(1, k + 1, Component::Ffn) < self.component(1, k, Component::Ffn)
        })
    }
}

fn c3_chunk_search() -> Check {
    let start = Instant::now();
    const K_MAX: u32 = 16;
    let mut instances = Vec::new();
    for cfg in presets() {
        let t = build_layer_template(&cfg).map_err(|e| e.to_string())?;
        for l in [1024u64, 2048, 4096, 8192] {
            for tenth in 1..=9u64 {
                instances.push((cfg.clone(), t.clone(), l, (l * tenth + 5) / 10));
            }
        }
    }
    let eval = |t: &FrozenTemplate, l: u64, m: u64| -> Result<Grid, String> {
        let b = bindings([("L", l), ("M", m)]);
        let pts: Vec<(u32, u32)> = (1..=K_MAX).flat_map(|a| (1..=K_MAX).map(move |f| (a, f))).collect();
        let reports = pts
            .par_iter()
            .map(|&(a, f)| evaluate_peak(t, &b, ChunkConfig::new(a, f), DEFAULT_ALIGNMENT).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Grid(pts.into_iter().zip(reports).collect()))
    };

    #[derive(Default)]
    struct Tally {
        cases: usize,
        monotone: usize,
        feasible: usize,
        min_reduction: f64,
    }
    let mut tally = Tally { min_reduction: f64::INFINITY, ..Tally::default() };
    for (cfg, t, l, m) in &instances {
        let grid = eval(t, *l, *m)?;
        let monotone = grid.monotone(K_MAX);
        let top = grid.0[&(1, 1)].total_peak;
        let floor = grid.0[&(1, 1)].floor;
        let best = grid.0.values().map(|r| r.total_peak).min().unwrap();
        let mut budgets = vec![floor.saturating_sub(1), floor, best.saturating_sub(1), best, top, top + 1];
        budgets.extend((1..8).map(|j| best + (top.saturating_sub(best)) * j / 8));
        budgets.sort_unstable();
        budgets.dedup();
        for budget in budgets {
            let ctx = || format!("{} L={l} M={m} budget={budget}", short(cfg));
            let fast = search_bottleneck(&grid, budget, SearchOptions { max_k: K_MAX }).map_err(|e| e.to_string())?;
            let brute = search_bruteforce(&grid, budget, K_MAX, Objective::Sum).map_err(|e| e.to_string())?;
            ensure(fast.is_feasible() == brute.is_feasible(), || format!("{}: feasibility differs", ctx()))?;
            tally.cases += 1;
            if let (Some(f), Some(b)) = (fast.config, brute.config) {
                tally.feasible += 1;
                ensure(fast.final_peak <= budget && brute.final_peak <= budget, || format!("{}: over budget", ctx()))?;
                ensure(f.splits() <= b.splits() + 1, || format!("{}: {f:?} vs {b:?}", ctx()))?;
                ensure(fast.evaluations <= b.splits(), || format!("{}: {} evaluations", ctx(), fast.evaluations))?;
                if monotone {
                    ensure(f == b, || format!("{}: bottleneck {f:?} brute {b:?}", ctx()))?;
                }
                if b.splits() <= 25 {
                    let reduction = f64::from(brute.evaluations) / f64::from(fast.evaluations);
                    ensure(brute.evaluations == K_MAX * K_MAX && reduction >= 10.0, || {
                        format!("{}: reduction {reduction:.1}", ctx())
                    })?;
                    tally.min_reduction = tally.min_reduction.min(reduction);
                }
            }
            tally.monotone += usize::from(monotone);
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{} searches ({} monotone, {} feasible), min evaluation reduction {:.1}x, {:.2?}",
        tally.cases,
        tally.monotone,
        tally.feasible,
        tally.min_reduction,
        start.elapsed()
    ))
}

/// First masked count at which logits overtakes FFN as the peak component,
/// after checking the peak sits on FFN below it and on logits from it on.
fn flip_point(cfg: &ModelConfig, l: u64) -> Result<u64, String> {
    let t = build_layer_template(cfg).map_err(|e| e.to_string())?;
    let bottleneck: Vec<Component> = (1..=l)
        .into_par_iter()
        .map(|m| {
            evaluate_peak(&t, &bindings([("L", l), ("M", m)]), ChunkConfig::DISABLED, 1)
                .map(|r| r.bottleneck)
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let flip = bottleneck.iter().position(|&c| c == Component::Logits).map(|i| i as u64 + 1);
    let flip = flip.ok_or_else(|| "logits never dominates".to_string())?;
    let (below, above) = bottleneck.split_at(flip as usize - 1);
    ensure(below.iter().all(|&c| c == Component::Ffn), || format!("non-FFN peak below M={flip}"))?;
    ensure(above.iter().all(|&c| c == Component::Logits), || format!("peak leaves logits above M={flip}"))?;
    Ok(flip)
}

fn c4_peak_toggling() -> Check {
    let l = 4096u64;
    let mut parts = Vec::new();
    for cfg in presets() {
        let planned = FeatureSet::GLOBAL_MASK.model(&cfg);
        let m_star = planned.ffn_peak_bytes(l).div_ceil(planned.logits_row_bytes());
        let flip = flip_point(&planned, l).map_err(|e| format!("{}: {e}", short(&cfg)))?;
        ensure(flip.abs_diff(m_star) <= 1, || format!("{}: flips at {flip}, closed form {m_star}", short(&cfg)))?;
        let mut line = format!("{} M*={m_star} flip={flip}", short(&cfg));
        if cfg.variants.shift_mode == ShiftMode::Concat {
            let raw = cfg.with_variants(LogitsMode::MaskOnly, ShiftMode::Concat);
            let m2 = raw.ffn_peak_bytes(l).div_ceil(2 * raw.logits_row_bytes());
            let f2 = flip_point(&raw, l).map_err(|e| format!("{} concat: {e}", short(&cfg)))?;
            ensure(f2.abs_diff(m2) <= 1, || format!("{} concat: flips at {f2}, closed form {m2}", short(&cfg)))?;
            line += &format!(" (concat shift, two logits rows per token: M*={m2} flip={f2})");
        }
        parts.push(line);
    }
    Ok(format!("L={l}, mask-only, K=(1,1): {}", parts.join(", ")))
}

fn c5_feature_ordering() -> Check {
    let mut parts = Vec::new();
    for cfg in presets() {
        let budget = cfg.weights_bytes + 64 * MIB;
        let lmax = |f| find_lmax(&cfg, 0.5, budget, f).map(|r| r.l_max).map_err(|e| e.to_string());
        let (base, g, gm, all) =
            (lmax(FeatureSet::BASELINE)?, lmax(FeatureSet::GLOBAL)?, lmax(FeatureSet::GLOBAL_MASK)?, lmax(FeatureSet::ALL)?);
        ensure(g < gm && gm < all, || format!("{}: global {g}, +mask {gm}, +chunk {all}", short(&cfg)))?;
        let pct = |a: u64, b: u64| 100.0 * (b as f64 / a as f64 - 1.0);
        parts.push(format!(
            "{} {base}<{g}<{gm}<{all} (+{:.0}%/+{:.0}%/+{:.0}%)",
            short(&cfg),
            pct(base, g),
            pct(g, gm),
            pct(gm, all)
        ));
    }
    Ok(format!("L_max myopic<global<+mask<+chunk at weights+64MiB: {}", parts.join(", ")))
}

fn c6_par_reduction() -> Check {
    let mut parts = Vec::new();
    for cfg in presets() {
        let budget = cfg.weights_bytes + 64 * MIB;
        let top = find_lmax(&cfg, 0.5, budget, FeatureSet::ALL).map_err(|e| e.to_string())?.l_max;
        let mut lens: Vec<u64> = (10..).map(|p| 1u64 << p).take_while(|&l| l < top).collect();
        lens.push(top);
        let rows = par_curve(&cfg, 0.5, &lens, budget).map_err(|e| e.to_string())?;
        let mut chunked = 0;
        for r in &rows {
            if r.chunked {
                let mosaic = r.par_mosaic.expect("chunked rows are feasible");
                ensure(mosaic < r.par_unchunked, || {
                    format!("{} L={}: PAR {mosaic:.3} vs unchunked {:.3}", short(&cfg), r.context_len, r.par_unchunked)
                })?;
                chunked += 1;
            }
        }
        let last = rows.iter().rev().find(|r| r.par_mosaic.is_some()).ok_or("no feasible length")?;
        let ratio = last.par_unchunked / last.par_mosaic.unwrap();
        ensure(ratio > 1.2, || format!("{} L={}: ratio {ratio:.2}", short(&cfg), last.context_len))?;
        parts.push(format!("{} ratio {ratio:.2} at L={} ({chunked} chunked lengths)", short(&cfg), last.context_len));
    }
    Ok(parts.join(", "))
}

/// Replays the event log against its own running totals.
fn conserved(alloc: &CachingAllocator) -> Result<(), String> {
    let (mut reserved, mut allocated, mut segments) = (0u64, 0u64, 0usize);
    for (i, e) in alloc.events().iter().enumerate() {
        match e.op {
            EventKind::Alloc => {
                if e.segment_id >= segments {
                    segments = e.segment_id + 1;
                    reserved = e.reserved;
                }
                allocated += e.bytes;
            }
            EventKind::Free => allocated -= e.bytes,
            EventKind::Release => reserved -= e.bytes,
        }
        ensure(e.allocated == allocated && e.reserved == reserved && allocated <= reserved, || {
            format!("event {i}: logged {}/{}, replayed {allocated}/{reserved}", e.allocated, e.reserved)
        })?;
    }
    Ok(())
}

fn c7_fragmentation() -> Check {
    let mut parts = Vec::new();
    for cfg in presets() {
        let scen = ScenarioConfig::new(4096, 0.5, 16);
        let myopic = run_myopic(&cfg, &scen, &BreakPolicy::Default).map_err(|e| e.to_string())?;
        ensure(myopic.inflation_rate > 0.0, || format!("{}: inflation {}", short(&cfg), myopic.inflation_rate))?;

        let mut alloc = CachingAllocator::new(AllocatorConfig { verify: true, ..AllocatorConfig::default() });
        let checked = run_myopic_on(&mut alloc, &cfg, &scen, &BreakPolicy::Default).map_err(|e| e.to_string())?;
        ensure(checked.reserved_peak == myopic.reserved_peak, || "verified run diverged".into())?;
        conserved(&alloc)?;

        let t = build_layer_template(&cfg).map_err(|e| e.to_string())?;
        let mut worst = 0;
        for m in scen.mask_schedule().map_err(|e| e.to_string())? {
            let g = t.instantiate(&ChunkConfig::DISABLED.apply(&bindings([("L", 4096), ("M", m)]))).map_err(|e| e.to_string())?;
            let plan = plan_first_fit(&analyze(&g).map_err(|e| e.to_string())?, DEFAULT_ALIGNMENT).map_err(|e| e.to_string())?;
            let mut ws = Workspace::reserve(plan.workspace_size.max(1), DEVICE_PAGE, Backend::Sim).map_err(|e| e.to_string())?;
            ws.commit_to(plan.workspace_size).map_err(|e| e.to_string())?;
            let slack = ws.committed_bytes() - plan.workspace_size;
            ensure(slack < ws.page_size(), || format!("{}: M={m} slack {slack}", short(&cfg)))?;
            worst = worst.max(slack);
        }
        parts.push(format!(
            "{} inflation {:.0}% ({} events conserved), global slack <= {worst} B",
            short(&cfg),
            100.0 * myopic.inflation_rate,
            alloc.events().len()
        ));
    }
    Ok(parts.join(", "))
}

fn c8_kernel() -> Check {
    let start = Instant::now();
    let n_cases = 500;
    let tiles = [Tiles::new(1, 1, 1), Tiles::new(2, 3, 5), Tiles::new(7, 4, 9), Tiles::new(16, 16, 16), Tiles::new(64, 8, 32)];
    let worst = (0..n_cases)
        .into_par_iter()
        .map(|i| -> Result<f64, String> {
            let mut r = rng(8, i);
            let (n, d, v) = (r.gen_range(1..48), r.gen_range(1..48), r.gen_range(1..48));
            let mut fill = |len: usize| (0..len).map(|_| r.gen_range(-8.0..8.0)).collect::<Vec<f64>>();
            let (hd, wd) = (fill(n * d), fill(d * v));
            let idx: Vec<usize> = (0..n).filter(|_| r.gen_bool(0.4)).collect();
            let h = Matrix::new(n, d, hd.clone()).unwrap();
            let w = Matrix::new(d, v, wd.clone()).unwrap();
            let naive: Vec<f64> = idx
                .iter()
                .flat_map(|&row| (0..v).map(move |c| (row, c)))
                .map(|(row, c)| (0..d).fold(0.0, |acc, k| acc + hd[row * d + k] * wd[k * v + c]))
                .collect();
            let naive = Matrix::new(idx.len(), v, naive).unwrap();
            let reference = gemm_reference(&h.select_rows(&idx).unwrap(), &w).unwrap();
            let mut first: Option<Matrix<f64>> = None;
            let mut err: f64 = 0.0;
            for t in tiles {
                let p = GatherGemmProblem { h: &h, w: &w, mask_idx: &idx, tiles: t };
                for (out, scratch) in [gather_gemm(&p), gather_gemm_par(&p)].map(|x| x.map_err(|e| e.to_string())).into_iter().collect::<Result<Vec<_>, _>>()? {
                    ensure(scratch.peak <= t.tm * t.td + t.td * t.tv + t.tm * t.tv, || format!("case {i}: scratch {}", scratch.peak))?;
                    err = err.max(max_rel_error(&out, &naive)).max(max_rel_error(&out, &reference));
                    match &first {
                        Some(f) => ensure(f.data().iter().zip(out.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                            format!("case {i}: {t:?} not bit-identical")
                        })?,
                        None => first = Some(out),
                    }
                }
            }
            ensure(err <= 1e-12, || format!("case {i}: relative error {err:e}"))?;
            Ok(err)
        })
        .collect::<Result<Vec<f64>, String>>()?
        .into_iter()
        .fold(0.0, f64::max);
    within(Duration::from_secs(30), start)?;
    Ok(format!("{n_cases} problems x {} tilings, max rel err {worst:e}, {:.2?}", tiles.len(), start.elapsed()))
}

fn c9_vmm() -> Check {
    let mut scenarios = 0;
    for cfg in presets() {
        let t = build_layer_template(&cfg).map_err(|e| e.to_string())?;
        for l in [1000u64, 4096, 16384] {
            for m in [1, l / 3, l / 2] {
                for c in [ChunkConfig::DISABLED, ChunkConfig::new(3, 2)] {
                    let g = t.instantiate(&c.apply(&bindings([("L", l), ("M", m)]))).map_err(|e| e.to_string())?;
                    let plan = plan_first_fit(&analyze(&g).map_err(|e| e.to_string())?, DEFAULT_ALIGNMENT).map_err(|e| e.to_string())?;
                    for page in [HOST_PAGE, DEVICE_PAGE] {
                        let mut ws = Workspace::reserve(1 << 34, page, Backend::Sim).map_err(|e| e.to_string())?;
                        ws.commit_to(plan.workspace_size).map_err(|e| e.to_string())?;
                        let slack = ws.committed_bytes() - plan.workspace_size;
                        ensure(slack < page, || format!("{} L={l} M={m}: slack {slack} page {page}", short(&cfg)))?;
                        scenarios += 1;
                    }
                }
            }
        }
    }

    let n = 200;
    let detected = (0..n)
        .into_par_iter()
        .map(|i| -> Result<usize, String> {
            let mut r = rng(9, i);
            let g = random_graph(&mut r, GraphParams::default());
            let plan = plan_first_fit(&g.table, 64).map_err(|e| e.to_string())?;
            let backend = if i % 20 == 0 { Backend::Os } else { Backend::Sim };
            let mut ws = Workspace::reserve(1 << 30, HOST_PAGE, backend).map_err(|e| e.to_string())?;
            ws.commit_to(plan.workspace_size).map_err(|e| e.to_string())?;
            ensure(ws.committed_bytes() - plan.workspace_size < ws.page_size(), || format!("graph {i}: commit slack"))?;
            let report = execute_plan(&mut ws, &plan, &g.graph).map_err(|e| e.to_string())?;
            ensure(report.is_clean(), || format!("graph {i}: {} faults on a valid plan", report.faults.len()))?;

            let groups = &g.table.groups;
            let pair = groups.iter().enumerate().find_map(|(a, ga)| {
                groups[a + 1..].iter().find(|gb| ga.def < gb.def && gb.def <= ga.last_use && ga.size > 0 && gb.size > 0).map(|gb| (ga.id, gb.id))
            });
            let Some((victim, writer)) = pair else { return Ok(0) };
            let mut bad = plan.clone();
            let at = bad.groups.iter().position(|e| e.id == victim).unwrap();
            let offset = bad.groups[at].offset;
            let w = bad.groups.iter().position(|e| e.id == writer).unwrap();
            bad.groups[w].offset = offset;
            bad.workspace_size = bad.groups.iter().map(|e| e.offset + e.size).max().unwrap_or(0);
            let mut ws = Workspace::reserve(1 << 30, HOST_PAGE, backend).map_err(|e| e.to_string())?;
            ws.commit_to(bad.workspace_size).map_err(|e| e.to_string())?;
            let report = execute_plan(&mut ws, &bad, &g.graph).map_err(|e| e.to_string())?;
            let caught = report.faults.iter().any(|f| matches!(f.kind, FaultKind::Clobber { .. }));
            ensure(caught, || format!("graph {i}: overlap of {victim} and {writer} went unnoticed"))?;
            Ok(1)
        })
        .collect::<Result<Vec<usize>, String>>()?
        .into_iter()
        .sum::<usize>();
    ensure(detected > 0, || "no overlap was injected".into())?;
    Ok(format!("{scenarios} planned scenarios tight, {n} random plans clean, {detected}/{detected} injected overlaps caught"))
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn c10_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_memplan"))
            .args(["selftest", "--seed", "1234", "--out-dir"])
            .arg(&out)
            .env_remove("MOSAIC_SEED")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        Ok(read_tree(&out))
    };
    let (a, b) = (run("a")?, run("b")?);
    ensure(a.keys().any(|k| k.ends_with(".json")) && a.keys().any(|k| k.ends_with(".csv")), || {
        format!("artifacts: {:?}", a.keys().collect::<Vec<_>>())
    })?;
    for (name, bytes) in &a {
        ensure(b.get(name) == Some(bytes), || format!("{name} differs between runs"))?;
    }
    ensure(a.len() == b.len(), || "artifact sets differ".into())?;
    Ok(format!("{} artifacts byte-identical: {}", a.len(), a.keys().cloned().collect::<Vec<_>>().join(", ")))
}

type Criterion = (&'static str, fn() -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("plan soundness", c1_plan_soundness),
        ("oracle dominance and chain optimality", c2_oracle_dominance),
        ("chunk-search equivalence", c3_chunk_search),
        ("peak toggling", c4_peak_toggling),
        ("feature breakdown ordering", c5_feature_ordering),
        ("PAR reduction", c6_par_reduction),
        ("fragmentation", c7_fragmentation),
        ("kernel oracle", c8_kernel),
        ("VMM tightness", c9_vmm),
        ("determinism and replay", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let label = format!("{:>2} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS [{label}] {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{label}] {why}");
            }
        }
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
