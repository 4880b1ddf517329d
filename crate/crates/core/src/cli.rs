//! `memplan` command line.
//!
//! Exit codes: 0 ok, 1 property failure, 2 usage error or size limit,
//! 3 capacity infeasible.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::allocsim::{run_myopic_on, AllocatorConfig, BreakPolicy, CachingAllocator};
use crate::chunker::{search_bottleneck, search_bruteforce, Objective, PeakModel, SearchOptions, SyntheticPeak, TemplatePeak};
use crate::emit::{self, fmt_f64};
use crate::error::Error;
use crate::graph::{Bindings, GraphTemplate, TemplateParseError};
use crate::kernel::{gather_gemm, gather_gemm_par, gemm_reference, GatherGemmProblem, Matrix, Tiles};
use crate::liveness::analyze;
use crate::planner::{plan_with_stats, PlanError, DEFAULT_ALIGNMENT, DEFAULT_EXACT_LIMIT};
use crate::selftest::{self, InjectedFault, SelftestOptions};
use crate::workload::{find_lmax, output_len, par_curve, simulate_run, FeatureSet, ModelConfig, ScenarioConfig};

pub const EXIT_PROPERTY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "memplan", version, about = "Static memory planning for diffusion-LLM inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan a graph template: offsets for every storage group.
    Plan(PlanArgs),
    /// Find the smallest chunk configuration that fits a budget.
    ChunkSearch(ChunkSearchArgs),
    /// Per-step memory traces over a whole diffusion run.
    Simulate(SimulateArgs),
    /// Peak-to-average ratio across context lengths.
    Par(ParArgs),
    /// Largest context length per feature set.
    Lmax(LmaxArgs),
    /// Myopic planning on a caching allocator: reserved-memory inflation.
    Allocsim(AllocsimArgs),
    /// Run the seeded property suite.
    Selftest(SelftestArgs),
    /// Time the gather-GEMM kernel against dense-then-discard.
    BenchKernel(BenchArgs),
}

/// Parses `123`, `64KiB`, `1.5MiB`, `2GiB`.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = [("GiB", 1u64 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10), ("B", 1)]
        .iter()
        .find_map(|&(suf, m)| s.strip_suffix(suf).map(|n| (n.trim(), m)))
        .unwrap_or((s, 1));
    if let Ok(v) = num.parse::<u64>() {
        return v.checked_mul(mult).ok_or_else(|| format!("`{s}` overflows"));
    }
    match num.parse::<f64>() {
        Ok(v) if v >= 0.0 && (v * mult as f64) < u64::MAX as f64 => Ok((v * mult as f64).round() as u64),
        _ => Err(format!("`{s}` is not a byte count (use B, KiB, MiB or GiB)")),
    }
}

fn parse_binding(s: &str) -> Result<(String, u64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("`{s}` is not SYM=VALUE"))?;
    let v = v.trim().parse().map_err(|_| format!("`{v}` is not a non-negative integer"))?;
    Ok((k.trim().to_string(), v))
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Graph template JSON.
    pub graph: PathBuf,
    /// Symbol binding, repeatable.
    #[arg(long = "bind", value_name = "SYM=VAL", value_parser = parse_binding)]
    pub bind: Vec<(String, u64)>,
    #[arg(long, default_value_t = DEFAULT_ALIGNMENT)]
    pub align: u64,
    /// Use the exact solver (refuses more than `--exact-limit` groups).
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value_t = DEFAULT_EXACT_LIMIT)]
    pub exact_limit: usize,
    #[arg(long, default_value = "plan.json")]
    pub out: PathBuf,
    /// Also write the lifetime table as CSV.
    #[arg(long)]
    pub lifetimes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model config JSON, or a preset: toy, toy-llada, toy-dream, toy-moe.
    pub model: String,
}

#[derive(Debug, Args)]
pub struct ChunkSearchArgs {
    /// Model config (see `plan`), or a synthetic peak fixture with `--synthetic`.
    pub model: String,
    /// Treat the input as `{"floor", "logits", "ffn"}` bytes.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, required_unless_present = "synthetic")]
    pub len: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub rp: f64,
    /// Device budget including weights; activations only with `--synthetic`.
    /// Falls back to the fixture's `budget` field.
    #[arg(long, value_parser = parse_bytes)]
    pub budget: Option<u64>,
    /// Also run the exhaustive search and compare.
    #[arg(long)]
    pub brute: bool,
    #[arg(long, default_value_t = 16)]
    pub k_max: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub len: u64,
    #[arg(long, default_value_t = 0.5)]
    pub rp: f64,
    #[arg(long, default_value_t = 16)]
    pub steps: u32,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Device budget including weights; enables chunk search.
    #[arg(long, value_parser = parse_bytes)]
    pub budget: Option<u64>,
    /// Reuse step 0's chunk configuration for every step.
    #[arg(long)]
    pub pin_step0: bool,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.5)]
    pub rp: f64,
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384,32768")]
    pub lens: Vec<u64>,
    #[arg(long, value_parser = parse_bytes)]
    pub budget: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Feature {
    Global,
    Mask,
    Chunk,
}

#[derive(Debug, Args)]
pub struct LmaxArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.5)]
    pub rp: f64,
    #[arg(long, value_parser = parse_bytes)]
    pub budget: u64,
    /// Features to stack, in order, on top of the myopic baseline.
    #[arg(long, value_delimiter = ',', default_value = "global,mask,chunk")]
    pub features: Vec<Feature>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Default,
    None,
}

#[derive(Debug, Args)]
pub struct AllocsimArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value_t = PolicyArg::Default)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 512)]
    pub split_threshold: u64,
    #[arg(long, value_parser = parse_bytes, default_value = "2MiB")]
    pub segment_granularity: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Overridden by `MOSAIC_SEED`.
    #[arg(long, default_value_t = selftest::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value = "selftest-out")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub inject_fault: Option<InjectedFault>,
    /// Random graphs for the plan-validity property.
    #[arg(long, default_value_t = 1000)]
    pub graphs: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Tokens in the sequence.
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    /// Masked tokens.
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, default_value_t = 2048)]
    pub v: usize,
    #[arg(long, value_delimiter = ',', default_value = "32,32,128")]
    pub tiles: Vec<u64>,
    #[arg(long, default_value_t = 3)]
    pub reps: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible { .. } => EXIT_INFEASIBLE,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

pub fn load_model(spec: &str) -> Result<ModelConfig, Failure> {
    let presets = ModelConfig::toy_presets();
    let by_name = |n: &str| presets.iter().find(|c| c.name.starts_with(&format!("{n} "))).cloned();
    let cfg = match spec {
        "toy" => ModelConfig::toy(),
        n if !Path::new(n).exists() && by_name(n).is_some() => by_name(n).unwrap(),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{path}:{}:{}: {e}", e.line(), e.column())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    model: &'a str,
    params: serde_json::Value,
    features: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
}

fn write_manifest(dir: &Path, m: &RunManifest) -> std::io::Result<()> {
    emit::write_json(&dir.join("manifest.json"), m, &["subcommand", "model", "params", "outputs", "seed"])
}

fn ensure_dir(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)
}

fn cmd_plan(a: &PlanArgs) -> CmdResult {
    let path = a.graph.display();
    let text = std::fs::read_to_string(&a.graph).map_err(|e| Failure::usage(format!("{path}: {e}")))?;
    let template = GraphTemplate::from_json(&text)
        .map_err(|e| match e {
            TemplateParseError::Json(j) => Failure::usage(format!("{path}:{}:{}: {j}", j.line(), j.column())),
            TemplateParseError::Build(b) => Failure::usage(format!("{path}: {b}")),
        })?
        .freeze()
        .map_err(|e| Failure::usage(format!("{path}: {e}")))?;
    let bindings: Bindings = a.bind.iter().cloned().collect();
    let graph = template.instantiate(&bindings).map_err(|e| Failure::usage(format!("{path}: {e}")))?;
    let table = analyze(&graph).map_err(|e| Failure::usage(format!("{path}: {e}")))?;
    let (plan, stats) = plan_with_stats(&table, a.align, a.exact.then_some(a.exact_limit)).map_err(|e| match e {
        PlanError::TooLarge { .. } => Failure::usage(format!("{e}; drop --exact to use first-fit")),
        e => Failure::usage(e.to_string()),
    })?;
    emit::write_json(&a.out, &plan, &["alignment", "workspace_size", "groups"])?;
    if let Some(p) = &a.lifetimes {
        let mut buf = Vec::new();
        table.write_csv(&mut buf).map_err(|e| Failure::usage(e.to_string()))?;
        emit::write_csv_bytes(p, &["group_id", "size_bytes", "def", "last_use", "tag"], &buf)?;
    }
    println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    Ok(())
}

fn cmd_chunk_search(a: &ChunkSearchArgs) -> CmdResult {
    let search = |model: &dyn PeakModel, budget: u64| -> CmdResult {
        let fast = search_bottleneck(model, budget, SearchOptions::default())?;
        let value = if a.brute {
            let capped = search_bottleneck(model, budget, SearchOptions { max_k: a.k_max })?;
            let brute = search_bruteforce(model, budget, a.k_max, Objective::Sum)?;
            json!({"bottleneck": fast, "brute": brute, "match": capped.config == brute.config})
        } else {
            serde_json::to_value(&fast).expect("outcome serializes")
        };
        if let Some(p) = &a.out {
            let required: &[&str] = if a.brute { &["bottleneck", "brute", "match"] } else { &["feasible"] };
            emit::write_json(p, &value, required)?;
        }
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        if fast.is_feasible() {
            Ok(())
        } else {
            Err(Failure {
                code: EXIT_INFEASIBLE,
                message: format!("no chunk configuration fits {budget} B; non-chunkable floor is {} B", fast.floor),
            })
        }
    };

    if a.synthetic {
        let text = std::fs::read_to_string(&a.model).map_err(|e| Failure::usage(format!("{}: {e}", a.model)))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("{}:{}:{}: {e}", a.model, e.line(), e.column())))?;
        let model: SyntheticPeak = serde_json::from_value(v.clone()).map_err(|e| Failure::usage(format!("{}: {e}", a.model)))?;
        let budget = a
            .budget
            .or_else(|| v.get("budget").and_then(|b| b.as_u64()))
            .ok_or_else(|| Failure::usage("--budget is required"))?;
        return search(&model, budget);
    }
    let cfg = load_model(&a.model)?;
    let l = a.len.expect("clap enforces --len");
    let budget = a.budget.ok_or_else(|| Failure::usage("--budget is required"))?;
    let act = budget.checked_sub(cfg.weights_bytes).ok_or_else(|| Failure {
        code: EXIT_INFEASIBLE,
        message: format!("weights alone ({} B) exceed the budget", cfg.weights_bytes),
    })?;
    let m = output_len(l, a.rp)?;
    let template = crate::workload::build_layer_template(&cfg)?;
    let model = TemplatePeak {
        template: &template,
        bindings: crate::graph::bindings([("L", l), ("M", m)]),
        alignment: DEFAULT_ALIGNMENT,
    };
    search(&model, act)
}

fn scenario(s: &ScenarioArgs) -> ScenarioConfig {
    ScenarioConfig::new(s.len, s.rp, s.steps)
}

const TRACE_HEADER: [&str; 5] = ["step", "op_index", "op_kind", "component", "live_bytes"];
const METRICS_HEADER: [&str; 8] = ["L", "r_m", "peak", "avg", "PAR", "peak_component", "k_logits", "k_ffn"];

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let cfg = load_model(&a.model.model)?;
    let mut scen = scenario(&a.scenario);
    scen.budget = a.budget;
    scen.pin_step0 = a.pin_step0;
    let steps = simulate_run(&cfg, &scen)?;
    ensure_dir(&a.out_dir)?;
    let trace = steps.iter().flat_map(|s| {
        s.trace.samples.iter().map(move |t| {
            vec![
                s.state.step.to_string(),
                t.op_index.to_string(),
                t.op_kind.clone(),
                t.component.to_string(),
                t.live_bytes.to_string(),
            ]
        })
    });
    emit::write_csv(&a.out_dir.join("trace.csv"), &TRACE_HEADER, trace)?;
    let metrics = steps.iter().map(|s| {
        let m = &s.metrics;
        vec![
            m.context_len.to_string(),
            fmt_f64(m.mask_ratio),
            m.peak.to_string(),
            fmt_f64(m.average),
            fmt_f64(m.par),
            m.peak_component.to_string(),
            m.config.k_logits.to_string(),
            m.config.k_ffn.to_string(),
        ]
    });
    emit::write_csv(&a.out_dir.join("metrics.csv"), &METRICS_HEADER, metrics)?;
    write_manifest(
        &a.out_dir,
        &RunManifest {
            subcommand: "simulate",
            model: &a.model.model,
            params: serde_json::to_value(&scen).expect("scenario"),
            features: vec![],
            outputs: vec!["trace.csv".into(), "metrics.csv".into()],
            seed: None,
        },
    )?;
    println!("{} steps written to {}", steps.len(), a.out_dir.display());
    Ok(())
}

fn cmd_par(a: &ParArgs) -> CmdResult {
    let cfg = load_model(&a.model.model)?;
    let rows = par_curve(&cfg, a.rp, &a.lens, a.budget)?;
    ensure_dir(&a.out_dir)?;
    let header = ["L", "par_unchunked", "par_mosaic", "ratio", "k_logits", "k_ffn", "chunked"];
    let csv_rows = rows.iter().map(|r| {
        let (pm, ratio) = match r.par_mosaic {
            Some(p) => (fmt_f64(p), fmt_f64(r.par_unchunked / p)),
            None => (String::new(), String::new()),
        };
        vec![
            r.context_len.to_string(),
            fmt_f64(r.par_unchunked),
            pm,
            ratio,
            r.k_logits.to_string(),
            r.k_ffn.to_string(),
            r.chunked.to_string(),
        ]
    });
    emit::write_csv(&a.out_dir.join("par.csv"), &header, csv_rows)?;
    write_manifest(
        &a.out_dir,
        &RunManifest {
            subcommand: "par",
            model: &a.model.model,
            params: json!({"prompt_ratio": a.rp, "lens": a.lens, "budget": a.budget}),
            features: vec![],
            outputs: vec!["par.csv".into()],
            seed: None,
        },
    )?;
    for r in &rows {
        println!("L={:<8} PAR unchunked {:.3}  mosaic {}", r.context_len, r.par_unchunked, r.par_mosaic.map_or("-".into(), |p| format!("{p:.3}")));
    }
    Ok(())
}

fn cmd_lmax(a: &LmaxArgs) -> CmdResult {
    let cfg = load_model(&a.model.model)?;
    let mut sets = vec![FeatureSet::BASELINE];
    let mut cur = FeatureSet::BASELINE;
    for f in &a.features {
        match f {
            Feature::Global => cur.global_plan = true,
            Feature::Mask => cur.mask_only = true,
            Feature::Chunk => cur.chunking = true,
        }
        if *sets.last().unwrap() != cur {
            sets.push(cur);
        }
    }
    let results = sets.iter().map(|&f| find_lmax(&cfg, a.rp, a.budget, f)).collect::<Result<Vec<_>, _>>()?;
    ensure_dir(&a.out_dir)?;
    emit::write_json(&a.out_dir.join("lmax.json"), &results, &["features", "l_max", "peak", "config"])?;
    write_manifest(
        &a.out_dir,
        &RunManifest {
            subcommand: "lmax",
            model: &a.model.model,
            params: json!({"prompt_ratio": a.rp, "budget": a.budget}),
            features: sets.iter().map(FeatureSet::label).collect(),
            outputs: vec!["lmax.json".into()],
            seed: None,
        },
    )?;
    for r in &results {
        println!("{:<22} L_max {}", r.features, r.l_max);
    }
    Ok(())
}

fn cmd_allocsim(a: &AllocsimArgs) -> CmdResult {
    let cfg = load_model(&a.model.model)?;
    let scen = scenario(&a.scenario);
    let policy = match a.policy {
        PolicyArg::Default => BreakPolicy::Default,
        PolicyArg::None => BreakPolicy::None,
    };
    if a.segment_granularity == 0 {
        return Err(Failure::usage("--segment-granularity must be positive"));
    }
    let mut alloc = CachingAllocator::new(AllocatorConfig {
        split_threshold: a.split_threshold,
        segment_granularity: a.segment_granularity,
        verify: false,
    });
    let report = run_myopic_on(&mut alloc, &cfg, &scen, &policy)?;
    ensure_dir(&a.out_dir)?;
    emit::write_json(
        &a.out_dir.join("inflation.json"),
        &report,
        &["reserved_peak", "theoretical_peak", "inflation_rate", "per_step"],
    )?;
    let mut buf = Vec::new();
    alloc.write_events_csv(&mut buf).map_err(|e| Failure::usage(e.to_string()))?;
    emit::write_csv_bytes(
        &a.out_dir.join("events.csv"),
        &["event_index", "op", "bytes", "segment_id", "offset", "reserved", "allocated"],
        &buf,
    )?;
    write_manifest(
        &a.out_dir,
        &RunManifest {
            subcommand: "allocsim",
            model: &a.model.model,
            params: json!({"scenario": scen, "policy": policy, "allocator": alloc.config()}),
            features: vec![],
            outputs: vec!["inflation.json".into(), "events.csv".into()],
            seed: None,
        },
    )?;
    println!(
        "reserved peak {} B, planned peak {} B, inflation {:.2}%",
        report.reserved_peak,
        report.theoretical_peak,
        report.inflation_rate * 100.0
    );
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> CmdResult {
    let seed = match std::env::var("MOSAIC_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| Failure::usage(format!("MOSAIC_SEED=`{s}` is not an integer")))?,
        Err(_) => a.seed,
    };
    let opts = SelftestOptions { seed, plan_cases: a.graphs, inject: a.inject_fault, ..SelftestOptions::default() };
    let report = selftest::run(&opts);
    ensure_dir(&a.out_dir)?;
    emit::write_json(&a.out_dir.join("selftest.json"), &report, &["seed", "properties"])?;
    let rows = report.properties.iter().map(|p| {
        vec![
            p.name.clone(),
            p.cases.to_string(),
            p.failures.to_string(),
            if p.passed() { "pass" } else { "fail" }.to_string(),
        ]
    });
    emit::write_csv(&a.out_dir.join("selftest.csv"), &["property", "cases", "failures", "status"], rows)?;
    let mut outputs = vec!["selftest.json".to_string(), "selftest.csv".to_string()];
    if let Some(p) = report.properties.iter().find(|p| !p.passed()) {
        let cx = json!({"seed": seed, "property": p.name, "counterexample": p.counterexample});
        emit::write_json(&a.out_dir.join("counterexample.json"), &cx, &["seed", "property", "counterexample"])?;
        outputs.push("counterexample.json".into());
    }
    write_manifest(
        &a.out_dir,
        &RunManifest {
            subcommand: "selftest",
            model: "",
            params: serde_json::to_value(opts).expect("options"),
            features: vec![],
            outputs,
            seed: Some(seed),
        },
    )?;
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        let name = &report.properties.iter().find(|p| !p.passed()).unwrap().name;
        Err(Failure {
            code: EXIT_PROPERTY,
            message: format!("property `{name}` failed; counterexample in {}", a.out_dir.join("counterexample.json").display()),
        })
    }
}

fn cmd_bench_kernel(a: &BenchArgs) -> CmdResult {
    let [tm, td, tv] = a.tiles[..] else {
        return Err(Failure::usage("--tiles takes three values: tm,td,tv"));
    };
    if a.m > a.n {
        return Err(Failure::usage("--m cannot exceed --n"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut mat = |r: usize, c: usize| Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
    let h = mat(a.n, a.d).map_err(|e| Failure::usage(e.to_string()))?;
    let w = mat(a.d, a.v).map_err(|e| Failure::usage(e.to_string()))?;
    let mut idx: Vec<usize> = (0..a.n).collect();
    rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
    idx.truncate(a.m);
    let tiles = Tiles::new(tm as usize, td as usize, tv as usize);
    let p = GatherGemmProblem { h: &h, w: &w, mask_idx: &idx, tiles };
    let time = |f: &dyn Fn()| {
        let t = Instant::now();
        for _ in 0..a.reps.max(1) {
            f();
        }
        t.elapsed().as_secs_f64() / f64::from(a.reps.max(1))
    };
    let scratch = gather_gemm(&p).map_err(|e| Failure::usage(e.to_string()))?.1;
    let seq = time(&|| {
        gather_gemm(&p).expect("checked");
    });
    let par = time(&|| {
        gather_gemm_par(&p).expect("checked");
    });
    let dense = time(&|| {
        let full = gemm_reference(&h, &w).expect("dims");
        std::hint::black_box(full.select_rows(&idx).expect("in range"));
    });
    let flops = 2.0 * (a.m * a.d * a.v) as f64;
    let out = json!({
        "n": a.n, "m": a.m, "d": a.d, "v": a.v, "tiles": tiles,
        "scratch_peak_elements": scratch.peak,
        "scratch_bound_elements": tiles.scratch_bound(),
        "gather_gemm_gflops": flops / seq / 1e9,
        "gather_gemm_parallel_gflops": flops / par / 1e9,
        "dense_then_discard_seconds": dense,
        "gather_gemm_seconds": seq,
        "speedup_vs_dense": dense / seq,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

pub fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::ChunkSearch(a) => cmd_chunk_search(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Par(a) => cmd_par(a),
        Command::Lmax(a) => cmd_lmax(a),
        Command::Allocsim(a) => cmd_allocsim(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::BenchKernel(a) => cmd_bench_kernel(a),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("memplan: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn byte_suffixes() {
        assert_eq!(parse_bytes("123"), Ok(123));
        assert_eq!(parse_bytes("64KiB"), Ok(64 << 10));
        assert_eq!(parse_bytes("1.5MiB"), Ok(3 << 19));
        assert_eq!(parse_bytes("2 GiB"), Ok(2 << 30));
        assert!(parse_bytes("12MB").is_err());
        assert!(parse_bytes("-1").is_err());
    }

    #[test]
    fn binding_syntax() {
        assert_eq!(parse_binding("L=8"), Ok(("L".into(), 8)));
        assert!(parse_binding("L").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["memplan", "par", "toy", "--budget", "1MiB", "--lens", "8,16"]).unwrap();
        assert!(matches!(cli.command, Command::Par(ParArgs { ref lens, .. }) if lens == &[8, 16]));
        let cli = Cli::try_parse_from(["memplan", "bench-kernel", "--tiles", "1,2,3"]).unwrap();
        assert!(matches!(cli.command, Command::BenchKernel(BenchArgs { ref tiles, .. }) if tiles == &[1, 2, 3]));
    }

    #[test]
    fn presets_resolve_by_short_name() {
        assert_eq!(load_model("toy-dream").unwrap().vocab_size, 5120);
        assert_eq!(load_model("toy").unwrap(), ModelConfig::toy());
        assert!(load_model("no-such-model").is_err());
    }
}
