//! Analytical memory model of diffusion-LLM inference.
//!
//! [`build_layer_template`] expresses a transformer stack as a graph template
//! over the symbols `L` (context tokens), `M` (masked tokens), `K_logits` and
//! `K_FFN`. The rest of this module drives it through multi-step diffusion
//! runs, context-length searches and peak-to-average curves.

use serde::{Deserialize, Serialize};

use crate::allocsim::{self, AllocatorConfig, BreakPolicy};
use crate::chunker::{evaluate_peak, search_bottleneck, ChunkConfig, SearchOptions, TemplatePeak, K_FFN, K_LOGITS};
use crate::component::Component;
use crate::error::{Error, Result};
use crate::graph::{bindings, Bindings, ChunkLoop, FrozenTemplate, GraphTemplate, OpDecl, SymbolicDim, TensorDecl};
use crate::liveness::analyze;
use crate::planner::{plan_first_fit, DEFAULT_ALIGNMENT};

/// Byte width of token ids and confidence scores.
const SAMPLE_ELEM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitsMode {
    /// Logits for every token.
    Eager,
    /// Logits for masked tokens only, through the gather-GEMM kernel.
    #[default]
    MaskOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    #[default]
    None,
    /// Shifted logits are concatenated into a fresh copy.
    Concat,
    /// Token-level shift that rewrites the logits buffer in place.
    InPlace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Variants {
    #[serde(default)]
    pub logits_mode: LogitsMode,
    #[serde(default)]
    pub shift_mode: ShiftMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: u32,
    pub top_k: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub n_layers: u32,
    pub d_model: u64,
    pub d_ff: u64,
    pub n_heads: u64,
    pub vocab_size: u64,
    pub element_size: u64,
    pub weights_bytes: u64,
    #[serde(default)]
    pub gated_ffn: bool,
    #[serde(default)]
    pub variants: Variants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    /// Materialize `[heads, L, L]` attention scores instead of fused attention.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub materialize_scores: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", u64::from(self.n_layers)),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if ![1, 2, 4, 8].contains(&self.element_size) {
            return Err(Error::Config(format!("element_size {} not in {{1,2,4,8}}", self.element_size)));
        }
        if let Some(m) = self.moe {
            if m.top_k == 0 || m.top_k > m.n_experts {
                return Err(Error::Config("moe.top_k must be in 1..=n_experts".into()));
            }
        }
        Ok(())
    }

    /// Width of the FFN activations; routed experts scale it by `top_k`.
    pub fn ffn_width(&self) -> u64 {
        self.d_ff * self.moe.map_or(1, |m| u64::from(m.top_k))
    }

    /// Peak bytes held by one FFN block's activations with chunking disabled.
    pub fn ffn_peak_bytes(&self, l: u64) -> u64 {
        let branches = if self.gated_ffn { 2 } else { 1 };
        branches * l * self.ffn_width() * self.element_size
    }

    /// Bytes of one logits row.
    pub fn logits_row_bytes(&self) -> u64 {
        self.vocab_size * self.element_size
    }

    pub fn with_variants(&self, logits_mode: LogitsMode, shift_mode: ShiftMode) -> ModelConfig {
        ModelConfig { variants: Variants { logits_mode, shift_mode }, ..self.clone() }
    }

    /// The small illustrative model used throughout the unit tests.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            name: "toy (illustrative)".into(),
            n_layers: 2,
            d_model: 8,
            d_ff: 32,
            n_heads: 2,
            vocab_size: 100,
            element_size: 4,
            weights_bytes: 0,
            gated_ffn: true,
            variants: Variants { logits_mode: LogitsMode::MaskOnly, shift_mode: ShiftMode::None },
            moe: None,
            materialize_scores: false,
        }
    }

    /// Three scaled-down, illustrative model shapes: a LLaDA-like dense
    /// stack, a Dream-like stack with concatenating logits shift, and a
    /// routed-expert stack. None of the dimensions are real model values.
    pub fn toy_presets() -> Vec<ModelConfig> {
        let base = ModelConfig {
            name: String::new(),
            n_layers: 4,
            d_model: 128,
            d_ff: 384,
            n_heads: 4,
            vocab_size: 4096,
            element_size: 2,
            weights_bytes: 64 << 20,
            gated_ffn: true,
            variants: Variants { logits_mode: LogitsMode::MaskOnly, shift_mode: ShiftMode::None },
            moe: None,
            materialize_scores: false,
        };
        vec![
            ModelConfig { name: "toy-llada (illustrative)".into(), ..base.clone() },
            ModelConfig {
                name: "toy-dream (illustrative)".into(),
                d_ff: 512,
                vocab_size: 5120,
                weights_bytes: 56 << 20,
                variants: Variants { logits_mode: LogitsMode::MaskOnly, shift_mode: ShiftMode::Concat },
                ..base.clone()
            },
            ModelConfig {
                name: "toy-moe (illustrative)".into(),
                d_ff: 64,
                moe: Some(MoeConfig { n_experts: 32, top_k: 8 }),
                weights_bytes: 96 << 20,
                ..base
            },
        ]
    }
}

/// Builds the per-request graph template for `cfg`.
///
/// The residual stream is one storage group across all layers (in-place
/// residual adds plus aliases at layer boundaries) and stays live until
/// sampling finishes. FFN and logits each sit in a chunk loop splitting the
/// token axis.
pub fn build_layer_template(cfg: &ModelConfig) -> Result<FrozenTemplate> {
    cfg.validate()?;
    let mut t = GraphTemplate::new(["L", "M", K_LOGITS, K_FFN])?;
    let e = cfg.element_size;
    let d = SymbolicDim::lit(cfg.d_model);
    let l = SymbolicDim::sym("L");
    let hidden = || vec![SymbolicDim::sym("L"), d.clone()];
    let tensor = |t: &mut GraphTemplate, id: String, shape: Vec<SymbolicDim>, elem: u64, tag: Component| {
        t.add_tensor(TensorDecl::new(id, shape, elem, tag)).map(|_| ())
    };

    t.add_tensor(TensorDecl::input("tokens", vec![l.clone()], SAMPLE_ELEM, Component::Other))?;
    tensor(&mut t, "h0".into(), hidden(), e, Component::Hidden)?;
    t.add_op(OpDecl::new("embed", "embed").inputs(["tokens"]).outputs(["h0"]))?;

    let ffn_width = SymbolicDim::lit(cfg.ffn_width());
    for i in 0..cfg.n_layers {
        let n = |s: &str| format!("{s}{i}");
        for s in ["xa", "q", "k", "v", "ao", "o"] {
            tensor(&mut t, n(s), hidden(), e, Component::Attention)?;
        }
        tensor(&mut t, n("r"), hidden(), e, Component::Hidden)?;
        tensor(&mut t, n("xf"), hidden(), e, Component::Hidden)?;
        tensor(&mut t, n("u"), vec![l.clone(), ffn_width.clone()], e, Component::Ffn)?;
        tensor(&mut t, n("a"), vec![l.clone(), ffn_width.clone()], e, Component::Ffn)?;
        if cfg.gated_ffn {
            tensor(&mut t, n("g"), vec![l.clone(), ffn_width.clone()], e, Component::Ffn)?;
        }
        tensor(&mut t, n("dn"), hidden(), e, Component::Ffn)?;
        tensor(&mut t, format!("h{}", i + 1), hidden(), e, Component::Hidden)?;

        let h_in = format!("h{i}");
        t.add_op(OpDecl::new(n("attn_norm"), "norm").inputs([&h_in]).outputs([n("xa")]))?;
        t.add_op(OpDecl::new(n("qkv"), "matmul").inputs([n("xa")]).outputs([n("q"), n("k"), n("v")]))?;
        if cfg.materialize_scores {
            let scores = vec![SymbolicDim::lit(cfg.n_heads), l.clone(), l.clone()];
            tensor(&mut t, n("s"), scores, e, Component::Attention)?;
            t.add_op(OpDecl::new(n("scores"), "attn_scores").inputs([n("q"), n("k")]).outputs([n("s")]))?;
            t.add_op(OpDecl::new(n("attn"), "attn_apply").inputs([n("s"), n("v")]).outputs([n("ao")]))?;
        } else {
            tensor(&mut t, n("scr"), hidden(), e, Component::Attention)?;
            t.add_op(
                OpDecl::new(n("attn"), "fused_attention")
                    .inputs([n("q"), n("k"), n("v")])
                    .outputs([n("ao"), n("scr")]),
            )?;
        }
        t.add_op(OpDecl::new(n("o_proj"), "matmul").inputs([n("ao")]).outputs([n("o")]))?;
        t.add_op(
            OpDecl::new(n("resid_attn"), "add")
                .inputs([h_in.clone(), n("o")])
                .outputs([n("r")])
                .in_place(n("r"), h_in.clone()),
        )?;
        t.add_op(OpDecl::new(n("ffn_norm"), "norm").inputs([n("r")]).outputs([n("xf")]))?;

        let mut body = vec![n("up")];
        t.add_op(OpDecl::new(n("up"), "ffn_up").inputs([n("xf")]).outputs([n("u")]))?;
        let mut act = OpDecl::new(n("act"), "activation").inputs([n("u")]);
        if cfg.gated_ffn {
            t.add_op(OpDecl::new(n("gate"), "ffn_gate").inputs([n("xf")]).outputs([n("g")]))?;
            body.push(n("gate"));
            act = act.inputs([n("g")]);
        }
        t.add_op(act.outputs([n("a")]).in_place(n("a"), n("u")))?;
        t.add_op(OpDecl::new(n("down"), "ffn_down").inputs([n("a")]).outputs([n("dn")]))?;
        t.add_op(OpDecl::new(n("accum"), "add").inputs([n("dn"), n("r")]))?;
        body.extend([n("act"), n("down"), n("accum")]);
        t.add_chunk_loop(ChunkLoop { body_ops: body, trip_count: K_FFN.into(), chunked_dims: vec!["L".into()] })?;
        t.add_barrier([n("xf"), n("r")], n("accum"))?;

        let h_out = format!("h{}", i + 1);
        t.add_op(OpDecl::new(n("layer_out"), "boundary").inputs([n("r")]).outputs([h_out.clone()]))?;
        t.add_alias(n("r"), h_out)?;
    }

    let h_last = format!("h{}", cfg.n_layers);
    let rows = match cfg.variants.logits_mode {
        LogitsMode::Eager => "L",
        LogitsMode::MaskOnly => "M",
    };
    let logits_shape = || vec![SymbolicDim::sym(rows), SymbolicDim::lit(cfg.vocab_size)];
    tensor(&mut t, "xn".into(), hidden(), e, Component::Hidden)?;
    tensor(&mut t, "tok".into(), vec![SymbolicDim::sym("M")], SAMPLE_ELEM, Component::Other)?;
    tensor(&mut t, "conf".into(), vec![SymbolicDim::sym("M")], SAMPLE_ELEM, Component::Other)?;
    tensor(&mut t, "lg".into(), logits_shape(), e, Component::Logits)?;
    tensor(&mut t, "out".into(), vec![l.clone()], SAMPLE_ELEM, Component::Other)?;
    t.add_op(OpDecl::new("final_norm", "norm").inputs([&h_last]).outputs(["xn"]))?;
    t.add_op(OpDecl::new("sample_init", "fill").outputs(["tok", "conf"]))?;
    t.add_op(OpDecl::new("lm_head", "logits").inputs(["xn"]).outputs(["lg"]))?;
    let mut body = vec!["lm_head".to_string()];
    let sampled = match cfg.variants.shift_mode {
        ShiftMode::None => "lg",
        ShiftMode::Concat => {
            tensor(&mut t, "lgs".into(), logits_shape(), e, Component::Logits)?;
            t.add_op(OpDecl::new("shift", "shift_concat").inputs(["lg"]).outputs(["lgs"]))?;
            body.push("shift".into());
            "lgs"
        }
        ShiftMode::InPlace => {
            tensor(&mut t, "lgs".into(), logits_shape(), e, Component::Logits)?;
            t.add_op(OpDecl::new("shift", "shift_in_place").inputs(["lg"]).outputs(["lgs"]).in_place("lgs", "lg"))?;
            body.push("shift".into());
            "lgs"
        }
    };
    t.add_op(OpDecl::new("sample", "sample").inputs([sampled, "tok", "conf"]))?;
    body.push("sample".into());
    t.add_chunk_loop(ChunkLoop { body_ops: body, trip_count: K_LOGITS.into(), chunked_dims: vec![rows.into()] })?;
    t.add_barrier(["xn", "tok", "conf", h_last.as_str()], "sample")?;
    t.add_op(OpDecl::new("unmask", "unmask").inputs(["tok", "conf"]).outputs(["out"]))?;
    Ok(t.freeze()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub context_len: u64,
    pub prompt_ratio: f64,
    pub steps: u32,
    /// Device bytes, weights included. `None` disables chunk search.
    #[serde(default)]
    pub budget: Option<u64>,
    /// Reuse step 0's chunk configuration for every later step.
    #[serde(default)]
    pub pin_step0: bool,
    #[serde(default = "default_alignment")]
    pub alignment: u64,
}

fn default_alignment() -> u64 {
    DEFAULT_ALIGNMENT
}

impl ScenarioConfig {
    pub fn new(context_len: u64, prompt_ratio: f64, steps: u32) -> Self {
        ScenarioConfig {
            context_len,
            prompt_ratio,
            steps,
            budget: None,
            pin_step0: false,
            alignment: DEFAULT_ALIGNMENT,
        }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn output_len(&self) -> Result<u64> {
        output_len(self.context_len, self.prompt_ratio)
    }

    /// Masked-token count per step under the linear schedule:
    /// `M_n = round(out * (1 - n / N))`.
    pub fn mask_schedule(&self) -> Result<Vec<u64>> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        let out = self.output_len()?;
        let n_steps = u64::from(self.steps);
        Ok((0..n_steps)
            .map(|n| (2 * out * (n_steps - n) + n_steps) / (2 * n_steps))
            .collect())
    }
}

/// `round((1 - r_p) * L)`, which must be at least one token.
pub fn output_len(context_len: u64, prompt_ratio: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&prompt_ratio) {
        return Err(Error::Config(format!("prompt ratio {prompt_ratio} outside [0, 1)")));
    }
    let out = ((1.0 - prompt_ratio) * context_len as f64).round() as u64;
    if out == 0 {
        return Err(Error::Config(format!("L={context_len} with r_p={prompt_ratio} leaves no output tokens")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub step: u32,
    pub masked: u64,
    pub mask_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSample {
    pub op_index: usize,
    pub op_kind: String,
    pub component: Component,
    pub live_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub samples: Vec<TraceSample>,
    pub peak: u64,
    pub average: f64,
}

impl StepTrace {
    pub fn par(&self) -> f64 {
        if self.average > 0.0 { self.peak as f64 / self.average } else { 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub context_len: u64,
    pub mask_ratio: f64,
    pub peak: u64,
    pub average: f64,
    pub par: f64,
    pub peak_component: Component,
    /// Planned workspace size for the step.
    pub theoretical_peak: u64,
    pub config: ChunkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub state: StepState,
    pub trace: StepTrace,
    pub metrics: TraceMetrics,
}

/// Plans one step at a fixed chunk configuration and records its trace.
pub fn trace_step(template: &FrozenTemplate, l: u64, m: u64, config: ChunkConfig, alignment: u64) -> Result<(StepTrace, TraceMetrics)> {
    let b = config.apply(&bindings([("L", l), ("M", m)]));
    let graph = template.instantiate(&b)?;
    let table = analyze(&graph)?;
    let plan = plan_first_fit(&table, alignment)?;
    let live = table.live_profile();
    let samples: Vec<TraceSample> = live
        .iter()
        .enumerate()
        .map(|(t, &bytes)| TraceSample {
            op_index: t,
            op_kind: graph.op_kind(t).to_string(),
            component: graph.ops[t].component,
            live_bytes: bytes,
        })
        .collect();
    let peak_pos = live.iter().enumerate().max_by_key(|&(t, &v)| (v, std::cmp::Reverse(t))).map_or(0, |(t, _)| t);
    let peak = live.get(peak_pos).copied().unwrap_or(0);
    let average = if live.is_empty() { 0.0 } else { live.iter().map(|&v| v as f64).sum::<f64>() / live.len() as f64 };
    let trace = StepTrace { samples, peak, average };
    let metrics = TraceMetrics {
        context_len: l,
        mask_ratio: m as f64 / l as f64,
        peak,
        average,
        par: trace.par(),
        peak_component: graph.ops.get(peak_pos).map(|o| o.component).unwrap_or_default(),
        theoretical_peak: plan.workspace_size,
        config,
    };
    Ok((trace, metrics))
}

/// Activation bytes left once the weights are resident.
fn activation_budget(cfg: &ModelConfig, budget: u64) -> Option<u64> {
    budget.checked_sub(cfg.weights_bytes)
}

/// Runs every diffusion step of a request.
///
/// With a budget, chunk search runs per step and only activates when the
/// unchunked plan overflows; `pin_step0` reuses step 0's configuration.
pub fn simulate_run(cfg: &ModelConfig, scen: &ScenarioConfig) -> Result<Vec<StepResult>> {
    let template = build_layer_template(cfg)?;
    let schedule = scen.mask_schedule()?;
    let l = scen.context_len;
    let mut pinned: Option<ChunkConfig> = None;
    let mut out = Vec::with_capacity(schedule.len());
    for (n, &m) in schedule.iter().enumerate() {
        let step = n as u32;
        let config = match (scen.budget, pinned) {
            (_, Some(c)) => c,
            (None, None) => ChunkConfig::DISABLED,
            (Some(budget), None) => {
                let act = activation_budget(cfg, budget).ok_or(Error::Infeasible { step, budget: 0, floor: 0 })?;
                let model = TemplatePeak {
                    template: &template,
                    bindings: bindings([("L", l), ("M", m)]),
                    alignment: scen.alignment,
                };
                let found = search_bottleneck(&model, act, SearchOptions::default())?;
                found.config.ok_or(Error::Infeasible { step, budget: act, floor: found.floor })?
            }
        };
        if scen.pin_step0 && n == 0 {
            pinned = Some(config);
        }
        let (trace, metrics) = trace_step(&template, l, m, config, scen.alignment)?;
        out.push(StepResult {
            state: StepState { step, masked: m, mask_ratio: m as f64 / l as f64 },
            trace,
            metrics,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSet {
    /// Global single-request plan (with in-place logits shift) instead of
    /// myopic per-subgraph planning on a caching allocator.
    pub global_plan: bool,
    pub mask_only: bool,
    pub chunking: bool,
}

impl FeatureSet {
    pub const BASELINE: FeatureSet = FeatureSet { global_plan: false, mask_only: false, chunking: false };
    pub const GLOBAL: FeatureSet = FeatureSet { global_plan: true, mask_only: false, chunking: false };
    pub const GLOBAL_MASK: FeatureSet = FeatureSet { global_plan: true, mask_only: true, chunking: false };
    pub const ALL: FeatureSet = FeatureSet { global_plan: true, mask_only: true, chunking: true };

    pub fn label(&self) -> String {
        let mut parts = vec![if self.global_plan { "global" } else { "myopic" }];
        if self.mask_only {
            parts.push("mask");
        }
        if self.chunking {
            parts.push("chunk");
        }
        parts.join("+")
    }

    /// Model variant implied by the feature set.
    pub fn model(&self, cfg: &ModelConfig) -> ModelConfig {
        let logits = if self.mask_only { LogitsMode::MaskOnly } else { LogitsMode::Eager };
        let shift = match cfg.variants.shift_mode {
            ShiftMode::Concat if self.global_plan => ShiftMode::InPlace,
            s => s,
        };
        cfg.with_variants(logits, shift)
    }
}

/// Step-0 memory under a feature set, prepared once per model.
pub struct StepZero {
    cfg: ModelConfig,
    features: FeatureSet,
    template: FrozenTemplate,
    prompt_ratio: f64,
    pub alignment: u64,
    pub search: SearchOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepZeroPeak {
    /// Activation bytes needed, `None` if no chunk configuration fits.
    pub bytes: Option<u64>,
    pub config: ChunkConfig,
    pub floor: u64,
}

impl StepZero {
    pub fn new(cfg: &ModelConfig, prompt_ratio: f64, features: FeatureSet) -> Result<Self> {
        let cfg = features.model(cfg);
        Ok(StepZero {
            template: build_layer_template(&cfg)?,
            cfg,
            features,
            prompt_ratio,
            alignment: DEFAULT_ALIGNMENT,
            search: SearchOptions::default(),
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn template(&self) -> &FrozenTemplate {
        &self.template
    }

    /// Activation bytes at step 0 for context length `l` against an activation budget.
    pub fn peak(&self, l: u64, act_budget: u64) -> Result<StepZeroPeak> {
        let m = output_len(l, self.prompt_ratio)?;
        let b = bindings([("L", l), ("M", m)]);
        let (config, floor, feasible) = if self.features.chunking {
            let model = TemplatePeak { template: &self.template, bindings: b.clone(), alignment: self.alignment };
            let found = search_bottleneck(&model, act_budget, self.search)?;
            (found.last_config, found.floor, found.is_feasible())
        } else {
            let r = evaluate_peak(&self.template, &b, ChunkConfig::DISABLED, self.alignment)?;
            (ChunkConfig::DISABLED, r.floor, true)
        };
        if !feasible {
            return Ok(StepZeroPeak { bytes: None, config, floor });
        }
        let bytes = if self.features.global_plan {
            evaluate_peak(&self.template, &b, config, self.alignment)?.total_peak
        } else {
            myopic_reserved(&self.template, &b, config, self.alignment)?
        };
        Ok(StepZeroPeak { bytes: Some(bytes), config, floor })
    }
}

fn myopic_reserved(template: &FrozenTemplate, b: &Bindings, config: ChunkConfig, alignment: u64) -> Result<u64> {
    let graph = template.instantiate(&config.apply(b))?;
    let table = analyze(&graph)?;
    let mut alloc = allocsim::CachingAllocator::new(AllocatorConfig::default());
    allocsim::replay_myopic_step(&mut alloc, &graph, &table, &BreakPolicy::Default, alignment)?;
    Ok(alloc.reserved_peak())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmaxResult {
    pub features: String,
    pub l_max: u64,
    /// Activation bytes at `l_max`.
    pub peak: u64,
    pub config: ChunkConfig,
}

/// Largest context length (step 0, all output tokens masked) whose weights
/// plus planned activation peak fit `budget`.
pub fn find_lmax(cfg: &ModelConfig, prompt_ratio: f64, budget: u64, features: FeatureSet) -> Result<LmaxResult> {
    const CAP: u64 = 1 << 26;
    let stepper = StepZero::new(cfg, prompt_ratio, features)?;
    let empty = LmaxResult { features: features.label(), l_max: 0, peak: 0, config: ChunkConfig::DISABLED };
    let Some(act) = activation_budget(cfg, budget) else {
        return Ok(empty);
    };
    let fits = |l: u64| -> Result<Option<StepZeroPeak>> {
        let p = stepper.peak(l, act)?;
        Ok(p.bytes.filter(|&b| b <= act).map(|_| p))
    };
    if fits(1)?.is_none() {
        return Ok(empty);
    }
    let mut lo = 1;
    while lo < CAP && fits((lo * 2).min(CAP))?.is_some() {
        lo = (lo * 2).min(CAP);
    }
    let mut hi = (lo * 2).min(CAP + 1);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)?.is_some() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let at = fits(lo)?.expect("l_max fits");
    if lo < CAP && fits(lo + 1)?.is_some() {
        return Err(Error::Config(format!("peak is not monotone in L around {lo}")));
    }
    Ok(LmaxResult { features: features.label(), l_max: lo, peak: at.bytes.unwrap(), config: at.config })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParRow {
    pub context_len: u64,
    pub par_unchunked: f64,
    /// `None` when no chunk configuration fits the budget.
    pub par_mosaic: Option<f64>,
    pub k_logits: u32,
    pub k_ffn: u32,
    pub chunked: bool,
}

/// Step-0 peak-to-average ratio per context length: eager logits without
/// chunking versus mask-only logits with lazy chunking under `budget`.
pub fn par_curve(cfg: &ModelConfig, prompt_ratio: f64, lens: &[u64], budget: u64) -> Result<Vec<ParRow>> {
    if lens.contains(&0) {
        return Err(Error::Config("context length must be positive".into()));
    }
    let base = build_layer_template(&FeatureSet::GLOBAL.model(cfg).with_variants(LogitsMode::Eager, cfg.variants.shift_mode))?;
    let mosaic = StepZero::new(cfg, prompt_ratio, FeatureSet::ALL)?;
    let act = activation_budget(cfg, budget).unwrap_or(0);
    lens.iter()
        .map(|&l| {
            let m = output_len(l, prompt_ratio)?;
            let (_, unchunked) = trace_step(&base, l, m, ChunkConfig::DISABLED, DEFAULT_ALIGNMENT)?;
            let p = mosaic.peak(l, act)?;
            let par_mosaic = match p.bytes {
                Some(_) => Some(trace_step(mosaic.template(), l, m, p.config, DEFAULT_ALIGNMENT)?.1.par),
                None => None,
            };
            Ok(ParRow {
                context_len: l,
                par_unchunked: unchunked.par,
                par_mosaic,
                k_logits: p.config.k_logits,
                k_ffn: p.config.k_ffn,
                chunked: p.bytes.is_some() && p.config != ChunkConfig::DISABLED,
            })
        })
        .collect()
}
