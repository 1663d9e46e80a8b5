//! The trainable connector: hash-based instruction embedding, per-agent
//! temporal fusion, cross-agent warping and conv aggregation, an
//! instruction-aware Q-Former over the aggregated BEV, cross-attention
//! injection into the ego stream, and a small MLP head that stands in for
//! the frozen language model. One forward graph serves inference, loss, and
//! reverse-mode gradients.
//!
//! Pooling reassociations (projecting values before mixing, composing the
//! input projection into the attention projections) are exact linear-algebra
//! rewrites of the reference formulation; the tests pin them against a
//! naive straight-line oracle.

use crate::autodiff::{Tape, Var};
use crate::bevpipe::{make_warp_taps, BevGrid, ConvParams, GridConfig, TemporalParams};
use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::scene::Weather;
use crate::seeded;
use crate::tasks::{parse_instruction, render_answer, TaskKind};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConnectorConfig {
    pub d_model: usize,
    pub n_queries: usize,
    pub n_heads: usize,
    pub vocab_slots: usize,
    pub head_hidden: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig {
            d_model: 64,
            n_queries: 16,
            n_heads: 2,
            vocab_slots: 256,
            head_hidden: 128,
        }
    }
}

/// Shape parameters shared by the whole pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub connector: ConnectorConfig,
    pub grid: GridConfig,
    /// Sensing agents including the ego; fixes the conv slot count.
    pub n_agents: usize,
    /// Temporal half-window Δ; the window holds 2Δ+1 frames.
    pub window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            connector: ConnectorConfig::default(),
            grid: GridConfig::default(),
            n_agents: 6,
            window: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.connector;
        if c.d_model == 0 || c.d_model % c.n_heads != 0 {
            return Err(Error::validation("d_model must divide by n_heads"));
        }
        if self.n_agents == 0 {
            return Err(Error::validation("need at least the ego agent"));
        }
        if c.vocab_slots == 0 || c.n_queries == 0 || c.head_hidden == 0 {
            return Err(Error::validation("degenerate connector dimensions"));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        2 * self.window + 1
    }
}

/// Runtime switches: helper masking plus the ablation bypasses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineFlags {
    /// Number of helper agents whose grids participate (0 = ego only).
    pub helpers: usize,
    pub use_temporal: bool,
    pub use_qformer: bool,
    pub use_warp: bool,
    /// Truncate the temporal window to {t-Δ, …, t}.
    pub causal: bool,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        PipelineFlags {
            helpers: usize::MAX,
            use_temporal: true,
            use_qformer: true,
            use_warp: true,
            causal: false,
        }
    }
}

impl PipelineFlags {
    pub fn effective_helpers(&self, cfg: &PipelineConfig) -> usize {
        self.helpers.min(cfg.n_agents.saturating_sub(1))
    }
}

/// Every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectorParams {
    pub config: PipelineConfig,
    pub temporal: TemporalParams,
    pub conv: ConvParams,
    pub input_proj: Array2<f64>,
    pub queries: Array2<f64>,
    pub embed_table: Array2<f64>,
    pub qformer: AttnParams,
    pub inject: AttnParams,
    pub head_w1: Array2<f64>,
    pub head_b1: Array2<f64>,
    pub head_w2: Array2<f64>,
    pub head_b2: Array2<f64>,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

impl ConnectorParams {
    /// Seeded initialization. The conv starts as an agent-mean pass-through
    /// plus noise so aggregated features are informative from step zero;
    /// the head output layer starts at zero so early logits are pure
    /// training signal.
    pub fn init(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.grid.channels;
        let d = config.connector.d_model;
        let a = config.n_agents;
        let mut rng = seeded::stream(seed, "params", &[]);
        let mut kernel = Array2::from_shape_fn((9 * a * c, c), |_| rng.gen_range(-0.05..0.05));
        for slot in 0..a {
            for ch in 0..c {
                kernel[(4 * a * c + slot * c + ch, ch)] += 1.0 / a as f64;
            }
        }
        Ok(ConnectorParams {
            config,
            temporal: TemporalParams {
                wq: xavier(&mut rng, c, c),
                wk: xavier(&mut rng, c, c),
                wv: xavier(&mut rng, c, c),
            },
            conv: ConvParams {
                kernel,
                bias: Array2::zeros((1, c)),
            },
            input_proj: xavier(&mut rng, c, d),
            queries: Array2::from_shape_fn((config.connector.n_queries, d), |_| {
                rng.gen_range(-0.5..0.5)
            }),
            embed_table: Array2::from_shape_fn((config.connector.vocab_slots, d), |_| {
                rng.gen_range(-0.5..0.5)
            }),
            qformer: AttnParams {
                wq: xavier(&mut rng, d, d),
                wk: xavier(&mut rng, d, d),
                wv: xavier(&mut rng, d, d),
                wo: xavier(&mut rng, d, d),
            },
            inject: AttnParams {
                wq: xavier(&mut rng, d, d),
                wk: xavier(&mut rng, d, d),
                wv: xavier(&mut rng, d, d),
                wo: xavier(&mut rng, d, d),
            },
            head_w1: xavier(&mut rng, 3 * d, config.connector.head_hidden),
            head_b1: Array2::zeros((1, config.connector.head_hidden)),
            head_w2: Array2::zeros((config.connector.head_hidden, 1)),
            head_b2: Array2::zeros((1, 1)),
        })
    }

    pub fn zeros_like(other: &ConnectorParams) -> Self {
        let mut z = other.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Fixed tensor order; the checkpoint format and the optimizer both
    /// iterate in this order.
    pub fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("temporal.wq", &self.temporal.wq),
            ("temporal.wk", &self.temporal.wk),
            ("temporal.wv", &self.temporal.wv),
            ("conv.kernel", &self.conv.kernel),
            ("conv.bias", &self.conv.bias),
            ("proj.input", &self.input_proj),
            ("qformer.queries", &self.queries),
            ("embed.table", &self.embed_table),
            ("qformer.wq", &self.qformer.wq),
            ("qformer.wk", &self.qformer.wk),
            ("qformer.wv", &self.qformer.wv),
            ("qformer.wo", &self.qformer.wo),
            ("inject.wq", &self.inject.wq),
            ("inject.wk", &self.inject.wk),
            ("inject.wv", &self.inject.wv),
            ("inject.wo", &self.inject.wo),
            ("head.w1", &self.head_w1),
            ("head.b1", &self.head_b1),
            ("head.w2", &self.head_w2),
            ("head.b2", &self.head_b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        vec![
            ("temporal.wq", &mut self.temporal.wq),
            ("temporal.wk", &mut self.temporal.wk),
            ("temporal.wv", &mut self.temporal.wv),
            ("conv.kernel", &mut self.conv.kernel),
            ("conv.bias", &mut self.conv.bias),
            ("proj.input", &mut self.input_proj),
            ("qformer.queries", &mut self.queries),
            ("embed.table", &mut self.embed_table),
            ("qformer.wq", &mut self.qformer.wq),
            ("qformer.wk", &mut self.qformer.wk),
            ("qformer.wv", &mut self.qformer.wv),
            ("qformer.wo", &mut self.qformer.wo),
            ("inject.wq", &mut self.inject.wq),
            ("inject.wk", &mut self.inject.wk),
            ("inject.wv", &mut self.inject.wv),
            ("inject.wo", &mut self.inject.wo),
            ("head.w1", &mut self.head_w1),
            ("head.b1", &mut self.head_b1),
            ("head.w2", &mut self.head_w2),
            ("head.b2", &mut self.head_b2),
        ]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Raw per-agent window of rasterized grids (own anchors, oldest first).
#[derive(Clone, Debug)]
pub struct AgentWindow {
    pub grids: Vec<Arc<BevGrid>>,
}

/// One supervised example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub instruction: String,
    pub task: TaskKind,
    pub label: bool,
    /// Index 0 = ego, then helpers.
    pub agents: Vec<AgentWindow>,
    /// Shared frame for aggregation: ego position, heading toward the RSU.
    pub target_anchor: Pose,
    pub weather: Weather,
    pub episode_id: u64,
    pub t: usize,
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Hash tokens into embedding rows (FNV-1a 64, modulo table size).
pub fn token_ids(text: &str, vocab_slots: usize) -> Result<Vec<usize>> {
    let toks = tokenize(text);
    if toks.is_empty() {
        return Err(Error::validation("instruction empty after tokenization"));
    }
    Ok(toks
        .iter()
        .map(|t| (seeded::fnv1a(t.as_bytes()) % vocab_slots as u64) as usize)
        .collect())
}

/// Per-token embeddings plus their mean.
pub fn embed_instruction(
    text: &str,
    params: &ConnectorParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let ids = token_ids(text, params.config.connector.vocab_slots)?;
    let d = params.config.connector.d_model;
    let mut tokens = Array2::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        tokens.row_mut(i).assign(&params.embed_table.row(id));
    }
    let mut pooled = Array2::zeros((1, d));
    for row in tokens.rows() {
        for (j, v) in row.iter().enumerate() {
            pooled[(0, j)] += v / ids.len() as f64;
        }
    }
    Ok((tokens, pooled))
}

/// Tape variables for every parameter tensor, in `tensors()` order.
struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    fn new(tape: &mut Tape, params: &ConnectorParams) -> Self {
        let vars = params
            .tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        ParamVars { vars }
    }

    fn get(&self, params: &ConnectorParams, name: &str) -> Var {
        let idx = params
            .tensors()
            .iter()
            .position(|(n, _)| *n == name)
            .expect("tensor name");
        self.vars[idx]
    }
}

struct GraphOut {
    logit: Var,
    pvars: ParamVars,
}

/// Build the full differentiable forward pass for one sample.
fn build_graph(
    tape: &mut Tape,
    sample: &Sample,
    params: &ConnectorParams,
    flags: &PipelineFlags,
) -> Result<GraphOut> {
    let cfg = &params.config;
    cfg.validate()?;
    if sample.agents.is_empty() {
        return Err(Error::validation("sample has no agents"));
    }
    let (h, w) = (cfg.grid.h, cfg.grid.w);
    let cc = &cfg.connector;
    let d = cc.d_model;
    let dh = d / cc.n_heads;
    let center = cfg.window;
    let helpers = flags.effective_helpers(cfg);

    let pvars = ParamVars::new(tape, params);
    let p = |name: &str| pvars.get(params, name);

    // Per-agent branch: window alignment, temporal attention, ego warp.
    let zero_grid = Array2::zeros((h * w, cfg.grid.channels));
    let mut agent_vars = Vec::with_capacity(cfg.n_agents);
    for a in 0..cfg.n_agents {
        let active = a == 0 || (a <= helpers && a < sample.agents.len());
        if !active {
            agent_vars.push(tape.leaf(zero_grid.clone()));
            continue;
        }
        let win = &sample.agents[a];
        if win.grids.len() != cfg.window_len() {
            return Err(Error::validation(format!(
                "agent {a} window has {} grids, expected {}",
                win.grids.len(),
                cfg.window_len()
            )));
        }
        let anchor_t = win.grids[center].anchor;
        let slot_range: Vec<usize> = if !flags.use_temporal {
            vec![center]
        } else if flags.causal {
            (0..=center).collect()
        } else {
            (0..cfg.window_len()).collect()
        };
        let query_slot = slot_range
            .iter()
            .position(|&s| s == center)
            .expect("window contains t");
        let mut slots = Vec::with_capacity(slot_range.len());
        for &s in &slot_range {
            let g = &win.grids[s];
            let leaf = tape.leaf(g.to_matrix());
            if g.anchor == anchor_t {
                slots.push(leaf);
            } else {
                let taps = Arc::new(make_warp_taps(g.anchor, anchor_t, h, w, g.cell_size));
                slots.push(tape.warp(leaf, taps));
            }
        }
        let fused = tape.temporal_attn(
            &slots,
            p("temporal.wq"),
            p("temporal.wk"),
            p("temporal.wv"),
            query_slot,
        );
        let to_target = a == 0 || flags.use_warp;
        let out = if to_target && anchor_t != sample.target_anchor {
            let taps = Arc::new(make_warp_taps(
                anchor_t,
                sample.target_anchor,
                h,
                w,
                cfg.grid.cell_size,
            ));
            tape.warp(fused, taps)
        } else {
            fused
        };
        agent_vars.push(out);
    }
    let cat = tape.concat_cols(&agent_vars);
    let b_agg = tape.conv3x3(cat, p("conv.kernel"), p("conv.bias"), h, w);

    // Instruction embedding.
    let ids = token_ids(&sample.instruction, cc.vocab_slots)?;
    let inst = tape.gather_rows(p("embed.table"), &ids);
    let inst_pooled = tape.mean_rows(inst);

    // Instruction-aware distillation over the aggregated BEV.
    let proj = p("proj.input");
    let f_bev = if flags.use_qformer {
        graph_qformer(tape, b_agg, inst, proj, &pvars, params)
    } else {
        // Mean-pooled projected tokens, replicated across the query slots.
        let m = tape.mean_rows(b_agg);
        let mp = tape.matmul(m, proj);
        let copies = vec![mp; cc.n_queries];
        tape.concat_rows(&copies)
    };
    let pooled_bev = tape.mean_rows(f_bev);

    // Injection into the ego stream, evaluated in pooled form. The ego
    // stream is the current-frame ego raster in the target anchor frame;
    // it carries no trainable upstream stage, so it enters as a constant.
    let ego_grid = &sample.agents[0].grids[center];
    let ego_const_grid = if ego_grid.anchor == sample.target_anchor {
        ego_grid.to_matrix()
    } else {
        crate::bevpipe::warp_to_ego(ego_grid, sample.target_anchor).to_matrix()
    };
    let ego_const = tape.leaf(ego_const_grid);
    let ego_mean = tape.mean_rows(ego_const);
    let ego_mean_d = tape.matmul(ego_mean, proj);
    let mut head_pools = Vec::with_capacity(cc.n_heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for hh in 0..cc.n_heads {
        let wq_h = tape.slice_cols(p("inject.wq"), hh * dh, dh);
        let wk_h = tape.slice_cols(p("inject.wk"), hh * dh, dh);
        let wv_h = tape.slice_cols(p("inject.wv"), hh * dh, dh);
        let m_qh = tape.matmul(proj, wq_h);
        let k_h = tape.matmul(f_bev, wk_h);
        let mk = tape.matmul_bt(m_qh, k_h);
        let scores = tape.matmul(ego_const, mk);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        let mean_attn = tape.mean_rows(attn);
        let v_h = tape.matmul(f_bev, wv_h);
        head_pools.push(tape.matmul(mean_attn, v_h));
    }
    let pooled_attn = tape.concat_cols(&head_pools);
    let pooled_out = tape.matmul(pooled_attn, p("inject.wo"));
    let pooled_f_ego = tape.add(ego_mean_d, pooled_out);

    // Prediction head.
    let head_in = tape.concat_cols(&[pooled_f_ego, pooled_bev, inst_pooled]);
    let pre1 = tape.matmul(head_in, p("head.w1"));
    let pre1b = tape.add_row(pre1, p("head.b1"));
    let h1 = tape.tanh(pre1b);
    let pre2 = tape.matmul(h1, p("head.w2"));
    let logit = tape.add_row(pre2, p("head.b2"));
    Ok(GraphOut { logit, pvars })
}

/// One multi-head attention layer of learned queries (plus instruction
/// tokens) over projected BEV tokens, with a residual connection. Keys and
/// values compose the input projection into the head projections, which is
/// an exact rewrite of projecting the tokens first.
fn graph_qformer(
    tape: &mut Tape,
    b_agg: Var,
    inst: Var,
    proj: Var,
    pvars: &ParamVars,
    params: &ConnectorParams,
) -> Var {
    let cc = &params.config.connector;
    let d = cc.d_model;
    let dh = d / cc.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let p = |name: &str| pvars.get(params, name);
    let qseq = tape.concat_rows(&[p("qformer.queries"), inst]);
    let mut heads = Vec::with_capacity(cc.n_heads);
    for hh in 0..cc.n_heads {
        let wq_h = tape.slice_cols(p("qformer.wq"), hh * dh, dh);
        let wk_h = tape.slice_cols(p("qformer.wk"), hh * dh, dh);
        let wv_h = tape.slice_cols(p("qformer.wv"), hh * dh, dh);
        let q_h = tape.matmul(qseq, wq_h);
        let m_kh = tape.matmul(proj, wk_h);
        let qk = tape.matmul_bt(q_h, m_kh);
        let scores = tape.matmul_bt(qk, b_agg);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        let av = tape.matmul(attn, b_agg);
        let m_vh = tape.matmul(proj, wv_h);
        heads.push(tape.matmul(av, m_vh));
    }
    let o = tape.concat_cols(&heads);
    let ow = tape.matmul(o, p("qformer.wo"));
    let out = tape.add(qseq, ow);
    tape.slice_rows(out, 0, cc.n_queries)
}

/// Distill the aggregated BEV into `n_queries` tokens (forward only).
pub fn qformer_distill(
    b_agg: &BevGrid,
    inst_tokens: &Array2<f64>,
    params: &ConnectorParams,
) -> Result<Array2<f64>> {
    params.config.validate()?;
    let mut tape = Tape::new();
    let pvars = ParamVars::new(&mut tape, params);
    let b = tape.leaf(b_agg.to_matrix());
    let inst = tape.leaf(inst_tokens.clone());
    let proj = pvars.get(params, "proj.input");
    let out = graph_qformer(&mut tape, b, inst, proj, &pvars, params);
    Ok(tape.value(out).clone())
}

/// Inject distilled BEV tokens into the ego stream and score it
/// (forward only). Ties at logit zero resolve to the negative class.
pub fn inject_and_predict(
    f_ego: &BevGrid,
    f_bev: &Array2<f64>,
    inst_pooled: &Array2<f64>,
    task: TaskKind,
    params: &ConnectorParams,
) -> Result<(f64, String)> {
    let cc = &params.config.connector;
    let d = cc.d_model;
    let dh = d / cc.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut tape = Tape::new();
    let pvars = ParamVars::new(&mut tape, params);
    let p = |name: &str| pvars.get(params, name);
    let ego_const = tape.leaf(f_ego.to_matrix());
    let fbev = tape.leaf(f_bev.clone());
    let instp = tape.leaf(inst_pooled.clone());
    let proj = p("proj.input");
    let ego_mean = tape.mean_rows(ego_const);
    let ego_mean_d = tape.matmul(ego_mean, proj);
    let mut head_pools = Vec::with_capacity(cc.n_heads);
    for hh in 0..cc.n_heads {
        let wq_h = tape.slice_cols(p("inject.wq"), hh * dh, dh);
        let wk_h = tape.slice_cols(p("inject.wk"), hh * dh, dh);
        let wv_h = tape.slice_cols(p("inject.wv"), hh * dh, dh);
        let m_qh = tape.matmul(proj, wq_h);
        let k_h = tape.matmul(fbev, wk_h);
        let mk = tape.matmul_bt(m_qh, k_h);
        let scores = tape.matmul(ego_const, mk);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        let mean_attn = tape.mean_rows(attn);
        let v_h = tape.matmul(fbev, wv_h);
        head_pools.push(tape.matmul(mean_attn, v_h));
    }
    let pooled_attn = tape.concat_cols(&head_pools);
    let pooled_out = tape.matmul(pooled_attn, p("inject.wo"));
    let pooled_f_ego = tape.add(ego_mean_d, pooled_out);
    let pooled_bev = tape.mean_rows(fbev);
    let head_in = tape.concat_cols(&[pooled_f_ego, pooled_bev, instp]);
    let pre1 = tape.matmul(head_in, p("head.w1"));
    let pre1b = tape.add_row(pre1, p("head.b1"));
    let h1 = tape.tanh(pre1b);
    let pre2 = tape.matmul(h1, p("head.w2"));
    let logit_var = tape.add_row(pre2, p("head.b2"));
    let logit = tape.scalar(logit_var);
    if !logit.is_finite() {
        return Err(Error::Divergence("non-finite logit".into()));
    }
    Ok((logit, render_answer(task, logit > 0.0).to_string()))
}

/// Result of one full-pipeline inference.
#[derive(Clone, Debug)]
pub struct InferOutput {
    pub logit: f64,
    pub answer: String,
    pub task: TaskKind,
}

/// Run the whole inference pipeline on one sample: per-agent fusion and
/// warping, conv aggregation, instruction-aware distillation, injection,
/// and templated answer rendering. The task identity reaches the model only
/// through the instruction text.
pub fn infer_pipeline(
    sample: &Sample,
    params: &ConnectorParams,
    flags: &PipelineFlags,
) -> Result<InferOutput> {
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, sample, params, flags)?;
    let logit = tape.scalar(g.logit);
    if !logit.is_finite() {
        return Err(Error::Divergence("non-finite logit".into()));
    }
    let task = parse_instruction(&sample.instruction)?;
    Ok(InferOutput {
        logit,
        answer: render_answer(task, logit > 0.0).to_string(),
        task,
    })
}

/// Loss and parameter gradients for one sample.
pub fn compute_loss_and_grads(
    sample: &Sample,
    params: &ConnectorParams,
    flags: &PipelineFlags,
) -> Result<(f64, ConnectorParams)> {
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, sample, params, flags)?;
    let label = if sample.label { 1.0 } else { 0.0 };
    let loss_var = tape.bce_with_logits(g.logit, label);
    let loss = tape.scalar(loss_var);
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss at episode {} t {}",
            sample.episode_id, sample.t
        )));
    }
    let grads = tape.backward(loss_var);
    let mut out = ConnectorParams::zeros_like(params);
    for (i, (_, t)) in out.tensors_mut().into_iter().enumerate() {
        if let Some(gr) = &grads[g.pvars.vars[i]] {
            t.assign(gr);
        }
    }
    Ok((loss, out))
}

/// Mean loss and mean gradients over a batch. Per-sample gradients are
/// computed in parallel but reduced in index order, so the result does not
/// depend on the thread count.
pub fn batch_loss_and_grads(
    batch: &[&Sample],
    params: &ConnectorParams,
    flags: &PipelineFlags,
) -> Result<(f64, ConnectorParams)> {
    let per: Vec<Result<(f64, ConnectorParams)>> = batch
        .par_iter()
        .map(|s| compute_loss_and_grads(s, params, flags))
        .collect();
    let mut loss = 0.0;
    let mut acc = ConnectorParams::zeros_like(params);
    let n = batch.len() as f64;
    for r in per {
        let (l, g) = r?;
        loss += l / n;
        for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(g.tensors()) {
            a.scaled_add(1.0 / n, b);
        }
    }
    Ok((loss, acc))
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub flags: PipelineFlags,
    pub pipeline: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 15,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.05,
            warmup_frac: 0.05,
            flags: PipelineFlags::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub final_lr: f64,
    pub train_loss: f64,
    pub val_macro_accuracy: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Tab-separated, one record per epoch.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tlr\ttrain_loss\tval_macro_accuracy\tbest\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.final_lr, e.train_loss, e.val_macro_accuracy, e.is_best as u8
            ));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Best-validation checkpoint (last finite one if training diverged).
    pub params: ConnectorParams,
    pub log: TrainLog,
    pub diverged: bool,
}

/// Linear warmup into cosine decay.
fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct AdamW {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    fn new(params: &ConnectorParams, weight_decay: f64) -> Self {
        AdamW {
            m: params.tensors().iter().map(|(_, t)| Array2::zeros(t.dim())).collect(),
            v: params.tensors().iter().map(|(_, t)| Array2::zeros(t.dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Decoupled update: the decay term scales with the current lr and does
    /// not pass through the moment estimates.
    fn step(&mut self, params: &mut ConnectorParams, grads: &ConnectorParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, ((_, p), (_, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .enumerate()
        {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            });
        }
    }
}

/// Macro-average accuracy: the mean of per-task accuracies over whichever
/// tasks appear in the split.
pub fn macro_accuracy(
    samples: &[Sample],
    params: &ConnectorParams,
    flags: &PipelineFlags,
) -> Result<f64> {
    let preds: Vec<Result<(TaskKind, bool, bool)>> = samples
        .par_iter()
        .map(|s| {
            let out = infer_pipeline(s, params, flags)?;
            Ok((s.task, out.logit > 0.0, s.label))
        })
        .collect();
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    for r in preds {
        let (task, pred, label) = r?;
        tot[task.index()] += 1;
        if pred == label {
            hit[task.index()] += 1;
        }
    }
    let mut acc = 0.0;
    let mut n_tasks = 0;
    for i in 0..3 {
        if tot[i] > 0 {
            acc += hit[i] as f64 / tot[i] as f64;
            n_tasks += 1;
        }
    }
    if n_tasks == 0 {
        return Err(Error::validation("no labeled samples to score"));
    }
    Ok(acc / n_tasks as f64)
}

/// Train the connector with decoupled weight decay, cosine decay with
/// linear warmup, and seeded batch order. Returns the checkpoint with the
/// best validation macro accuracy.
pub fn train_connector(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation("train and validation splits must be non-empty"));
    }
    let mut params = ConnectorParams::init(cfg.pipeline, cfg.seed)?;
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = ((total_steps as f64) * cfg.warmup_frac).ceil() as usize;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ConnectorParams)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = seeded::stream(cfg.seed, "epoch-order", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            lr = lr_at(step, total_steps, warmup, cfg.lr);
            match batch_loss_and_grads(&batch, &params, &cfg.flags) {
                Ok((loss, grads)) => {
                    epoch_loss += loss * batch.len() as f64;
                    opt.step(&mut params, &grads, lr);
                }
                Err(Error::Divergence(_)) => {
                    // Keep the last finite checkpoint.
                    let fallback = best.map(|(_, p)| p).unwrap_or(params);
                    return Ok(TrainOutput {
                        params: fallback,
                        log,
                        diverged: true,
                    });
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let val_acc = macro_accuracy(val, &params, &cfg.flags)?;
        let is_best = best.as_ref().map_or(true, |(b, _)| val_acc > *b);
        if is_best {
            best = Some((val_acc, params.clone()));
        }
        log.epochs.push(EpochRecord {
            epoch,
            final_lr: lr,
            train_loss: epoch_loss / train.len() as f64,
            val_macro_accuracy: val_acc,
            is_best,
        });
    }
    Ok(TrainOutput {
        params: best.map(|(_, p)| p).unwrap_or(params),
        log,
        diverged: false,
    })
}

// --- Checkpoint format -----------------------------------------------------
//
// magic "CNX1", u32 config length, config text (key=value lines), u32 tensor
// count, then per tensor: u32 name length, name, u32 rank, u32 dims,
// little-endian f64 data, row-major.

const CHECKPOINT_MAGIC: &[u8; 4] = b"CNX1";

fn config_block(params: &ConnectorParams, flags: &PipelineFlags) -> String {
    let c = &params.config;
    format!(
        "d_model={}\nn_queries={}\nn_heads={}\nvocab_slots={}\nhead_hidden={}\n\
         grid_h={}\ngrid_w={}\nchannels={}\ncell_size={}\nn_agents={}\nwindow={}\n\
         helpers={}\nuse_temporal={}\nuse_qformer={}\nuse_warp={}\ncausal={}\n",
        c.connector.d_model,
        c.connector.n_queries,
        c.connector.n_heads,
        c.connector.vocab_slots,
        c.connector.head_hidden,
        c.grid.h,
        c.grid.w,
        c.grid.channels,
        c.grid.cell_size,
        c.n_agents,
        c.window,
        flags.helpers,
        flags.use_temporal as u8,
        flags.use_qformer as u8,
        flags.use_warp as u8,
        flags.causal as u8
    )
}

fn parse_config_block(text: &str) -> Result<(PipelineConfig, PipelineFlags)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<String> {
        map.get(k)
            .cloned()
            .ok_or_else(|| Error::format(format!("checkpoint config missing '{k}'")))
    };
    let geti = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(format!("bad integer for '{k}'")))
    };
    let getb = |k: &str| -> Result<bool> { Ok(geti(k)? != 0) };
    let cell_size: f64 = get("cell_size")?
        .parse()
        .map_err(|_| Error::format("bad cell_size"))?;
    Ok((
        PipelineConfig {
            connector: ConnectorConfig {
                d_model: geti("d_model")?,
                n_queries: geti("n_queries")?,
                n_heads: geti("n_heads")?,
                vocab_slots: geti("vocab_slots")?,
                head_hidden: geti("head_hidden")?,
            },
            grid: GridConfig {
                h: geti("grid_h")?,
                w: geti("grid_w")?,
                channels: geti("channels")?,
                cell_size,
            },
            n_agents: geti("n_agents")?,
            window: geti("window")?,
        },
        PipelineFlags {
            helpers: geti("helpers")?,
            use_temporal: getb("use_temporal")?,
            use_qformer: getb("use_qformer")?,
            use_warp: getb("use_warp")?,
            causal: getb("causal")?,
        },
    ))
}

pub fn save_checkpoint(
    params: &ConnectorParams,
    flags: &PipelineFlags,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = config_block(params, flags);
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ConnectorParams, PipelineFlags)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > buf.len() {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &buf[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let u32_at = |at: &mut usize| -> Result<u32> {
        let b = take(at, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let cfg_len = u32_at(&mut at)? as usize;
    let cfg_text = String::from_utf8(take(&mut at, cfg_len)?.to_vec())
        .map_err(|_| Error::format("checkpoint config not utf-8"))?;
    let (pipeline, flags) = parse_config_block(&cfg_text)?;
    let n_tensors = u32_at(&mut at)? as usize;
    let mut params = ConnectorParams::init(pipeline, 0)?;
    let expected: Vec<&'static str> = params.tensors().iter().map(|(n, _)| *n).collect();
    if n_tensors != expected.len() {
        return Err(Error::format(format!(
            "checkpoint has {n_tensors} tensors, expected {}",
            expected.len()
        )));
    }
    for name in expected {
        let name_len = u32_at(&mut at)? as usize;
        let got = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| Error::format("tensor name not utf-8"))?;
        if got != name {
            return Err(Error::format(format!(
                "tensor order mismatch: got '{got}', expected '{name}'"
            )));
        }
        let rank = u32_at(&mut at)?;
        if rank != 2 {
            return Err(Error::format("unsupported tensor rank"));
        }
        let rows = u32_at(&mut at)? as usize;
        let cols = u32_at(&mut at)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let b = take(&mut at, 8)?;
            data.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|_| Error::format("tensor shape"))?;
        let slot = params
            .tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .expect("known tensor");
        if slot.1.dim() != arr.dim() {
            return Err(Error::format(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                arr.dim(),
                slot.1.dim()
            )));
        }
        *slot.1 = arr;
    }
    if at != buf.len() {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    Ok((params, flags))
}

/// Write a training log next to a checkpoint.
pub fn save_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log.to_tsv().as_bytes())
        .map_err(|e| Error::io(path, e))
}
