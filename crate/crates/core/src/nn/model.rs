//! The dynamics model: a two-block causal self-attention encoder over hourly
//! tokens with hand-written reverse-mode gradients.
//!
//! Block 1 sees state + demographic embeddings; block 2 adds an embedded
//! window of upcoming treatment doses at every position. Four output heads
//! share the final representation: the severity-change regression plus three
//! auxiliary targets (current-state reconstruction, terminal flag, temporal
//! adjacency of position pairs). The behavior-cloning variant reuses block 1
//! and swaps the heads for a single dose-regression head.
//!
//! Everything runs in f64. Parameters live in one flat vector with named
//! segments so the optimizer and the finite-difference checker can walk them
//! uniformly.

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::*;

/// Number of transformer blocks; the architecture is two-stage by design.
pub const N_BLOCKS: usize = 2;

const RMS_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers_per_block: usize,
    pub dropout: f64,
    /// Maximum sequence length the positional table supports.
    pub context: usize,
    /// Hidden width of each output head.
    pub head_width: usize,
    /// Feed-forward hidden width as a multiple of `embed_dim`.
    pub ff_mult: usize,
}

impl Default for DynamicsModelConfig {
    fn default() -> Self {
        DynamicsModelConfig {
            embed_dim: 64,
            heads: 4,
            layers_per_block: 2,
            dropout: 0.0,
            context: 96,
            head_width: 32,
            ff_mult: 2,
        }
    }
}

impl DynamicsModelConfig {
    /// The canonical small configuration used for gradient verification.
    pub fn tiny() -> Self {
        DynamicsModelConfig {
            embed_dim: 8,
            heads: 2,
            layers_per_block: 1,
            dropout: 0.0,
            context: 16,
            head_width: 8,
            ff_mult: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers_per_block == 0 || self.context == 0 || self.head_width == 0 || self.ff_mult == 0 {
            return Err(Error::InvalidConfig("zero-sized model dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Input dimensions the layout depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub n_obs: usize,
    pub n_demo: usize,
    /// Width of the future-action window in hours (0 for the clone model,
    /// which predicts doses instead of consuming them).
    pub action_window: usize,
}

impl DataShape {
    pub fn n_action_inputs(&self) -> usize {
        2 * self.action_window
    }
}

#[derive(Debug, Clone)]
pub struct LinearSeg {
    pub w: Range<usize>,
    pub b: Option<Range<usize>>,
    pub inp: usize,
    pub out: usize,
}

#[derive(Debug, Clone)]
pub struct LayerSeg {
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ff1: LinearSeg,
    pub ff2: LinearSeg,
}

#[derive(Debug, Clone)]
pub struct HeadSeg {
    pub l1: LinearSeg,
    pub l2: LinearSeg,
}

/// Named flat-parameter layout.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    pub segments: Vec<(String, Range<usize>)>,
    pub total: usize,
}

impl ParamLayout {
    fn seg(&mut self, name: &str, len: usize) -> Range<usize> {
        let r = self.total..self.total + len;
        self.segments.push((name.to_string(), r.clone()));
        self.total += len;
        r
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, bias: bool) -> LinearSeg {
        let w = self.seg(&format!("{name}.w"), inp * out);
        let b = if bias { Some(self.seg(&format!("{name}.b"), out)) } else { None };
        LinearSeg { w, b, inp, out }
    }

    fn layer(&mut self, prefix: &str, d: usize, ff: usize) -> LayerSeg {
        LayerSeg {
            wq: self.seg(&format!("{prefix}.wq"), d * d),
            wk: self.seg(&format!("{prefix}.wk"), d * d),
            wv: self.seg(&format!("{prefix}.wv"), d * d),
            wo: self.seg(&format!("{prefix}.wo"), d * d),
            ff1: self.linear(&format!("{prefix}.ff1"), d, ff, true),
            ff2: self.linear(&format!("{prefix}.ff2"), ff, d, true),
        }
    }

    fn head(&mut self, prefix: &str, inp: usize, hidden: usize, out: usize) -> HeadSeg {
        HeadSeg {
            l1: self.linear(&format!("{prefix}.1"), inp, hidden, true),
            l2: self.linear(&format!("{prefix}.2"), hidden, out, true),
        }
    }
}

/// Which heads a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Severity-change prediction with auxiliary heads; consumes actions.
    Dynamics,
    /// Behavior cloning: predicts the next `bc_horizons` hours of log-doses
    /// for both drugs from states alone.
    BehaviorClone { bc_horizons: usize },
}

/// Full structural description: segment ranges for every weight.
#[derive(Debug, Clone)]
pub struct ModelStructure {
    pub config: DynamicsModelConfig,
    pub shape: DataShape,
    pub kind: ModelKind,
    pub layout: ParamLayout,

    pub state_embed: LinearSeg,
    pub demo_embed: LinearSeg,
    /// Present only for the dynamics kind.
    pub action_embed: Option<LinearSeg>,
    pub pos: Range<usize>,
    /// blocks[0] runs on state tokens; blocks[1] (dynamics only) runs after
    /// the action embeddings are added.
    pub blocks: Vec<Vec<LayerSeg>>,

    pub sev_head: Option<HeadSeg>,
    pub recon_head: Option<HeadSeg>,
    pub term_head: Option<HeadSeg>,
    pub adj_head: Option<HeadSeg>,
    pub bc_head: Option<HeadSeg>,
}

impl ModelStructure {
    pub fn new(config: DynamicsModelConfig, shape: DataShape, kind: ModelKind) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let ff = d * config.ff_mult;
        let hw = config.head_width;
        let mut layout = ParamLayout::default();

        let state_embed = layout.linear("embed.state", shape.n_obs, d, true);
        let demo_embed = layout.linear("embed.demo", shape.n_demo, d, true);
        let action_embed = match kind {
            ModelKind::Dynamics => Some(layout.linear("embed.action", shape.n_action_inputs(), d, true)),
            ModelKind::BehaviorClone { .. } => None,
        };
        let pos = layout.seg("embed.pos", config.context * d);

        let n_blocks = match kind {
            ModelKind::Dynamics => N_BLOCKS,
            ModelKind::BehaviorClone { .. } => 1,
        };
        let mut blocks = Vec::new();
        for b in 0..n_blocks {
            let mut layers = Vec::new();
            for l in 0..config.layers_per_block {
                layers.push(layout.layer(&format!("b{b}.l{l}"), d, ff));
            }
            blocks.push(layers);
        }

        let (sev_head, recon_head, term_head, adj_head, bc_head) = match kind {
            ModelKind::Dynamics => (
                Some(layout.head("head.severity", d, hw, 1)),
                Some(layout.head("head.recon", d, hw, shape.n_obs)),
                Some(layout.head("head.terminal", d, hw, 1)),
                Some(layout.head("head.adjacency", 2 * d, hw, 1)),
                None,
            ),
            ModelKind::BehaviorClone { bc_horizons } => {
                (None, None, None, None, Some(layout.head("head.clone", d, hw, 2 * bc_horizons)))
            }
        };

        Ok(ModelStructure {
            config,
            shape,
            kind,
            layout,
            state_embed,
            demo_embed,
            action_embed,
            pos,
            blocks,
            sev_head,
            recon_head,
            term_head,
            adj_head,
            bc_head,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }
}

/// Flat parameter values plus their structure.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub structure: ModelStructure,
    pub values: Vec<f64>,
}

impl ParameterSet {
    /// Training initialization: small Gaussian weights, zero-initialized
    /// residual projections and head outputs (a fresh model predicts exactly
    /// zero).
    pub fn init(structure: ModelStructure, seed: u64) -> Self {
        let mut values = vec![0.0; structure.n_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |r: &Range<usize>, std: f64, values: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
            for v in &mut values[r.clone()] {
                let g: f64 = rng.sample(StandardNormal);
                *v = std * g;
            }
        };
        fill(&structure.state_embed.w, 0.02, &mut values, &mut rng);
        fill(&structure.demo_embed.w, 0.02, &mut values, &mut rng);
        if let Some(a) = &structure.action_embed {
            fill(&a.w, 0.02, &mut values, &mut rng);
        }
        fill(&structure.pos, 0.01, &mut values, &mut rng);
        for block in &structure.blocks {
            for layer in block {
                fill(&layer.wq, 0.02, &mut values, &mut rng);
                fill(&layer.wk, 0.02, &mut values, &mut rng);
                fill(&layer.wv, 0.02, &mut values, &mut rng);
                // wo stays zero: residual stream untouched at start.
                fill(&layer.ff1.w, 0.02, &mut values, &mut rng);
                // ff2 stays zero.
            }
        }
        for head in [&structure.sev_head, &structure.recon_head, &structure.term_head, &structure.adj_head, &structure.bc_head]
            .into_iter()
            .flatten()
        {
            fill(&head.l1.w, 0.02, &mut values, &mut rng);
            // l2 stays zero: initial predictions are exactly 0.
        }
        ParameterSet { structure, values }
    }

    /// Dense random initialization used by gradient checks, so every path
    /// (including residual projections) carries signal.
    pub fn init_dense_random(structure: ModelStructure, seed: u64, std: f64) -> Self {
        let mut values = vec![0.0; structure.n_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut values {
            let g: f64 = rng.sample(StandardNormal);
            *v = std * g;
        }
        ParameterSet { structure, values }
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }
}

// ---------------------------------------------------------------------------
// One training/eval example
// ---------------------------------------------------------------------------

/// One sequence (a window of a trajectory) with model inputs and targets,
/// already z-scaled and scheme-adjusted.
#[derive(Debug, Clone, Default)]
pub struct SeqExample {
    pub t_len: usize,
    /// `t_len * n_obs`, z-units (zeroed under the actions-only scheme).
    pub obs: Vec<f64>,
    /// `n_demo`, z-units (zeroed under the actions-only scheme).
    pub demo: Vec<f64>,
    /// `t_len * 2*action_window`, z-units (constant under states-only).
    pub actions: Vec<f64>,
    /// `t_len`, z-units; valid where `sev_mask`.
    pub sev_target: Vec<f64>,
    pub sev_mask: Vec<bool>,
    /// `t_len * n_obs`: true state in z-units (reconstruction target).
    pub recon_target: Vec<f64>,
    /// `t_len`: 1.0 at the final step of the source trajectory.
    pub terminal: Vec<f64>,
    /// (position, partner, label) with label 1.0 iff adjacent in time.
    pub adj_pairs: Vec<(usize, usize, f64)>,
    /// Behavior cloning targets, `t_len * 2*bc_horizons`, with mask.
    pub bc_target: Vec<f64>,
    pub bc_mask: Vec<bool>,
}

/// Model outputs for one sequence.
#[derive(Debug, Clone, Default)]
pub struct SeqOutputs {
    pub severity: Vec<f64>,
    pub recon: Vec<f64>,
    pub terminal_logits: Vec<f64>,
    pub adjacency_logits: Vec<f64>,
    pub bc: Vec<f64>,
}

/// Loss weights for the dynamics objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub recon: f64,
    pub terminal: f64,
    pub adjacency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { recon: 0.1, terminal: 0.1, adjacency: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub severity: f64,
    pub recon: f64,
    pub terminal: f64,
    pub adjacency: f64,
    pub bc: f64,
    pub total: f64,
    /// Sample counts behind each component (for exact re-aggregation).
    pub n_severity: usize,
    pub n_recon: usize,
    pub n_terminal: usize,
    pub n_adjacency: usize,
    pub n_bc: usize,
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Default, Clone)]
struct LayerCache {
    x_in: Vec<f64>,
    xn_attn: Vec<f64>,
    inv_rms_a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads * t * t softmax weights (row-causal).
    attn: Vec<f64>,
    ho: Vec<f64>,
    x_mid: Vec<f64>,
    xn_ff: Vec<f64>,
    inv_rms_f: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

#[derive(Default, Clone)]
struct HeadCache {
    input: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

/// Activation cache for one sequence forward pass.
#[derive(Default, Clone)]
pub struct SeqCache {
    t_len: usize,
    x0: Vec<f64>,
    block_caches: Vec<Vec<LayerCache>>,
    /// Output of block 1 (before action embeddings are added).
    e_mid: Vec<f64>,
    /// Input to block 2 (e_mid + action embedding), dynamics only.
    y0: Vec<f64>,
    z_final: Vec<f64>,
    zn: Vec<f64>,
    inv_rms_z: Vec<f64>,
    sev: HeadCache,
    recon: HeadCache,
    term: HeadCache,
    adj: HeadCache,
    bc: HeadCache,
    pub outputs: SeqOutputs,
}

fn rmsnorm_rows(x: &[f64], t_len: usize, d: usize, out: &mut Vec<f64>, inv_rms: &mut Vec<f64>) {
    out.clear();
    out.resize(t_len * d, 0.0);
    inv_rms.clear();
    inv_rms.resize(t_len, 0.0);
    for t in 0..t_len {
        let row = &x[t * d..(t + 1) * d];
        let ms = dot(row, row) / d as f64;
        let ri = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms[t] = ri;
        for (o, &v) in out[t * d..(t + 1) * d].iter_mut().zip(row) {
            *o = v * ri;
        }
    }
}

fn rmsnorm_backward_rows(
    dy: &[f64],
    x: &[f64],
    inv_rms: &[f64],
    t_len: usize,
    d: usize,
    dx: &mut [f64],
) {
    for t in 0..t_len {
        let dyr = &dy[t * d..(t + 1) * d];
        let xr = &x[t * d..(t + 1) * d];
        let ri = inv_rms[t];
        let dotv = dot(dyr, xr);
        let c = ri * ri * ri / d as f64 * dotv;
        for i in 0..d {
            dx[t * d + i] += ri * dyr[i] - c * xr[i];
        }
    }
}

fn linear_forward(
    values: &[f64],
    seg: &LinearSeg,
    x: &[f64],
    rows: usize,
    out: &mut Vec<f64>,
) {
    out.clear();
    out.resize(rows * seg.out, 0.0);
    if let Some(b) = &seg.b {
        let bias = &values[b.clone()];
        for t in 0..rows {
            out[t * seg.out..(t + 1) * seg.out].copy_from_slice(bias);
        }
    }
    matmul_acc(out, x, &values[seg.w.clone()], rows, seg.inp, seg.out);
}

/// dY -> accumulate dW, db, and (optionally) dX.
fn linear_backward(
    values: &[f64],
    grads: &mut [f64],
    seg: &LinearSeg,
    x: &[f64],
    dy: &[f64],
    rows: usize,
    dx: Option<&mut [f64]>,
) {
    matmul_at_acc(&mut grads[seg.w.clone()], x, dy, rows, seg.inp, seg.out);
    if let Some(b) = &seg.b {
        let db = &mut grads[b.clone()];
        for t in 0..rows {
            axpy(db, 1.0, &dy[t * seg.out..(t + 1) * seg.out]);
        }
    }
    if let Some(dx) = dx {
        matmul_bt_acc(dx, dy, &values[seg.w.clone()], rows, seg.inp, seg.out);
    }
}

struct MatSeg<'a> {
    w: &'a Range<usize>,
    d: usize,
}

fn proj_forward(values: &[f64], seg: &MatSeg, x: &[f64], rows: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(rows * seg.d, 0.0);
    matmul_acc(out, x, &values[seg.w.clone()], rows, seg.d, seg.d);
}

fn layer_forward(
    values: &[f64],
    layer: &LayerSeg,
    cfg: &DynamicsModelConfig,
    t_len: usize,
    x: &mut Vec<f64>,
    cache: &mut LayerCache,
) {
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    cache.x_in = x.clone();
    rmsnorm_rows(x, t_len, d, &mut cache.xn_attn, &mut cache.inv_rms_a);

    proj_forward(values, &MatSeg { w: &layer.wq, d }, &cache.xn_attn, t_len, &mut cache.q);
    proj_forward(values, &MatSeg { w: &layer.wk, d }, &cache.xn_attn, t_len, &mut cache.k);
    proj_forward(values, &MatSeg { w: &layer.wv, d }, &cache.xn_attn, t_len, &mut cache.v);

    cache.attn.clear();
    cache.attn.resize(heads * t_len * t_len, 0.0);
    cache.ho.clear();
    cache.ho.resize(t_len * d, 0.0);
    let mut row = vec![0.0; t_len];
    for h in 0..heads {
        let hs = h * hd;
        for t in 0..t_len {
            let qrow = &cache.q[t * d + hs..t * d + hs + hd];
            for u in 0..=t {
                row[u] = scale * dot(qrow, &cache.k[u * d + hs..u * d + hs + hd]);
            }
            softmax_inplace(&mut row[..=t]);
            let arow = &mut cache.attn[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            arow[..=t].copy_from_slice(&row[..=t]);
            let out = &mut cache.ho[t * d + hs..t * d + hs + hd];
            for u in 0..=t {
                axpy(out, arow[u], &cache.v[u * d + hs..u * d + hs + hd]);
            }
        }
    }

    // Attention residual.
    let mut attn_out = Vec::new();
    proj_forward(values, &MatSeg { w: &layer.wo, d }, &cache.ho, t_len, &mut attn_out);
    for (xi, ai) in x.iter_mut().zip(&attn_out) {
        *xi += ai;
    }
    cache.x_mid = x.clone();

    // Feed-forward residual.
    rmsnorm_rows(x, t_len, d, &mut cache.xn_ff, &mut cache.inv_rms_f);
    linear_forward(values, &layer.ff1, &cache.xn_ff, t_len, &mut cache.h_pre);
    cache.h_act.clear();
    cache.h_act.extend(cache.h_pre.iter().map(|&v| gelu(v)));
    let mut ff_out = Vec::new();
    linear_forward(values, &layer.ff2, &cache.h_act, t_len, &mut ff_out);
    for (xi, fi) in x.iter_mut().zip(&ff_out) {
        *xi += fi;
    }
}

fn layer_backward(
    values: &[f64],
    grads: &mut [f64],
    layer: &LayerSeg,
    cfg: &DynamicsModelConfig,
    t_len: usize,
    cache: &LayerCache,
    dx: &mut Vec<f64>,
) {
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let ff = layer.ff1.out;

    // Feed-forward residual backward. dx currently holds dL/d(x_out).
    let mut d_hact = vec![0.0; t_len * ff];
    matmul_bt_acc(&mut d_hact, dx, &values[layer.ff2.w.clone()], t_len, ff, d);
    matmul_at_acc(&mut grads[layer.ff2.w.clone()], &cache.h_act, dx, t_len, ff, d);
    if let Some(b) = &layer.ff2.b {
        let db = &mut grads[b.clone()];
        for t in 0..t_len {
            axpy(db, 1.0, &dx[t * d..(t + 1) * d]);
        }
    }
    let mut d_hpre = d_hact;
    for (g, &pre) in d_hpre.iter_mut().zip(&cache.h_pre) {
        *g *= gelu_grad(pre);
    }
    let mut d_xnff = vec![0.0; t_len * d];
    linear_backward(values, grads, &layer.ff1, &cache.xn_ff, &d_hpre, t_len, Some(&mut d_xnff));
    // Residual: dx (into x_mid) = dx + rmsnorm_backward(d_xnff).
    rmsnorm_backward_rows(&d_xnff, &cache.x_mid, &cache.inv_rms_f, t_len, d, dx);

    // Attention residual backward. dx now holds dL/d(x_mid).
    let mut d_ho = vec![0.0; t_len * d];
    matmul_bt_acc(&mut d_ho, dx, &values[layer.wo.clone()], t_len, d, d);
    matmul_at_acc(&mut grads[layer.wo.clone()], &cache.ho, dx, t_len, d, d);

    let mut d_q = vec![0.0; t_len * d];
    let mut d_k = vec![0.0; t_len * d];
    let mut d_v = vec![0.0; t_len * d];
    let mut d_p = vec![0.0; t_len];
    for h in 0..heads {
        let hs = h * hd;
        for t in 0..t_len {
            let arow = &cache.attn[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let dho_row = &d_ho[t * d + hs..t * d + hs + hd];
            // dV and dP.
            for u in 0..=t {
                d_p[u] = dot(dho_row, &cache.v[u * d + hs..u * d + hs + hd]);
                axpy(&mut d_v[u * d + hs..u * d + hs + hd], arow[u], dho_row);
            }
            // Softmax backward.
            let mut acc = 0.0;
            for u in 0..=t {
                acc += arow[u] * d_p[u];
            }
            // dS -> dQ, dK.
            let qrow = &cache.q[t * d + hs..t * d + hs + hd];
            for u in 0..=t {
                let ds = arow[u] * (d_p[u] - acc) * scale;
                axpy(&mut d_q[t * d + hs..t * d + hs + hd], ds, &cache.k[u * d + hs..u * d + hs + hd]);
                axpy(&mut d_k[u * d + hs..u * d + hs + hd], ds, qrow);
            }
        }
    }

    let mut d_xn = vec![0.0; t_len * d];
    matmul_at_acc(&mut grads[layer.wq.clone()], &cache.xn_attn, &d_q, t_len, d, d);
    matmul_bt_acc(&mut d_xn, &d_q, &values[layer.wq.clone()], t_len, d, d);
    matmul_at_acc(&mut grads[layer.wk.clone()], &cache.xn_attn, &d_k, t_len, d, d);
    matmul_bt_acc(&mut d_xn, &d_k, &values[layer.wk.clone()], t_len, d, d);
    matmul_at_acc(&mut grads[layer.wv.clone()], &cache.xn_attn, &d_v, t_len, d, d);
    matmul_bt_acc(&mut d_xn, &d_v, &values[layer.wv.clone()], t_len, d, d);

    rmsnorm_backward_rows(&d_xn, &cache.x_in, &cache.inv_rms_a, t_len, d, dx);
}

fn head_forward(
    values: &[f64],
    head: &HeadSeg,
    input: Vec<f64>,
    rows: usize,
    cache: &mut HeadCache,
    out: &mut Vec<f64>,
) {
    cache.input = input;
    linear_forward(values, &head.l1, &cache.input, rows, &mut cache.h_pre);
    cache.h_act.clear();
    cache.h_act.extend(cache.h_pre.iter().map(|&v| gelu(v)));
    linear_forward(values, &head.l2, &cache.h_act, rows, out);
}

/// Backpropagate a head given d(output); accumulates into `d_input`.
fn head_backward(
    values: &[f64],
    grads: &mut [f64],
    head: &HeadSeg,
    cache: &HeadCache,
    d_out: &[f64],
    rows: usize,
    d_input: &mut [f64],
) {
    let hw = head.l1.out;
    let mut d_hact = vec![0.0; rows * hw];
    linear_backward(values, grads, &head.l2, &cache.h_act, d_out, rows, Some(&mut d_hact));
    for (g, &pre) in d_hact.iter_mut().zip(&cache.h_pre) {
        *g *= gelu_grad(pre);
    }
    linear_backward(values, grads, &head.l1, &cache.input, &d_hact, rows, Some(d_input));
}

/// Run the state encoder (embeddings + block 1) over a sequence. Returns the
/// per-position embeddings. This is exactly the state path shared by the
/// dynamics and behavior-cloning models.
pub fn encoder_forward(
    params: &ParameterSet,
    obs: &[f64],
    demo: &[f64],
    t_len: usize,
) -> Result<Vec<f64>> {
    let mut cache = SeqCache::default();
    encoder_forward_cached(params, obs, demo, t_len, &mut cache)?;
    Ok(cache.e_mid.clone())
}

fn encoder_forward_cached(
    params: &ParameterSet,
    obs: &[f64],
    demo: &[f64],
    t_len: usize,
    cache: &mut SeqCache,
) -> Result<()> {
    let s = &params.structure;
    let cfg = &s.config;
    let d = cfg.embed_dim;
    if t_len > cfg.context {
        return Err(Error::SequenceTooLong { len: t_len, context: cfg.context });
    }
    if obs.len() != t_len * s.shape.n_obs || demo.len() != s.shape.n_demo {
        return Err(Error::InvalidConfig(format!(
            "input shape mismatch: obs {} demo {}",
            obs.len(),
            demo.len()
        )));
    }
    cache.t_len = t_len;

    // Token embedding: state + demographics + position.
    let mut x = Vec::new();
    linear_forward(&params.values, &s.state_embed, obs, t_len, &mut x);
    let mut demo_vec = Vec::new();
    linear_forward(&params.values, &s.demo_embed, demo, 1, &mut demo_vec);
    let pos = &params.values[s.pos.clone()];
    for t in 0..t_len {
        let row = &mut x[t * d..(t + 1) * d];
        axpy(row, 1.0, &demo_vec);
        axpy(row, 1.0, &pos[t * d..(t + 1) * d]);
    }
    cache.x0 = x.clone();

    cache.block_caches = vec![vec![LayerCache::default(); s.blocks[0].len()]; s.blocks.len()];
    for (l, layer) in s.blocks[0].iter().enumerate() {
        layer_forward(&params.values, layer, cfg, t_len, &mut x, &mut cache.block_caches[0][l]);
    }
    cache.e_mid = x;
    Ok(())
}

/// Full dynamics forward over one sequence: encoder, action fusion, block 2,
/// and all four heads.
pub fn dynamics_forward(params: &ParameterSet, ex: &SeqExample) -> Result<SeqOutputs> {
    let mut cache = SeqCache::default();
    dynamics_forward_cached(params, ex, &mut cache)?;
    Ok(cache.outputs)
}

fn dynamics_forward_cached(params: &ParameterSet, ex: &SeqExample, cache: &mut SeqCache) -> Result<()> {
    let s = &params.structure;
    let cfg = &s.config;
    let d = cfg.embed_dim;
    let t_len = ex.t_len;
    let action_seg = s
        .action_embed
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("not a dynamics model".into()))?;
    if ex.actions.len() != t_len * action_seg.inp {
        return Err(Error::ActionShapeMismatch {
            expected: t_len * action_seg.inp,
            got: ex.actions.len(),
        });
    }
    encoder_forward_cached(params, &ex.obs, &ex.demo, t_len, cache)?;

    // Action fusion: block-2 input adds embedded future doses.
    let mut act_embed = Vec::new();
    linear_forward(&params.values, action_seg, &ex.actions, t_len, &mut act_embed);
    let mut y: Vec<f64> = cache.e_mid.clone();
    axpy(&mut y, 1.0, &act_embed);
    cache.y0 = y.clone();

    for (l, layer) in s.blocks[1].iter().enumerate() {
        layer_forward(&params.values, layer, cfg, t_len, &mut y, &mut cache.block_caches[1][l]);
    }
    cache.z_final = y;
    rmsnorm_rows(&cache.z_final, t_len, d, &mut cache.zn, &mut cache.inv_rms_z);

    head_forward(
        &params.values,
        s.sev_head.as_ref().expect("dynamics heads"),
        cache.zn.clone(),
        t_len,
        &mut cache.sev,
        &mut cache.outputs.severity,
    );
    head_forward(
        &params.values,
        s.recon_head.as_ref().expect("dynamics heads"),
        cache.zn.clone(),
        t_len,
        &mut cache.recon,
        &mut cache.outputs.recon,
    );
    head_forward(
        &params.values,
        s.term_head.as_ref().expect("dynamics heads"),
        cache.zn.clone(),
        t_len,
        &mut cache.term,
        &mut cache.outputs.terminal_logits,
    );
    // Adjacency head consumes concatenated pair embeddings.
    if !ex.adj_pairs.is_empty() {
        let mut pair_in = Vec::with_capacity(ex.adj_pairs.len() * 2 * d);
        for &(a, b, _) in &ex.adj_pairs {
            pair_in.extend_from_slice(&cache.zn[a * d..(a + 1) * d]);
            pair_in.extend_from_slice(&cache.zn[b * d..(b + 1) * d]);
        }
        head_forward(
            &params.values,
            s.adj_head.as_ref().expect("dynamics heads"),
            pair_in,
            ex.adj_pairs.len(),
            &mut cache.adj,
            &mut cache.outputs.adjacency_logits,
        );
    } else {
        cache.outputs.adjacency_logits.clear();
    }
    Ok(())
}

/// Behavior-cloning forward: encoder + dose head.
pub fn clone_forward(params: &ParameterSet, ex: &SeqExample) -> Result<SeqOutputs> {
    let mut cache = SeqCache::default();
    clone_forward_cached(params, ex, &mut cache)?;
    Ok(cache.outputs)
}

fn clone_forward_cached(params: &ParameterSet, ex: &SeqExample, cache: &mut SeqCache) -> Result<()> {
    let s = &params.structure;
    let d = s.config.embed_dim;
    encoder_forward_cached(params, &ex.obs, &ex.demo, ex.t_len, cache)?;
    cache.z_final = cache.e_mid.clone();
    rmsnorm_rows(&cache.z_final, ex.t_len, d, &mut cache.zn, &mut cache.inv_rms_z);
    head_forward(
        &params.values,
        s.bc_head.as_ref().ok_or_else(|| Error::InvalidConfig("not a clone model".into()))?,
        cache.zn.clone(),
        ex.t_len,
        &mut cache.bc,
        &mut cache.outputs.bc,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Numbers of valid samples per task across a batch; the loss is a global
/// mean per task, so each sequence's gradient needs the batch totals.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchCounts {
    pub severity: usize,
    pub recon: usize,
    pub terminal: usize,
    pub adjacency: usize,
    pub bc: usize,
}

impl BatchCounts {
    pub fn tally<'a>(examples: impl IntoIterator<Item = &'a SeqExample>) -> Self {
        let mut c = BatchCounts::default();
        for ex in examples {
            c.severity += ex.sev_mask.iter().filter(|&&m| m).count();
            c.recon += ex.recon_target.len();
            c.terminal += ex.terminal.len();
            c.adjacency += ex.adj_pairs.len();
            c.bc += ex.bc_mask.iter().filter(|&&m| m).count();
        }
        c
    }
}

/// Per-task losses for one sequence's outputs, as unnormalized sums plus
/// counts. Total = severity + w.recon*recon + w.terminal*terminal +
/// w.adjacency*adjacency once normalized by the counts.
pub fn compute_losses(outputs: &SeqOutputs, ex: &SeqExample, weights: &LossWeights) -> LossParts {
    let mut p = LossParts::default();
    for t in 0..ex.t_len {
        if ex.sev_mask.get(t).copied().unwrap_or(false) {
            let e = outputs.severity[t] - ex.sev_target[t];
            p.severity += e * e;
            p.n_severity += 1;
        }
    }
    for (o, t) in outputs.recon.iter().zip(&ex.recon_target) {
        let e = o - t;
        p.recon += e * e;
        p.n_recon += 1;
    }
    for (l, y) in outputs.terminal_logits.iter().zip(&ex.terminal) {
        p.terminal += bce_with_logits(*l, *y);
        p.n_terminal += 1;
    }
    for (l, &(_, _, y)) in outputs.adjacency_logits.iter().zip(&ex.adj_pairs) {
        p.adjacency += bce_with_logits(*l, y);
        p.n_adjacency += 1;
    }
    for ((o, t), m) in outputs.bc.iter().zip(&ex.bc_target).zip(&ex.bc_mask) {
        if *m {
            let e = o - t;
            p.bc += e * e;
            p.n_bc += 1;
        }
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    p.total = mean(p.severity, p.n_severity)
        + weights.recon * mean(p.recon, p.n_recon)
        + weights.terminal * mean(p.terminal, p.n_terminal)
        + weights.adjacency * mean(p.adjacency, p.n_adjacency)
        + mean(p.bc, p.n_bc);
    p
}

/// Sum per-sequence loss parts into batch-mean losses.
pub fn reduce_losses(parts: &[LossParts], weights: &LossWeights) -> LossParts {
    let mut acc = LossParts::default();
    for p in parts {
        acc.severity += p.severity;
        acc.recon += p.recon;
        acc.terminal += p.terminal;
        acc.adjacency += p.adjacency;
        acc.bc += p.bc;
        acc.n_severity += p.n_severity;
        acc.n_recon += p.n_recon;
        acc.n_terminal += p.n_terminal;
        acc.n_adjacency += p.n_adjacency;
        acc.n_bc += p.n_bc;
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    acc.severity = mean(acc.severity, acc.n_severity);
    acc.recon = mean(acc.recon, acc.n_recon);
    acc.terminal = mean(acc.terminal, acc.n_terminal);
    acc.adjacency = mean(acc.adjacency, acc.n_adjacency);
    acc.bc = mean(acc.bc, acc.n_bc);
    acc.total = acc.severity
        + weights.recon * acc.recon
        + weights.terminal * acc.terminal
        + weights.adjacency * acc.adjacency
        + acc.bc;
    acc
}

/// Forward + backward for one sequence, accumulating gradients of the
/// batch-mean loss (counts supply the normalizers). Returns this sequence's
/// unnormalized loss parts.
pub fn backward_sequence(
    params: &ParameterSet,
    grads: &mut [f64],
    ex: &SeqExample,
    weights: &LossWeights,
    counts: &BatchCounts,
) -> Result<LossParts> {
    let s = &params.structure;
    let cfg = &s.config;
    let d = cfg.embed_dim;
    let t_len = ex.t_len;
    let mut cache = SeqCache::default();

    let is_dynamics = matches!(s.kind, ModelKind::Dynamics);
    if is_dynamics {
        dynamics_forward_cached(params, ex, &mut cache)?;
    } else {
        clone_forward_cached(params, ex, &mut cache)?;
    }
    let parts = compute_losses(&cache.outputs, ex, weights);

    // d(zn) accumulates from every head.
    let mut d_zn = vec![0.0; t_len * d];

    if is_dynamics {
        // Severity head: d = 2*(pred - target) / n_severity.
        let mut d_out = vec![0.0; t_len];
        for t in 0..t_len {
            if ex.sev_mask[t] {
                d_out[t] = 2.0 * (cache.outputs.severity[t] - ex.sev_target[t]) / counts.severity.max(1) as f64;
            }
        }
        head_backward(&params.values, grads, s.sev_head.as_ref().unwrap(), &cache.sev, &d_out, t_len, &mut d_zn);

        let n_obs = s.shape.n_obs;
        let mut d_rec = vec![0.0; t_len * n_obs];
        let w_rec = weights.recon / counts.recon.max(1) as f64;
        for i in 0..t_len * n_obs {
            d_rec[i] = 2.0 * (cache.outputs.recon[i] - ex.recon_target[i]) * w_rec;
        }
        head_backward(&params.values, grads, s.recon_head.as_ref().unwrap(), &cache.recon, &d_rec, t_len, &mut d_zn);

        let mut d_term = vec![0.0; t_len];
        let w_term = weights.terminal / counts.terminal.max(1) as f64;
        for t in 0..t_len {
            d_term[t] = bce_grad(cache.outputs.terminal_logits[t], ex.terminal[t]) * w_term;
        }
        head_backward(&params.values, grads, s.term_head.as_ref().unwrap(), &cache.term, &d_term, t_len, &mut d_zn);

        if !ex.adj_pairs.is_empty() {
            let n_pairs = ex.adj_pairs.len();
            let w_adj = weights.adjacency / counts.adjacency.max(1) as f64;
            let mut d_adj = vec![0.0; n_pairs];
            for (i, &(_, _, y)) in ex.adj_pairs.iter().enumerate() {
                d_adj[i] = bce_grad(cache.outputs.adjacency_logits[i], y) * w_adj;
            }
            let mut d_pair_in = vec![0.0; n_pairs * 2 * d];
            head_backward(
                &params.values,
                grads,
                s.adj_head.as_ref().unwrap(),
                &cache.adj,
                &d_adj,
                n_pairs,
                &mut d_pair_in,
            );
            for (i, &(a, b, _)) in ex.adj_pairs.iter().enumerate() {
                axpy(&mut d_zn[a * d..(a + 1) * d], 1.0, &d_pair_in[i * 2 * d..i * 2 * d + d]);
                axpy(&mut d_zn[b * d..(b + 1) * d], 1.0, &d_pair_in[i * 2 * d + d..(i + 1) * 2 * d]);
            }
        }
    } else {
        let width = cache.outputs.bc.len() / t_len;
        let mut d_bc = vec![0.0; t_len * width];
        let inv = 1.0 / counts.bc.max(1) as f64;
        for i in 0..t_len * width {
            if ex.bc_mask[i] {
                d_bc[i] = 2.0 * (cache.outputs.bc[i] - ex.bc_target[i]) * inv;
            }
        }
        head_backward(&params.values, grads, s.bc_head.as_ref().unwrap(), &cache.bc, &d_bc, t_len, &mut d_zn);
    }

    // Final norm backward into the last block output.
    let mut dz = vec![0.0; t_len * d];
    rmsnorm_backward_rows(&d_zn, &cache.z_final, &cache.inv_rms_z, t_len, d, &mut dz);

    // Block 2 (dynamics) backward, then action embed, then block 1.
    if is_dynamics {
        for (l, layer) in s.blocks[1].iter().enumerate().rev() {
            layer_backward(&params.values, grads, layer, cfg, t_len, &cache.block_caches[1][l], &mut dz);
        }
        let action_seg = s.action_embed.as_ref().unwrap();
        linear_backward(&params.values, grads, action_seg, &ex.actions, &dz, t_len, None);
        // d(e_mid) = dz (the residual add passes gradients through).
    }
    for (l, layer) in s.blocks[0].iter().enumerate().rev() {
        layer_backward(&params.values, grads, layer, cfg, t_len, &cache.block_caches[0][l], &mut dz);
    }

    // Embedding backward.
    linear_backward(&params.values, grads, &s.state_embed, &ex.obs, &dz, t_len, None);
    // Demo embedding is broadcast across positions.
    let mut dz_sum = vec![0.0; d];
    for t in 0..t_len {
        axpy(&mut dz_sum, 1.0, &dz[t * d..(t + 1) * d]);
    }
    linear_backward(&params.values, grads, &s.demo_embed, &ex.demo, &dz_sum, 1, None);
    let dpos = &mut grads[s.pos.clone()];
    for t in 0..t_len {
        axpy(&mut dpos[t * d..(t + 1) * d], 1.0, &dz[t * d..(t + 1) * d]);
    }

    Ok(parts)
}

/// Batch-mean loss of a set of sequences under the current parameters (no
/// gradients); used by evaluation loops and the finite-difference checker.
pub fn batch_loss(params: &ParameterSet, examples: &[SeqExample], weights: &LossWeights) -> Result<LossParts> {
    let mut parts = Vec::with_capacity(examples.len());
    let is_dynamics = matches!(params.structure.kind, ModelKind::Dynamics);
    for ex in examples {
        let out = if is_dynamics { dynamics_forward(params, ex)? } else { clone_forward(params, ex)? };
        parts.push(compute_losses(&out, ex, weights));
    }
    Ok(reduce_losses(&parts, weights))
}

/// Gradient of the batch-mean loss, accumulated over all sequences.
pub fn batch_gradients(
    params: &ParameterSet,
    examples: &[SeqExample],
    weights: &LossWeights,
) -> Result<(Vec<f64>, LossParts)> {
    let counts = BatchCounts::tally(examples);
    let mut grads = vec![0.0; params.n_params()];
    let mut parts = Vec::with_capacity(examples.len());
    for ex in examples {
        parts.push(backward_sequence(params, &mut grads, ex, weights, &counts)?);
    }
    Ok((grads, reduce_losses(&parts, weights)))
}
