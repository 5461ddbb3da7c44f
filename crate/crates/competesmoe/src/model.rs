//! The tiny decoder-only transformer with sparse mixture-of-experts FFNs.
//!
//! Two layouts: `switch` puts an SMoE in every block's FFN slot; `glam`
//! alternates dense FFN and SMoE blocks, starting dense. Blocks are
//! pre-norm residual: `x + attn(ln(x))` then `x + ffn(ln(x))`.
//!
//! An SMoE layer runs in one of two modes per forward pass. `Routed`
//! evaluates only the K router-selected experts per token. `Competition`
//! evaluates all N experts, scores each by its output norm, and combines
//! the top K by those norms — the policy the router is distilled toward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded_stream, STREAM_INIT};
use crate::routing::{self, GatingOutput, RouterKind};
use crate::tensor::{NodeId, ParamBindings, ParameterStore, Tape};

/// Which blocks carry an SMoE FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Every block's FFN is an SMoE.
    Switch,
    /// Blocks alternate dense FFN and SMoE, starting dense.
    Glam,
}

/// Expert nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Router choice plus its structural knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Router family; `None` lets the caller (normally the training
    /// algorithm) pick, falling back to a plain linear router.
    #[serde(default)]
    pub kind: Option<RouterKind>,
    /// Cosine down-projection width; `None` means `d_model / 4`.
    #[serde(default)]
    pub proj_dim: Option<usize>,
    /// Initial value of the learnable cosine temperature.
    #[serde(default = "default_temperature")]
    pub temperature_init: f64,
}

fn default_temperature() -> f64 {
    0.07
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig { kind: None, proj_dim: None, temperature_init: default_temperature() }
    }
}

impl RouterConfig {
    /// The configured kind, or `default` when none is pinned.
    pub fn kind_or(&self, default: RouterKind) -> RouterKind {
        self.kind.unwrap_or(default)
    }

    /// The kind a bare model (no trainer in the loop) instantiates.
    pub fn effective_kind(&self) -> RouterKind {
        self.kind_or(RouterKind::Linear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_layout")]
    pub layout: Layout,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_n_experts")]
    pub n_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// 0 means "derive from the corpus vocabulary at load time".
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Share the embedding table with the output projection.
    #[serde(default)]
    pub tied_embeddings: bool,
}

fn default_layout() -> Layout {
    Layout::Switch
}
fn default_n_layers() -> usize {
    2
}
fn default_d_model() -> usize {
    64
}
fn default_n_heads() -> usize {
    2
}
fn default_d_ff() -> usize {
    128
}
fn default_n_experts() -> usize {
    4
}
fn default_top_k() -> usize {
    2
}
fn default_context() -> usize {
    128
}
fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::nano()
    }
}

impl ModelConfig {
    /// Smallest config that still exhibits routing structure; the workhorse
    /// for tests and quick runs.
    pub fn nano() -> Self {
        ModelConfig {
            layout: Layout::Switch,
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            d_ff: 128,
            n_experts: 4,
            top_k: 2,
            vocab_size: 0,
            context: 128,
            router: RouterConfig::default(),
            activation: Activation::Relu,
            tied_embeddings: false,
        }
    }

    /// Shape echo of the paper-scale tiny model (3 SMoE blocks, 16 experts)
    /// at desk widths.
    pub fn tiny() -> Self {
        ModelConfig {
            layout: Layout::Switch,
            n_layers: 3,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_experts: 16,
            top_k: 2,
            vocab_size: 0,
            context: 256,
            router: RouterConfig::default(),
            activation: Activation::Relu,
            tied_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("model.n_layers", "must be >= 1"));
        }
        if self.d_model == 0 {
            return Err(Error::config("model.d_model", "must be >= 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!(
                    "d_model {} must be divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.d_ff == 0 {
            return Err(Error::config("model.d_ff", "must be >= 1"));
        }
        if self.n_experts == 0 {
            return Err(Error::config("model.n_experts", "must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config(
                "model.top_k",
                format!(
                    "must satisfy 1 <= K <= N, got K={} with N={}",
                    self.top_k, self.n_experts
                ),
            ));
        }
        if self.context < 2 {
            return Err(Error::config("model.context", "must be >= 2"));
        }
        if self.smoe_blocks().is_empty() {
            return Err(Error::config(
                "model.layout",
                "configuration yields no SMoE blocks (glam layout needs n_layers >= 2)",
            ));
        }
        if self.router.effective_kind() == RouterKind::CosineXmoe {
            if self.router.temperature_init <= 0.0 {
                return Err(Error::config(
                    "model.router.temperature_init",
                    "must be > 0",
                ));
            }
            if self.proj_dim() == 0 {
                return Err(Error::config("model.router.proj_dim", "must be >= 1"));
            }
        }
        Ok(())
    }

    /// Cosine down-projection width with its `d/4` default.
    pub fn proj_dim(&self) -> usize {
        self.router.proj_dim.unwrap_or_else(|| (self.d_model / 4).max(1))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Whether block `l` carries an SMoE FFN under this layout.
    pub fn block_is_smoe(&self, l: usize) -> bool {
        match self.layout {
            Layout::Switch => true,
            Layout::Glam => l % 2 == 1,
        }
    }

    /// Indices of all SMoE blocks, ascending.
    pub fn smoe_blocks(&self) -> Vec<usize> {
        (0..self.n_layers).filter(|&l| self.block_is_smoe(l)).collect()
    }
}

/// Execution mode of one SMoE layer during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    Routed,
    Competition,
}

/// Routing record of one SMoE layer over every token of a batch.
#[derive(Debug)]
pub struct LayerTrace {
    pub block: usize,
    pub mode: LayerMode,
    /// Scores produced by the layer's router, `[tokens, N]`.
    pub router_scores: NodeId,
    /// Norm-based competition scores, present only in competition mode.
    pub competition_scores: Option<NodeId>,
    /// The combination weights actually used for the output.
    pub gate_weights: NodeId,
    /// Selected expert indices per token (descending score, ties ascending).
    pub selected: Vec<Vec<usize>>,
    /// Expert evaluations performed: tokens×K routed, tokens×N competition.
    pub expert_calls: u64,
}

/// One batch forward pass: flattened logits plus per-SMoE-layer traces.
#[derive(Debug)]
pub struct BatchOutput {
    /// `[batch·context, V]`, sequences concatenated in batch order.
    pub logits: NodeId,
    /// Final-norm hidden states per sequence, each `[context, d]`.
    pub final_hidden: Vec<NodeId>,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect()
}

impl Model {
    /// Build a model with freshly initialized parameters. All draws come
    /// from the init stream of `seed` in a fixed creation order, so equal
    /// (config, seed) pairs produce bitwise-equal parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        if config.vocab_size < 2 {
            return Err(Error::config(
                "model.vocab_size",
                format!("must be >= 2 at model build time, got {}", config.vocab_size),
            ));
        }
        let cfg = config.clone();
        let mut rng = seeded_stream(seed, STREAM_INIT);
        let mut p = ParameterStore::new();
        let d = cfg.d_model;
        let v = cfg.vocab_size;

        let embed: Vec<f64> = (0..v * d).map(|_| rng.gen_range(-0.1..0.1)).collect();
        p.insert("embed.table", embed, vec![v, d]);
        let pos: Vec<f64> = (0..cfg.context * d).map(|_| rng.gen_range(-0.1..0.1)).collect();
        p.insert("pos.table", pos, vec![cfg.context, d]);

        for l in 0..cfg.n_layers {
            for role in ["w_q", "w_k", "w_v", "w_o"] {
                p.insert(format!("block{l}.attn.{role}"), xavier(&mut rng, d, d), vec![d, d]);
            }
            for role in ["b_q", "b_k", "b_v", "b_o"] {
                p.insert(format!("block{l}.attn.{role}"), vec![0.0; d], vec![d]);
            }
            for ln in ["ln1", "ln2"] {
                p.insert(format!("block{l}.{ln}.gamma"), vec![1.0; d], vec![d]);
                p.insert(format!("block{l}.{ln}.beta"), vec![0.0; d], vec![d]);
            }
            if cfg.block_is_smoe(l) {
                for i in 0..cfg.n_experts {
                    let base = format!("block{l}.smoe.expert{i}");
                    p.insert(format!("{base}.w_in"), xavier(&mut rng, d, cfg.d_ff), vec![d, cfg.d_ff]);
                    p.insert(format!("{base}.b_in"), vec![0.0; cfg.d_ff], vec![cfg.d_ff]);
                    p.insert(format!("{base}.w_out"), xavier(&mut rng, cfg.d_ff, d), vec![cfg.d_ff, d]);
                    p.insert(format!("{base}.b_out"), vec![0.0; d], vec![d]);
                }
                let kind = cfg.router.effective_kind();
                let trainable = !kind.frozen_at_init();
                match kind {
                    RouterKind::CosineXmoe => {
                        let pd = cfg.proj_dim();
                        p.insert_with(
                            format!("block{l}.smoe.router.w_down"),
                            xavier(&mut rng, d, pd),
                            vec![d, pd],
                            trainable,
                        );
                        p.insert_with(
                            format!("block{l}.smoe.router.embed"),
                            xavier(&mut rng, pd, cfg.n_experts),
                            vec![pd, cfg.n_experts],
                            trainable,
                        );
                        p.insert_with(
                            format!("block{l}.smoe.router.tau"),
                            vec![cfg.router.temperature_init],
                            vec![1],
                            trainable,
                        );
                    }
                    _ => {
                        p.insert_with(
                            format!("block{l}.smoe.router.w_r"),
                            xavier(&mut rng, d, cfg.n_experts),
                            vec![d, cfg.n_experts],
                            trainable,
                        );
                    }
                }
            } else {
                p.insert(format!("block{l}.ffn.w_in"), xavier(&mut rng, d, cfg.d_ff), vec![d, cfg.d_ff]);
                p.insert(format!("block{l}.ffn.b_in"), vec![0.0; cfg.d_ff], vec![cfg.d_ff]);
                p.insert(format!("block{l}.ffn.w_out"), xavier(&mut rng, cfg.d_ff, d), vec![cfg.d_ff, d]);
                p.insert(format!("block{l}.ffn.b_out"), vec![0.0; d], vec![d]);
            }
        }

        p.insert("final_ln.gamma", vec![1.0; d], vec![d]);
        p.insert("final_ln.beta", vec![0.0; d], vec![d]);
        if !cfg.tied_embeddings {
            p.insert("head.w", xavier(&mut rng, d, v), vec![d, v]);
        }
        p.insert("head.b", vec![0.0; v], vec![v]);

        Ok(Model { config: cfg, params: p })
    }

    /// Names of all router parameters (used for freezing and finetune).
    pub fn router_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(name, _)| name.contains(".smoe.router."))
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Forward a batch of equal-length sequences. `modes[l]` selects the
    /// execution mode of block `l` (ignored for dense blocks); `modes` must
    /// have one entry per block.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        binds: &ParamBindings,
        sequences: &[Vec<usize>],
        modes: &[LayerMode],
    ) -> Result<BatchOutput> {
        assert!(!sequences.is_empty(), "empty batch");
        assert_eq!(modes.len(), self.config.n_layers, "one mode per block");
        let t_len = sequences[0].len();
        assert!(sequences.iter().all(|s| s.len() == t_len), "ragged batch");

        // Per-(sequence, SMoE block) traces, regrouped per block below.
        let mut per_seq: Vec<Vec<SeqTrace>> = Vec::with_capacity(sequences.len());
        let mut hiddens = Vec::with_capacity(sequences.len());
        for ids in sequences {
            let (hidden, traces) = self.forward_sequence(tape, binds, ids, modes)?;
            hiddens.push(hidden);
            per_seq.push(traces);
        }

        let all_hidden = tape.concat_rows(&hiddens)?;
        let logits = if self.config.tied_embeddings {
            let et = tape.transpose(binds.node("embed.table"))?;
            let raw = tape.matmul(all_hidden, et)?;
            tape.add_bias(raw, binds.node("head.b"))?
        } else {
            let raw = tape.matmul(all_hidden, binds.node("head.w"))?;
            tape.add_bias(raw, binds.node("head.b"))?
        };

        let mut layers = Vec::new();
        for (slot, &block) in self.config.smoe_blocks().iter().enumerate() {
            let mode = modes[block];
            let scores: Vec<NodeId> = per_seq.iter().map(|s| s[slot].router_scores).collect();
            let router_scores = tape.concat_rows(&scores)?;
            let competition_scores = if mode == LayerMode::Competition {
                let cs: Vec<NodeId> = per_seq
                    .iter()
                    .map(|s| s[slot].competition_scores.expect("competition trace"))
                    .collect();
                Some(tape.concat_rows(&cs)?)
            } else {
                None
            };
            let weights: Vec<NodeId> = per_seq.iter().map(|s| s[slot].gate_weights).collect();
            let gate_weights = tape.concat_rows(&weights)?;
            let mut selected = Vec::with_capacity(sequences.len() * t_len);
            let mut expert_calls = 0;
            for s in &per_seq {
                selected.extend(s[slot].selected.iter().cloned());
                expert_calls += s[slot].expert_calls;
            }
            layers.push(LayerTrace {
                block,
                mode,
                router_scores,
                competition_scores,
                gate_weights,
                selected,
                expert_calls,
            });
        }

        Ok(BatchOutput { logits, final_hidden: hiddens, layers })
    }

    /// Single-sequence convenience wrapper.
    pub fn forward_single(
        &self,
        tape: &mut Tape,
        binds: &ParamBindings,
        ids: &[usize],
        modes: &[LayerMode],
    ) -> Result<BatchOutput> {
        self.forward_batch(tape, binds, &[ids.to_vec()], modes)
    }

    fn forward_sequence(
        &self,
        tape: &mut Tape,
        binds: &ParamBindings,
        ids: &[usize],
        modes: &[LayerMode],
    ) -> Result<(NodeId, Vec<SeqTrace>)> {
        let cfg = &self.config;
        let tok = tape.gather_rows(binds.node("embed.table"), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather_rows(binds.node("pos.table"), &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut traces = Vec::new();
        for l in 0..cfg.n_layers {
            let ln1 = self.layer_norm(tape, binds, x, &format!("block{l}.ln1"))?;
            let attn = self.mhsa(tape, binds, ln1, l)?;
            x = tape.add(x, attn)?;
            let ln2 = self.layer_norm(tape, binds, x, &format!("block{l}.ln2"))?;
            let ffn = if cfg.block_is_smoe(l) {
                let (out, trace) = self.smoe_forward(tape, binds, ln2, l, modes[l])?;
                traces.push(trace);
                out
            } else {
                self.expert_forward(tape, binds, ln2, &format!("block{l}.ffn"))?
            };
            x = tape.add(x, ffn)?;
        }
        let hidden = self.layer_norm(tape, binds, x, "final_ln")?;
        Ok((hidden, traces))
    }

    fn layer_norm(
        &self,
        tape: &mut Tape,
        binds: &ParamBindings,
        x: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        tape.layer_norm(
            x,
            binds.node(&format!("{prefix}.gamma")),
            binds.node(&format!("{prefix}.beta")),
            1e-5,
        )
    }

    /// Causal multi-head self-attention over one sequence.
    fn mhsa(&self, tape: &mut Tape, binds: &ParamBindings, x: NodeId, l: usize) -> Result<NodeId> {
        let cfg = &self.config;
        let t_len = tape.shape(x)[0];
        let dh = cfg.head_dim();
        let proj = |tape: &mut Tape, role: &str, brole: &str| -> Result<NodeId> {
            let w = binds.node(&format!("block{l}.attn.{role}"));
            let b = binds.node(&format!("block{l}.attn.{brole}"));
            let m = tape.matmul(x, w)?;
            tape.add_bias(m, b)
        };
        let q = proj(tape, "w_q", "b_q")?;
        let k = proj(tape, "w_k", "b_k")?;
        let v = proj(tape, "w_v", "b_v")?;

        // Upper-triangular mask: position i may not attend to j > i.
        let mut causal = vec![false; t_len * t_len];
        for i in 0..t_len {
            for j in (i + 1)..t_len {
                causal[i * t_len + j] = true;
            }
        }

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scaled = tape.scale(raw, 1.0 / (dh as f64).sqrt());
            let masked = tape.masked_fill(scaled, &causal)?;
            let attn = tape.softmax_rows(masked)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let wo = tape.matmul(merged, binds.node(&format!("block{l}.attn.w_o")))?;
        tape.add_bias(wo, binds.node(&format!("block{l}.attn.b_o")))
    }

    /// One expert (or the dense FFN): `act(z·W_in + b_in)·W_out + b_out`.
    fn expert_forward(
        &self,
        tape: &mut Tape,
        binds: &ParamBindings,
        z: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        let pre = tape.matmul(z, binds.node(&format!("{prefix}.w_in")))?;
        let pre_b = tape.add_bias(pre, binds.node(&format!("{prefix}.b_in")))?;
        let act = match self.config.activation {
            Activation::Relu => tape.relu(pre_b),
            Activation::Gelu => tape.gelu(pre_b),
        };
        let out = tape.matmul(act, binds.node(&format!("{prefix}.w_out")))?;
        tape.add_bias(out, binds.node(&format!("{prefix}.b_out")))
    }

    /// Router scores for block `l` on representation `z`.
    fn router_scores(
        &self,
        tape: &mut Tape,
        binds: &ParamBindings,
        z: NodeId,
        l: usize,
    ) -> Result<NodeId> {
        match self.config.router.effective_kind() {
            RouterKind::CosineXmoe => routing::cosine_scores(
                tape,
                z,
                binds.node(&format!("block{l}.smoe.router.w_down")),
                binds.node(&format!("block{l}.smoe.router.embed")),
                binds.node(&format!("block{l}.smoe.router.tau")),
            ),
            _ => routing::linear_scores(tape, z, binds.node(&format!("block{l}.smoe.router.w_r"))),
        }
    }

    fn smoe_forward(
        &self,
        tape: &mut Tape,
        binds: &ParamBindings,
        z: NodeId,
        l: usize,
        mode: LayerMode,
    ) -> Result<(NodeId, SeqTrace)> {
        let cfg = &self.config;
        let t_len = tape.shape(z)[0];
        let n = cfg.n_experts;
        let k = cfg.top_k;
        let router_scores = self.router_scores(tape, binds, z, l)?;

        match mode {
            LayerMode::Routed => {
                let GatingOutput { weights, selected } = routing::gate(tape, router_scores, k)?;
                // Dispatch: each expert processes only its assigned tokens;
                // contributions are summed in ascending expert order so the
                // reduction is deterministic.
                let mut acc: Option<NodeId> = None;
                for i in 0..n {
                    let rows: Vec<usize> = (0..t_len)
                        .filter(|&t| selected[t].contains(&i))
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let sub = tape.gather_rows(z, &rows)?;
                    let h = self.expert_forward(tape, binds, sub, &format!("block{l}.smoe.expert{i}"))?;
                    let placed = tape.scatter_add_rows(h, &rows, t_len)?;
                    let w_i = tape.column(weights, i)?;
                    let weighted = tape.scale_rows(placed, w_i)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, weighted)?,
                        None => weighted,
                    });
                }
                let out = acc.expect("K >= 1 guarantees at least one expert contribution");
                let trace = SeqTrace {
                    router_scores,
                    competition_scores: None,
                    gate_weights: weights,
                    selected,
                    expert_calls: (t_len * k) as u64,
                };
                Ok((out, trace))
            }
            LayerMode::Competition => {
                // Every expert evaluates every token; affinity is the norm of
                // each expert's own output.
                let mut outs = Vec::with_capacity(n);
                for i in 0..n {
                    outs.push(self.expert_forward(tape, binds, z, &format!("block{l}.smoe.expert{i}"))?);
                }
                let comp_scores = routing::competition_affinity(tape, &outs)?;
                let GatingOutput { weights, selected } = routing::gate(tape, comp_scores, k)?;
                let mut acc: Option<NodeId> = None;
                for (i, &out_i) in outs.iter().enumerate() {
                    let w_i = tape.column(weights, i)?;
                    let weighted = tape.scale_rows(out_i, w_i)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, weighted)?,
                        None => weighted,
                    });
                }
                let out = acc.expect("N >= 1");
                let trace = SeqTrace {
                    router_scores,
                    competition_scores: Some(comp_scores),
                    gate_weights: weights,
                    selected,
                    expert_calls: (t_len * n) as u64,
                };
                Ok((out, trace))
            }
        }
    }
}

/// Trace of one SMoE layer over a single sequence.
#[derive(Debug)]
struct SeqTrace {
    router_scores: NodeId,
    competition_scores: Option<NodeId>,
    gate_weights: NodeId,
    selected: Vec<Vec<usize>>,
    expert_calls: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_experts: 3,
            top_k: 2,
            context: 8,
            ..ModelConfig::nano()
        }
    }

    fn routed_modes(cfg: &ModelConfig) -> Vec<LayerMode> {
        vec![LayerMode::Routed; cfg.n_layers]
    }

    #[test]
    fn init_is_reproducible_and_order_stable() {
        let cfg = small_config();
        let a = Model::init(&cfg, 42).unwrap();
        let b = Model::init(&cfg, 42).unwrap();
        for ((na, pa), (nb, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data, pb.data, "seeded init must be bitwise stable ({na})");
        }
        let c = Model::init(&cfg, 43).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, pa), (_, pc))| pa.data != pc.data);
        assert!(differs, "different seeds must give different parameters");
    }

    #[test]
    fn logits_shape_contract() {
        let cfg = small_config();
        let model = Model::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape).unwrap();
        let ids = vec![1usize, 2, 3, 4, 5, 6, 7, 8];
        let out = model
            .forward_single(&mut tape, &binds, &ids, &routed_modes(&cfg))
            .unwrap();
        assert_eq!(tape.shape(out.logits), &[8, 11]);
        assert_eq!(out.layers.len(), 2);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let model = Model::init(&cfg, 9).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let binds = model.params.bind(&mut tape).unwrap();
            let out = model
                .forward_single(&mut tape, &binds, &[3, 1, 4, 1, 5, 9, 2, 6], &routed_modes(&cfg))
                .unwrap();
            tape.data(out.logits).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causality_future_permutation_leaves_prefix_logits_unchanged() {
        let cfg = small_config();
        let model = Model::init(&cfg, 5).unwrap();
        let logits_for = |ids: &[usize]| {
            let mut tape = Tape::new();
            let binds = model.params.bind(&mut tape).unwrap();
            let out = model
                .forward_single(&mut tape, &binds, ids, &routed_modes(&cfg))
                .unwrap();
            tape.data(out.logits).to_vec()
        };
        let a = logits_for(&[3, 1, 4, 1, 5, 9, 2, 6]);
        let b = logits_for(&[3, 1, 4, 1, 2, 6, 9, 5]); // positions 4.. permuted
        let v = 11;
        for pos in 0..4 {
            assert_eq!(
                a[pos * v..(pos + 1) * v],
                b[pos * v..(pos + 1) * v],
                "position {pos} saw only the unchanged prefix"
            );
        }
        assert_ne!(a[4 * v..], b[4 * v..], "later positions should differ");
    }

    #[test]
    fn expert_call_accounting_routed_vs_competition() {
        let cfg = small_config();
        let model = Model::init(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape).unwrap();
        let ids = vec![0usize, 1, 2, 3, 4, 5, 6, 7];
        let modes = vec![LayerMode::Routed, LayerMode::Competition];
        let out = model.forward_single(&mut tape, &binds, &ids, &modes).unwrap();
        assert_eq!(out.layers[0].expert_calls, (8 * cfg.top_k) as u64);
        assert_eq!(out.layers[1].expert_calls, (8 * cfg.n_experts) as u64);
        assert!(out.layers[0].competition_scores.is_none());
        assert!(out.layers[1].competition_scores.is_some());
    }

    #[test]
    fn competition_output_is_convex_combination_of_expert_outputs() {
        // ‖output‖ per token ≤ max_i ‖expert_i(z)‖ per token.
        let cfg = small_config();
        let model = Model::init(&cfg, 12).unwrap();
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape).unwrap();
        let z = tape
            .constant(
                (0..5 * cfg.d_model).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect(),
                vec![5, cfg.d_model],
            )
            .unwrap();
        let (out, _trace) = model
            .smoe_forward(&mut tape, &binds, z, 0, LayerMode::Competition)
            .unwrap();
        let mut expert_norms = vec![0.0f64; 5];
        for i in 0..cfg.n_experts {
            let h = model
                .expert_forward(&mut tape, &binds, z, &format!("block0.smoe.expert{i}"))
                .unwrap();
            for t in 0..5 {
                let row = &tape.data(h)[t * cfg.d_model..(t + 1) * cfg.d_model];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                expert_norms[t] = expert_norms[t].max(norm);
            }
        }
        for t in 0..5 {
            let row = &tape.data(out)[t * cfg.d_model..(t + 1) * cfg.d_model];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                norm <= expert_norms[t] + 1e-9,
                "convexity violated at token {t}: {norm} > {}",
                expert_norms[t]
            );
        }
    }

    #[test]
    fn competition_with_k1_picks_argmax_norm_expert_exactly() {
        let cfg = ModelConfig {
            top_k: 1,
            n_experts: 2,
            ..small_config()
        };
        let model = Model::init(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape).unwrap();
        let z = tape
            .constant(vec![0.4; 2 * cfg.d_model], vec![2, cfg.d_model])
            .unwrap();
        let (out, trace) = model
            .smoe_forward(&mut tape, &binds, z, 0, LayerMode::Competition)
            .unwrap();
        for t in 0..2 {
            let winner = trace.selected[t][0];
            let h = model
                .expert_forward(&mut tape, &binds, z, &format!("block0.smoe.expert{winner}"))
                .unwrap();
            let got = &tape.data(out)[t * cfg.d_model..(t + 1) * cfg.d_model];
            let want = &tape.data(h)[t * cfg.d_model..(t + 1) * cfg.d_model];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "K=1 winner weight must be exactly 1");
            }
        }
    }

    #[test]
    fn glam_layout_alternates_dense_then_smoe() {
        let cfg = ModelConfig {
            layout: Layout::Glam,
            n_layers: 4,
            ..small_config()
        };
        assert_eq!(cfg.smoe_blocks(), vec![1, 3]);
        let model = Model::init(&cfg, 1).unwrap();
        assert!(model.params.contains("block0.ffn.w_in"));
        assert!(model.params.contains("block1.smoe.expert0.w_in"));
        assert!(!model.params.contains("block0.smoe.expert0.w_in"));
    }

    #[test]
    fn fixed_random_router_params_are_frozen() {
        let cfg = ModelConfig {
            router: RouterConfig {
                kind: Some(RouterKind::FixedRandom),
                ..RouterConfig::default()
            },
            ..small_config()
        };
        let model = Model::init(&cfg, 4).unwrap();
        let wr = model.params.get("block0.smoe.router.w_r").unwrap();
        assert!(!wr.trainable);
        // Expert parameters stay trainable.
        assert!(model.params.get("block0.smoe.expert0.w_in").unwrap().trainable);
    }

    #[test]
    fn invalid_configs_are_rejected_with_paths() {
        let mut cfg = small_config();
        cfg.n_heads = 3; // 8 % 3 != 0
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("model.n_heads"));

        let mut cfg2 = small_config();
        cfg2.top_k = 9;
        assert!(cfg2.validate().unwrap_err().to_string().contains("model.top_k"));

        let cfg3 = ModelConfig {
            layout: Layout::Glam,
            n_layers: 1,
            ..small_config()
        };
        assert!(cfg3.validate().is_err(), "glam with one block has no SMoE");
    }

    #[test]
    fn tied_embeddings_share_the_table() {
        let cfg = ModelConfig {
            tied_embeddings: true,
            ..small_config()
        };
        let model = Model::init(&cfg, 6).unwrap();
        assert!(!model.params.contains("head.w"));
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape).unwrap();
        let out = model
            .forward_single(&mut tape, &binds, &[1, 2, 3, 4], &routed_modes(&cfg))
            .unwrap();
        assert_eq!(tape.shape(out.logits), &[4, 11]);
    }

    #[test]
    fn cosine_router_params_exist_and_score_shape_is_right() {
        let cfg = ModelConfig {
            router: RouterConfig {
                kind: Some(RouterKind::CosineXmoe),
                proj_dim: None,
                temperature_init: 0.07,
            },
            ..small_config()
        };
        let model = Model::init(&cfg, 8).unwrap();
        assert!(model.params.contains("block0.smoe.router.w_down"));
        assert!(model.params.contains("block0.smoe.router.embed"));
        assert_eq!(model.params.get("block0.smoe.router.tau").unwrap().data, vec![0.07]);
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape).unwrap();
        let out = model
            .forward_single(&mut tape, &binds, &[5, 6, 7], &routed_modes(&cfg))
            .unwrap();
        assert_eq!(tape.shape(out.layers[0].router_scores), &[3, cfg.n_experts]);
    }
}
