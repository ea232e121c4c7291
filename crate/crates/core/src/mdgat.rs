//! Stage one: multi-head directed graph attention over the conversation
//! graph, one stack per modality.
//!
//! Edge scores follow the GATv2 ordering — the nonlinearity is applied to the
//! shared projection of the concatenated node pair *before* the attention
//! vector, so the scorer cannot collapse into a linear layer. Per layer, each
//! head scores edges, softmax-normalizes them over every node's incoming
//! neighborhood, aggregates projected neighbor features, and combines the
//! aggregate with the node's previous state through one of three updating
//! rules. Head outputs are concatenated and merged, then a residual
//! connection and layer norm close the layer. Attention is re-scored every
//! layer from the current features.

use rand_chacha::ChaCha8Rng;

use crate::config::UpdateRule;
use crate::graph::ConvGraph;
use crate::tensor::{ParamId, ParamStore, Tape, TensorError, Var};

/// Negative-side slope of the scoring nonlinearity.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Update-rule parameters of one head.
pub enum UpdateParams {
    Sum { w_msg: ParamId, w_prev: ParamId },
    Concat { w: ParamId },
    SumProduct { w: ParamId },
}

/// One graph-attention head: GATv2 scoring weights, attention vector,
/// message projection, update parameters.
pub struct MdgatHead {
    w_ew: ParamId,
    attn: ParamId,
    w_ps: ParamId,
    update: UpdateParams,
}

impl MdgatHead {
    /// `model_dim` is the node-state width D, `message_dim` the scoring and
    /// message width of this head, `out_dim` the head's output width.
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        message_dim: usize,
        out_dim: usize,
        rule: UpdateRule,
    ) -> Self {
        let w_ew = store.add_uniform(format!("{prefix}.w_ew"), message_dim, 2 * model_dim, rng);
        let attn = store.add_uniform(format!("{prefix}.attn"), message_dim, 1, rng);
        let w_ps = store.add_uniform(format!("{prefix}.w_ps"), message_dim, model_dim, rng);
        let update = match rule {
            UpdateRule::Sum => UpdateParams::Sum {
                w_msg: store.add_uniform(format!("{prefix}.sum.w_msg"), out_dim, message_dim, rng),
                w_prev: store.add_uniform(format!("{prefix}.sum.w_prev"), out_dim, model_dim, rng),
            },
            UpdateRule::Concat => UpdateParams::Concat {
                w: store.add_uniform(
                    format!("{prefix}.cat.w"),
                    out_dim,
                    message_dim + model_dim,
                    rng,
                ),
            },
            UpdateRule::SumProduct => UpdateParams::SumProduct {
                w: store.add_uniform(format!("{prefix}.sump.w"), out_dim, 2 * model_dim, rng),
            },
        };
        Self {
            w_ew,
            attn,
            w_ps,
            update,
        }
    }

    /// GATv2 attention weights, one per edge (Ex1), softmax-normalized over
    /// each node's incoming neighborhood. Nodes without neighbors contribute
    /// no entries.
    pub fn edge_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: &ConvGraph,
    ) -> Result<Var, TensorError> {
        let dst_feats = tape.gather_rows(x, &graph.edge_destinations())?;
        let src_feats = tape.gather_rows(x, &graph.edge_sources())?;
        let pairs = tape.concat_cols(&[dst_feats, src_feats])?;
        let w_ew = tape.param(store, self.w_ew);
        let projected = tape.matmul_nt(pairs, w_ew)?;
        let activated = tape.leaky_relu(projected, ATTENTION_SLOPE)?;
        let attn = tape.param(store, self.attn);
        let scores = tape.matmul(activated, attn)?;
        tape.segment_softmax(scores, &graph.incoming_segments())
    }

    /// Attention-weighted sum of projected neighbor features per node
    /// (m x message_dim). Isolated nodes receive the zero vector.
    pub fn message_pass(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: &ConvGraph,
        weights: Var,
    ) -> Result<Var, TensorError> {
        let w_ps = tape.param(store, self.w_ps);
        let projected = tape.matmul_nt(x, w_ps)?;
        let per_edge = tape.gather_rows(projected, &graph.edge_sources())?;
        let weighted = tape.scale_rows(per_edge, weights)?;
        tape.segment_sum(weighted, &graph.incoming_segments())
    }

    /// Combines aggregated messages with the previous node state.
    pub fn update_state(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        messages: Var,
        prev: Var,
    ) -> Result<Var, TensorError> {
        match &self.update {
            UpdateParams::Sum { w_msg, w_prev } => {
                let wm = tape.param(store, *w_msg);
                let wp = tape.param(store, *w_prev);
                let a = tape.matmul_nt(messages, wm)?;
                let b = tape.matmul_nt(prev, wp)?;
                tape.add(a, b)
            }
            UpdateParams::Concat { w } => {
                let cat = tape.concat_cols(&[messages, prev])?;
                let wv = tape.param(store, *w);
                tape.matmul_nt(cat, wv)
            }
            UpdateParams::SumProduct { w } => {
                let sum = tape.add(messages, prev)?;
                let prod = tape.mul(messages, prev)?;
                let cat = tape.concat_cols(&[sum, prod])?;
                let wv = tape.param(store, *w);
                tape.matmul_nt(cat, wv)
            }
        }
    }

    /// Full head: score, aggregate, update.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: &ConvGraph,
    ) -> Result<Var, TensorError> {
        let weights = self.edge_weights(tape, store, x, graph)?;
        let messages = self.message_pass(tape, store, x, graph, weights)?;
        self.update_state(tape, store, messages, x)
    }
}

/// One layer: heads, merge weight, residual, layer norm.
pub struct MdgatLayer {
    heads: Vec<MdgatHead>,
    w_mg: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl MdgatLayer {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        message_dim: usize,
        heads: usize,
        rule: UpdateRule,
    ) -> Self {
        let out_dim = model_dim / heads;
        let heads = (0..heads)
            .map(|h| {
                MdgatHead::build(
                    store,
                    rng,
                    &format!("{prefix}.h{h}"),
                    model_dim,
                    message_dim,
                    out_dim,
                    rule,
                )
            })
            .collect();
        Self {
            heads,
            w_mg: store.add_uniform(format!("{prefix}.merge"), model_dim, model_dim, rng),
            ln_gain: store.add_filled(format!("{prefix}.ln.gain"), 1, model_dim, 1.0),
            ln_bias: store.add_zeros(format!("{prefix}.ln.bias"), 1, model_dim),
        }
    }

    pub fn heads(&self) -> &[MdgatHead] {
        &self.heads
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: &ConvGraph,
    ) -> Result<Var, TensorError> {
        let head_outs: Vec<Var> = self
            .heads
            .iter()
            .map(|h| h.forward(tape, store, x, graph))
            .collect::<Result<_, _>>()?;
        let cat = tape.concat_cols(&head_outs)?;
        let w_mg = tape.param(store, self.w_mg);
        let merged = tape.matmul_nt(cat, w_mg)?;
        let residual = tape.add(x, merged)?;
        let gain = tape.param(store, self.ln_gain);
        let bias = tape.param(store, self.ln_bias);
        tape.layer_norm(residual, gain, bias, LN_EPS)
    }
}

/// L stacked layers for one modality. A zero-layer stack is the identity.
pub struct MdgatStack {
    layers: Vec<MdgatLayer>,
}

impl MdgatStack {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        message_dim: usize,
        heads: usize,
        layers: usize,
        rule: UpdateRule,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                MdgatLayer::build(
                    store,
                    rng,
                    &format!("{prefix}.l{l}"),
                    model_dim,
                    message_dim,
                    heads,
                    rule,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[MdgatLayer] {
        &self.layers
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: &ConvGraph,
    ) -> Result<Var, TensorError> {
        let mut state = x;
        for layer in &self.layers {
            state = layer.forward(tape, store, state, graph)?;
        }
        Ok(state)
    }
}
