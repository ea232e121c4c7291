//! Stage two: pairwise cross-modal multi-head attention.
//!
//! Each layer holds one block per active modality. A block queries its own
//! modality's features with every *other* modality as the query source
//! (scaled dot-product attention over the whole conversation), sums the
//! branches, applies dropout, and closes with residual + layer norm followed
//! by a feedforward sublayer with its own residual + layer norm. All blocks
//! of a layer read the same input state, so within a layer the modality
//! updates are order-independent.

use rand_chacha::ChaCha8Rng;

use crate::mdgat::LN_EPS;
use crate::tensor::{Mode, ParamId, ParamStore, Tape, TensorError, Var};

struct MaHead {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

/// Multi-head scaled dot-product attention parameters: per-head query, key
/// and value projections plus the head-merge weight.
pub struct MaParams {
    heads: Vec<MaHead>,
    w_ma: ParamId,
    head_dim: usize,
}

impl MaParams {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        heads: usize,
    ) -> Self {
        let head_dim = model_dim / heads;
        let heads = (0..heads)
            .map(|h| MaHead {
                w_q: store.add_uniform(format!("{prefix}.h{h}.w_q"), head_dim, model_dim, rng),
                w_k: store.add_uniform(format!("{prefix}.h{h}.w_k"), head_dim, model_dim, rng),
                w_v: store.add_uniform(format!("{prefix}.h{h}.w_v"), head_dim, model_dim, rng),
            })
            .collect();
        Self {
            heads,
            w_ma: store.add_uniform(format!("{prefix}.w_ma"), model_dim, model_dim, rng),
            head_dim,
        }
    }

    #[cfg(test)]
    pub(crate) fn merge_weight(&self) -> ParamId {
        self.w_ma
    }

    /// Multi-head attention: per head Att(W_q Q, W_k K, W_v V) with
    /// 1/sqrt(d_k) scaling, heads concatenated, merged by the output weight.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var, TensorError> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = tape.param(store, head.w_q);
            let wk = tape.param(store, head.w_k);
            let wv = tape.param(store, head.w_v);
            let q = tape.matmul_nt(query, wq)?;
            let k = tape.matmul_nt(key, wk)?;
            let v = tape.matmul_nt(value, wv)?;
            let raw = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(raw, scale);
            let weights = tape.softmax_rows(scaled, None)?;
            head_outs.push(tape.matmul(weights, v)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        let w_ma = tape.param(store, self.w_ma);
        tape.matmul_nt(cat, w_ma)
    }
}

/// One modality's block within a layer: attention branches (one per other
/// modality), two layer norms, feedforward.
pub struct CrossBlock {
    branches: Vec<MaParams>,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff_w0: ParamId,
    ff_b0: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    dropout: f64,
}

impl CrossBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        num_branches: usize,
        ff_dim: usize,
        dropout: f64,
    ) -> Self {
        let branches = (0..num_branches)
            .map(|b| MaParams::build(store, rng, &format!("{prefix}.ma{b}"), model_dim, heads))
            .collect();
        Self {
            branches,
            ln1_gain: store.add_filled(format!("{prefix}.ln1.gain"), 1, model_dim, 1.0),
            ln1_bias: store.add_zeros(format!("{prefix}.ln1.bias"), 1, model_dim),
            ff_w0: store.add_uniform(format!("{prefix}.ff.w0"), ff_dim, model_dim, rng),
            ff_b0: store.add_zeros(format!("{prefix}.ff.b0"), 1, ff_dim),
            ff_w1: store.add_uniform(format!("{prefix}.ff.w1"), model_dim, ff_dim, rng),
            ff_b1: store.add_zeros(format!("{prefix}.ff.b1"), 1, model_dim),
            ln2_gain: store.add_filled(format!("{prefix}.ln2.gain"), 1, model_dim, 1.0),
            ln2_bias: store.add_zeros(format!("{prefix}.ln2.bias"), 1, model_dim),
            dropout,
        }
    }

    #[cfg(test)]
    pub(crate) fn branches(&self) -> &[MaParams] {
        &self.branches
    }

    /// Pairwise attention: every other modality queries this block's own
    /// features; the branch outputs are summed and passed through dropout.
    pub fn mpa(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: &[Var],
        own: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, TensorError> {
        assert_eq!(
            queries.len(),
            self.branches.len(),
            "one query per attention branch"
        );
        let mut total: Option<Var> = None;
        for (branch, &q) in self.branches.iter().zip(queries) {
            let out = branch.forward(tape, store, q, own, own)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, out)?,
                None => out,
            });
        }
        let summed = total.expect("at least one branch");
        tape.dropout(summed, self.dropout, mode, rng)
    }

    fn feedforward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, TensorError> {
        let w0 = tape.param(store, self.ff_w0);
        let b0 = tape.param(store, self.ff_b0);
        let w1 = tape.param(store, self.ff_w1);
        let b1 = tape.param(store, self.ff_b1);
        let hidden = tape.linear(x, w0, b0)?;
        let activated = tape.relu(hidden)?;
        let dropped = tape.dropout(activated, self.dropout, mode, rng)?;
        let out = tape.linear(dropped, w1, b1)?;
        tape.dropout(out, self.dropout, mode, rng)
    }

    /// Full block: attention sublayer then feedforward sublayer, each with
    /// residual + layer norm.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        own: Var,
        queries: &[Var],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, TensorError> {
        let attended = self.mpa(tape, store, queries, own, mode, rng)?;
        let res1 = tape.add(own, attended)?;
        let g1 = tape.param(store, self.ln1_gain);
        let b1 = tape.param(store, self.ln1_bias);
        let normed = tape.layer_norm(res1, g1, b1, LN_EPS)?;
        let ff = self.feedforward(tape, store, normed, mode, rng)?;
        let res2 = tape.add(normed, ff)?;
        let g2 = tape.param(store, self.ln2_gain);
        let b2 = tape.param(store, self.ln2_bias);
        tape.layer_norm(res2, g2, b2, LN_EPS)
    }
}

/// One cross-modal layer: a block per active modality, all reading the same
/// input state.
pub struct MpcatLayer {
    blocks: Vec<CrossBlock>,
}

impl MpcatLayer {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        num_modalities: usize,
        ff_dim: usize,
        dropout: f64,
    ) -> Self {
        let blocks = (0..num_modalities)
            .map(|b| {
                CrossBlock::build(
                    store,
                    rng,
                    &format!("{prefix}.b{b}"),
                    model_dim,
                    heads,
                    num_modalities - 1,
                    ff_dim,
                    dropout,
                )
            })
            .collect();
        Self { blocks }
    }

    pub fn blocks(&self) -> &[CrossBlock] {
        &self.blocks
    }

    /// Advances all modality states one layer. Every block reads only the
    /// incoming `states`, never a sibling's fresh output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &[Var],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Var>, TensorError> {
        assert_eq!(states.len(), self.blocks.len());
        let mut next = Vec::with_capacity(states.len());
        for (idx, block) in self.blocks.iter().enumerate() {
            let queries: Vec<Var> = states
                .iter()
                .enumerate()
                .filter(|&(q, _)| q != idx)
                .map(|(_, &s)| s)
                .collect();
            next.push(block.forward(tape, store, states[idx], &queries, mode, rng)?);
        }
        Ok(next)
    }
}

/// K stacked cross-modal layers; zero layers pass states through untouched.
pub struct MpcatStack {
    layers: Vec<MpcatLayer>,
}

impl MpcatStack {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        num_modalities: usize,
        ff_dim: usize,
        layers: usize,
        dropout: f64,
    ) -> Self {
        let layers = (0..layers)
            .map(|k| {
                MpcatLayer::build(
                    store,
                    rng,
                    &format!("{prefix}.l{k}"),
                    model_dim,
                    heads,
                    num_modalities,
                    ff_dim,
                    dropout,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[MpcatLayer] {
        &self.layers
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: Vec<Var>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Var>, TensorError> {
        let mut current = states;
        for layer in &self.layers {
            current = layer.forward(tape, store, &current, mode, rng)?;
        }
        Ok(current)
    }
}
