//! Unimodal pre-encoding to the shared model width plus speaker embedding
//! injection.
//!
//! Audio and visual features get a plain affine map per utterance. Text goes
//! through a bidirectional gated recurrent pass (GRU cells, one layer per
//! direction); the two state sequences are concatenated and projected to the
//! model width, so every utterance's text encoding sees the whole
//! conversation in both directions. The same learned speaker row, scaled by
//! the trade-off factor, is then added to all modalities of an utterance.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Affine per-utterance encoder for the acoustic and visual modalities.
pub struct AvEncoder {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl AvEncoder {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            w: store.add_uniform(format!("{prefix}.w"), out_dim, in_dim, rng),
            b: store.add_zeros(format!("{prefix}.b"), 1, out_dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

/// One gate of a GRU cell: input weight, hidden weight, bias.
struct GruGate {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

impl GruGate {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            w_x: store.add_uniform(format!("{prefix}.w_x"), hidden, in_dim, rng),
            w_h: store.add_uniform(format!("{prefix}.w_h"), hidden, hidden, rng),
            b: store.add_zeros(format!("{prefix}.b"), 1, hidden),
        }
    }

    /// w_x * x + w_h * h + b for one step (x, h are 1xN rows).
    fn pre(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h: Var,
    ) -> Result<Var, TensorError> {
        let wx = tape.param(store, self.w_x);
        let wh = tape.param(store, self.w_h);
        let b = tape.param(store, self.b);
        let xs = tape.matmul_nt(x, wx)?;
        let hs = tape.matmul_nt(h, wh)?;
        let sum = tape.add(xs, hs)?;
        tape.add_row(sum, b)
    }
}

/// Single-direction GRU over a sequence of 1xN rows.
pub(crate) struct GruDirection {
    update: GruGate,
    reset: GruGate,
    candidate: GruGate,
    hidden: usize,
}

impl GruDirection {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            update: GruGate::build(store, rng, &format!("{prefix}.z"), in_dim, hidden),
            reset: GruGate::build(store, rng, &format!("{prefix}.r"), in_dim, hidden),
            candidate: GruGate::build(store, rng, &format!("{prefix}.h"), in_dim, hidden),
            hidden,
        }
    }

    /// Scans the rows (optionally in reverse); the returned states are in
    /// original sequence order either way.
    fn scan(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rows: &[Var],
        reverse: bool,
    ) -> Result<Vec<Var>, TensorError> {
        let ones = tape.constant(Tensor::filled(1, self.hidden, 1.0));
        let mut h = tape.constant(Tensor::zeros(1, self.hidden));
        let mut states = vec![h; rows.len()];
        let order: Vec<usize> = if reverse {
            (0..rows.len()).rev().collect()
        } else {
            (0..rows.len()).collect()
        };
        for i in order {
            let x = rows[i];
            let z_pre = self.update.pre(tape, store, x, h)?;
            let z = tape.sigmoid(z_pre);
            let r_pre = self.reset.pre(tape, store, x, h)?;
            let r = tape.sigmoid(r_pre);
            let gated_h = tape.mul(r, h)?;
            let cand_pre = self.candidate.pre(tape, store, x, gated_h)?;
            let cand = tape.tanh(cand_pre);
            // h' = (1 - z) (*) h + z (*) cand
            let keep = tape.sub(ones, z)?;
            let kept = tape.mul(keep, h)?;
            let new = tape.mul(z, cand)?;
            h = tape.add(kept, new)?;
            states[i] = h;
        }
        Ok(states)
    }
}

/// Bidirectional recurrent text encoder: forward states, backward states,
/// concatenation, affine projection to the model width.
pub struct TextEncoder {
    pub(crate) fwd: GruDirection,
    pub(crate) bwd: GruDirection,
    pub(crate) proj_w: ParamId,
    pub(crate) proj_b: ParamId,
}

impl TextEncoder {
    /// `out_dim` must be even: each direction carries half the width.
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        assert!(out_dim % 2 == 0, "text encoder width must be even");
        let hidden = out_dim / 2;
        Self {
            fwd: GruDirection::build(store, rng, &format!("{prefix}.fwd"), in_dim, hidden),
            bwd: GruDirection::build(store, rng, &format!("{prefix}.bwd"), in_dim, hidden),
            proj_w: store.add_uniform(format!("{prefix}.proj.w"), out_dim, out_dim, rng),
            proj_b: store.add_zeros(format!("{prefix}.proj.b"), 1, out_dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, TensorError> {
        let m = tape.value(x).rows();
        let rows: Vec<Var> = (0..m)
            .map(|i| tape.gather_rows(x, &[i]))
            .collect::<Result<_, _>>()?;
        let fwd_states = self.fwd.scan(tape, store, &rows, false)?;
        let bwd_states = self.bwd.scan(tape, store, &rows, true)?;
        let fwd_seq = tape.concat_rows(&fwd_states)?;
        let bwd_seq = tape.concat_rows(&bwd_states)?;
        let both = tape.concat_cols(&[fwd_seq, bwd_seq])?;
        let w = tape.param(store, self.proj_w);
        let b = tape.param(store, self.proj_b);
        tape.linear(both, w, b)
    }
}

/// Learned per-speaker embedding rows (n x D), injected scaled into every
/// modality of an utterance.
pub struct SpeakerTable {
    pub(crate) table: ParamId,
}

impl SpeakerTable {
    const INIT_SIGMA: f64 = 0.02;

    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        num_speakers: usize,
        dim: usize,
    ) -> Self {
        Self {
            table: store.add_normal(
                format!("{prefix}.table"),
                num_speakers,
                dim,
                Self::INIT_SIGMA,
                rng,
            ),
        }
    }

    /// x = o + lambda * S_e[speaker] per row. The same embedding row feeds
    /// all modalities; callers invoke this once per modality with identical
    /// speaker ids.
    pub fn inject(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        o: Var,
        speakers: &[usize],
        lambda: f64,
    ) -> Result<Var, TensorError> {
        if lambda == 0.0 {
            return Ok(o);
        }
        let table = tape.param(store, self.table);
        let rows = tape.gather_rows(table, speakers)?;
        let scaled = tape.scale(rows, lambda);
        tape.add(o, scaled)
    }
}
