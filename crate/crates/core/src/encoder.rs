//! Hierarchical utterance encoder: a pyramidal bidirectional GRU over the words of
//! each utterance, and a unidirectional GRU over per-utterance summaries.
//!
//! Every recurrence runs over a batch of rows at once. Rows whose sequence has
//! already ended carry their state through unchanged, so padding never leaks into
//! a state.

use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, Var};

/// Gated recurrent unit with separate input (`W_*`) and recurrent (`U_*`) matrices.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_r: ParamId,
    pub w_z: ParamId,
    pub w_g: ParamId,
    pub u_r: ParamId,
    pub u_z: ParamId,
    pub u_g: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_g: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, shape: &[usize]| store.add_uniform(format!("{prefix}.{name}"), shape, range, rng);
        GruCell {
            w_r: w("W_r", &[hidden_dim, input_dim]),
            w_z: w("W_z", &[hidden_dim, input_dim]),
            w_g: w("W_g", &[hidden_dim, input_dim]),
            u_r: w("U_r", &[hidden_dim, hidden_dim]),
            u_z: w("U_z", &[hidden_dim, hidden_dim]),
            u_g: w("U_g", &[hidden_dim, hidden_dim]),
            b_r: w("b_r", &[hidden_dim]),
            b_z: w("b_z", &[hidden_dim]),
            b_g: w("b_g", &[hidden_dim]),
            input_dim,
            hidden_dim,
        }
    }

    /// One step over a batch of rows: `x: [n × d_in]`, `prev: [n × d_h]`.
    ///
    /// `keep` is a 0/1 `[n × d_h]` constant; rows with 0 return `prev` unchanged.
    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, prev: Var, keep: Option<Var>) -> Result<Var> {
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, h: Var| -> Result<Var> {
            let xi = tape.matmul_nt(x, p[w])?;
            let hi = tape.matmul_nt(h, p[u])?;
            let s = tape.add(xi, hi)?;
            tape.add(s, p[b])
        };
        let r = gate(tape, self.w_r, self.u_r, self.b_r, prev)?;
        let r = tape.sigmoid(r);
        let z = gate(tape, self.w_z, self.u_z, self.b_z, prev)?;
        let mut z = tape.sigmoid(z);
        let reset = tape.mul(r, prev)?;
        let cand = gate(tape, self.w_g, self.u_g, self.b_g, reset)?;
        let cand = tape.tanh(cand);
        if let Some(k) = keep {
            z = tape.mul(z, k)?;
        }
        // z∘ĝ + (1 − z)∘prev
        let delta = tape.sub(cand, prev)?;
        let delta = tape.mul(z, delta)?;
        tape.add(prev, delta)
    }
}

/// 0/1 row masks, one per step: row `i` is live at step `t` iff `t < lengths[i]`.
/// Steps where every row is live get `None`.
pub fn step_masks(tape: &mut Tape, lengths: &[usize], steps: usize, width: usize) -> Vec<Option<Var>> {
    (0..steps)
        .map(|t| {
            if lengths.iter().all(|&l| t < l) {
                return None;
            }
            let mut m = Tensor::zeros(&[lengths.len(), width]);
            for (i, &l) in lengths.iter().enumerate() {
                if t < l {
                    m.data_mut()[i * width..(i + 1) * width].fill(1.0);
                }
            }
            Some(tape.constant(m))
        })
        .collect()
}

fn zeros(tape: &mut Tape, rows: usize, cols: usize) -> Var {
    tape.constant(Tensor::zeros(&[rows, cols]))
}

/// Bidirectional layer: `h_t = f⃗_t + f⃖_t`, both directions starting from zero.
/// Positions past a row's length come out as zero vectors.
pub fn bigru_layer(
    tape: &mut Tape,
    p: &Bound,
    fwd: &GruCell,
    bwd: &GruCell,
    inputs: &[Var],
    masks: &[Option<Var>],
) -> Result<Vec<Var>> {
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let rows = tape.shape(*first)[0];
    let mut forward = Vec::with_capacity(inputs.len());
    let mut state = zeros(tape, rows, fwd.hidden_dim);
    for (x, m) in inputs.iter().zip(masks) {
        state = fwd.step(tape, p, *x, state, *m)?;
        forward.push(state);
    }
    let mut backward = vec![state; inputs.len()];
    let mut state = zeros(tape, rows, bwd.hidden_dim);
    for t in (0..inputs.len()).rev() {
        state = bwd.step(tape, p, inputs[t], state, masks[t])?;
        backward[t] = state;
    }
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let h = tape.add(forward[t], backward[t])?;
        out.push(match masks[t] {
            Some(m) => tape.mul(h, m)?,
            None => h,
        });
    }
    Ok(out)
}

/// Halves a sequence: `e_t = tanh(W·[h_2t; h_2t+1]) + b`, pairing an odd tail with
/// a zero vector. `masks` are the step masks of the reduced sequence.
pub fn pyramid_reduce(
    tape: &mut Tape,
    weight: Var,
    bias: Var,
    states: &[Var],
    masks: &[Option<Var>],
) -> Result<Vec<Var>> {
    let reduced_len = states.len().div_ceil(2);
    let mut out = Vec::with_capacity(reduced_len);
    for t in 0..reduced_len {
        let left = states[2 * t];
        let right = match states.get(2 * t + 1) {
            Some(r) => *r,
            None => {
                let shape = tape.shape(left).to_vec();
                tape.constant(Tensor::zeros(&shape))
            }
        };
        let pair = tape.concat(&[left, right], 1)?;
        let proj = tape.matmul_nt(pair, weight)?;
        let act = tape.tanh(proj);
        let e = tape.add(act, bias)?;
        out.push(match masks.get(t).copied().flatten() {
            Some(m) => tape.mul(e, m)?,
            None => e,
        });
    }
    Ok(out)
}

/// Number of top-layer facts for an utterance of `len` tokens and `layers` layers.
pub fn fact_count(len: usize, layers: usize) -> usize {
    let mut n = len;
    for _ in 1..layers {
        n = n.div_ceil(2);
    }
    n
}

#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    pub layers: Vec<(GruCell, GruCell)>,
    /// `(W_pyr, b_pyr)` feeding layer `i + 1`.
    pub projections: Vec<(ParamId, ParamId)>,
    pub dim: usize,
}

/// Output of [`PyramidEncoder::encode`] for a batch of utterances.
#[derive(Clone, Debug)]
pub struct EncodedUtterances {
    /// Top-layer states, one `[n × d]` per step.
    pub states: Vec<Var>,
    /// Top-layer fact count per utterance.
    pub lengths: Vec<usize>,
    /// `[n × d]`: each utterance's last top-layer state.
    pub summary: Var,
}

impl PyramidEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layers: usize,
        input_dim: usize,
        dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        assert!(layers >= 1, "pyramid needs at least one layer");
        let mut cells = Vec::with_capacity(layers);
        let mut projections = Vec::with_capacity(layers - 1);
        for i in 0..layers {
            if i > 0 {
                let w = store.add_uniform(format!("encoder.pyr{i}.W"), &[dim, 2 * dim], range, rng);
                let b = store.add_uniform(format!("encoder.pyr{i}.b"), &[dim], range, rng);
                projections.push((w, b));
            }
            let d_in = if i == 0 { input_dim } else { dim };
            let f = GruCell::new(store, &format!("encoder.layer{i}.fwd"), d_in, dim, range, rng);
            let b = GruCell::new(store, &format!("encoder.layer{i}.bwd"), d_in, dim, range, rng);
            cells.push((f, b));
        }
        PyramidEncoder {
            layers: cells,
            projections,
            dim,
        }
    }

    /// Encodes `n` utterances given per-step inputs `[n × d_in]` and token counts
    /// (each at least 1, at most `inputs.len()`).
    pub fn encode(&self, tape: &mut Tape, p: &Bound, inputs: &[Var], lengths: &[usize]) -> Result<EncodedUtterances> {
        let n = lengths.len();
        let mut lens = lengths.to_vec();
        let masks = step_masks(tape, &lens, inputs.len(), self.dim);
        let (f, b) = &self.layers[0];
        let mut states = bigru_layer(tape, p, f, b, inputs, &masks)?;
        for (i, (f, b)) in self.layers.iter().enumerate().skip(1) {
            lens.iter_mut().for_each(|l| *l = l.div_ceil(2));
            let masks = step_masks(tape, &lens, states.len().div_ceil(2), self.dim);
            let (w, bias) = self.projections[i - 1];
            let reduced = pyramid_reduce(tape, p[w], p[bias], &states, &masks)?;
            states = bigru_layer(tape, p, f, b, &reduced, &masks)?;
        }
        let stacked = tape.concat(&states, 0)?;
        let last: Vec<usize> = lens.iter().enumerate().map(|(u, &l)| (l - 1) * n + u).collect();
        let summary = tape.gather_rows(stacked, &last)?;
        Ok(EncodedUtterances {
            states,
            lengths: lens,
            summary,
        })
    }
}

/// Runs the utterance-level GRU over summaries in chronological order and returns
/// every state. `masks[j]` marks which rows have a utterance in slot `j`.
pub fn encode_history(
    tape: &mut Tape,
    p: &Bound,
    cell: &GruCell,
    summaries: &[Var],
    masks: &[Option<Var>],
) -> Result<Vec<Var>> {
    let Some(first) = summaries.first() else {
        return Ok(Vec::new());
    };
    let rows = tape.shape(*first)[0];
    let mut state = zeros(tape, rows, cell.hidden_dim);
    let mut out = Vec::with_capacity(summaries.len());
    for (x, m) in summaries.iter().zip(masks) {
        state = cell.step(tape, p, *x, state, *m)?;
        out.push(state);
    }
    Ok(out)
}
