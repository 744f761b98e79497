//! Entity-wise recurrent encoder. One cell is shared by every entity and
//! consumes the scalar value of that entity at each step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

/// Registers `w_ih [1, G·h]`, `w_hh [h, G·h]`, `b_ih`, `b_hh` under `prefix`.
/// Gate order is (r, z, n) for the GRU and (i, f, g, o) for the LSTM.
pub fn register(store: &mut ParamStore, prefix: &str, kind: CellKind, hidden: usize, seed: u64) {
    let g = kind.gates() * hidden;
    store.init_uniform(&format!("{prefix}.w_ih"), &[1, g], hidden, seed);
    store.init_uniform(&format!("{prefix}.w_hh"), &[hidden, g], hidden, seed);
    store.init_uniform(&format!("{prefix}.b_ih"), &[g], hidden, seed);
    store.init_uniform(&format!("{prefix}.b_hh"), &[g], hidden, seed);
}

#[derive(Clone, Copy, Debug)]
pub struct RnnVars {
    pub kind: CellKind,
    pub hidden: usize,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
}

impl RnnVars {
    pub fn bind(tape: &Tape, bound: &Bound, prefix: &str, kind: CellKind) -> Result<Self> {
        let w_hh = bound.get(&format!("{prefix}.w_hh"))?;
        let shape = tape.shape(w_hh);
        let hidden = shape[0];
        if shape[1] != kind.gates() * hidden {
            return Err(Error::shape("rnn", format!("w_hh {shape:?} does not fit a {kind:?} cell")));
        }
        Ok(RnnVars {
            kind,
            hidden,
            w_ih: bound.get(&format!("{prefix}.w_ih"))?,
            w_hh,
            b_ih: bound.get(&format!("{prefix}.b_ih"))?,
            b_hh: bound.get(&format!("{prefix}.b_hh"))?,
        })
    }
}

/// Hidden (and, for the LSTM, cell) state of `N` parallel sequences.
#[derive(Clone, Copy, Debug)]
pub struct RnnState {
    pub h: Var,
    pub c: Option<Var>,
}

impl RnnState {
    pub fn zeros(tape: &mut Tape, rows: usize, vars: &RnnVars) -> Self {
        let h = tape.constant(Tensor::zeros(&[rows, vars.hidden]));
        let c = (vars.kind == CellKind::Lstm).then(|| tape.constant(Tensor::zeros(&[rows, vars.hidden])));
        RnnState { h, c }
    }
}

/// One step of the textbook GRU/LSTM. `x` is `[N, 1]`.
pub fn cell_step(tape: &mut Tape, vars: &RnnVars, x: Var, state: RnnState) -> Result<RnnState> {
    let h = vars.hidden;
    let gi = tape.matmul(x, vars.w_ih)?;
    let gi = tape.add_bias(gi, vars.b_ih)?;
    let gh = tape.matmul(state.h, vars.w_hh)?;
    let gh = tape.add_bias(gh, vars.b_hh)?;
    match vars.kind {
        CellKind::Gru => {
            let pre_rz = {
                let a = tape.slice(gi, 1, 0, 2 * h)?;
                let b = tape.slice(gh, 1, 0, 2 * h)?;
                tape.add(a, b)?
            };
            let rz = tape.sigmoid(pre_rz)?;
            let r = tape.slice(rz, 1, 0, h)?;
            let z = tape.slice(rz, 1, h, h)?;
            let gi_n = tape.slice(gi, 1, 2 * h, h)?;
            let gh_n = tape.slice(gh, 1, 2 * h, h)?;
            let gated = tape.mul(r, gh_n)?;
            let pre_n = tape.add(gi_n, gated)?;
            let n = tape.tanh(pre_n)?;
            // h' = (1 − z)·n + z·h = n + z·(h − n)
            let diff = tape.sub(state.h, n)?;
            let carry = tape.mul(z, diff)?;
            let next = tape.add(n, carry)?;
            Ok(RnnState { h: next, c: None })
        }
        CellKind::Lstm => {
            let c_prev = state
                .c
                .ok_or_else(|| Error::Contract("LSTM step without a cell state".into()))?;
            let pre = tape.add(gi, gh)?;
            let ifo_i = tape.slice(pre, 1, 0, 2 * h)?;
            let if_gate = tape.sigmoid(ifo_i)?;
            let i_gate = tape.slice(if_gate, 1, 0, h)?;
            let f_gate = tape.slice(if_gate, 1, h, h)?;
            let g_pre = tape.slice(pre, 1, 2 * h, h)?;
            let g = tape.tanh(g_pre)?;
            let o_pre = tape.slice(pre, 1, 3 * h, h)?;
            let o = tape.sigmoid(o_pre)?;
            let keep = tape.mul(f_gate, c_prev)?;
            let write = tape.mul(i_gate, g)?;
            let c = tape.add(keep, write)?;
            let tc = tape.tanh(c)?;
            let next = tape.mul(o, tc)?;
            Ok(RnnState { h: next, c: Some(c) })
        }
    }
}

/// Runs the cell over `series [N, T]` from a zero state and returns every
/// hidden state as `[N, T, h]`; row `[n, t]` has consumed `series[n, ..=t]`.
pub fn encode(tape: &mut Tape, vars: &RnnVars, series: Var) -> Result<Var> {
    let shape = tape.shape(series).to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::shape("encode", format!("expected [N, T], got {shape:?}")));
    }
    let (rows, steps) = (shape[0], shape[1]);
    let mut state = RnnState::zeros(tape, rows, vars);
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.slice(series, 1, t, 1)?;
        state = cell_step(tape, vars, x, state)?;
        outputs.push(tape.reshape(state.h, &[rows, 1, vars.hidden])?);
    }
    tape.concat(&outputs, 1)
}

/// Convenience wrapper for a single `[K, T]` window: returns `H` as `[K, T, h]`.
pub fn encode_window(window: &Tensor, params: &ParamStore, prefix: &str, kind: CellKind) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = RnnVars::bind(&tape, &bound, prefix, kind)?;
    let x = tape.constant(window.clone());
    let h = encode(&mut tape, &vars, x)?;
    Ok(tape.value(h).clone())
}
