//! Per-window attention graph over entities and the stacked spatio-temporal
//! GNN that produces one representation per layer.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

pub fn register(
    store: &mut ParamStore,
    prefix: &str,
    window: usize,
    attn_dim: usize,
    hidden: usize,
    layers: usize,
    seed: u64,
) {
    Linear::register(store, &format!("{prefix}.phi1"), window, attn_dim, true, seed);
    Linear::register(store, &format!("{prefix}.phi2"), window, attn_dim, true, seed);
    for l in 1..=layers {
        for w in ["w1", "w2", "w3"] {
            store.init_uniform(&format!("{prefix}.layer{l}.{w}"), &[hidden, hidden], hidden, seed);
        }
    }
}

/// The two projections of the graph learner.
#[derive(Clone, Copy, Debug)]
pub struct GraphLearner {
    pub phi1: Linear,
    pub phi2: Linear,
}

impl GraphLearner {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(GraphLearner {
            phi1: Linear::bind(bound, &format!("{prefix}.phi1"))?,
            phi2: Linear::bind(bound, &format!("{prefix}.phi2"))?,
        })
    }

    /// `A = row-softmax(φ1(x) φ2(x)ᵀ)` for raw windows `[B, K, T]`; returns `[B, K, K]`.
    pub fn forward(&self, tape: &mut Tape, windows: Var) -> Result<Var> {
        if tape.shape(windows).len() != 3 {
            return Err(Error::shape("learn_graph", format!("{:?}", tape.shape(windows))));
        }
        let p1 = self.phi1.forward(tape, windows)?;
        let p2 = self.phi2.forward(tape, windows)?;
        let logits = tape.bmm(p1, p2, true)?;
        tape.softmax(logits)
    }
}

/// Weights of one GNN layer, each `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct GnnLayer {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

impl GnnLayer {
    pub fn bind(bound: &Bound, prefix: &str, layer: usize) -> Result<Self> {
        let get = |w: &str| bound.get(&format!("{prefix}.layer{layer}.{w}"));
        Ok(GnnLayer { w1: get("w1")?, w2: get("w2")?, w3: get("w3")? })
    }

    /// `Hˡ_t = ReLU(A·Hˡ⁻¹_t·W1 + Hˡ⁻¹_{t−1}·W2)·W3` for all `t` at once, with a
    /// zero history at `t = 0`. `adjacency` is `[B, K, K]`, `prev` is `[B, K, T, d]`.
    pub fn forward(&self, tape: &mut Tape, adjacency: Var, prev: Var) -> Result<Var> {
        let shape = tape.shape(prev).to_vec();
        let a_shape = tape.shape(adjacency).to_vec();
        if shape.len() != 4 || a_shape != [shape[0], shape[1], shape[1]] {
            return Err(Error::shape("gnn_layer", format!("A {a_shape:?} with H {shape:?}")));
        }
        let (b, k, t, d) = (shape[0], shape[1], shape[2], shape[3]);
        if tape.shape(self.w1) != [d, d] {
            return Err(Error::shape("gnn_layer", format!("W1 {:?} for width {d}", tape.shape(self.w1))));
        }
        let rows = b * k * t;

        let flat = tape.reshape(prev, &[b, k, t * d])?;
        let mixed = tape.bmm(adjacency, flat, false)?;
        let mixed = tape.reshape(mixed, &[rows, d])?;
        let conv = tape.matmul(mixed, self.w1)?;

        let pad = tape.constant(Tensor::zeros(&[b, k, 1, d]));
        let history = if t > 1 {
            let head = tape.slice(prev, 2, 0, t - 1)?;
            tape.concat(&[pad, head], 2)?
        } else {
            pad
        };
        let history = tape.reshape(history, &[rows, d])?;
        let hist = tape.matmul(history, self.w2)?;

        let pre = tape.add(conv, hist)?;
        let act = tape.relu(pre)?;
        let out = tape.matmul(act, self.w3)?;
        tape.reshape(out, &[b, k, t, d])
    }
}

/// Applies every layer in turn and returns all of their outputs, first to last.
pub fn run_stack(tape: &mut Tape, adjacency: Var, h0: Var, layers: &[GnnLayer]) -> Result<Vec<Var>> {
    if layers.is_empty() {
        return Err(Error::Contract("GNN stack needs at least one layer".into()));
    }
    let mut outputs = Vec::with_capacity(layers.len());
    let mut current = h0;
    for layer in layers {
        current = layer.forward(tape, adjacency, current)?;
        outputs.push(current);
    }
    Ok(outputs)
}

/// Adjacency of a single `[K, T]` window under the parameters in `store`.
pub fn learn_graph(window: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let learner = GraphLearner::bind(&bound, prefix)?;
    let shape = window.shape().to_vec();
    let x = tape.constant(window.clone().reshaped(&[1, shape[0], shape[1]])?);
    let a = learner.forward(&mut tape, x)?;
    tape.value(a).clone().reshaped(&[shape[0], shape[0]])
}
