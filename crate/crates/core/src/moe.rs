//! Per-layer experts (entity cross-attention followed by an FFN), the
//! hierarchy stack fed to the router, and the router-weighted mixture.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub fn register_expert(store: &mut ParamStore, prefix: &str, hidden: usize, ff: usize, seed: u64) {
    for name in ["q", "k", "v", "o"] {
        Linear::register(store, &format!("{prefix}.{name}"), hidden, hidden, true, seed);
    }
    store.insert(format!("{prefix}.ln.gamma"), Tensor::full(&[hidden], 1.0));
    store.insert(format!("{prefix}.ln.beta"), Tensor::zeros(&[hidden]));
    Linear::register(store, &format!("{prefix}.ff1"), hidden, ff, true, seed);
    Linear::register(store, &format!("{prefix}.ff2"), ff, hidden, true, seed);
}

#[derive(Clone, Copy, Debug)]
pub struct Expert {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    gamma: Var,
    beta: Var,
    ff1: Linear,
    ff2: Linear,
}

/// Outputs of one expert for a batch of windows.
#[derive(Clone, Copy, Debug)]
pub struct ExpertOutput {
    /// Normalised attention output `H̃ˡ`, `[B, K, T, d]`.
    pub attended: Var,
    /// FFN output `H̄ˡ`, `[B, K, T, d]`.
    pub aligned: Var,
    /// Entity attention weights, `[B·T, K, K]`.
    pub weights: Var,
}

impl Expert {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let lin = |n: &str| Linear::bind(bound, &format!("{prefix}.{n}"));
        Ok(Expert {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            gamma: bound.get(&format!("{prefix}.ln.gamma"))?,
            beta: bound.get(&format!("{prefix}.ln.beta"))?,
            ff1: lin("ff1")?,
            ff2: lin("ff2")?,
        })
    }

    /// Queries come from the encoder output `h`, keys and values from the
    /// layer output `layer`; attention runs over entities separately at each
    /// time step. Both inputs are `[B, K, T, d]`.
    pub fn forward(&self, tape: &mut Tape, h: Var, layer: Var) -> Result<ExpertOutput> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 4 || tape.shape(layer) != shape.as_slice() {
            return Err(Error::shape(
                "expert",
                format!("queries {shape:?} vs keys {:?}", tape.shape(layer)),
            ));
        }
        let (b, k, t, d) = (shape[0], shape[1], shape[2], shape[3]);
        let by_step = |tape: &mut Tape, x: Var| -> Result<Var> {
            let p = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(p, &[b * t, k, d])
        };
        let hq = by_step(tape, h)?;
        let hl = by_step(tape, layer)?;
        let q = self.q.forward(tape, hq)?;
        let key = self.k.forward(tape, hl)?;
        let val = self.v.forward(tape, hl)?;
        let logits = tape.bmm(q, key, true)?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
        let weights = tape.softmax(logits)?;
        let ctx = tape.bmm(weights, val, false)?;
        let proj = self.o.forward(tape, ctx)?;
        let normed = tape.layer_norm(proj, LN_EPS)?;
        let normed = tape.mul_last(normed, self.gamma)?;
        let normed = tape.add_bias(normed, self.beta)?;
        let normed = tape.reshape(normed, &[b, t, k, d])?;
        let attended = tape.permute(normed, &[0, 2, 1, 3])?;

        let hidden = self.ff1.forward(tape, attended)?;
        let hidden = tape.relu(hidden)?;
        let aligned = self.ff2.forward(tape, hidden)?;
        Ok(ExpertOutput { attended, aligned, weights })
    }
}

/// Stacks per-layer features `[B, K, T, d]` on a new hierarchy axis:
/// `[B, L, K, T, d]`, layer order preserved.
pub fn collect_hierarchy(tape: &mut Tape, levels: &[Var]) -> Result<Var> {
    let first = *levels
        .first()
        .ok_or_else(|| Error::Contract("empty hierarchy".into()))?;
    let shape = tape.shape(first).to_vec();
    if shape.is_empty() {
        return Err(Error::shape("collect_hierarchy", "scalar level"));
    }
    let mut expanded = Vec::with_capacity(levels.len());
    for &v in levels {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::shape(
                "collect_hierarchy",
                format!("{:?} vs {shape:?}", tape.shape(v)),
            ));
        }
        let mut s = shape.clone();
        s.insert(1, 1);
        expanded.push(tape.reshape(v, &s)?);
    }
    tape.concat(&expanded, 1)
}

/// `C = Σ_l R_l · H̄ˡ` per window. `routes` is `[B, L]`, each expert output `[B, ...]`.
pub fn mix(tape: &mut Tape, routes: Var, experts: &[Var]) -> Result<Var> {
    let r_shape = tape.shape(routes).to_vec();
    if r_shape.len() != 2 || r_shape[1] != experts.len() {
        return Err(Error::Contract(format!(
            "router weights {r_shape:?} for {} experts",
            experts.len()
        )));
    }
    let stacked = collect_hierarchy(tape, experts)?;
    let shape = tape.shape(experts[0]).to_vec();
    let b = shape[0];
    if r_shape[0] != b {
        return Err(Error::shape("mix", format!("router batch {} vs {}", r_shape[0], b)));
    }
    let levels = experts.len();
    let features: usize = shape[1..].iter().product();
    let flat = tape.reshape(stacked, &[b * levels, features])?;
    let r = tape.reshape(routes, &[b * levels])?;
    let weighted = tape.scale_rows(flat, r)?;
    let weighted = tape.reshape(weighted, &[b, levels, features])?;
    let summed = tape.sum_axis(weighted, 1)?;
    tape.reshape(summed, &shape)
}
