//! Conditional affine-coupling flow over per-entity window vectors.
//!
//! Each block holds two couplings with interleaved masks: the first
//! transforms even positions given the odd ones and the condition, the
//! second the reverse. Log-scales pass through `s_max·tanh(·/s_max)`.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowShape {
    /// Dimension `D` of the modelled vector.
    pub dim: usize,
    /// Width of the per-row condition.
    pub cond_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub scale_clamp: f64,
}

/// Positions transformed (`active`) and passed through (`passive`) by coupling `c`.
fn masks(dim: usize, coupling: usize) -> (Vec<usize>, Vec<usize>) {
    let parity = coupling % 2;
    (0..dim).partition(|i| i % 2 == parity)
}

/// Coupling indices that transform at least one position.
fn live_couplings(shape: &FlowShape) -> impl Iterator<Item = usize> + '_ {
    (0..2 * shape.blocks).filter(move |&c| !masks(shape.dim, c).0.is_empty())
}

pub fn register(store: &mut ParamStore, prefix: &str, shape: &FlowShape, seed: u64) {
    for c in live_couplings(shape) {
        let (active, passive) = masks(shape.dim, c);
        let inputs = passive.len() + shape.cond_dim;
        Linear::register(store, &format!("{prefix}.c{c}.l1"), inputs, shape.hidden, true, seed);
        Linear::register(store, &format!("{prefix}.c{c}.l2"), shape.hidden, 2 * active.len(), true, seed);
    }
}

#[derive(Clone, Debug)]
struct Coupling {
    active: Vec<usize>,
    passive: Vec<usize>,
    /// Inverse of the `[active, passive]` ordering.
    restore: Vec<usize>,
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Debug)]
pub struct Flow {
    shape: FlowShape,
    couplings: Vec<Coupling>,
}

impl Flow {
    pub fn bind(bound: &Bound, prefix: &str, shape: FlowShape) -> Result<Self> {
        if shape.blocks == 0 {
            return Err(Error::Config("flow needs at least one block".into()));
        }
        let couplings = live_couplings(&shape)
            .map(|c| {
                let (active, passive) = masks(shape.dim, c);
                let mut restore = vec![0; shape.dim];
                for (pos, &i) in active.iter().chain(&passive).enumerate() {
                    restore[i] = pos;
                }
                Ok(Coupling {
                    active,
                    passive,
                    restore,
                    l1: Linear::bind(bound, &format!("{prefix}.c{c}.l1"))?,
                    l2: Linear::bind(bound, &format!("{prefix}.c{c}.l2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Flow { shape, couplings })
    }

    pub fn shape(&self) -> &FlowShape {
        &self.shape
    }

    fn check(&self, tape: &Tape, x: Var, cond: Var) -> Result<usize> {
        let (xs, cs) = (tape.shape(x), tape.shape(cond));
        if xs.len() != 2 || xs[1] != self.shape.dim || cs.len() != 2 || cs[0] != xs[0] || cs[1] != self.shape.cond_dim {
            return Err(Error::shape(
                "flow",
                format!("x {xs:?} / condition {cs:?} for D={} and cond={}", self.shape.dim, self.shape.cond_dim),
            ));
        }
        Ok(xs[0])
    }

    /// Log-scale and shift for the active half, each `[N, |active|]`.
    fn scale_shift(&self, tape: &mut Tape, c: &Coupling, passive: Var, cond: Var) -> Result<(Var, Var)> {
        let input = if c.passive.is_empty() { cond } else { tape.concat(&[passive, cond], 1)? };
        let h = c.l1.forward(tape, input)?;
        let h = tape.relu(h)?;
        let out = c.l2.forward(tape, h)?;
        let na = c.active.len();
        let raw = tape.slice(out, 1, 0, na)?;
        let shift = tape.slice(out, 1, na, na)?;
        let clamp = self.shape.scale_clamp;
        let s = tape.scale(raw, 1.0 / clamp)?;
        let s = tape.tanh(s)?;
        let s = tape.scale(s, clamp)?;
        Ok((s, shift))
    }

    /// `z = f(x | C)` row-wise, with `log|det ∂z/∂x|` per row (`[N]`).
    pub fn forward(&self, tape: &mut Tape, x: Var, cond: Var) -> Result<(Var, Var)> {
        let rows = self.check(tape, x, cond)?;
        let mut current = x;
        let mut log_det: Option<Var> = None;
        for c in &self.couplings {
            let xa = tape.gather_last(current, &c.active)?;
            let xp = tape.gather_last(current, &c.passive)?;
            let (s, t) = self.scale_shift(tape, c, xp, cond)?;
            let es = tape.exp(s)?;
            let za = tape.mul(xa, es)?;
            let za = tape.add(za, t)?;
            let joined = if c.passive.is_empty() { za } else { tape.concat(&[za, xp], 1)? };
            current = tape.gather_last(joined, &c.restore)?;
            let ld = tape.sum_axis(s, 1)?;
            log_det = Some(match log_det {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        let log_det = match log_det {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&[rows])),
        };
        Ok((current, log_det))
    }

    /// Exact inverse of [`Flow::forward`] for the same condition.
    pub fn inverse(&self, tape: &mut Tape, z: Var, cond: Var) -> Result<Var> {
        self.check(tape, z, cond)?;
        let mut current = z;
        for c in self.couplings.iter().rev() {
            let za = tape.gather_last(current, &c.active)?;
            let xp = tape.gather_last(current, &c.passive)?;
            let (s, t) = self.scale_shift(tape, c, xp, cond)?;
            let centred = tape.sub(za, t)?;
            let neg = tape.scale(s, -1.0)?;
            let inv = tape.exp(neg)?;
            let xa = tape.mul(centred, inv)?;
            let joined = if c.passive.is_empty() { xa } else { tape.concat(&[xa, xp], 1)? };
            current = tape.gather_last(joined, &c.restore)?;
        }
        Ok(current)
    }

    /// Negative log-likelihood of each row: `½‖z‖² + (D/2)·log 2π − log_det`.
    pub fn nll(&self, tape: &mut Tape, x: Var, cond: Var) -> Result<Var> {
        let (z, log_det) = self.forward(tape, x, cond)?;
        let sq = tape.mul(z, z)?;
        let sq = tape.sum_axis(sq, 1)?;
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let base = tape.affine(sq, 0.5, self.shape.dim as f64 * half_log_2pi)?;
        tape.sub(base, log_det)
    }
}

/// Mean NLL over every row of `x [N, D]`.
pub fn nll_loss(tape: &mut Tape, flow: &Flow, x: Var, cond: Var) -> Result<Var> {
    let per_row = flow.nll(tape, x, cond)?;
    tape.mean(per_row)
}
