//! Memory-augmented router.
//!
//! A slot matrix `M` carries global history across windows. Each step the
//! pooled hierarchy rows of the current window are appended to the memory,
//! the memory attends over that union, passes through a residual MLP, and
//! is blended with the previous memory through forget/input gates. The
//! router reads the updated memory with one linear map and a softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

/// Slot matrix `[slots, dim]` plus the number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub slots: Tensor,
    pub step: u64,
}

impl MemoryState {
    /// `M_0`: fixed draws from seed 0 in (−0.01, 0.01).
    pub fn reset(slots: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = (0..slots * dim).map(|_| 0.01 * rng.gen_range(-1.0..1.0)).collect();
        MemoryState {
            slots: Tensor::new(vec![slots, dim], data).expect("slot shape"),
            step: 0,
        }
    }
}

pub fn register(
    store: &mut ParamStore,
    prefix: &str,
    hidden: usize,
    levels: usize,
    slots: usize,
    dim: usize,
    seed: u64,
) {
    Linear::register(store, &format!("{prefix}.in_proj"), hidden, dim, false, seed);
    for name in ["attn_q", "attn_k", "attn_v"] {
        Linear::register(store, &format!("{prefix}.{name}"), dim, dim, false, seed);
    }
    Linear::register(store, &format!("{prefix}.phi_m1"), dim, dim, true, seed);
    Linear::register(store, &format!("{prefix}.phi_m2"), dim, dim, true, seed);
    for gate in ["f", "i"] {
        store.init_uniform(&format!("{prefix}.w_{gate}"), &[levels * dim, dim], levels * dim, seed);
        store.init_uniform(&format!("{prefix}.u_{gate}"), &[dim, dim], dim, seed);
    }
    Linear::register(store, &format!("{prefix}.phi_r"), slots * dim, levels, true, seed);
}

/// Tape handles of the router parameters.
#[derive(Clone, Copy, Debug)]
pub struct Router {
    in_proj: Linear,
    attn_q: Linear,
    attn_k: Linear,
    attn_v: Linear,
    phi_m1: Linear,
    phi_m2: Linear,
    w_f: Var,
    u_f: Var,
    w_i: Var,
    u_i: Var,
    phi_r: Linear,
    levels: usize,
    dim: usize,
}

/// Intermediate values of one memory step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub attention: Var,
    pub memory: Var,
    pub routes: Var,
}

impl Router {
    pub fn bind(tape: &Tape, bound: &Bound, prefix: &str) -> Result<Self> {
        let lin = |n: &str| Linear::bind(bound, &format!("{prefix}.{n}"));
        let phi_r = lin("phi_r")?;
        let u_f = bound.get(&format!("{prefix}.u_f"))?;
        Ok(Router {
            in_proj: lin("in_proj")?,
            attn_q: lin("attn_q")?,
            attn_k: lin("attn_k")?,
            attn_v: lin("attn_v")?,
            phi_m1: lin("phi_m1")?,
            phi_m2: lin("phi_m2")?,
            w_f: bound.get(&format!("{prefix}.w_f"))?,
            u_f,
            w_i: bound.get(&format!("{prefix}.w_i"))?,
            u_i: bound.get(&format!("{prefix}.u_i"))?,
            levels: tape.shape(phi_r.weight)[1],
            dim: tape.shape(u_f)[0],
            phi_r,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Mean-pools a hierarchy `[B, L, K, T, d]` over entities and time and
    /// projects each level to a memory-width row: `[B, L, dim]`.
    pub fn pool(&self, tape: &mut Tape, hierarchy: Var) -> Result<Var> {
        let s = tape.shape(hierarchy).to_vec();
        if s.len() != 5 || s[1] != self.levels {
            return Err(Error::shape("router_pool", format!("{s:?} for {} levels", self.levels)));
        }
        let (b, l, k, t, d) = (s[0], s[1], s[2], s[3], s[4]);
        let flat = tape.reshape(hierarchy, &[b * l, k * t, d])?;
        let pooled = tape.mean_axis(flat, 1)?;
        let rows = self.in_proj.forward(tape, pooled)?;
        tape.reshape(rows, &[b, l, self.dim])
    }

    /// `Z = softmax(Q Kᵀ/√dim) V` with queries from `M_{t−1}` and keys/values
    /// from `[M_{t−1}; rows]`. Returns `(Z, attention weights)`.
    pub fn attend(&self, tape: &mut Tape, memory: Var, rows: Var) -> Result<(Var, Var)> {
        let (ms, rs) = (tape.shape(memory).to_vec(), tape.shape(rows).to_vec());
        if ms.len() != 2 || rs.len() != 2 || ms[1] != rs[1] || ms[1] != self.dim {
            return Err(Error::Contract(format!("memory {ms:?} and rows {rs:?} differ in width")));
        }
        let y = tape.concat(&[memory, rows], 0)?;
        let q = self.attn_q.forward(tape, memory)?;
        let k = self.attn_k.forward(tape, y)?;
        let v = self.attn_v.forward(tape, y)?;
        let q3 = tape.reshape(q, &[1, ms[0], self.dim])?;
        let k3 = tape.reshape(k, &[1, ms[0] + rs[0], self.dim])?;
        let v3 = tape.reshape(v, &[1, ms[0] + rs[0], self.dim])?;
        let logits = tape.bmm(q3, k3, true)?;
        let logits = tape.scale(logits, 1.0 / (self.dim as f64).sqrt())?;
        let weights = tape.softmax(logits)?;
        let z = tape.bmm(weights, v3, false)?;
        let z = tape.reshape(z, &ms)?;
        let weights = tape.reshape(weights, &[ms[0], ms[0] + rs[0]])?;
        Ok((z, weights))
    }

    /// `M̃ = φ_M(Z + M) + Z + M`.
    pub fn residual(&self, tape: &mut Tape, z: Var, memory: Var) -> Result<Var> {
        let base = tape.add(z, memory)?;
        let h = self.phi_m1.forward(tape, base)?;
        let h = tape.relu(h)?;
        let h = self.phi_m2.forward(tape, h)?;
        tape.add(h, base)
    }

    /// `M_t = σ(G_f) ⊙ M_{t−1} + σ(G_i) ⊙ tanh(M̃)` with
    /// `G = vec(rows)·W + tanh(M_{t−1})·U`, the row term shared by every slot.
    pub fn gate(&self, tape: &mut Tape, memory: Var, rows: Var, candidate: Var) -> Result<Var> {
        let rs = tape.shape(rows).to_vec();
        let flat = tape.reshape(rows, &[1, rs[0] * rs[1]])?;
        let squashed = tape.tanh(memory)?;
        let gate = |tape: &mut Tape, w: Var, u: Var| -> Result<Var> {
            let from_rows = tape.matmul(flat, w)?;
            let from_rows = tape.reshape(from_rows, &[self.dim])?;
            let from_mem = tape.matmul(squashed, u)?;
            let pre = tape.add_bias(from_mem, from_rows)?;
            tape.sigmoid(pre)
        };
        let forget = gate(tape, self.w_f, self.u_f)?;
        let input = gate(tape, self.w_i, self.u_i)?;
        let keep = tape.mul(forget, memory)?;
        let cand = tape.tanh(candidate)?;
        let write = tape.mul(input, cand)?;
        tape.add(keep, write)
    }

    /// `R = softmax(φ_R(vec(M_t)))`, length `L`.
    pub fn route(&self, tape: &mut Tape, memory: Var) -> Result<Var> {
        let n = tape.value(memory).len();
        let flat = tape.reshape(memory, &[1, n])?;
        let logits = self.phi_r.forward(tape, flat)?;
        let r = tape.softmax(logits)?;
        tape.reshape(r, &[self.levels])
    }

    /// One full update from `M_{t−1}` and the current rows `[L, dim]`.
    pub fn step(&self, tape: &mut Tape, memory: Var, rows: Var) -> Result<StepOutput> {
        let (z, attention) = self.attend(tape, memory, rows)?;
        let candidate = self.residual(tape, z, memory)?;
        let next = self.gate(tape, memory, rows, candidate)?;
        let routes = self.route(tape, next)?;
        Ok(StepOutput { attention, memory: next, routes })
    }

    /// Runs the recurrence over the windows of a batch in order. `pooled` is
    /// `[B, L, dim]`; returns the final memory and the routes `[B, L]`.
    pub fn run(&self, tape: &mut Tape, initial: Var, pooled: Var) -> Result<(Var, Var)> {
        let s = tape.shape(pooled).to_vec();
        let mut memory = initial;
        let mut routes = Vec::with_capacity(s[0]);
        for b in 0..s[0] {
            let rows = tape.slice(pooled, 0, b, 1)?;
            let rows = tape.reshape(rows, &[s[1], s[2]])?;
            let out = self.step(tape, memory, rows)?;
            memory = out.memory;
            routes.push(tape.reshape(out.routes, &[1, s[1]])?);
        }
        let routes = tape.concat(&routes, 0)?;
        Ok((memory, routes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "memory-test");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(levels: usize, slots: usize, dim: usize) -> ParamStore {
        let mut p = ParamStore::new();
        register(&mut p, "r", 6, levels, slots, dim, 13);
        p
    }

    fn with_router<T>(p: &ParamStore, f: impl FnOnce(&mut Tape, &Router) -> T) -> T {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let router = Router::bind(&tape, &bound, "r").unwrap();
        f(&mut tape, &router)
    }

    #[test]
    fn zero_memory_and_rows_attend_to_zero() {
        let p = setup(3, 4, 5);
        with_router(&p, |tape, r| {
            let m = tape.constant(Tensor::zeros(&[4, 5]));
            let rows = tape.constant(Tensor::zeros(&[3, 5]));
            let (z, w) = r.attend(tape, m, rows).unwrap();
            assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
            for row in tape.value(w).data().chunks(7) {
                assert!(row.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
            }
        });
    }

    #[test]
    fn single_slot_output_is_convex_combination() {
        let p = setup(2, 1, 3);
        with_router(&p, |tape, r| {
            let m = tape.constant(random(&[1, 3], 1));
            let rows = tape.constant(random(&[2, 3], 2));
            let (z, w) = r.attend(tape, m, rows).unwrap();
            let weights = tape.value(w).data().to_vec();
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Z = Σ w_j · (Y_j W_v)
            let y = tape.concat(&[m, rows], 0).unwrap();
            let vals = r.attn_v.forward(tape, y).unwrap();
            let vals = tape.value(vals).clone();
            for c in 0..3 {
                let want: f64 = (0..3).map(|j| weights[j] * vals.get(&[j, c])).sum();
                assert!((tape.value(z).get(&[0, c]) - want).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn residual_update_matches_direct_evaluation() {
        let mut p = setup(2, 2, 3);
        with_router(&p.clone(), |tape, r| {
            let z = random(&[2, 3], 3);
            let m = random(&[2, 3], 4);
            let zv = tape.constant(z.clone());
            let mv = tape.constant(m.clone());
            let got = r.residual(tape, zv, mv).unwrap();
            let w1 = p.get("r.phi_m1.weight").unwrap();
            let b1 = p.get("r.phi_m1.bias").unwrap();
            let w2 = p.get("r.phi_m2.weight").unwrap();
            let b2 = p.get("r.phi_m2.bias").unwrap();
            for s in 0..2 {
                let base: Vec<f64> = (0..3).map(|c| z.get(&[s, c]) + m.get(&[s, c])).collect();
                let hidden: Vec<f64> = (0..3)
                    .map(|c| ((0..3).map(|e| base[e] * w1.get(&[e, c])).sum::<f64>() + b1.data()[c]).max(0.0))
                    .collect();
                for c in 0..3 {
                    let mlp = (0..3).map(|e| hidden[e] * w2.get(&[e, c])).sum::<f64>() + b2.data()[c];
                    assert!((tape.value(got).get(&[s, c]) - (mlp + base[c])).abs() < 1e-12);
                }
            }
        });

        p.zero_prefix("r.phi_m");
        with_router(&p, |tape, r| {
            let z = tape.constant(random(&[2, 3], 5));
            let m = tape.constant(random(&[2, 3], 6));
            let got = r.residual(tape, z, m).unwrap();
            let sum = tape.add(z, m).unwrap();
            assert_eq!(tape.value(got).data(), tape.value(sum).data());
            let zero = tape.constant(Tensor::zeros(&[2, 3]));
            let got = r.residual(tape, zero, m).unwrap();
            assert_eq!(tape.value(got).data(), tape.value(m).data());
        });
    }

    #[test]
    fn zero_gates_average_old_and_candidate() {
        let mut p = setup(2, 3, 4);
        for g in ["r.w_f", "r.u_f", "r.w_i", "r.u_i"] {
            p.zero_prefix(g);
        }
        with_router(&p, |tape, r| {
            let m = random(&[3, 4], 7);
            let cand = random(&[3, 4], 8);
            let (mv, cv) = (tape.constant(m.clone()), tape.constant(cand.clone()));
            let rows = tape.constant(random(&[2, 4], 9));
            let next = r.gate(tape, mv, rows, cv).unwrap();
            for (i, v) in tape.value(next).data().iter().enumerate() {
                let want = 0.5 * m.data()[i] + 0.5 * cand.data()[i].tanh();
                assert!((v - want).abs() < 1e-15);
            }
        });
    }

    #[test]
    fn zero_memory_and_candidate_stay_zero() {
        let p = setup(2, 3, 4);
        with_router(&p, |tape, r| {
            let m = tape.constant(Tensor::zeros(&[3, 4]));
            let rows = tape.constant(random(&[2, 4], 9));
            let next = r.gate(tape, m, rows, m).unwrap();
            assert!(tape.value(next).data().iter().all(|&v| v == 0.0));
        });
    }

    #[test]
    fn route_is_a_probability_vector() {
        let mut p = setup(3, 2, 4);
        with_router(&p.clone(), |tape, r| {
            let m = tape.constant(random(&[2, 4], 10));
            let routes = r.route(tape, m).unwrap();
            let v = tape.value(routes).data();
            assert_eq!(v.len(), 3);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(v.iter().all(|&x| x > 0.0));
        });
        p.zero_prefix("r.phi_r");
        with_router(&p, |tape, r| {
            let m = tape.constant(random(&[2, 4], 10));
            let routes = r.route(tape, m).unwrap();
            assert!(tape.value(routes).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        });
    }

    #[test]
    fn softmax_of_dominant_logit() {
        let r = crate::autodiff::softmax(&[10.0, 0.0, 0.0]);
        let small = 1.0 / (10f64.exp() + 2.0);
        assert!((r[0] - 10f64.exp() * small).abs() < 1e-15);
        assert!((r[0] - 0.999_909_2).abs() < 1e-6);
        assert!((r[1] - 4.539_580_8e-5).abs() < 1e-12);
    }

    #[test]
    fn reset_is_deterministic_and_small() {
        let a = MemoryState::reset(4, 32);
        assert_eq!(a, MemoryState::reset(4, 32));
        let norm = a.slots.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 0.1 * (4.0f64 * 32.0).sqrt());
        assert!(a.slots.is_finite());
    }

    #[test]
    fn memory_stays_bounded_over_many_steps() {
        let p = setup(2, 3, 4);
        with_router(&p, |tape, r| {
            let mut m = tape.constant(MemoryState::reset(3, 4).slots);
            for step in 0..50 {
                let prev_max = tape.value(m).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let rows = tape.constant(random(&[2, 4], 100 + step));
                let out = r.step(tape, m, rows).unwrap();
                let max = tape.value(out.memory).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(max <= prev_max + 1.0);
                m = out.memory;
            }
        });
    }
}
