//! Helpers shared by the integration tests: random tensors, parameter-aware
//! gradient checks over each module composition, and small datasets.

#![allow(dead_code)]

use graphmoe::autodiff::{grad_check_many, Tape, Var};
use graphmoe::encoder::{self, CellKind, RnnVars};
use graphmoe::flow::{self, Flow, FlowShape};
use graphmoe::graph::{self, GnnLayer, GraphLearner};
use graphmoe::memory::{self, Router};
use graphmoe::moe::{self, Expert};
use graphmoe::params::{Bound, ParamStore};
use graphmoe::seed::rng_for;
use graphmoe::{Result, Tensor};
use rand::Rng;

pub const FD_EPS: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    let mut rng = rng_for(seed, tag);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output coordinate matters.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.shape(out), seed, "projection"));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Worst relative gradient error of `f` over every parameter in `store` and
/// every tensor in `inputs`.
pub fn check_with_params<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    tensors.extend_from_slice(inputs);
    grad_check_many(
        |tape, vars| {
            let bound: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            f(tape, &bound, &vars[names.len()..])
        },
        &tensors,
        FD_EPS,
    )
}

/// Encoder unrolled over three steps; GRU on even seeds, LSTM on odd.
pub fn encoder_unroll(seed: u64) -> Result<f64> {
    let kind = if seed.is_multiple_of(2) { CellKind::Gru } else { CellKind::Lstm };
    let mut store = ParamStore::new();
    encoder::register(&mut store, "enc", kind, 3, seed);
    let x = random(&[2, 3], seed, "series");
    check_with_params(&store, &[x], |tape, bound, v| {
        let vars = RnnVars::bind(tape, bound, "enc", kind)?;
        let h = encoder::encode(tape, &vars, v[0])?;
        project(tape, h, seed)
    })
}

/// Graph learner plus a two-layer GNN stack.
pub fn graph_stack(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    graph::register(&mut store, "g", 4, 3, 3, 2, seed);
    let x = random(&[1, 3, 4], seed, "window");
    let h0 = random(&[1, 3, 4, 3], seed, "h0");
    check_with_params(&store, &[x, h0], |tape, bound, v| {
        let learner = GraphLearner::bind(bound, "g")?;
        let layers = [GnnLayer::bind(bound, "g", 1)?, GnnLayer::bind(bound, "g", 2)?];
        let adj = learner.forward(tape, v[0])?;
        let outs = graph::run_stack(tape, adj, v[1], &layers)?;
        let a = project(tape, adj, seed)?;
        let b = project(tape, outs[1], seed + 1)?;
        tape.add(a, b)
    })
}

/// Two experts mixed by softmax weights.
pub fn expert_mix(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    moe::register_expert(&mut store, "e1", 3, 6, seed);
    moe::register_expert(&mut store, "e2", 3, 6, seed + 100);
    let h = random(&[1, 2, 3, 3], seed, "h");
    let l1 = random(&[1, 2, 3, 3], seed, "l1");
    let l2 = random(&[1, 2, 3, 3], seed, "l2");
    let logits = random(&[1, 2], seed, "logits");
    check_with_params(&store, &[h, l1, l2, logits], |tape, bound, v| {
        let e1 = Expert::bind(bound, "e1")?.forward(tape, v[0], v[1])?;
        let e2 = Expert::bind(bound, "e2")?.forward(tape, v[0], v[2])?;
        let r = tape.softmax(v[3])?;
        let c = moe::mix(tape, r, &[e1.aligned, e2.aligned])?;
        project(tape, c, seed)
    })
}

/// Router pooling plus three memory updates.
pub fn memory_unroll(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    memory::register(&mut store, "r", 3, 2, 2, 3, seed);
    let hierarchy = random(&[3, 2, 2, 2, 3], seed, "hierarchy");
    let m0 = random(&[2, 3], seed, "m0");
    check_with_params(&store, &[hierarchy, m0], |tape, bound, v| {
        let router = Router::bind(tape, bound, "r")?;
        let pooled = router.pool(tape, v[0])?;
        let (m, routes) = router.run(tape, v[1], pooled)?;
        let a = project(tape, routes, seed)?;
        let b = project(tape, m, seed + 1)?;
        tape.add(a, b)
    })
}

pub fn small_flow() -> FlowShape {
    FlowShape { dim: 4, cond_dim: 3, blocks: 2, hidden: 4, scale_clamp: 5.0 }
}

/// Mean flow NLL with respect to flow parameters, inputs and conditions.
pub fn flow_nll(seed: u64) -> Result<f64> {
    let shape = small_flow();
    let mut store = ParamStore::new();
    flow::register(&mut store, "f", &shape, seed);
    let x = random(&[3, 4], seed, "x");
    let c = random(&[3, 3], seed, "c");
    check_with_params(&store, &[x, c], |tape, bound, v| {
        let f = Flow::bind(bound, "f", shape)?;
        flow::nll_loss(tape, &f, v[0], v[1])
    })
}

/// AUROC by enumerating every positive–negative pair, ties counting ½.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Three coupled entities over 400 steps with four spikes and a level shift.
pub fn tiny_gen(seed: u64) -> graphmoe::synth::GenConfig {
    use graphmoe::synth::{AnomalyKind, AnomalySpec, GenConfig, Sinusoid};
    let spike = |start: usize, e: usize| AnomalySpec {
        kind: AnomalyKind::Spike,
        start,
        length: 4,
        magnitude: 1.5,
        entities: vec![e],
    };
    GenConfig {
        entities: 3,
        length: 400,
        seed,
        base: [20.0, 31.0, 45.0]
            .iter()
            .enumerate()
            .map(|(k, p)| Sinusoid { freq: 1.0 / p, amp: 1.0, phase: 0.5 * k as f64 })
            .collect(),
        coupling: vec![vec![1.0, 0.5, 0.0], vec![0.0, 1.0, 0.5], vec![0.5, 0.0, 1.0]],
        noise_std: 0.1,
        anomalies: vec![
            spike(60, 0),
            spike(170, 1),
            spike(260, 2),
            spike(340, 0),
            AnomalySpec { kind: AnomalyKind::LevelShift, start: 300, length: 15, magnitude: 2.0, entities: vec![1] },
        ],
    }
}

/// A model small enough to train in well under a second per epoch.
pub fn tiny_train() -> graphmoe::trainer::TrainConfig {
    use graphmoe::model::ModelConfig;
    use graphmoe::trainer::TrainConfig;
    TrainConfig {
        model: ModelConfig {
            window: 12,
            hidden: 4,
            attn_dim: 4,
            layers: 2,
            ff_mult: 2,
            memory_slots: 2,
            memory_dim: 4,
            flow_blocks: 2,
            flow_hidden: 8,
            ..ModelConfig::default()
        },
        stride: 4,
        lr: 0.01,
        batch_size: 8,
        epochs: 2,
        ..TrainConfig::default()
    }
}

pub fn tiny_series(seed: u64) -> graphmoe::ingest::RawSeries {
    graphmoe::synth::generate(&tiny_gen(seed)).unwrap()
}

/// Flow parameters with the output layers scaled by `gain`, so log-scales
/// and shifts are far from zero.
pub fn flow_params(shape: &FlowShape, seed: u64, gain: f64) -> ParamStore {
    let mut store = ParamStore::new();
    flow::register(&mut store, "f", shape, seed);
    for (name, t) in store.iter_mut() {
        if name.contains(".l2.") {
            t.data_mut().iter_mut().for_each(|v| *v *= gain);
        }
    }
    store
}

/// Runs the frozen flow forward on `x [N, D]`, returning `z` and `log_det`.
pub fn flow_apply(store: &ParamStore, shape: FlowShape, x: &Tensor, cond: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let f = Flow::bind(&bound, "f", shape).unwrap();
    let (xv, cv) = (tape.constant(x.clone()), tape.constant(cond.clone()));
    let (z, ld) = f.forward(&mut tape, xv, cv).unwrap();
    (tape.value(z).clone(), tape.value(ld).clone())
}

/// `max |f⁻¹(f(x)) − x|` over a batch of `rows` random `(x, C)` pairs,
/// `x` uniform in (−3, 3).
pub fn flow_round_trip_error(shape: FlowShape, seed: u64, rows: usize, gain: f64) -> f64 {
    let store = flow_params(&shape, seed, gain);
    let mut x = random(&[rows, shape.dim], seed, "x");
    x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    let c = random(&[rows, shape.cond_dim], seed, "c");
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let f = Flow::bind(&bound, "f", shape).unwrap();
    let (xv, cv) = (tape.constant(x.clone()), tape.constant(c));
    let (z, _) = f.forward(&mut tape, xv, cv).unwrap();
    let back = f.inverse(&mut tape, z, cv).unwrap();
    tape.value(back).max_abs_diff(&x)
}

/// `ln |det a|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, p);
        let pivot = a[col][col];
        acc += pivot.abs().ln();
        for r in col + 1..n {
            let factor = a[r][col] / pivot;
            for c in col..n {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    acc
}

/// `|analytic log_det − ln|det J_fd||` for one random point of a D=4 flow,
/// with `J` from central differences.
pub fn flow_logdet_fd_error(seed: u64) -> f64 {
    let shape = small_flow();
    let store = flow_params(&shape, seed, 3.0);
    let x = random(&[1, shape.dim], seed, "x");
    let c = random(&[1, shape.cond_dim], seed, "c");
    let (_, ld) = flow_apply(&store, shape, &x, &c);
    let h = 1e-5;
    let mut jac = vec![vec![0.0; shape.dim]; shape.dim];
    for j in 0..shape.dim {
        let mut plus = x.clone();
        plus.data_mut()[j] += h;
        let mut minus = x.clone();
        minus.data_mut()[j] -= h;
        let (zp, _) = flow_apply(&store, shape, &plus, &c);
        let (zm, _) = flow_apply(&store, shape, &minus, &c);
        for i in 0..shape.dim {
            jac[i][j] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
        }
    }
    (ld.data()[0] - log_abs_det(jac)).abs()
}

/// Trapezoidal integral of a D=1 flow's density over `[−8, 8]`, step 1e-3.
pub fn flow_density_mass(seed: u64) -> f64 {
    let shape = FlowShape { dim: 1, cond_dim: 2, blocks: 2, hidden: 6, scale_clamp: 5.0 };
    let store = flow_params(&shape, seed, 1.0);
    let step = 1e-3;
    let n = 16_000;
    let xs: Vec<f64> = (0..=n).map(|i| -8.0 + step * i as f64).collect();
    let x = Tensor::new(vec![xs.len(), 1], xs).unwrap();
    let row = random(&[1, 2], seed, "c");
    let cond = Tensor::new(vec![n + 1, 2], row.data().repeat(n + 1)).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let f = Flow::bind(&bound, "f", shape).unwrap();
    let (xv, cv) = (tape.constant(x), tape.constant(cond));
    let nll = f.nll(&mut tape, xv, cv).unwrap();
    let p: Vec<f64> = tape.value(nll).data().iter().map(|v| (-v).exp()).collect();
    let inner: f64 = p[1..n].iter().sum();
    step * (inner + 0.5 * (p[0] + p[n]))
}
