//! Full detector: encoder, graph learner, GNN stack, experts, router, flow.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{self, CellKind, RnnVars};
use crate::error::{Error, Result};
use crate::flow::{self, Flow, FlowShape};
use crate::graph::{self, GnnLayer, GraphLearner};
use crate::memory::{self, MemoryState, Router};
use crate::moe::{self, Expert};
use crate::params::{Bound, ParamStore};
use crate::seed::sub_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Window length `T`; also the flow dimension.
    pub window: usize,
    /// Encoder and GNN width `d_h`.
    pub hidden: usize,
    /// Width of the graph-learner projections.
    pub attn_dim: usize,
    /// GNN layers, one expert each.
    pub layers: usize,
    pub cell: CellKind,
    /// Expert FFN width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub memory_slots: usize,
    pub memory_dim: usize,
    pub flow_blocks: usize,
    pub flow_hidden: usize,
    pub scale_clamp: f64,
    pub moe: bool,
    pub mar: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 60,
            hidden: 32,
            attn_dim: 16,
            layers: 3,
            cell: CellKind::Gru,
            ff_mult: 4,
            memory_slots: 4,
            memory_dim: 32,
            flow_blocks: 2,
            flow_hidden: 64,
            scale_clamp: 5.0,
            moe: true,
            mar: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("hidden", self.hidden),
            ("attn_dim", self.attn_dim),
            ("layers", self.layers),
            ("ff_mult", self.ff_mult),
            ("memory_slots", self.memory_slots),
            ("memory_dim", self.memory_dim),
            ("flow_blocks", self.flow_blocks),
            ("flow_hidden", self.flow_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if !(self.scale_clamp.is_finite() && self.scale_clamp > 0.0) {
            return Err(Error::Config("model.scale_clamp must be positive".into()));
        }
        Ok(())
    }

    /// Number of hierarchy levels mixed into the condition.
    pub fn levels(&self) -> usize {
        if self.moe || self.mar {
            self.layers
        } else {
            1
        }
    }

    pub fn flow_shape(&self) -> FlowShape {
        FlowShape {
            dim: self.window,
            cond_dim: self.window * self.hidden,
            blocks: self.flow_blocks,
            hidden: self.flow_hidden,
            scale_clamp: self.scale_clamp,
        }
    }

    fn expert_prefix(&self, layer: usize) -> String {
        if self.moe {
            format!("moe.expert{layer}")
        } else {
            "moe.shared".to_string()
        }
    }
}

/// Registers every parameter the configuration uses, each group seeded from
/// its own sub-seed of `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    encoder::register(&mut store, "encoder", cfg.cell, cfg.hidden, sub_seed(seed, "encoder"));
    graph::register(
        &mut store,
        "graph",
        cfg.window,
        cfg.attn_dim,
        cfg.hidden,
        cfg.layers,
        sub_seed(seed, "graph"),
    );
    let ff = cfg.ff_mult * cfg.hidden;
    if cfg.moe {
        for l in 1..=cfg.layers {
            let prefix = cfg.expert_prefix(l);
            moe::register_expert(&mut store, &prefix, cfg.hidden, ff, sub_seed(seed, &prefix));
        }
    } else {
        moe::register_expert(&mut store, "moe.shared", cfg.hidden, ff, sub_seed(seed, "moe.shared"));
    }
    if cfg.mar {
        memory::register(
            &mut store,
            "router",
            cfg.hidden,
            cfg.levels(),
            cfg.memory_slots,
            cfg.memory_dim,
            sub_seed(seed, "router"),
        );
    }
    flow::register(&mut store, "flow", &cfg.flow_shape(), sub_seed(seed, "flow"));
    Ok(store)
}

/// Parameter handles for one tape.
pub struct Network {
    cfg: ModelConfig,
    rnn: RnnVars,
    learner: GraphLearner,
    layers: Vec<GnnLayer>,
    experts: Vec<Expert>,
    router: Option<Router>,
    flow: Flow,
}

/// Tape values of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Per-window anomaly score (mean NLL over entities), `[B]`.
    pub scores: Var,
    /// Mean of `scores`.
    pub loss: Var,
    /// `[B, K, K]`.
    pub adjacency: Var,
    /// `[B, levels]`.
    pub routes: Var,
    /// Mixed expert output `C`, `[B, K, T, d]`.
    pub condition: Var,
    /// Per-level expert outputs `H̄ˡ`, each `[B, K, T, d]`.
    pub experts: Vec<Var>,
    /// Memory after the last window of the batch, when the router is on.
    pub memory: Option<Var>,
}

impl Network {
    pub fn bind(tape: &Tape, bound: &Bound, cfg: &ModelConfig) -> Result<Self> {
        let layers = (1..=cfg.layers)
            .map(|l| GnnLayer::bind(bound, "graph", l))
            .collect::<Result<_>>()?;
        let experts = if cfg.moe {
            (1..=cfg.layers)
                .map(|l| Expert::bind(bound, &cfg.expert_prefix(l)))
                .collect::<Result<_>>()?
        } else {
            vec![Expert::bind(bound, "moe.shared")?]
        };
        let router = if cfg.mar { Some(Router::bind(tape, bound, "router")?) } else { None };
        Ok(Network {
            cfg: cfg.clone(),
            rnn: RnnVars::bind(tape, bound, "encoder", cfg.cell)?,
            learner: GraphLearner::bind(bound, "graph")?,
            layers,
            experts,
            router,
            flow: Flow::bind(bound, "flow", cfg.flow_shape())?,
        })
    }

    /// Scores a batch of `[K, T]` windows given in time order. `memory` is the
    /// router state before the first window; it is ignored when the router is off.
    pub fn forward(&self, tape: &mut Tape, windows: &[Tensor], memory: &MemoryState) -> Result<ForwardPass> {
        let first = windows.first().ok_or_else(|| Error::EmptyInput("no windows to score".into()))?;
        let (k, t) = match first.shape() {
            &[k, t] if t == self.cfg.window && k > 0 => (k, t),
            s => {
                return Err(Error::shape(
                    "forward",
                    format!("window {s:?}, expected [K, {}]", self.cfg.window),
                ))
            }
        };
        let b = windows.len();
        let d = self.cfg.hidden;
        let mut data = Vec::with_capacity(b * k * t);
        for w in windows {
            if w.shape() != [k, t] {
                return Err(Error::shape("forward", format!("window {:?} in a [{k}, {t}] batch", w.shape())));
            }
            data.extend_from_slice(w.data());
        }
        let x = tape.constant(Tensor::new(vec![b, k, t], data)?);

        let series = tape.reshape(x, &[b * k, t])?;
        let h = encoder::encode(tape, &self.rnn, series)?;
        let h = tape.reshape(h, &[b, k, t, d])?;

        let adjacency = self.learner.forward(tape, x)?;
        let levels = graph::run_stack(tape, adjacency, h, &self.layers)?;

        let used: Vec<Var> = if self.cfg.levels() == 1 && !self.cfg.moe {
            vec![*levels.last().expect("non-empty stack")]
        } else {
            levels
        };
        let mut attended = Vec::with_capacity(used.len());
        let mut aligned = Vec::with_capacity(used.len());
        for (i, &layer) in used.iter().enumerate() {
            let expert = if self.cfg.moe { &self.experts[i] } else { &self.experts[0] };
            let out = expert.forward(tape, h, layer)?;
            attended.push(out.attended);
            aligned.push(out.aligned);
        }

        let n_levels = aligned.len();
        let (routes, next_memory) = match &self.router {
            Some(router) => {
                let hierarchy = moe::collect_hierarchy(tape, &attended)?;
                let pooled = router.pool(tape, hierarchy)?;
                let m0 = tape.constant(memory.slots.clone());
                let (m, r) = router.run(tape, m0, pooled)?;
                (r, Some(m))
            }
            None => {
                let uniform = Tensor::full(&[b, n_levels], 1.0 / n_levels as f64);
                (tape.constant(uniform), None)
            }
        };
        let condition = moe::mix(tape, routes, &aligned)?;

        let rows = tape.reshape(x, &[b * k, t])?;
        let cond = tape.reshape(condition, &[b * k, t * d])?;
        let nll = self.flow.nll(tape, rows, cond)?;
        let nll = tape.reshape(nll, &[b, k])?;
        let scores = tape.mean_axis(nll, 1)?;
        let loss = tape.mean(scores)?;
        Ok(ForwardPass {
            scores,
            loss,
            adjacency,
            routes,
            condition,
            experts: aligned,
            memory: next_memory,
        })
    }
}

/// Memory state after a batch, advanced by its window count.
pub fn advance_memory(tape: &Tape, pass: &ForwardPass, before: &MemoryState, windows: usize) -> MemoryState {
    match pass.memory {
        Some(m) => MemoryState { slots: tape.value(m).clone(), step: before.step + windows as u64 },
        None => before.clone(),
    }
}

/// Per-window outputs of a frozen model.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub scores: Vec<f64>,
    /// Router weights per window, `levels` each.
    pub routes: Vec<Vec<f64>>,
    /// Adjacency per window, `K·K` row-major each.
    pub adjacency: Vec<Vec<f64>>,
    pub memory: MemoryState,
}

/// Runs the frozen model over `windows` in order, carrying the router memory
/// from `memory`, `chunk` windows per tape.
pub fn score_windows(
    cfg: &ModelConfig,
    params: &ParamStore,
    windows: &[Tensor],
    memory: &MemoryState,
    chunk: usize,
) -> Result<Scored> {
    let mut out = Scored {
        scores: Vec::with_capacity(windows.len()),
        routes: Vec::with_capacity(windows.len()),
        adjacency: Vec::with_capacity(windows.len()),
        memory: memory.clone(),
    };
    for batch in windows.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let bound = params.bind_constants(&mut tape);
        let net = Network::bind(&tape, &bound, cfg)?;
        let pass = net.forward(&mut tape, batch, &out.memory)?;
        out.scores.extend_from_slice(tape.value(pass.scores).data());
        let levels = tape.shape(pass.routes)[1];
        out.routes.extend(tape.value(pass.routes).data().chunks(levels).map(<[f64]>::to_vec));
        let kk = tape.shape(pass.adjacency)[1] * tape.shape(pass.adjacency)[2];
        out.adjacency.extend(tape.value(pass.adjacency).data().chunks(kk).map(<[f64]>::to_vec));
        out.memory = advance_memory(&tape, &pass, &out.memory, batch.len());
    }
    Ok(out)
}
