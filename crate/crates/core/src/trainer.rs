//! Maximum-likelihood training, scoring of held-out windows, and the
//! ablation grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{auroc, mean_std};
use crate::ingest::{self, NormStats, RawSeries, SplitScheme, WindowBatch};
use crate::memory::MemoryState;
use crate::model::{advance_memory, init_params, score_windows, ModelConfig, Network, Scored};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::seed::sub_seed;

/// Where z-score statistics come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// Whole provided series, before splitting.
    #[default]
    Full,
    /// Training split only, applied to every split.
    Train,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    /// 60 / 40.
    #[default]
    TrainTest,
    /// 60 / 20 / 20.
    TrainValTest,
}

impl SplitKind {
    pub fn scheme(self) -> SplitScheme {
        match self {
            SplitKind::TrainTest => SplitScheme::TRAIN_TEST,
            SplitKind::TrainValTest => SplitScheme::TRAIN_VAL_TEST,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stride: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off unless set.
    pub clip_norm: Option<f64>,
    pub split: SplitKind,
    pub normalize: NormalizeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            stride: 10,
            lr: 0.005,
            batch_size: 32,
            epochs: 80,
            seed: 0,
            clip_norm: None,
            split: SplitKind::TrainTest,
            normalize: NormalizeMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.stride == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.stride, batch_size and epochs must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    fn fresh_memory(&self) -> MemoryState {
        MemoryState::reset(self.model.memory_slots, self.model.memory_dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

/// Loss trace as CSV: `epoch,train_nll,val_nll` (empty when there is no validation split).
pub fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,train_nll,val_nll\n");
    for e in trace {
        let val = e.val_nll.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_nll, val));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochLoss>,
}

/// Adam on the mean window NLL. Batches follow time order; the router memory
/// is carried across batches (detached) and reset at the start of each epoch.
pub fn train(cfg: &TrainConfig, data: &WindowBatch, val: Option<&WindowBatch>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("no training windows".into()));
    }
    let mut params = init_params(&cfg.model, sub_seed(cfg.seed, "params"))?;
    let mut adam = Adam::new(cfg.lr);
    adam.clip_norm = cfg.clip_norm;
    let mut last_good = Checkpoint { config: cfg.clone(), params: params.clone(), memory: cfg.fresh_memory() };
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let diverged = |detail: String, last_good: &Checkpoint| Error::Diverged {
            epoch,
            detail,
            last_good: Box::new(last_good.clone()),
        };
        let mut memory = cfg.fresh_memory();
        let mut total = 0.0;
        for (b, batch) in data.windows.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let net = Network::bind(&tape, &bound, &cfg.model)?;
            let pass = match net.forward(&mut tape, batch, &memory) {
                Ok(p) => p,
                Err(e) if e.is_numeric() => return Err(diverged(format!("batch {b}: {e}"), &last_good)),
                Err(e) => return Err(e),
            };
            let loss = tape.value(pass.loss).item();
            if !loss.is_finite() {
                return Err(diverged(format!("batch {b}: loss {loss}"), &last_good));
            }
            let grads = tape.backward(pass.loss)?;
            adam.step(&mut params, &bound.collect(&tape, &grads));
            if let Some(name) = params.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n.to_string()) {
                return Err(diverged(format!("batch {b}: parameter `{name}` is not finite"), &last_good));
            }
            memory = advance_memory(&tape, &pass, &memory, batch.len());
            total += loss * batch.len() as f64;
        }
        let train_nll = total / data.len() as f64;
        let val_nll = match val.filter(|v| !v.is_empty()) {
            Some(v) => {
                let s = score_windows(&cfg.model, &params, &v.windows, &memory, cfg.batch_size)?;
                Some(s.scores.iter().sum::<f64>() / s.scores.len() as f64)
            }
            None => None,
        };
        trace.push(EpochLoss { epoch, train_nll, val_nll });
        last_good = Checkpoint { config: cfg.clone(), params: params.clone(), memory };
    }
    Ok(TrainOutcome { checkpoint: last_good, trace })
}

/// Scores windows with a trained checkpoint, starting from its stored memory.
pub fn score(checkpoint: &Checkpoint, windows: &WindowBatch) -> Result<Scored> {
    score_windows(
        &checkpoint.config.model,
        &checkpoint.params,
        &windows.windows,
        &checkpoint.memory,
        checkpoint.config.batch_size,
    )
}

/// Windows cut from a normalized series, split in time.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: WindowBatch,
    pub val: Option<WindowBatch>,
    pub test: WindowBatch,
    pub stats: NormStats,
}

/// Normalizes, splits, and windows `series` as configured.
pub fn prepare(series: &RawSeries, cfg: &TrainConfig) -> Result<Prepared> {
    let scheme = cfg.split.scheme();
    let (splits, stats) = match cfg.normalize {
        NormalizeMode::Full => {
            let stats = NormStats::fit(series)?;
            (ingest::split_dataset(&stats.apply(series)?, scheme)?, stats)
        }
        NormalizeMode::Train => {
            let raw = ingest::split_dataset(series, scheme)?;
            let stats = NormStats::fit(&raw.train)?;
            let splits = ingest::Splits {
                train: stats.apply(&raw.train)?,
                val: raw.val.as_ref().map(|v| stats.apply(v)).transpose()?,
                test: stats.apply(&raw.test)?,
            };
            (splits, stats)
        }
    };
    let window = cfg.model.window;
    Ok(Prepared {
        train: ingest::slide_windows(&splits.train, window, cfg.stride)?,
        val: splits.val.as_ref().map(|v| ingest::slide_windows(v, window, cfg.stride)).transpose()?,
        test: ingest::slide_windows(&splits.test, window, cfg.stride)?,
        stats,
    })
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub outcome: TrainOutcome,
    pub test: WindowBatch,
    pub scored: Scored,
    pub auroc: f64,
}

/// Train on the training split, score the test split, report window AUROC.
pub fn run_experiment(series: &RawSeries, cfg: &TrainConfig) -> Result<Experiment> {
    let data = prepare(series, cfg)?;
    let outcome = train(cfg, &data.train, data.val.as_ref())?;
    let scored = score(&outcome.checkpoint, &data.test)?;
    let roc = auroc(&scored.scores, &data.test.labels)?;
    Ok(Experiment { outcome, test: data.test, scored, auroc: roc.auroc })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub moe: bool,
    pub mar: bool,
    pub aurocs: Vec<f64>,
    pub auroc_mean: f64,
    pub auroc_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub experts: usize,
    pub auroc: f64,
}

fn seeded(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

/// The MoE × MAR grid, each cell trained once per seed on the same data.
/// Rows come out as (off, off), (on, off), (off, on), (on, on).
pub fn ablate(series: &RawSeries, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let cells = [(false, false), (true, false), (false, true), (true, true)];
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let mut cfg = seeded(base, seed);
            (cfg.model.moe, cfg.model.mar) = cells[c];
            run_experiment(series, &cfg).map(|e| e.auroc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(moe, mar))| {
            let aurocs = results[c * seeds.len()..(c + 1) * seeds.len()].to_vec();
            let (auroc_mean, auroc_std) = mean_std(&aurocs);
            AblationRow { moe, mar, aurocs, auroc_mean, auroc_std }
        })
        .collect())
}

/// Full model with each expert count in `counts`.
pub fn expert_sweep(series: &RawSeries, base: &TrainConfig, counts: &[usize]) -> Result<Vec<SweepRow>> {
    counts
        .par_iter()
        .map(|&experts| {
            let mut cfg = base.clone();
            cfg.model.layers = experts;
            run_experiment(series, &cfg).map(|e| SweepRow { experts, auroc: e.auroc })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("moe,mar,auroc_mean,auroc_std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.moe, r.mar, r.auroc_mean, r.auroc_std));
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("experts,auroc\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.experts, r.auroc));
    }
    out
}

/// Every parameter's gradient on one batch, for dead-subgraph checks.
pub fn batch_gradients(
    cfg: &ModelConfig,
    params: &ParamStore,
    windows: &[crate::tensor::Tensor],
    memory: &MemoryState,
) -> Result<std::collections::BTreeMap<String, Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let net = Network::bind(&tape, &bound, cfg)?;
    let pass = net.forward(&mut tape, windows, memory)?;
    let grads = tape.backward(pass.loss)?;
    Ok(bound.collect(&tape, &grads))
}
