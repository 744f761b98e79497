//! Deterministic labelled multivariate series: coupled sinusoids plus
//! Gaussian noise, with injected spikes, level shifts and correlation breaks.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RawSeries;
use crate::seed::splitmix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    /// Cycles per observation.
    pub freq: f64,
    pub amp: f64,
    pub phase: f64,
}

impl Sinusoid {
    fn at(&self, t: usize) -> f64 {
        self.amp * (TAU * self.freq * t as f64 + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// Alternating ±magnitude impulses.
    Spike,
    /// Constant +magnitude offset.
    LevelShift,
    /// The entity drops its coupling and follows its own phase-flipped
    /// sinusoid scaled by magnitude.
    CorrelationBreak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub start: usize,
    pub length: usize,
    pub magnitude: f64,
    pub entities: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub entities: usize,
    pub length: usize,
    pub seed: u64,
    pub base: Vec<Sinusoid>,
    pub coupling: Vec<Vec<f64>>,
    pub noise_std: f64,
    #[serde(default)]
    pub anomalies: Vec<AnomalySpec>,
}

impl Default for GenConfig {
    /// Five coupled entities over 4000 steps, noise 0.1, eight spikes and two
    /// level shifts covering 4% of the time axis.
    fn default() -> Self {
        let entities = 5;
        let periods = [40.0, 55.0, 70.0, 90.0, 120.0];
        let base = periods
            .iter()
            .enumerate()
            .map(|(k, p)| Sinusoid { freq: 1.0 / p, amp: 1.0, phase: 0.7 * k as f64 })
            .collect();
        let coupling = (0..entities)
            .map(|i| {
                (0..entities)
                    .map(|j| match (j + entities - i) % entities {
                        0 => 1.0,
                        1 => 0.5,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        let spike_at = [250, 700, 1150, 1600, 2100, 2650, 3150, 3650];
        let mut anomalies: Vec<AnomalySpec> = spike_at
            .iter()
            .enumerate()
            .map(|(i, &start)| AnomalySpec {
                kind: AnomalyKind::Spike,
                start,
                length: 10,
                magnitude: 1.0,
                entities: vec![i % entities, (i + 2) % entities],
            })
            .collect();
        for (i, start) in [1880usize, 3330].into_iter().enumerate() {
            anomalies.push(AnomalySpec {
                kind: AnomalyKind::LevelShift,
                start,
                length: 40,
                magnitude: 1.5,
                entities: vec![1 + 2 * i],
            });
        }
        GenConfig {
            entities,
            length: 4000,
            seed: 0,
            base,
            coupling,
            noise_std: 0.1,
            anomalies,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.entities;
        if k == 0 || self.length == 0 {
            return Err(Error::Config("entities and length must be positive".into()));
        }
        if self.base.len() != k {
            return Err(Error::Config(format!("{} sinusoids for {k} entities", self.base.len())));
        }
        if self.coupling.len() != k || self.coupling.iter().any(|r| r.len() != k) {
            return Err(Error::Config(format!("coupling must be {k}x{k}")));
        }
        if self.coupling.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("coupling entries must be finite".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        let mut kinds: Vec<Option<AnomalyKind>> = vec![None; k * self.length];
        for a in &self.anomalies {
            if a.length == 0 || !a.magnitude.is_finite() {
                return Err(Error::Config("anomaly length must be >= 1 and magnitude finite".into()));
            }
            if a.start + a.length > self.length {
                return Err(Error::Config(format!(
                    "anomaly {}..{} exceeds length {}",
                    a.start,
                    a.start + a.length,
                    self.length
                )));
            }
            if a.entities.is_empty() || a.entities.iter().any(|&e| e >= k) {
                return Err(Error::Config(format!("anomaly entities {:?} outside 0..{k}", a.entities)));
            }
            for &e in &a.entities {
                for t in a.start..a.start + a.length {
                    match kinds[e * self.length + t] {
                        Some(prev) if prev != a.kind => {
                            return Err(Error::Config(format!(
                                "conflicting anomalies {prev:?} and {:?} on entity {e} at index {t}",
                                a.kind
                            )));
                        }
                        _ => kinds[e * self.length + t] = Some(a.kind),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Standard normal draw for cell `(entity, index)`, independent of generation order.
fn cell_noise(seed: u64, entity: usize, index: usize) -> f64 {
    let key = splitmix64(splitmix64(seed) ^ splitmix64(((entity as u64) << 40) ^ index as u64));
    ChaCha8Rng::seed_from_u64(key).sample(StandardNormal)
}

pub fn generate(cfg: &GenConfig) -> Result<RawSeries> {
    cfg.validate()?;
    let (k, len) = (cfg.entities, cfg.length);
    let mut values = vec![vec![0.0; len]; k];
    for (e, row) in values.iter_mut().enumerate() {
        for (t, v) in row.iter_mut().enumerate() {
            let clean: f64 = cfg.coupling[e]
                .iter()
                .zip(&cfg.base)
                .map(|(w, s)| w * s.at(t))
                .sum();
            *v = clean + cfg.noise_std * cell_noise(cfg.seed, e, t);
        }
    }
    let mut labels = vec![0u8; len];
    for a in &cfg.anomalies {
        for &e in &a.entities {
            for t in a.start..a.start + a.length {
                let row = &mut values[e];
                match a.kind {
                    AnomalyKind::Spike => {
                        let sign = if (t - a.start) % 2 == 0 { 1.0 } else { -1.0 };
                        row[t] += sign * a.magnitude;
                    }
                    AnomalyKind::LevelShift => row[t] += a.magnitude,
                    AnomalyKind::CorrelationBreak => {
                        row[t] = -a.magnitude * cfg.base[e].at(t) + cfg.noise_std * cell_noise(cfg.seed, e, t);
                    }
                }
            }
        }
        labels[a.start..a.start + a.length].iter_mut().for_each(|l| *l = 1);
    }
    let names = (0..k).map(|e| format!("sensor_{e}")).collect();
    RawSeries::new(names, values, Some(labels))
}
