//! Server-side aggregation strategies.
//!
//! Every strategy consumes updates in ascending `client_id` order, so the
//! floating-point summation order never depends on arrival order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientUpdate;
use crate::model::ParameterVector;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no client updates to aggregate")]
    Empty,
    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("update of client {0} reports zero samples")]
    ZeroSamples(u32),
    #[error("duplicate update from client {0}")]
    Duplicate(u32),
    #[error("krum needs at least f + 3 = {needed} updates, got {got}")]
    Cardinality { needed: usize, got: usize },
    #[error("invalid strategy hyperparameter: {0}")]
    Hyper(String),
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>, AggregationError> {
    let first = updates.first().ok_or(AggregationError::Empty)?;
    let len = first.params.len();
    let mut out: Vec<&ClientUpdate> = updates.iter().collect();
    out.sort_by_key(|u| u.client_id);
    for pair in out.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(AggregationError::Duplicate(pair[0].client_id));
        }
    }
    for u in &out {
        if u.params.len() != len {
            return Err(AggregationError::Length {
                expected: len,
                actual: u.params.len(),
            });
        }
        if u.num_samples == 0 {
            return Err(AggregationError::ZeroSamples(u.client_id));
        }
    }
    Ok(out)
}

fn check_len(expected: usize, actual: usize) -> Result<(), AggregationError> {
    if expected == actual {
        Ok(())
    } else {
        Err(AggregationError::Length { expected, actual })
    }
}

/// Sample-weighted mean `Σ n_k w_k / Σ n_k`.
///
/// Evaluated as `w_ref + Σ (n_k / N) (w_k − w_ref)` with `w_ref` the update of
/// the lowest client id, which keeps single-client and identical-update
/// averages exact.
pub fn weighted_average(updates: &[ClientUpdate]) -> Result<ParameterVector, AggregationError> {
    let ups = sorted(updates)?;
    let total: f64 = ups.iter().map(|u| u.num_samples as f64).sum();
    let reference = ups[0].params.as_slice();
    let mut acc = vec![0.0; reference.len()];
    for u in &ups[1..] {
        let weight = u.num_samples as f64 / total;
        for ((a, &w), &r) in acc.iter_mut().zip(u.params.as_slice()).zip(reference) {
            *a += weight * (w - r);
        }
    }
    for (a, &r) in acc.iter_mut().zip(reference) {
        *a += r;
    }
    Ok(ParameterVector::from_vec(acc))
}

/// `Δ = weighted_average(updates) − w_t`.
pub fn pseudo_gradient(
    global: &ParameterVector,
    updates: &[ClientUpdate],
) -> Result<Vec<f64>, AggregationError> {
    let avg = weighted_average(updates)?;
    check_len(global.len(), avg.len())?;
    Ok(avg
        .as_slice()
        .iter()
        .zip(global.as_slice())
        .map(|(a, w)| a - w)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgMState {
    pub velocity: Vec<f64>,
    pub beta: f64,
    pub server_lr: f64,
}

impl FedAvgMState {
    pub fn new(len: usize, beta: f64, server_lr: f64) -> Self {
        Self {
            velocity: vec![0.0; len],
            beta,
            server_lr,
        }
    }
}

/// Server momentum: `v ← βv + (w_t − w̄)`, `w_{t+1} = w_t − lr·v`.
pub fn fedavgm_step(
    global: &ParameterVector,
    updates: &[ClientUpdate],
    state: &mut FedAvgMState,
) -> Result<ParameterVector, AggregationError> {
    let delta = pseudo_gradient(global, updates)?;
    check_len(global.len(), state.velocity.len())?;
    let next = global
        .as_slice()
        .iter()
        .zip(&delta)
        .zip(state.velocity.iter_mut())
        .map(|((&w, &d), v)| {
            *v = state.beta * *v - d;
            w - state.server_lr * *v
        })
        .collect();
    Ok(ParameterVector::from_vec(next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedOptVariant {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedOptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub eta: f64,
    pub variant: FedOptVariant,
}

impl FedOptState {
    pub fn new(len: usize, variant: FedOptVariant, eta: f64, tau: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: 0.9,
            beta2: 0.99,
            tau,
            eta,
            variant,
        }
    }
}

/// Server optimizer on the pseudo-gradient. `sgd`: `w + η Δ`. `adam` (no bias
/// correction): `m ← β1 m + (1−β1) Δ`, `v ← β2 v + (1−β2) Δ²`,
/// `w + η m / (√v + τ)`.
pub fn fedopt_step(
    global: &ParameterVector,
    updates: &[ClientUpdate],
    state: &mut FedOptState,
) -> Result<ParameterVector, AggregationError> {
    let delta = pseudo_gradient(global, updates)?;
    let w = global.as_slice();
    let next = match state.variant {
        FedOptVariant::Sgd => w
            .iter()
            .zip(&delta)
            .map(|(w, d)| w + state.eta * d)
            .collect(),
        FedOptVariant::Adam => {
            check_len(w.len(), state.m.len())?;
            check_len(w.len(), state.v.len())?;
            let (b1, b2) = (state.beta1, state.beta2);
            w.iter()
                .zip(&delta)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                .map(|((&w, &d), (m, v))| {
                    *m = b1 * *m + (1.0 - b1) * d;
                    *v = b2 * *v + (1.0 - b2) * d * d;
                    w + state.eta * *m / (v.sqrt() + state.tau)
                })
                .collect()
        }
    };
    Ok(ParameterVector::from_vec(next))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: for each update (in ascending client-id order), the sum of
/// squared distances to its `n − f − 2` nearest neighbours.
pub fn krum_scores(
    updates: &[ClientUpdate],
    f: usize,
) -> Result<Vec<(u32, f64)>, AggregationError> {
    let ups = sorted(updates)?;
    let n = ups.len();
    if n < f + 3 {
        return Err(AggregationError::Cardinality {
            needed: f + 3,
            got: n,
        });
    }
    let k = n - f - 2;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(ups[i].params.as_slice(), ups[j].params.as_slice());
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist[i * n + j])
                .collect();
            row.sort_by(f64::total_cmp);
            (ups[i].client_id, row[..k].iter().sum())
        })
        .collect())
}

/// The update with the lowest Krum score; ties go to the lowest client id.
pub fn krum_select(updates: &[ClientUpdate], f: usize) -> Result<ClientUpdate, AggregationError> {
    let scores = krum_scores(updates, f)?;
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 < best.1 {
            best = s;
        }
    }
    Ok(updates
        .iter()
        .find(|u| u.client_id == best.0)
        .expect("scored id comes from the input")
        .clone())
}

/// Aggregation rule and its hyperparameters, as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum Strategy {
    FedAvg,
    FedAvgM {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_one")]
        server_lr: f64,
    },
    FedOpt {
        #[serde(default = "default_variant")]
        variant: FedOptVariant,
        #[serde(default = "default_eta")]
        eta: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    Krum {
        #[serde(default)]
        f: usize,
    },
}

fn default_beta() -> f64 {
    0.9
}
fn default_one() -> f64 {
    1.0
}
fn default_variant() -> FedOptVariant {
    FedOptVariant::Adam
}
fn default_eta() -> f64 {
    1e-2
}
fn default_tau() -> f64 {
    1e-3
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedAvgM { .. } => "fedavgm",
            Strategy::FedOpt { .. } => "fedopt",
            Strategy::Krum { .. } => "krum",
        }
    }

    /// Strategy with default hyperparameters by name.
    pub fn from_name(name: &str) -> Option<Strategy> {
        Some(match name {
            "fedavg" => Strategy::FedAvg,
            "fedavgm" => Strategy::FedAvgM {
                beta: default_beta(),
                server_lr: default_one(),
            },
            "fedopt" => Strategy::FedOpt {
                variant: default_variant(),
                eta: default_eta(),
                tau: default_tau(),
            },
            "krum" => Strategy::Krum { f: 0 },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        let bad = |msg: String| Err(AggregationError::Hyper(msg));
        match *self {
            Strategy::FedAvgM { beta, server_lr } => {
                if !(0.0..1.0).contains(&beta) {
                    return bad(format!("beta must lie in [0, 1), got {beta}"));
                }
                if !(server_lr.is_finite() && server_lr > 0.0) {
                    return bad(format!("server_lr must be positive, got {server_lr}"));
                }
            }
            Strategy::FedOpt { eta, tau, .. } => {
                if !(eta.is_finite() && eta > 0.0) {
                    return bad(format!("eta must be positive, got {eta}"));
                }
                if !(tau.is_finite() && tau > 0.0) {
                    return bad(format!("tau must be positive, got {tau}"));
                }
            }
            Strategy::FedAvg | Strategy::Krum { .. } => {}
        }
        Ok(())
    }

    /// Fresh server state for a model with `len` parameters.
    pub fn init_state(&self, len: usize) -> ServerState {
        match *self {
            Strategy::FedAvg => ServerState::FedAvg,
            Strategy::FedAvgM { beta, server_lr } => {
                ServerState::FedAvgM(FedAvgMState::new(len, beta, server_lr))
            }
            Strategy::FedOpt { variant, eta, tau } => {
                ServerState::FedOpt(FedOptState::new(len, variant, eta, tau))
            }
            Strategy::Krum { f } => ServerState::Krum { f },
        }
    }
}

/// Strategy state threaded across rounds.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerState {
    FedAvg,
    FedAvgM(FedAvgMState),
    FedOpt(FedOptState),
    Krum { f: usize },
}

impl ServerState {
    /// Next global parameters from the current ones and this round's updates.
    pub fn aggregate(
        &mut self,
        global: &ParameterVector,
        updates: &[ClientUpdate],
    ) -> Result<ParameterVector, AggregationError> {
        match self {
            ServerState::FedAvg => weighted_average(updates),
            ServerState::FedAvgM(s) => fedavgm_step(global, updates, s),
            ServerState::FedOpt(s) => fedopt_step(global, updates, s),
            ServerState::Krum { f } => Ok(krum_select(updates, *f)?.params),
        }
    }
}
