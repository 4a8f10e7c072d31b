//! Server-side aggregation rules.
//!
//! * FedAvg: `w' = Σ_k (N_k/N) w_k`.
//! * FedHAW: `w' = e^γ Σ_k σ_k(λ) w_k`, with `γ` and `λ` moved once per round
//!   by hypergradient steps built only from models the server already holds.
//! * FedLAW: the same parameterization, but `(γ, λ)` fitted every round by
//!   gradient descent on a proxy dataset.
//!
//! Clients whose uplink failed enter every rule through their substitute,
//! the current global model (see [`substitute_failed`]).
//!
//! Weighted sums over clients go through [`weighted_sum`], which visits the
//! terms in a canonical order so that relabelling the clients cannot change
//! a single bit of the aggregate.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::comms::RoundAvailability;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{self, dot, lincomb, softmax, ParamVec};
use crate::model::MlpArch;

/// What one aggregation step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutput {
    pub w_next: ParamVec,
    /// Multipliers actually applied to each client model, `e^γ σ_k(λ)`.
    pub effective_weights: Vec<f64>,
    pub gamma_after: f64,
    pub lambda_after: Vec<f64>,
    /// Filled in by callers that own a clock; zero otherwise.
    pub agg_wall_time_ns: u64,
}

/// Replaces the model of every client in `N(t)` with `w_global`.
pub fn substitute_failed(
    client_models: Vec<Option<ParamVec>>,
    w_global: &ParamVec,
    avail: &RoundAvailability,
) -> Result<Vec<ParamVec>> {
    if client_models.len() != avail.num_clients() {
        return Err(Error::Consistency(format!(
            "{} client models for an availability over {} clients",
            client_models.len(),
            avail.num_clients()
        )));
    }
    client_models
        .into_iter()
        .enumerate()
        .map(|(k, model)| {
            if avail.is_failed(k) {
                Ok(w_global.clone())
            } else {
                model.ok_or_else(|| {
                    Error::Consistency(format!("client {k} was received but sent no model"))
                })
            }
        })
        .collect()
}

fn cmp_values(a: &ParamVec, b: &ParamVec) -> Ordering {
    for (x, y) in a.values().iter().zip(b.values()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// `Σ_k weights[k] · models[k]` with terms ordered by (weight, model values)
/// before accumulation.
pub fn weighted_sum(weights: &[f64], models: &[ParamVec]) -> Result<ParamVec> {
    if weights.len() != models.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| {
        weights[a]
            .total_cmp(&weights[b])
            .then_with(|| cmp_values(&models[a], &models[b]))
    });
    let coeffs: Vec<f64> = order.iter().map(|&k| weights[k]).collect();
    let refs: Vec<&ParamVec> = order.iter().map(|&k| &models[k]).collect();
    lincomb(&coeffs, &refs)
}

/// Data-size-weighted average `Σ_k (N_k/N) w_k`.
pub fn fedavg_aggregate(models: &[ParamVec], shard_sizes: &[usize]) -> Result<ParamVec> {
    let weights = fedavg_weights(shard_sizes)?;
    weighted_sum(&weights, models)
}

pub fn fedavg_weights(shard_sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = shard_sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("total number of samples is zero"));
    }
    Ok(shard_sizes
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect())
}

/// `d = w_global − Σ_j σ_j(λ) w_j`.
pub fn haw_direction(w_global: &ParamVec, models: &[ParamVec], lambda: &[f64]) -> Result<ParamVec> {
    let mut d = weighted_sum(&softmax(lambda)?, models)?;
    d.sub_from(w_global)?;
    Ok(d)
}

/// `e^γ Σ_k σ_k(λ) w_k`.
pub fn haw_aggregate(models: &[ParamVec], gamma: f64, lambda: &[f64]) -> Result<ParamVec> {
    let mut out = weighted_sum(&softmax(lambda)?, models)?;
    out.scale(math::exp(gamma));
    out.check_finite("aggregated model")?;
    Ok(out)
}

fn effective_weights(gamma: f64, lambda: &[f64]) -> Result<Vec<f64>> {
    let scale = math::exp(gamma);
    Ok(softmax(lambda)?.into_iter().map(|s| scale * s).collect())
}

/// How the relative-weight logits start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaInit {
    /// `λ_k = N_k / N` used directly as logits.
    #[default]
    ShardFraction,
    /// `λ_k = ln(N_k / N)`, so the initial softmax weights equal `N_k / N`.
    LogShardFraction,
    /// All logits zero.
    Uniform,
}

impl LambdaInit {
    pub fn logits(self, shard_sizes: &[usize]) -> Result<Vec<f64>> {
        match self {
            LambdaInit::Uniform => Ok(alloc::vec![0.0; shard_sizes.len()]),
            LambdaInit::ShardFraction => fedavg_weights(shard_sizes),
            LambdaInit::LogShardFraction => {
                if shard_sizes.contains(&0) {
                    return Err(Error::invalid("log initialization needs non-empty shards"));
                }
                Ok(fedavg_weights(shard_sizes)?
                    .into_iter()
                    .map(math::ln)
                    .collect())
            }
        }
    }
}

/// Coefficients and memory of the FedHAW server.
#[derive(Debug, Clone)]
pub struct HawState {
    pub gamma: f64,
    pub lambda: Vec<f64>,
    pub eta_gamma: f64,
    pub eta_lambda: f64,
    /// Client learning rate η dividing both hypergradients.
    pub eta: f64,
    prev_client_models: Option<Vec<ParamVec>>,
}

impl HawState {
    pub fn new(
        gamma: f64,
        lambda: Vec<f64>,
        eta_gamma: f64,
        eta_lambda: f64,
        eta: f64,
    ) -> Result<Self> {
        if !gamma.is_finite() || lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("gamma and lambda must be finite"));
        }
        if lambda.is_empty() {
            return Err(Error::invalid("lambda needs one logit per client"));
        }
        for (name, v) in [("eta_gamma", eta_gamma), ("eta_lambda", eta_lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(HawState {
            gamma,
            lambda,
            eta_gamma,
            eta_lambda,
            eta,
            prev_client_models: None,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.lambda.len()
    }

    /// Effective models of the previous round, `w_k^(t−1)`.
    pub fn prev_client_models(&self) -> Option<&[ParamVec]> {
        self.prev_client_models.as_deref()
    }

    pub fn set_prev_client_models(&mut self, models: Option<Vec<ParamVec>>) {
        self.prev_client_models = models;
    }

    pub fn effective_weights(&self) -> Result<Vec<f64>> {
        effective_weights(self.gamma, &self.lambda)
    }

    fn check_eta(&self) -> Result<()> {
        if self.eta == 0.0 || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "client learning rate eta = {} cannot divide the hypergradient",
                self.eta
            )));
        }
        Ok(())
    }

    /// `γ − η_γ (e^γ / η) dᵀ w_global`, with the current-round `γ`.
    pub fn update_gamma(&self, d: &ParamVec, w_global: &ParamVec) -> Result<f64> {
        self.check_eta()?;
        let hypergrad = math::exp(self.gamma) / self.eta * dot(d, w_global)?;
        Ok(self.gamma - self.eta_gamma * hypergrad)
    }

    /// `λ_k − η_λ (e^{2γ} / η) σ_k (1 − σ_k) dᵀ w_k^(t−1)` for every `k` at
    /// once, with `σ` taken at the current `λ`.
    pub fn update_lambda(&self, d: &ParamVec) -> Result<Vec<f64>> {
        self.check_eta()?;
        let prev = self.prev_client_models.as_ref().ok_or_else(|| {
            Error::State("no client models retained from the previous round".into())
        })?;
        if prev.len() != self.lambda.len() {
            return Err(Error::State(format!(
                "{} retained models for {} clients",
                prev.len(),
                self.lambda.len()
            )));
        }
        let sigma = softmax(&self.lambda)?;
        let scale = math::exp(2.0 * self.gamma) / self.eta;
        self.lambda
            .iter()
            .zip(&sigma)
            .zip(prev)
            .map(|((&l, &s), w_prev)| {
                let hypergrad = scale * s * (1.0 - s) * dot(d, w_prev)?;
                Ok(l - self.eta_lambda * hypergrad)
            })
            .collect()
    }

    /// One FedHAW aggregation: for `t > 0` first move `γ` then `λ` along
    /// their hypergradients, then aggregate with the new coefficients and
    /// keep `effective_models` for the next round.
    pub fn step(
        &mut self,
        t: usize,
        w_global: &ParamVec,
        effective_models: Vec<ParamVec>,
    ) -> Result<AggregationOutput> {
        self.step_releasing(t, w_global, effective_models)
            .map(|(out, _)| out)
    }

    /// [`step`](Self::step), handing back the models retained from the
    /// previous round instead of dropping them, so a caller can free them
    /// outside a timed region.
    pub fn step_releasing(
        &mut self,
        t: usize,
        w_global: &ParamVec,
        effective_models: Vec<ParamVec>,
    ) -> Result<(AggregationOutput, Option<Vec<ParamVec>>)> {
        if effective_models.len() != self.num_clients() {
            return Err(Error::Consistency(format!(
                "{} models for {} clients",
                effective_models.len(),
                self.num_clients()
            )));
        }
        let (gamma_next, lambda_next) = if t > 0 {
            if self.prev_client_models.is_none() {
                return Err(Error::State(format!(
                    "round {t} needs the previous round's client models"
                )));
            }
            let d = haw_direction(w_global, &effective_models, &self.lambda)?;
            (self.update_gamma(&d, w_global)?, self.update_lambda(&d)?)
        } else {
            (self.gamma, self.lambda.clone())
        };
        if !gamma_next.is_finite() || lambda_next.iter().any(|l| !l.is_finite()) {
            return Err(Error::overflow("hypergradient coefficient update"));
        }
        let w_next = haw_aggregate(&effective_models, gamma_next, &lambda_next)?;
        self.gamma = gamma_next;
        self.lambda = lambda_next;
        let released = self.prev_client_models.replace(effective_models);
        let out = AggregationOutput {
            w_next,
            effective_weights: self.effective_weights()?,
            gamma_after: self.gamma,
            lambda_after: self.lambda.clone(),
            agg_wall_time_ns: 0,
        };
        Ok((out, released))
    }
}

/// Log-scale `γ` and logits `λ` fitted on the proxy set.
#[derive(Debug, Clone, PartialEq)]
pub struct FedLawSolution {
    pub log_gamma: f64,
    pub lambda: Vec<f64>,
}

impl FedLawSolution {
    pub fn aggregate(&self, models: &[ParamVec]) -> Result<ParamVec> {
        haw_aggregate(models, self.log_gamma, &self.lambda)
    }

    pub fn into_output(self, models: &[ParamVec]) -> Result<AggregationOutput> {
        Ok(AggregationOutput {
            w_next: self.aggregate(models)?,
            effective_weights: effective_weights(self.log_gamma, &self.lambda)?,
            gamma_after: self.log_gamma,
            lambda_after: self.lambda,
            agg_wall_time_ns: 0,
        })
    }
}

/// Proxy loss of `e^g Σ σ_k(λ) w_k` and its gradient with respect to `g`
/// and every `λ_j` (full softmax Jacobian).
pub fn fedlaw_loss_and_grad(
    models: &[ParamVec],
    log_gamma: f64,
    lambda: &[f64],
    proxy: &Dataset,
    arch: &MlpArch,
) -> Result<(f64, f64, Vec<f64>)> {
    let sigma = softmax(lambda)?;
    let scale = math::exp(log_gamma);
    let mut w = weighted_sum(&sigma, models)?;
    w.scale(scale);
    w.check_finite("FedLAW aggregate")?;
    let (loss, grad_w) = arch.loss_and_grad(&w, &proxy.as_batch()?)?;
    let proj = models
        .iter()
        .map(|m| dot(&grad_w, m))
        .collect::<Result<Vec<f64>>>()?;
    let mean_proj: f64 = sigma.iter().zip(&proj).map(|(s, p)| s * p).sum();
    let d_log_gamma = scale * mean_proj;
    let d_lambda = sigma
        .iter()
        .zip(&proj)
        .map(|(s, p)| scale * s * (p - mean_proj))
        .collect();
    Ok((loss, d_log_gamma, d_lambda))
}

/// Full-batch gradient descent on the proxy loss over `(g, λ)`, starting
/// from `g = 0`, `λ_k = N_k / N`.
pub fn fedlaw_optimize(
    models: &[ParamVec],
    shard_sizes: &[usize],
    proxy: &Dataset,
    arch: &MlpArch,
    epochs: usize,
    lr: f64,
) -> Result<FedLawSolution> {
    if proxy.is_empty() {
        return Err(Error::invalid("FedLAW needs a non-empty proxy dataset"));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "proxy_lr must be positive, got {lr}"
        )));
    }
    if models.len() != shard_sizes.len() {
        return Err(Error::invalid(
            "one shard size per client model is required",
        ));
    }
    let mut log_gamma = 0.0;
    let mut lambda = fedavg_weights(shard_sizes)?;
    for _ in 0..epochs {
        let (_, dg, dl) = fedlaw_loss_and_grad(models, log_gamma, &lambda, proxy, arch)?;
        log_gamma -= lr * dg;
        for (l, g) in lambda.iter_mut().zip(&dl) {
            *l -= lr * g;
        }
        if !log_gamma.is_finite() || lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::overflow("FedLAW coefficient update"));
        }
    }
    Ok(FedLawSolution { log_gamma, lambda })
}
