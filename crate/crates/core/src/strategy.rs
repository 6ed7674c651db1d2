//! Server-side policy: which instructions selected clients receive and how
//! their results merge into the next global model.
//!
//! Two implementations: plain federated averaging, and a deadline variant
//! that assigns each processor class a cutoff `cutoff_seconds` and accepts
//! whatever partial updates come back by then. Both weight client
//! parameters by the number of examples actually processed, so a client
//! interrupted halfway simply counts half as much.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::ConfigMap;
use crate::protocol::{EvaluateIns, FitIns};
use crate::seed::derive_seed;
use crate::tensor::{Parameters, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("no results to aggregate")]
    EmptyResults,
    #[error("total example weight is zero")]
    ZeroTotalWeight,
    #[error("result parameters are not shape-compatible: {0}")]
    ShapeMismatch(String),
    #[error("{got} successful results, strategy requires {need}")]
    InsufficientResults { got: usize, need: usize },
    #[error("no cutoff configured for processor class or client {0:?}")]
    UnknownProcessorClass(String),
    #[error("aggregation produced a non-finite value")]
    NonFinite,
}

/// One client's accepted training result, as the aggregation step sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub client_id: String,
    pub parameters: Parameters,
    pub num_examples: u64,
    pub metrics: ConfigMap,
}

/// Pluggable per-round policy. Implementations are pure functions of their
/// arguments plus construction-time configuration — no interior state — so
/// a federation replays exactly from its seeds.
pub trait Strategy: Send + Sync {
    /// Instructions for the selected clients, one `(client_id, FitIns)` per id.
    fn configure_fit(
        &self,
        round: u64,
        global: &Parameters,
        client_ids: &[String],
    ) -> Result<Vec<(String, FitIns)>, StrategyError>;

    /// Merge successful results into the next global parameters.
    fn aggregate_fit(
        &self,
        round: u64,
        results: &[FitOutcome],
        failures: &[String],
    ) -> Result<Parameters, StrategyError>;

    /// Evaluation instructions, one per id.
    fn configure_evaluate(
        &self,
        round: u64,
        global: &Parameters,
        client_ids: &[String],
    ) -> Vec<(String, EvaluateIns)>;

    /// Example-weighted mean loss.
    fn aggregate_evaluate(&self, results: &[(f64, u64)]) -> Result<f64, StrategyError> {
        weighted_mean(results)
    }

    /// Fewest successful fit results a round may proceed with; `None`
    /// means every selected client must succeed.
    fn min_successful_clients(&self) -> Option<usize> {
        None
    }
}

/// Element-wise `Σ wᵢ·pᵢ / Σ wᵢ` in f64, accumulated over items in the
/// order given. Callers wanting order-independence sort first.
pub fn weighted_average(items: &[(Parameters, u64)]) -> Result<Parameters, StrategyError> {
    let (first, rest) = items.split_first().ok_or(StrategyError::EmptyResults)?;
    for (i, (p, _)) in rest.iter().enumerate() {
        if !p.shape_compatible(&first.0) {
            return Err(StrategyError::ShapeMismatch(format!(
                "item {} differs from item 0",
                i + 1
            )));
        }
    }
    let total: u128 = items.iter().map(|(_, w)| u128::from(*w)).sum();
    if total == 0 {
        return Err(StrategyError::ZeroTotalWeight);
    }
    let total = total as f64;

    let mut tensors = Vec::with_capacity(first.0.tensors.len());
    for t in 0..first.0.tensors.len() {
        let mut acc = vec![0.0; first.0.tensors[t].data().len()];
        for (p, w) in items {
            let w = *w as f64;
            for (a, v) in acc.iter_mut().zip(p.tensors[t].data()) {
                *a += w * v;
            }
        }
        for a in &mut acc {
            *a /= total;
        }
        tensors.push(
            Tensor::new(first.0.tensors[t].shape().to_vec(), acc)
                .map_err(|_| StrategyError::NonFinite)?,
        );
    }
    Ok(Parameters { tensors })
}

/// Example-weighted mean of `(value, weight)` pairs.
pub fn weighted_mean(pairs: &[(f64, u64)]) -> Result<f64, StrategyError> {
    if pairs.is_empty() {
        return Err(StrategyError::EmptyResults);
    }
    let total: u128 = pairs.iter().map(|(_, w)| u128::from(*w)).sum();
    if total == 0 {
        return Err(StrategyError::ZeroTotalWeight);
    }
    let sum: f64 = pairs.iter().map(|(v, w)| v * *w as f64).sum();
    Ok(sum / total as f64)
}

/// Federated averaging with fixed hyper-parameters. Each client's fit
/// instruction carries a seed derived from `(seed_base, round, client_id)`,
/// so shuffle order replays per client per round.
#[derive(Debug, Clone)]
pub struct FedAvg {
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub seed_base: u64,
    pub min_successful: Option<usize>,
}

impl FedAvg {
    fn base_fit_config(&self, round: u64, client_id: &str) -> ConfigMap {
        let mut cfg = ConfigMap::new();
        cfg.insert_int("local_epochs", i64::from(self.local_epochs));
        cfg.insert_float("learning_rate", self.learning_rate);
        cfg.insert_int("batch_size", i64::from(self.batch_size));
        cfg.insert_int("seed", derive_seed(self.seed_base, round, client_id) as i64);
        cfg
    }
}

impl Strategy for FedAvg {
    fn configure_fit(
        &self,
        round: u64,
        global: &Parameters,
        client_ids: &[String],
    ) -> Result<Vec<(String, FitIns)>, StrategyError> {
        Ok(client_ids
            .iter()
            .map(|id| {
                let ins = FitIns {
                    parameters: global.clone(),
                    config: self.base_fit_config(round, id),
                };
                (id.clone(), ins)
            })
            .collect())
    }

    fn aggregate_fit(
        &self,
        _round: u64,
        results: &[FitOutcome],
        _failures: &[String],
    ) -> Result<Parameters, StrategyError> {
        if results.is_empty() {
            return Err(StrategyError::EmptyResults);
        }
        if let Some(need) = self.min_successful {
            if results.len() < need {
                return Err(StrategyError::InsufficientResults {
                    got: results.len(),
                    need,
                });
            }
        }
        // Fix the accumulation order so caller-side concurrency or
        // permutation can never change the float result.
        let mut ordered: Vec<&FitOutcome> = results.iter().collect();
        ordered.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        let items: Vec<(Parameters, u64)> = ordered
            .iter()
            .map(|o| (o.parameters.clone(), o.num_examples))
            .collect();
        weighted_average(&items)
    }

    fn configure_evaluate(
        &self,
        round: u64,
        global: &Parameters,
        client_ids: &[String],
    ) -> Vec<(String, EvaluateIns)> {
        client_ids
            .iter()
            .map(|id| {
                let mut config = ConfigMap::new();
                config.insert_int("round", round as i64);
                let ins = EvaluateIns {
                    parameters: global.clone(),
                    config,
                };
                (id.clone(), ins)
            })
            .collect()
    }

    fn min_successful_clients(&self) -> Option<usize> {
        self.min_successful
    }
}

/// Federated averaging plus a per-processor-class deadline: clients of a
/// class with cutoff `τ > 0` receive `cutoff_seconds = τ` and return
/// whatever they finished by then; `τ = 0` means that class runs uncut.
#[derive(Debug, Clone)]
pub struct DeadlineFedAvg {
    inner: FedAvg,
    tau_seconds_by_class: BTreeMap<String, f64>,
    class_by_client: BTreeMap<String, String>,
}

impl DeadlineFedAvg {
    pub fn new(
        inner: FedAvg,
        tau_seconds_by_class: BTreeMap<String, f64>,
        class_by_client: BTreeMap<String, String>,
    ) -> Result<Self, StrategyError> {
        for (class, tau) in &tau_seconds_by_class {
            if !(tau.is_finite() && *tau >= 0.0) {
                return Err(StrategyError::UnknownProcessorClass(format!(
                    "{class} (cutoff {tau} must be a finite value ≥ 0)"
                )));
            }
        }
        for (client, class) in &class_by_client {
            if !tau_seconds_by_class.contains_key(class) {
                return Err(StrategyError::UnknownProcessorClass(format!(
                    "{class} (client {client})"
                )));
            }
        }
        Ok(Self {
            inner,
            tau_seconds_by_class,
            class_by_client,
        })
    }

    fn cutoff_for(&self, client_id: &str) -> Result<f64, StrategyError> {
        let class = self
            .class_by_client
            .get(client_id)
            .ok_or_else(|| StrategyError::UnknownProcessorClass(client_id.to_owned()))?;
        self.tau_seconds_by_class
            .get(class)
            .copied()
            .ok_or_else(|| StrategyError::UnknownProcessorClass(class.clone()))
    }
}

impl Strategy for DeadlineFedAvg {
    fn configure_fit(
        &self,
        round: u64,
        global: &Parameters,
        client_ids: &[String],
    ) -> Result<Vec<(String, FitIns)>, StrategyError> {
        let mut pairs = self.inner.configure_fit(round, global, client_ids)?;
        for (id, ins) in &mut pairs {
            let tau = self.cutoff_for(id)?;
            if tau > 0.0 {
                ins.config.insert_float("cutoff_seconds", tau);
            }
        }
        Ok(pairs)
    }

    fn aggregate_fit(
        &self,
        round: u64,
        results: &[FitOutcome],
        failures: &[String],
    ) -> Result<Parameters, StrategyError> {
        // Partial results already carry their reduced num_examples, so the
        // plain example-weighted mean is exactly the deadline-aware one.
        self.inner.aggregate_fit(round, results, failures)
    }

    fn configure_evaluate(
        &self,
        round: u64,
        global: &Parameters,
        client_ids: &[String],
    ) -> Vec<(String, EvaluateIns)> {
        self.inner.configure_evaluate(round, global, client_ids)
    }

    fn min_successful_clients(&self) -> Option<usize> {
        self.inner.min_successful_clients()
    }
}
