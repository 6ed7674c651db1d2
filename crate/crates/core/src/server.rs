//! Federation server: client registry, seeded sampling, and the
//! synchronous round loop.
//!
//! A round is sample → configure → concurrent fit dispatch → barrier →
//! aggregate → evaluate. The loop is deliberately policy-free: who gets
//! which instructions and how results merge belongs to the [`Strategy`];
//! the loop owns only scheduling, failure collection, and bookkeeping.
//! Results are re-ordered by client id before any aggregation, so thread
//! interleaving can never leak into the floats.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::{EvaluateIns, EvaluateRes, FitIns, FitRes, ProtocolError};
use crate::seed::derive_seed;
use crate::strategy::{weighted_mean, FitOutcome, Strategy, StrategyError};
use crate::tensor::Parameters;

/// Server-side handle to one client, TCP-backed or in-process; the round
/// loop cannot tell the difference. Each proxy serializes its own requests.
pub trait ClientProxy: Send + Sync {
    fn client_id(&self) -> &str;
    fn get_parameters(&self) -> Result<Parameters, ProxyError>;
    fn fit(&self, ins: &FitIns) -> Result<FitRes, ProxyError>;
    fn evaluate(&self, ins: &EvaluateIns) -> Result<EvaluateRes, ProxyError>;
    /// Best-effort teardown notice; the default does nothing.
    fn disconnect(&self) {}
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("transport: {0}")]
    Transport(#[from] ProtocolError),
    #[error("peer answered {got} where {expected} was expected")]
    UnexpectedReply {
        expected: &'static str,
        got: &'static str,
    },
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("client id {0:?} is already registered")]
    DuplicateClientId(String),
    #[error("{requested} clients requested but only {available} registered")]
    InsufficientClients { requested: usize, available: usize },
    #[error("round {round}: only {got} successful results, {need} required")]
    RoundFailed { round: u64, got: usize, need: usize },
    #[error("round {round}: evaluation produced no usable results")]
    EvaluationFailed { round: u64 },
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// Thread-safe client registry. Rounds operate on a snapshot, so clients
/// registering mid-round become visible only from the next round.
#[derive(Default)]
pub struct ClientManager {
    registry: Mutex<BTreeMap<String, Arc<dyn ClientProxy>>>,
}

impl ClientManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, proxy: Arc<dyn ClientProxy>) -> Result<(), ServerError> {
        let mut registry = self.registry.lock().expect("registry lock");
        let id = proxy.client_id().to_owned();
        if registry.contains_key(&id) {
            return Err(ServerError::DuplicateClientId(id));
        }
        registry.insert(id, proxy);
        Ok(())
    }

    pub fn contains(&self, client_id: &str) -> bool {
        self.registry
            .lock()
            .expect("registry lock")
            .contains_key(client_id)
    }

    pub fn len(&self) -> usize {
        self.registry.lock().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stable view of the registry at one instant, id-sorted.
    pub fn snapshot(&self) -> BTreeMap<String, Arc<dyn ClientProxy>> {
        self.registry.lock().expect("registry lock").clone()
    }
}

/// Choose `n` distinct clients by seeded uniform sampling over the
/// registered ids in ascending order; the chosen ids come back sorted.
pub fn sample_clients(
    manager: &ClientManager,
    n: usize,
    seed: u64,
) -> Result<Vec<Arc<dyn ClientProxy>>, ServerError> {
    sample_from_snapshot(&manager.snapshot(), n, seed)
}

fn sample_from_snapshot(
    snapshot: &BTreeMap<String, Arc<dyn ClientProxy>>,
    n: usize,
    seed: u64,
) -> Result<Vec<Arc<dyn ClientProxy>>, ServerError> {
    if n > snapshot.len() {
        return Err(ServerError::InsufficientClients {
            requested: n,
            available: snapshot.len(),
        });
    }
    let ids: Vec<&String> = snapshot.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&String> = rand::seq::index::sample(&mut rng, ids.len(), n)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    chosen.sort();
    Ok(chosen.into_iter().map(|id| snapshot[id].clone()).collect())
}

/// Hardware cost figures injected into each fit instruction so the client
/// can account virtual time and energy for itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerProfile {
    pub seconds_per_sample: f64,
    pub power_watts: f64,
}

pub struct FederationConfig {
    pub rounds: u64,
    pub clients_per_round: usize,
    pub initial_parameters: Parameters,
    pub sampling_seed: u64,
    /// Per-client cost profiles; a client with no entry trains without
    /// virtual-time accounting and contributes zero cost.
    pub profiles: BTreeMap<String, PowerProfile>,
}

/// Everything measured about one completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub global_loss: f64,
    pub global_accuracy: f64,
    pub round_virtual_time_s: f64,
    pub round_energy_j: f64,
    pub cum_virtual_time_s: f64,
    pub cum_energy_j: f64,
    /// Clients whose fit results entered the aggregate, ascending.
    pub participants: Vec<String>,
}

#[derive(Debug)]
pub struct FederationResult {
    pub final_parameters: Parameters,
    pub rounds: Vec<RoundRecord>,
}

/// Run one synchronous round against the current registry, returning the
/// record and the new global parameters. `cum_*` are the totals before
/// this round; the record carries them advanced past it.
pub fn run_round(
    manager: &ClientManager,
    strategy: &dyn Strategy,
    cfg: &FederationConfig,
    round: u64,
    global: &Parameters,
    cum_virtual_time_s: f64,
    cum_energy_j: f64,
) -> Result<(RoundRecord, Parameters), ServerError> {
    let snapshot = manager.snapshot();
    let selected = sample_from_snapshot(
        &snapshot,
        cfg.clients_per_round,
        derive_seed(cfg.sampling_seed, round, "sampling"),
    )?;
    let selected_ids: Vec<String> = selected.iter().map(|p| p.client_id().to_owned()).collect();
    let by_id: BTreeMap<&str, &Arc<dyn ClientProxy>> =
        selected.iter().map(|p| (p.client_id(), p)).collect();

    let mut ins_pairs = strategy.configure_fit(round, global, &selected_ids)?;
    for (id, ins) in &mut ins_pairs {
        if let Some(profile) = cfg.profiles.get(id) {
            ins.config
                .insert_float("seconds_per_sample", profile.seconds_per_sample);
            ins.config.insert_float("power_watts", profile.power_watts);
        }
    }

    // Concurrent dispatch, then a barrier: aggregation sees either a result
    // or a recorded failure for every selected client, never a gap.
    let fit_replies: Vec<(String, Result<FitRes, ProxyError>)> = std::thread::scope(|scope| {
        let workers: Vec<_> = ins_pairs
            .iter()
            .map(|(id, ins)| {
                let proxy = by_id.get(id.as_str()).map(|p| Arc::clone(p));
                scope.spawn(move || {
                    let reply = match proxy {
                        Some(p) => p.fit(ins),
                        None => Err(ProxyError::UnexpectedReply {
                            expected: "a selected client",
                            got: "an id the strategy invented",
                        }),
                    };
                    (id.clone(), reply)
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("fit dispatch worker panicked"))
            .collect()
    });

    let mut successes: Vec<FitOutcome> = Vec::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    for (id, reply) in fit_replies {
        match reply {
            Err(e) => failures.push((id, e.to_string())),
            Ok(res) => {
                if res.metrics.get_bool("failed") == Some(true) {
                    let why = res
                        .metrics
                        .get_str("error")
                        .unwrap_or("client flagged failure")
                        .to_owned();
                    failures.push((id, why));
                } else if res.num_examples == 0 {
                    failures.push((id, "no examples processed".to_owned()));
                } else if !res.parameters.shape_compatible(global) {
                    failures.push((id, "result incompatible with global model".to_owned()));
                } else {
                    successes.push(FitOutcome {
                        client_id: id,
                        parameters: res.parameters,
                        num_examples: res.num_examples,
                        metrics: res.metrics,
                    });
                }
            }
        }
    }
    successes.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    failures.sort();
    for (id, why) in &failures {
        log::warn!("round {round}: client {id} failed: {why}");
    }

    let need = strategy
        .min_successful_clients()
        .unwrap_or(selected_ids.len())
        .min(selected_ids.len());
    if successes.len() < need {
        return Err(ServerError::RoundFailed {
            round,
            got: successes.len(),
            need,
        });
    }

    let failure_ids: Vec<String> = failures.iter().map(|(id, _)| id.clone()).collect();
    let new_global = strategy.aggregate_fit(round, &successes, &failure_ids)?;

    // The straggler defines round time; energy adds up across the fleet.
    let round_virtual_time_s = successes
        .iter()
        .map(|o| o.metrics.get_float("virtual_time_s").unwrap_or(0.0))
        .fold(0.0, f64::max);
    let round_energy_j = successes
        .iter()
        .map(|o| o.metrics.get_float("energy_J").unwrap_or(0.0))
        .sum::<f64>();
    let participants: Vec<String> = successes.iter().map(|o| o.client_id.clone()).collect();

    // Federated evaluation over every registered client (the round-start
    // snapshot), so the metric covers the same held-out data regardless of
    // which subset trained this round.
    let eval_ids: Vec<String> = snapshot.keys().cloned().collect();
    let eval_pairs = strategy.configure_evaluate(round, &new_global, &eval_ids);
    let eval_replies: Vec<(String, Result<EvaluateRes, ProxyError>)> =
        std::thread::scope(|scope| {
            let workers: Vec<_> = eval_pairs
                .iter()
                .map(|(id, ins)| {
                    let proxy = snapshot.get(id).cloned();
                    scope.spawn(move || {
                        let reply = match proxy {
                            Some(p) => p.evaluate(ins),
                            None => Err(ProxyError::UnexpectedReply {
                                expected: "a registered client",
                                got: "an id the strategy invented",
                            }),
                        };
                        (id.clone(), reply)
                    })
                })
                .collect();
            workers
                .into_iter()
                .map(|w| w.join().expect("evaluate dispatch worker panicked"))
                .collect()
        });

    let mut losses: Vec<(f64, u64)> = Vec::new();
    let mut accuracies: Vec<(f64, u64)> = Vec::new();
    let mut ordered: Vec<(String, Result<EvaluateRes, ProxyError>)> = eval_replies;
    ordered.sort_by(|a, b| a.0.cmp(&b.0));
    for (id, reply) in ordered {
        match reply {
            Ok(res) if res.num_examples > 0 && res.metrics.get_bool("failed") != Some(true) => {
                match res.metrics.get_float("accuracy") {
                    Some(acc) => {
                        losses.push((res.loss, res.num_examples));
                        accuracies.push((acc, res.num_examples));
                    }
                    None => log::warn!("round {round}: client {id} evaluation lacks accuracy"),
                }
            }
            Ok(_) => log::warn!("round {round}: client {id} evaluation unusable"),
            Err(e) => log::warn!("round {round}: client {id} evaluation failed: {e}"),
        }
    }
    if losses.is_empty() {
        return Err(ServerError::EvaluationFailed { round });
    }
    let global_loss = strategy.aggregate_evaluate(&losses)?;
    let global_accuracy = weighted_mean(&accuracies)?;

    let record = RoundRecord {
        round,
        global_loss,
        global_accuracy,
        round_virtual_time_s,
        round_energy_j,
        cum_virtual_time_s: cum_virtual_time_s + round_virtual_time_s,
        cum_energy_j: cum_energy_j + round_energy_j,
        participants,
    };
    Ok((record, new_global))
}

/// Drive `cfg.rounds` rounds from the initial parameters. `on_round` fires
/// after each round with the fresh record and the new global parameters.
pub fn run_federation(
    manager: &ClientManager,
    strategy: &dyn Strategy,
    cfg: &FederationConfig,
    mut on_round: impl FnMut(&RoundRecord, &Parameters),
) -> Result<FederationResult, ServerError> {
    let mut global = cfg.initial_parameters.clone();
    let mut records: Vec<RoundRecord> = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        let (cum_t, cum_e) = records
            .last()
            .map(|r| (r.cum_virtual_time_s, r.cum_energy_j))
            .unwrap_or((0.0, 0.0));
        let (record, new_global) = run_round(manager, strategy, cfg, round, &global, cum_t, cum_e)?;
        global = new_global;
        on_round(&record, &global);
        records.push(record);
    }
    Ok(FederationResult {
        final_parameters: global,
        rounds: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigMap;
    use crate::strategy::FedAvg;
    use crate::tensor::Tensor;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn scalar_params(v: f64) -> Parameters {
        Parameters {
            tensors: vec![Tensor::scalar(v)],
        }
    }

    /// Client stub returning canned values; optionally fails fit, and
    /// counts evaluate calls so tests can observe the evaluation fan-out.
    struct StubClient {
        id: String,
        fit_value: f64,
        num_examples: u64,
        virtual_time_s: f64,
        energy_j: f64,
        fail_fit: bool,
        eval_calls: AtomicUsize,
        on_fit: Option<Box<dyn Fn() + Send + Sync>>,
    }

    impl StubClient {
        fn new(id: &str, fit_value: f64, num_examples: u64) -> Self {
            Self {
                id: id.into(),
                fit_value,
                num_examples,
                virtual_time_s: 1.0,
                energy_j: 2.0,
                fail_fit: false,
                eval_calls: AtomicUsize::new(0),
                on_fit: None,
            }
        }
    }

    impl ClientProxy for StubClient {
        fn client_id(&self) -> &str {
            &self.id
        }

        fn get_parameters(&self) -> Result<Parameters, ProxyError> {
            Ok(scalar_params(self.fit_value))
        }

        fn fit(&self, _ins: &FitIns) -> Result<FitRes, ProxyError> {
            if let Some(hook) = &self.on_fit {
                hook();
            }
            if self.fail_fit {
                return Err(ProxyError::Transport(ProtocolError::ConnectionClosed));
            }
            let mut metrics = ConfigMap::new();
            metrics.insert_float("virtual_time_s", self.virtual_time_s);
            metrics.insert_float("energy_J", self.energy_j);
            Ok(FitRes {
                parameters: scalar_params(self.fit_value),
                num_examples: self.num_examples,
                metrics,
            })
        }

        fn evaluate(&self, _ins: &EvaluateIns) -> Result<EvaluateRes, ProxyError> {
            self.eval_calls.fetch_add(1, Ordering::SeqCst);
            let mut metrics = ConfigMap::new();
            metrics.insert_float("accuracy", 0.5);
            Ok(EvaluateRes {
                loss: 1.0,
                num_examples: 10,
                metrics,
            })
        }
    }

    fn strategy() -> FedAvg {
        FedAvg {
            local_epochs: 1,
            learning_rate: 0.1,
            batch_size: 4,
            seed_base: 0,
            min_successful: None,
        }
    }

    fn federation_cfg(rounds: u64, clients_per_round: usize) -> FederationConfig {
        FederationConfig {
            rounds,
            clients_per_round,
            initial_parameters: scalar_params(0.0),
            sampling_seed: 5,
            profiles: BTreeMap::new(),
        }
    }

    #[test]
    fn register_rejects_duplicate_ids() {
        let manager = ClientManager::new();
        manager
            .register(Arc::new(StubClient::new("a", 0.0, 1)))
            .unwrap();
        manager
            .register(Arc::new(StubClient::new("b", 0.0, 1)))
            .unwrap();
        assert_eq!(manager.len(), 2);
        match manager.register(Arc::new(StubClient::new("a", 1.0, 1))) {
            Err(ServerError::DuplicateClientId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
        assert_eq!(manager.len(), 2);
    }

    #[test]
    fn sampling_is_seeded_sorted_and_bounded() {
        let manager = ClientManager::new();
        for i in 0..10 {
            manager
                .register(Arc::new(StubClient::new(&format!("c{i}"), 0.0, 1)))
                .unwrap();
        }
        let pick = |seed| -> Vec<String> {
            sample_clients(&manager, 4, seed)
                .unwrap()
                .iter()
                .map(|p| p.client_id().to_owned())
                .collect()
        };
        assert_eq!(pick(7), pick(7), "same seed, same selection");
        let ids = pick(7);
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted, "selection comes back ascending");

        let all: Vec<String> = sample_clients(&manager, 10, 1)
            .unwrap()
            .iter()
            .map(|p| p.client_id().to_owned())
            .collect();
        assert_eq!(all, (0..10).map(|i| format!("c{i}")).collect::<Vec<_>>());

        assert!(matches!(
            sample_clients(&manager, 11, 1),
            Err(ServerError::InsufficientClients {
                requested: 11,
                available: 10
            })
        ));
    }

    #[test]
    fn single_client_round_adopts_its_parameters() {
        let manager = ClientManager::new();
        manager
            .register(Arc::new(StubClient::new("solo", 2.5, 8)))
            .unwrap();
        let cfg = federation_cfg(1, 1);
        let result = run_federation(&manager, &strategy(), &cfg, |_, _| {}).unwrap();
        assert_eq!(result.final_parameters, scalar_params(2.5));
        assert_eq!(result.rounds.len(), 1);
        assert_eq!(result.rounds[0].participants, vec!["solo".to_string()]);
    }

    #[test]
    fn identical_client_parameters_aggregate_to_themselves() {
        let manager = ClientManager::new();
        for id in ["a", "b", "c"] {
            manager
                .register(Arc::new(StubClient::new(id, 1.25, 7)))
                .unwrap();
        }
        let cfg = federation_cfg(1, 3);
        let result = run_federation(&manager, &strategy(), &cfg, |_, _| {}).unwrap();
        assert_eq!(result.final_parameters, scalar_params(1.25));
    }

    #[test]
    fn round_time_is_straggler_and_energy_is_total() {
        let manager = ClientManager::new();
        let specs = [("a", 10.0, 1.0), ("b", 20.0, 2.0), ("c", 15.0, 3.0)];
        for (id, t, e) in specs {
            let mut stub = StubClient::new(id, 1.0, 5);
            stub.virtual_time_s = t;
            stub.energy_j = e;
            manager.register(Arc::new(stub)).unwrap();
        }
        let cfg = federation_cfg(2, 3);
        let result = run_federation(&manager, &strategy(), &cfg, |_, _| {}).unwrap();
        let r = &result.rounds[0];
        assert_eq!(r.round_virtual_time_s, 20.0);
        assert_eq!(r.round_energy_j, 6.0);
        assert_eq!(result.rounds[1].cum_virtual_time_s, 40.0);
        assert_eq!(result.rounds[1].cum_energy_j, 12.0);
        assert_eq!(r.global_loss, 1.0);
        assert_eq!(r.global_accuracy, 0.5);
    }

    #[test]
    fn failure_is_tolerated_when_minimum_is_met() {
        let manager = ClientManager::new();
        manager
            .register(Arc::new(StubClient::new("a", 4.0, 10)))
            .unwrap();
        manager
            .register(Arc::new(StubClient::new("b", 8.0, 10)))
            .unwrap();
        let mut dying = StubClient::new("dying", 0.0, 10);
        dying.fail_fit = true;
        manager.register(Arc::new(dying)).unwrap();

        let lenient = FedAvg {
            min_successful: Some(2),
            ..strategy()
        };
        let cfg = federation_cfg(1, 3);
        let result = run_federation(&manager, &lenient, &cfg, |_, _| {}).unwrap();
        let r = &result.rounds[0];
        assert_eq!(r.participants, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(result.final_parameters, scalar_params(6.0));
    }

    #[test]
    fn failure_below_minimum_fails_the_round() {
        let manager = ClientManager::new();
        manager
            .register(Arc::new(StubClient::new("a", 4.0, 10)))
            .unwrap();
        let mut dying = StubClient::new("b", 0.0, 10);
        dying.fail_fit = true;
        manager.register(Arc::new(dying)).unwrap();

        // Default minimum = every selected client.
        let cfg = federation_cfg(1, 2);
        match run_federation(&manager, &strategy(), &cfg, |_, _| {}) {
            Err(ServerError::RoundFailed {
                round: 1,
                got: 1,
                need: 2,
            }) => {}
            other => panic!("expected round failure, got {other:?}"),
        }
    }

    #[test]
    fn registration_mid_round_joins_from_the_next_round() {
        let manager = Arc::new(ClientManager::new());
        let late = Arc::new(StubClient::new("z-late", 3.0, 5));

        let mgr = Arc::clone(&manager);
        let late_for_hook = Arc::clone(&late);
        let mut first = StubClient::new("a", 1.0, 5);
        first.on_fit = Some(Box::new(move || {
            // Runs inside round 1's fit: too late for round 1's snapshot.
            let _ = mgr.register(late_for_hook.clone() as Arc<dyn ClientProxy>);
        }));
        manager.register(Arc::new(first)).unwrap();

        let cfg = federation_cfg(2, 1);
        let result = run_federation(&manager, &strategy(), &cfg, |_, _| {}).unwrap();

        assert_eq!(result.rounds[0].participants, vec!["a".to_string()]);
        // Round 1 evaluated only the snapshot taken before registration.
        assert_eq!(late.eval_calls.load(Ordering::SeqCst), 1);
        assert_eq!(manager.len(), 2);
    }

    #[test]
    fn zero_rounds_returns_initial_parameters() {
        let manager = ClientManager::new();
        manager
            .register(Arc::new(StubClient::new("a", 9.0, 1)))
            .unwrap();
        let cfg = federation_cfg(0, 1);
        let result = run_federation(&manager, &strategy(), &cfg, |_, _| {}).unwrap();
        assert!(result.rounds.is_empty());
        assert_eq!(result.final_parameters, scalar_params(0.0));
    }

    #[test]
    fn profiles_reach_fit_instructions() {
        // A client that echoes back whether the profile keys arrived.
        struct Probe {
            saw: Mutex<Option<(Option<f64>, Option<f64>)>>,
        }
        impl ClientProxy for Probe {
            fn client_id(&self) -> &str {
                "probe"
            }
            fn get_parameters(&self) -> Result<Parameters, ProxyError> {
                Ok(scalar_params(0.0))
            }
            fn fit(&self, ins: &FitIns) -> Result<FitRes, ProxyError> {
                *self.saw.lock().unwrap() = Some((
                    ins.config.get_float("seconds_per_sample"),
                    ins.config.get_float("power_watts"),
                ));
                let mut metrics = ConfigMap::new();
                metrics.insert_float("virtual_time_s", 0.0);
                metrics.insert_float("energy_J", 0.0);
                Ok(FitRes {
                    parameters: scalar_params(0.0),
                    num_examples: 1,
                    metrics,
                })
            }
            fn evaluate(&self, _: &EvaluateIns) -> Result<EvaluateRes, ProxyError> {
                let mut metrics = ConfigMap::new();
                metrics.insert_float("accuracy", 1.0);
                Ok(EvaluateRes {
                    loss: 0.0,
                    num_examples: 1,
                    metrics,
                })
            }
        }

        let manager = ClientManager::new();
        let probe = Arc::new(Probe {
            saw: Mutex::new(None),
        });
        manager.register(probe.clone()).unwrap();
        let mut cfg = federation_cfg(1, 1);
        cfg.profiles.insert(
            "probe".into(),
            PowerProfile {
                seconds_per_sample: 0.25,
                power_watts: 3.0,
            },
        );
        run_federation(&manager, &strategy(), &cfg, |_, _| {}).unwrap();
        assert_eq!(*probe.saw.lock().unwrap(), Some((Some(0.25), Some(3.0))));
    }
}
