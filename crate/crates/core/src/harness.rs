//! Experiment harness: JSON configs, federation assembly over either
//! transport, single-factor sweeps, and deterministic CSV metrics.
//!
//! The harness is the reproducibility boundary: a config document plus the
//! seeds inside it fully determine every byte of the output, whether the
//! clients live in this process or in spawned child processes. The config
//! hash in the CSV header deliberately ignores `mode` so the two
//! transports of the same experiment label their outputs identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{InProcessProxy, LocalClient};
use crate::codec::CodecError;
use crate::head::HeadModel;
use crate::net::{start_tcp_server, NetError};
use crate::seed::{derive_seed, fnv1a};
use crate::server::{
    run_federation, ClientManager, FederationConfig, FederationResult, PowerProfile, RoundRecord,
    ServerError,
};
use crate::sim::{
    generate_dataset, partition, write_shard_file, DatasetSpec, PartitionScheme, SimError,
};
use crate::strategy::{DeadlineFedAvg, FedAvg, Strategy, StrategyError};
use crate::tensor::Parameters;

/// Upper bound on one server→client exchange in TCP mode, so a wedged
/// child cannot hang an experiment forever.
const REQUEST_TIMEOUT: Duration = Duration::from_secs(120);
/// How long TCP mode waits for all spawned clients to register.
const STARTUP_TIMEOUT: Duration = Duration::from_secs(30);
/// Grace period for child processes to exit after the server says goodbye.
const CHILD_EXIT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Validation(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("failed to start client process {client_id}: {source}")]
    Spawn {
        client_id: String,
        source: io::Error,
    },
    #[error("malformed metrics file: {0}")]
    MalformedMetrics(String),
}

fn default_rounds() -> u64 {
    20
}
fn default_clients() -> Vec<ClientEntry> {
    (0..10)
        .map(|i| ClientEntry {
            id: format!("client-{i:02}"),
            processor_class: default_processor_class(),
            seconds_per_sample: None,
            power_watts: None,
        })
        .collect()
}
fn default_local_epochs() -> u32 {
    5
}
fn default_learning_rate() -> f64 {
    0.01
}
fn default_batch_size() -> u32 {
    32
}
fn default_mode() -> String {
    "in_process".to_owned()
}
fn default_processor_class() -> String {
    "gpu".to_owned()
}
fn default_strategy_kind() -> String {
    "fedavg".to_owned()
}
fn default_scheme() -> String {
    "iid".to_owned()
}

/// Built-in per-class cost figures; explicit per-client values override.
/// The cpu class runs 1.27× slower than gpu and draws more power.
fn class_rates(class: &str) -> Option<(f64, f64)> {
    match class {
        "gpu" => Some((0.02985, 10.0)),
        "cpu" => Some((0.02985 * 1.27, 12.0)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    pub id: String,
    #[serde(default = "default_processor_class")]
    pub processor_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds_per_sample: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_watts: Option<f64>,
}

impl ClientEntry {
    /// `(seconds_per_sample, power_watts)` with class defaults applied.
    fn resolved_rates(&self) -> Result<(f64, f64), HarnessError> {
        let defaults = class_rates(&self.processor_class);
        let pick = |explicit: Option<f64>, fallback: Option<f64>, field: &str| {
            explicit.or(fallback).ok_or_else(|| {
                HarnessError::Validation(format!(
                    "clients[{}].{field}: required for unknown processor_class {:?}",
                    self.id, self.processor_class
                ))
            })
        };
        let sps = pick(
            self.seconds_per_sample,
            defaults.map(|d| d.0),
            "seconds_per_sample",
        )?;
        let watts = pick(self.power_watts, defaults.map(|d| d.1), "power_watts")?;
        for (field, v) in [("seconds_per_sample", sps), ("power_watts", watts)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(HarnessError::Validation(format!(
                    "clients[{}].{field}: must be positive and finite, got {v}",
                    self.id
                )));
            }
        }
        Ok((sps, watts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_n_features")]
    pub n_features: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_class_separation")]
    pub class_separation: f64,
    #[serde(default = "default_data_seed")]
    pub seed: u64,
}
fn default_n_samples() -> usize {
    5000
}
fn default_n_features() -> usize {
    32
}
fn default_n_classes() -> usize {
    10
}
fn default_class_separation() -> f64 {
    2.0
}
fn default_data_seed() -> u64 {
    7
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: default_n_samples(),
            n_features: default_n_features(),
            n_classes: default_n_classes(),
            class_separation: default_class_separation(),
            seed: default_data_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(rename = "type", default = "default_strategy_kind")]
    pub kind: String,
    #[serde(default)]
    pub tau_seconds_by_class: BTreeMap<String, f64>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: default_strategy_kind(),
            tau_seconds_by_class: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    #[serde(default = "default_model_seed")]
    pub model: u64,
    #[serde(default = "default_sampling_seed")]
    pub sampling: u64,
}
fn default_model_seed() -> u64 {
    11
}
fn default_sampling_seed() -> u64 {
    13
}

impl Default for SeedsConfig {
    fn default() -> Self {
        Self {
            model: default_model_seed(),
            sampling: default_sampling_seed(),
        }
    }
}

/// One experiment, fully described. Every field has a default, so `{}` is
/// a valid document; field names are exactly the JSON keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default = "default_clients")]
    pub clients: Vec<ClientEntry>,
    /// Clients sampled per round; omitted means all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: u32,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: u32,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub seeds: SeedsConfig,
    #[serde(default = "default_mode")]
    pub mode: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        load_config("{}").expect("empty document is a valid config")
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl ExperimentConfig {
    pub fn effective_clients_per_round(&self) -> usize {
        self.clients_per_round.unwrap_or(self.clients.len())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_samples: self.dataset.n_samples,
            n_features: self.dataset.n_features,
            n_classes: self.dataset.n_classes,
            class_separation: self.dataset.class_separation,
            seed: self.dataset.seed,
        }
    }

    fn partition_scheme(&self) -> Result<PartitionScheme, HarnessError> {
        match self.partition.scheme.as_str() {
            "iid" => Ok(PartitionScheme::Iid),
            "label_skew" => {
                let alpha = self.partition.alpha.ok_or_else(|| {
                    HarnessError::Validation("partition.alpha: required for label_skew".into())
                })?;
                Ok(PartitionScheme::LabelSkew { alpha })
            }
            other => Err(HarnessError::Validation(format!(
                "partition.scheme: unknown scheme {other:?}"
            ))),
        }
    }

    /// Per-client cost profiles, with class defaults resolved.
    pub fn profiles(&self) -> Result<BTreeMap<String, PowerProfile>, HarnessError> {
        self.clients
            .iter()
            .map(|entry| {
                let (seconds_per_sample, power_watts) = entry.resolved_rates()?;
                Ok((
                    entry.id.clone(),
                    PowerProfile {
                        seconds_per_sample,
                        power_watts,
                    },
                ))
            })
            .collect()
    }

    fn class_by_client(&self) -> BTreeMap<String, String> {
        self.clients
            .iter()
            .map(|e| (e.id.clone(), e.processor_class.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Validation(msg));

        if self.clients.is_empty() {
            return fail("clients: must list at least one client".into());
        }
        let mut seen = BTreeSet::new();
        for entry in &self.clients {
            if !valid_id(&entry.id) {
                return fail(format!(
                    "clients[].id: {:?} must be nonempty [A-Za-z0-9_-]",
                    entry.id
                ));
            }
            if !seen.insert(&entry.id) {
                return fail(format!("clients[].id: duplicate id {:?}", entry.id));
            }
            entry.resolved_rates()?;
        }

        let cpr = self.effective_clients_per_round();
        if cpr == 0 || cpr > self.clients.len() {
            return fail(format!(
                "clients_per_round: {cpr} must be in 1..={}",
                self.clients.len()
            ));
        }
        if self.local_epochs == 0 {
            return fail("local_epochs: must be ≥ 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!(
                "learning_rate: must be positive and finite, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size: must be ≥ 1".into());
        }

        let ds = &self.dataset;
        if ds.n_features == 0 {
            return fail("dataset.n_features: must be ≥ 1".into());
        }
        if ds.n_classes == 0 {
            return fail("dataset.n_classes: must be ≥ 1".into());
        }
        if ds.n_samples < ds.n_classes {
            return fail(format!(
                "dataset.n_samples: {} cannot cover {} classes",
                ds.n_samples, ds.n_classes
            ));
        }
        if ds.n_samples < self.clients.len() {
            return fail(format!(
                "dataset.n_samples: {} cannot fill {} client shards",
                ds.n_samples,
                self.clients.len()
            ));
        }
        if !(ds.class_separation.is_finite() && ds.class_separation > 0.0) {
            return fail(format!(
                "dataset.class_separation: must be positive and finite, got {}",
                ds.class_separation
            ));
        }

        match self.partition.scheme.as_str() {
            "iid" => {
                if self.partition.alpha.is_some() {
                    return fail("partition.alpha: only valid with scheme label_skew".into());
                }
            }
            "label_skew" => match self.partition.alpha {
                None => return fail("partition.alpha: required for label_skew".into()),
                Some(a) if !(a.is_finite() && a > 0.0) => {
                    return fail(format!(
                        "partition.alpha: must be positive and finite, got {a}"
                    ));
                }
                Some(_) => {}
            },
            other => {
                return fail(format!("partition.scheme: unknown scheme {other:?}"));
            }
        }

        match self.strategy.kind.as_str() {
            "fedavg" => {
                if !self.strategy.tau_seconds_by_class.is_empty() {
                    return fail(
                        "strategy.tau_seconds_by_class: only valid with type deadline".into(),
                    );
                }
            }
            "deadline" => {
                for entry in &self.clients {
                    if !self
                        .strategy
                        .tau_seconds_by_class
                        .contains_key(&entry.processor_class)
                    {
                        return fail(format!(
                            "strategy.tau_seconds_by_class: missing entry for class {:?} \
                             (client {:?})",
                            entry.processor_class, entry.id
                        ));
                    }
                }
                for (class, tau) in &self.strategy.tau_seconds_by_class {
                    if !(tau.is_finite() && *tau >= 0.0) {
                        return fail(format!(
                            "strategy.tau_seconds_by_class.{class}: must be ≥ 0 and finite, \
                             got {tau}"
                        ));
                    }
                }
            }
            other => {
                return fail(format!("strategy.type: unknown strategy {other:?}"));
            }
        }

        if !matches!(self.mode.as_str(), "in_process" | "tcp") {
            return fail(format!(
                "mode: must be \"in_process\" or \"tcp\", got {:?}",
                self.mode
            ));
        }
        Ok(())
    }

    /// Hash of the canonical config document with `mode` normalized away,
    /// so both transports of one experiment stamp their CSV identically.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.mode = default_mode();
        let text = serde_json::to_string(&canonical).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

/// Parse and validate one JSON experiment document.
pub fn load_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    load_config(&std::fs::read_to_string(path)?)
}

/// Round records plus the config identity they were produced under.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub config_hash: String,
    pub rows: Vec<RoundRecord>,
}

pub const METRICS_HEADER: &str = "round,global_loss,global_accuracy,round_virtual_time_s,\
round_energy_j,cum_virtual_time_s,cum_energy_j,participants";

/// One CSV row (newline-terminated) for a round record. Floats print in
/// shortest round-trip form, so equal records always render identically.
pub fn render_metrics_row(r: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}\n",
        r.round,
        r.global_loss,
        r.global_accuracy,
        r.round_virtual_time_s,
        r.round_energy_j,
        r.cum_virtual_time_s,
        r.cum_energy_j,
        r.participants.join(";")
    )
}

/// Render the CSV document: two comment lines, the fixed header, one line
/// per round. Byte-deterministic given the table.
pub fn render_metrics(table: &MetricsTable) -> String {
    use fmt::Write;
    let mut out = String::new();
    writeln!(out, "# config_hash={}", table.config_hash).expect("string write");
    writeln!(out, "# evaluation=federated").expect("string write");
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&render_metrics_row(r));
    }
    out
}

pub fn write_metrics(table: &MetricsTable, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, render_metrics(table))?;
    Ok(())
}

/// Parse a document produced by [`render_metrics`]; unknown `#` comments
/// are tolerated, everything else is strict.
pub fn parse_metrics(text: &str) -> Result<MetricsTable, HarnessError> {
    let bad = |msg: String| HarnessError::MalformedMetrics(msg);
    let mut config_hash = None;
    let mut header_seen = false;
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(hash) = rest.trim().strip_prefix("config_hash=") {
                config_hash = Some(hash.to_owned());
            }
            continue;
        }
        if !header_seen {
            if line != METRICS_HEADER {
                return Err(bad(format!("unexpected header {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [round, loss, acc, rt, re, ct, ce, participants] = fields.as_slice() else {
            return Err(bad(format!("expected 8 fields, got {}", fields.len())));
        };
        let float = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad {what} value {s:?}")))
        };
        rows.push(RoundRecord {
            round: round
                .parse()
                .map_err(|_| bad(format!("bad round value {round:?}")))?,
            global_loss: float(loss, "loss")?,
            global_accuracy: float(acc, "accuracy")?,
            round_virtual_time_s: float(rt, "round time")?,
            round_energy_j: float(re, "round energy")?,
            cum_virtual_time_s: float(ct, "cumulative time")?,
            cum_energy_j: float(ce, "cumulative energy")?,
            participants: participants
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect(),
        });
    }
    if !header_seen {
        return Err(bad("missing header line".into()));
    }
    Ok(MetricsTable {
        config_hash: config_hash.ok_or_else(|| bad("missing config_hash comment".into()))?,
        rows,
    })
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable, HarnessError> {
    parse_metrics(&std::fs::read_to_string(path)?)
}

/// Everything a finished experiment yields.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: MetricsTable,
    pub final_parameters: Parameters,
}

/// Assemble the strategy a config describes: plain averaging, or the
/// deadline variant with the config's per-class cutoffs.
pub fn build_strategy(cfg: &ExperimentConfig) -> Result<Box<dyn Strategy>, HarnessError> {
    let fedavg = FedAvg {
        local_epochs: cfg.local_epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        seed_base: cfg.seeds.model,
        min_successful: None,
    };
    match cfg.strategy.kind.as_str() {
        "fedavg" => Ok(Box::new(fedavg)),
        "deadline" => Ok(Box::new(DeadlineFedAvg::new(
            fedavg,
            cfg.strategy.tau_seconds_by_class.clone(),
            cfg.class_by_client(),
        )?)),
        other => Err(HarnessError::Validation(format!(
            "strategy.type: unknown strategy {other:?}"
        ))),
    }
}

fn log_round(record: &RoundRecord, _global: &Parameters) {
    log::info!(
        "round {}: loss {:.4} accuracy {:.4} time {:.1}s energy {:.1}J ({} participants)",
        record.round,
        record.global_loss,
        record.global_accuracy,
        record.round_virtual_time_s,
        record.round_energy_j,
        record.participants.len()
    );
}

/// Run one experiment end to end. `client_bin` is the executable spawned
/// per client in TCP mode (defaults to the current executable); unused in
/// in-process mode.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    client_bin: Option<&Path>,
) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset_spec())?;
    let shards = partition(
        &dataset,
        cfg.clients.len(),
        cfg.partition_scheme()?,
        derive_seed(cfg.dataset.seed, 0, "partition"),
    )?;
    let initial_parameters = HeadModel::random_init(
        cfg.dataset.n_features,
        cfg.dataset.n_classes,
        cfg.seeds.model,
    )
    .to_parameters()?;
    let strategy = build_strategy(cfg)?;
    let fed_cfg = FederationConfig {
        rounds: cfg.rounds,
        clients_per_round: cfg.effective_clients_per_round(),
        initial_parameters,
        sampling_seed: cfg.seeds.sampling,
        profiles: cfg.profiles()?,
    };

    let result = match cfg.mode.as_str() {
        "in_process" => {
            let manager = ClientManager::new();
            for (entry, shard) in cfg.clients.iter().zip(&shards) {
                let client = LocalClient::new(&entry.id, shard.clone());
                manager.register(Arc::new(InProcessProxy::new(client)))?;
            }
            run_federation(&manager, strategy.as_ref(), &fed_cfg, log_round)?
        }
        "tcp" => run_tcp_federation(cfg, &shards, strategy.as_ref(), &fed_cfg, client_bin)?,
        other => {
            return Err(HarnessError::Validation(format!(
                "mode: must be \"in_process\" or \"tcp\", got {other:?}"
            )))
        }
    };

    Ok(RunOutput {
        metrics: MetricsTable {
            config_hash: cfg.config_hash(),
            rows: result.rounds,
        },
        final_parameters: result.final_parameters,
    })
}

fn run_tcp_federation(
    cfg: &ExperimentConfig,
    shards: &[crate::client::Shard],
    strategy: &dyn Strategy,
    fed_cfg: &FederationConfig,
    client_bin: Option<&Path>,
) -> Result<FederationResult, HarnessError> {
    let bin: PathBuf = match client_bin {
        Some(p) => p.to_owned(),
        None => std::env::current_exe()?,
    };
    let server = start_tcp_server("127.0.0.1:0", Some(REQUEST_TIMEOUT))?;
    let addr = server.local_addr().to_string();
    let shard_dir = tempfile::tempdir()?;

    let mut children: Vec<(String, Child)> = Vec::new();
    let outcome = (|| -> Result<FederationResult, HarnessError> {
        for (entry, shard) in cfg.clients.iter().zip(shards) {
            let path = shard_dir.path().join(format!("shard-{}.bin", entry.id));
            write_shard_file(&path, shard)?;
            let child = Command::new(&bin)
                .arg("client")
                .arg("--server")
                .arg(&addr)
                .arg("--client-id")
                .arg(&entry.id)
                .arg("--shard")
                .arg(&path)
                .stdout(Stdio::null())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|source| HarnessError::Spawn {
                    client_id: entry.id.clone(),
                    source,
                })?;
            children.push((entry.id.clone(), child));
        }
        server.wait_for_clients(cfg.clients.len(), STARTUP_TIMEOUT)?;
        Ok(run_federation(
            server.manager(),
            strategy,
            fed_cfg,
            log_round,
        )?)
    })();

    // Teardown runs on success and on error alike: stop the server (which
    // disconnects every client) and reap the children.
    server.shutdown();
    reap_children(children);
    outcome
}

fn reap_children(children: Vec<(String, Child)>) {
    for (id, mut child) in children {
        let deadline = Instant::now() + CHILD_EXIT_TIMEOUT;
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    if !status.success() {
                        log::warn!("client process {id} exited with {status}");
                    }
                    break;
                }
                Ok(None) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Ok(None) => {
                    log::warn!("client process {id} did not exit in time; killing it");
                    let _ = child.kill();
                    let _ = child.wait();
                    break;
                }
                Err(e) => {
                    log::warn!("waiting for client process {id} failed: {e}");
                    break;
                }
            }
        }
    }
}

/// The experiment factor a sweep varies, all else fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepFactor {
    LocalEpochs,
    ClientsPerRound,
    Tau,
}

impl fmt::Display for SweepFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepFactor::LocalEpochs => "local_epochs",
            SweepFactor::ClientsPerRound => "clients_per_round",
            SweepFactor::Tau => "tau",
        })
    }
}

impl std::str::FromStr for SweepFactor {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local_epochs" => Ok(SweepFactor::LocalEpochs),
            "clients_per_round" => Ok(SweepFactor::ClientsPerRound),
            "tau" => Ok(SweepFactor::Tau),
            other => Err(HarnessError::Validation(format!(
                "factor: expected local_epochs, clients_per_round, or tau, got {other:?}"
            ))),
        }
    }
}

/// One sweep point: the factor value and what running it produced.
pub struct SweepRun {
    pub value: f64,
    pub outcome: Result<RunOutput, HarnessError>,
}

fn positive_integer(factor: SweepFactor, v: f64) -> Result<u64, HarnessError> {
    if v.fract() == 0.0 && v >= 1.0 && v <= u32::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(HarnessError::Validation(format!(
            "{factor}: sweep value {v} must be a positive integer"
        )))
    }
}

fn apply_factor(
    cfg: &ExperimentConfig,
    factor: SweepFactor,
    value: f64,
) -> Result<ExperimentConfig, HarnessError> {
    let mut out = cfg.clone();
    match factor {
        SweepFactor::LocalEpochs => {
            out.local_epochs = positive_integer(factor, value)? as u32;
        }
        SweepFactor::ClientsPerRound => {
            out.clients_per_round = Some(positive_integer(factor, value)? as usize);
        }
        SweepFactor::Tau => {
            if !(value.is_finite() && value >= 0.0) {
                return Err(HarnessError::Validation(format!(
                    "tau: sweep value must be ≥ 0 and finite, got {value}"
                )));
            }
            // Vary only the classes that have a cutoff to begin with:
            // zero-τ classes are running uncut by design and stay that way.
            for tau in out.strategy.tau_seconds_by_class.values_mut() {
                if *tau != 0.0 {
                    *tau = value;
                }
            }
        }
    }
    Ok(out)
}

/// Run the experiment once per value, all other factors and seeds held
/// fixed. A failed point is reported in its slot; the sweep continues.
pub fn sweep(
    cfg: &ExperimentConfig,
    factor: SweepFactor,
    values: &[f64],
    client_bin: Option<&Path>,
) -> Result<Vec<SweepRun>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Validation(
            "values: sweep needs at least one value".into(),
        ));
    }
    if factor == SweepFactor::Tau {
        if cfg.strategy.kind != "deadline" {
            return Err(HarnessError::Validation(
                "factor: tau sweep requires strategy.type \"deadline\"".into(),
            ));
        }
        if !cfg
            .strategy
            .tau_seconds_by_class
            .values()
            .any(|&tau| tau != 0.0)
        {
            return Err(HarnessError::Validation(
                "strategy.tau_seconds_by_class: tau sweep needs a nonzero base entry to vary"
                    .into(),
            ));
        }
    }
    Ok(values
        .iter()
        .map(|&value| SweepRun {
            value,
            outcome: apply_factor(cfg, factor, value)
                .and_then(|point| run_experiment(&point, client_bin)),
        })
        .collect())
}

/// Comparison summary across sweep points, one CSV line per value: the
/// final round's accuracy and the cumulative costs, or the error.
pub fn sweep_summary(factor: SweepFactor, runs: &[SweepRun]) -> String {
    use fmt::Write;
    let mut out = String::new();
    out.push_str("factor,value,final_accuracy,cum_virtual_time_s,cum_energy_j,status\n");
    for run in runs {
        match &run.outcome {
            Ok(output) => match output.metrics.rows.last() {
                Some(last) => writeln!(
                    out,
                    "{factor},{},{},{},{},ok",
                    run.value, last.global_accuracy, last.cum_virtual_time_s, last.cum_energy_j
                )
                .expect("string write"),
                None => writeln!(out, "{factor},{},,,,ok", run.value).expect("string write"),
            },
            Err(e) => {
                let reason: String = e
                    .to_string()
                    .chars()
                    .map(|c| if c == ',' || c == '\n' { ';' } else { c })
                    .collect();
                writeln!(out, "{factor},{},,,,error: {reason}", run.value).expect("string write");
            }
        }
    }
    out
}
