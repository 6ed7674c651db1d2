//! Client-side runtime: local data shard, the three model operations
//! (get-parameters / fit / evaluate), and the in-process proxy used when
//! server and clients share one process.
//!
//! `fit` is where heterogeneity becomes visible: when the instruction
//! config carries `seconds_per_sample`, the client accounts virtual time
//! as `samples_visited × seconds_per_sample`, and an optional
//! `cutoff_seconds` deadline stops training before the first batch that
//! would cross it. Results report the samples actually processed, so an
//! interrupted client still contributes a usable partial update.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ConfigMap;
use crate::head::{HeadModel, ModelError};
use crate::protocol::{DisconnectReason, EvaluateIns, EvaluateRes, FitIns, FitRes, Message};
use crate::server::{ClientProxy, ProxyError};
use crate::tensor::Parameters;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("missing or mistyped config key {0:?}")]
    MissingConfigKey(&'static str),
    #[error("invalid config value for {key:?}: {why}")]
    BadConfigValue { key: &'static str, why: String },
    #[error("shard has no {0} examples")]
    EmptyShard(&'static str),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("shard features have {got} columns, model expects {expected}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("malformed shard: {0}")]
    MalformedShard(String),
}

/// One client's local dataset: row-major features, integer labels, and a
/// train/test boundary — rows `0..train_count` train, the rest evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    train_count: usize,
    max_label: usize,
}

impl Shard {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        n_features: usize,
        train_count: usize,
    ) -> Result<Self, ClientError> {
        if n_features == 0 {
            return Err(ClientError::MalformedShard("zero feature columns".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(ClientError::MalformedShard(format!(
                "{} feature values for {} labels × {} columns",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if train_count > labels.len() {
            return Err(ClientError::MalformedShard(format!(
                "train_count {} exceeds {} rows",
                train_count,
                labels.len()
            )));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(ClientError::MalformedShard(format!(
                "non-finite feature value {bad}"
            )));
        }
        let max_label = labels.iter().copied().max().unwrap_or(0);
        Ok(Self {
            features,
            labels,
            n_features,
            train_count,
            max_label,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }

    pub fn test_count(&self) -> usize {
        self.labels.len() - self.train_count
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn test_features(&self) -> &[f64] {
        &self.features[self.train_count * self.n_features..]
    }

    fn test_labels(&self) -> &[usize] {
        &self.labels[self.train_count..]
    }

    /// Largest label present; the model's class count must exceed it.
    pub fn max_label(&self) -> usize {
        self.max_label
    }
}

/// What `handle` wants done with the connection after a message.
#[derive(Debug, PartialEq)]
pub enum Handled {
    Reply(Message),
    ReplyThenStop(Message),
    Stop,
}

/// A federated client: one shard, one trainable head, no shared state.
pub struct LocalClient {
    client_id: String,
    shard: Shard,
    current: Option<HeadModel>,
}

impl LocalClient {
    pub fn new(client_id: impl Into<String>, shard: Shard) -> Self {
        Self {
            client_id: client_id.into(),
            shard,
            current: None,
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    /// The latest locally trained parameters, by value. Before the first
    /// `fit` there is no model yet, so the list is empty — the server
    /// initializes the global model itself and never depends on this.
    pub fn get_parameters(&self) -> Parameters {
        self.current
            .as_ref()
            .and_then(|m| m.to_parameters().ok())
            .unwrap_or_default()
    }

    fn check_shard_against(&self, model: &HeadModel) -> Result<(), ClientError> {
        if self.shard.n_features() != model.n_features() {
            return Err(ClientError::FeatureDimMismatch {
                expected: model.n_features(),
                got: self.shard.n_features(),
            });
        }
        if !self.shard.is_empty() && self.shard.max_label() >= model.n_classes() {
            return Err(ClientError::LabelOutOfRange {
                label: self.shard.max_label(),
                n_classes: model.n_classes(),
            });
        }
        Ok(())
    }

    /// Local training per the instruction config: `local_epochs` passes in
    /// seeded-shuffle order, mini-batches of `batch_size` (last short), SGD
    /// at `learning_rate`. With `seconds_per_sample` present, virtual time
    /// accrues per batch, and `cutoff_seconds` stops training before any
    /// batch that would exceed it — completed batches only.
    pub fn fit(&mut self, ins: &FitIns) -> Result<FitRes, ClientError> {
        let mut model = HeadModel::from_parameters(&ins.parameters)?;
        self.check_shard_against(&model)?;
        let cfg = &ins.config;
        let local_epochs = get_uint(cfg, "local_epochs")?;
        let learning_rate = get_positive(cfg, "learning_rate")?;
        let batch_size = get_uint(cfg, "batch_size")?;
        if batch_size == 0 {
            return Err(ClientError::BadConfigValue {
                key: "batch_size",
                why: "must be ≥ 1".into(),
            });
        }
        let seed = cfg
            .get_int("seed")
            .ok_or(ClientError::MissingConfigKey("seed"))? as u64;
        let seconds_per_sample = get_optional_positive(cfg, "seconds_per_sample")?;
        let power_watts = get_optional_positive(cfg, "power_watts")?;
        let cutoff_seconds = get_optional_positive(cfg, "cutoff_seconds")?;

        if local_epochs == 0 {
            // Degenerate instruction: report it as a failure with the
            // input parameters echoed back, rather than erroring out.
            let mut metrics = ConfigMap::new();
            metrics.insert_bool("failed", true);
            metrics.insert_str("error", "local_epochs is 0");
            metrics.insert_float("completed_epochs", 0.0);
            return Ok(FitRes {
                parameters: ins.parameters.clone(),
                num_examples: 0,
                metrics,
            });
        }
        let n_train = self.shard.train_count();
        if n_train == 0 {
            return Err(ClientError::EmptyShard("train"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut visited: u64 = 0;
        'training: for _ in 0..local_epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(batch_size as usize) {
                if let (Some(sps), Some(tau)) = (seconds_per_sample, cutoff_seconds) {
                    if (visited + batch.len() as u64) as f64 * sps > tau {
                        break 'training;
                    }
                }
                model.sgd_step(
                    self.shard.features(),
                    self.shard.labels(),
                    batch,
                    learning_rate,
                );
                visited += batch.len() as u64;
            }
        }

        let parameters = model
            .to_parameters()
            .map_err(|_| ClientError::BadConfigValue {
                key: "learning_rate",
                why: "training diverged to non-finite parameters".into(),
            })?;
        let train_rows: Vec<usize> = (0..n_train).collect();
        let (train_loss, ..) =
            model.loss_and_gradients(self.shard.features(), self.shard.labels(), &train_rows);
        let mut metrics = ConfigMap::new();
        metrics.insert_float("completed_epochs", visited as f64 / n_train as f64);
        metrics.insert_float("train_loss", train_loss);
        if let Some(sps) = seconds_per_sample {
            let virtual_time_s = visited as f64 * sps;
            metrics.insert_float("virtual_time_s", virtual_time_s);
            if let Some(watts) = power_watts {
                metrics.insert_float("energy_J", watts * virtual_time_s);
            }
        }
        self.current = Some(model);
        Ok(FitRes {
            parameters,
            num_examples: visited,
            metrics,
        })
    }

    /// Score the instructed parameters on the held-out rows: mean
    /// cross-entropy and top-1 accuracy. Leaves client state untouched.
    pub fn evaluate(&self, ins: &EvaluateIns) -> Result<EvaluateRes, ClientError> {
        let model = HeadModel::from_parameters(&ins.parameters)?;
        self.check_shard_against(&model)?;
        let n_test = self.shard.test_count();
        if n_test == 0 {
            return Err(ClientError::EmptyShard("test"));
        }
        let (loss, accuracy) = model.evaluate(self.shard.test_features(), self.shard.test_labels());
        let mut metrics = ConfigMap::new();
        metrics.insert_float("accuracy", accuracy);
        Ok(EvaluateRes {
            loss,
            num_examples: n_test as u64,
            metrics,
        })
    }

    /// `fit` with internal errors folded into a failure-flagged result, so
    /// both transports surface client trouble the same way: `failed: true`.
    pub fn fit_response(&mut self, ins: &FitIns) -> FitRes {
        match self.fit(ins) {
            Ok(res) => res,
            Err(e) => {
                let mut metrics = ConfigMap::new();
                metrics.insert_bool("failed", true);
                metrics.insert_str("error", e.to_string());
                FitRes {
                    parameters: ins.parameters.clone(),
                    num_examples: 0,
                    metrics,
                }
            }
        }
    }

    /// `evaluate` with the same failure-flag folding as [`fit_response`](Self::fit_response).
    pub fn evaluate_response(&self, ins: &EvaluateIns) -> EvaluateRes {
        match self.evaluate(ins) {
            Ok(res) => res,
            Err(e) => {
                let mut metrics = ConfigMap::new();
                metrics.insert_bool("failed", true);
                metrics.insert_str("error", e.to_string());
                EvaluateRes {
                    loss: 0.0,
                    num_examples: 0,
                    metrics,
                }
            }
        }
    }

    /// Protocol dispatch for one incoming message. Server-only messages
    /// are answered with a protocol-violation disconnect.
    pub fn handle(&mut self, msg: &Message) -> Handled {
        match msg {
            Message::GetParametersIns => {
                Handled::Reply(Message::GetParametersRes(self.get_parameters()))
            }
            Message::FitIns(ins) => Handled::Reply(Message::FitRes(self.fit_response(ins))),
            Message::EvaluateIns(ins) => {
                Handled::Reply(Message::EvaluateRes(self.evaluate_response(ins)))
            }
            Message::Disconnect { .. } => Handled::Stop,
            Message::Hello(_)
            | Message::HelloAck
            | Message::GetParametersRes(_)
            | Message::FitRes(_)
            | Message::EvaluateRes(_) => Handled::ReplyThenStop(Message::Disconnect {
                reason: DisconnectReason::ProtocolViolation,
            }),
        }
    }
}

fn get_uint(cfg: &ConfigMap, key: &'static str) -> Result<u64, ClientError> {
    let v = cfg.get_int(key).ok_or(ClientError::MissingConfigKey(key))?;
    u64::try_from(v).map_err(|_| ClientError::BadConfigValue {
        key,
        why: format!("negative value {v}"),
    })
}

fn get_positive(cfg: &ConfigMap, key: &'static str) -> Result<f64, ClientError> {
    let v = cfg
        .get_float(key)
        .ok_or(ClientError::MissingConfigKey(key))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(ClientError::BadConfigValue {
            key,
            why: format!("{v} is not a positive finite number"),
        });
    }
    Ok(v)
}

fn get_optional_positive(cfg: &ConfigMap, key: &'static str) -> Result<Option<f64>, ClientError> {
    match cfg.get_float(key) {
        None if cfg.contains_key(key) => Err(ClientError::BadConfigValue {
            key,
            why: "wrong type, expected float".into(),
        }),
        None => Ok(None),
        Some(v) if v.is_finite() && v > 0.0 => Ok(Some(v)),
        Some(v) => Err(ClientError::BadConfigValue {
            key,
            why: format!("{v} is not a positive finite number"),
        }),
    }
}

/// Server-side handle for a client living in the same process. Results
/// take exactly the values the TCP path would carry, so swapping
/// transports cannot change a single bit of the federation.
pub struct InProcessProxy {
    client_id: String,
    inner: std::sync::Mutex<LocalClient>,
}

impl InProcessProxy {
    pub fn new(client: LocalClient) -> Self {
        Self {
            client_id: client.client_id().to_owned(),
            inner: std::sync::Mutex::new(client),
        }
    }
}

impl ClientProxy for InProcessProxy {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn get_parameters(&self) -> Result<Parameters, ProxyError> {
        Ok(self.inner.lock().expect("client lock").get_parameters())
    }

    fn fit(&self, ins: &FitIns) -> Result<FitRes, ProxyError> {
        Ok(self.inner.lock().expect("client lock").fit_response(ins))
    }

    fn evaluate(&self, ins: &EvaluateIns) -> Result<EvaluateRes, ProxyError> {
        Ok(self
            .inner
            .lock()
            .expect("client lock")
            .evaluate_response(ins))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::encode_frame;
    use rand_distr::{Distribution, StandardNormal};

    /// Two well-separated Gaussian blobs: 20 train rows, 10 test rows.
    fn blob_shard(seed: u64) -> Shard {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, n) = (3usize, 30usize);
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for row in 0..n {
            let class = row % 2;
            let center = if class == 0 { 2.0 } else { -2.0 };
            for _ in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(center + 0.5 * noise);
            }
            labels.push(class);
        }
        Shard::new(features, labels, d, 20).unwrap()
    }

    fn fit_config(local_epochs: i64, batch_size: i64, seed: i64) -> ConfigMap {
        let mut cfg = ConfigMap::new();
        cfg.insert_int("local_epochs", local_epochs);
        cfg.insert_float("learning_rate", 0.1);
        cfg.insert_int("batch_size", batch_size);
        cfg.insert_int("seed", seed);
        cfg
    }

    fn initial_params() -> Parameters {
        HeadModel::zeros(3, 2).to_parameters().unwrap()
    }

    #[test]
    fn zero_epochs_reports_failure_with_params_echoed() {
        let mut client = LocalClient::new("c0", blob_shard(1));
        let ins = FitIns {
            parameters: initial_params(),
            config: fit_config(0, 8, 42),
        };
        let res = client.fit(&ins).unwrap();
        assert_eq!(res.num_examples, 0);
        assert_eq!(res.metrics.get_bool("failed"), Some(true));
        assert_eq!(res.parameters, ins.parameters);
    }

    #[test]
    fn fit_is_deterministic_to_the_byte() {
        let ins = FitIns {
            parameters: initial_params(),
            config: fit_config(3, 8, 42),
        };
        let run = || {
            let mut client = LocalClient::new("c0", blob_shard(1));
            let res = client.fit(&ins).unwrap();
            encode_frame(&Message::FitRes(res)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn more_epochs_do_not_increase_train_loss() {
        let run = |epochs| {
            let mut client = LocalClient::new("c0", blob_shard(1));
            let ins = FitIns {
                parameters: initial_params(),
                config: fit_config(epochs, 8, 42),
            };
            client
                .fit(&ins)
                .unwrap()
                .metrics
                .get_float("train_loss")
                .unwrap()
        };
        assert!(run(5) <= run(1));
    }

    #[test]
    fn full_epochs_count_every_sample_visit() {
        let mut client = LocalClient::new("c0", blob_shard(1));
        let ins = FitIns {
            parameters: initial_params(),
            config: fit_config(5, 8, 42),
        };
        let res = client.fit(&ins).unwrap();
        assert_eq!(res.num_examples, 5 * 20);
        assert_eq!(res.metrics.get_float("completed_epochs"), Some(5.0));
    }

    #[test]
    fn cutoff_stops_before_the_overrunning_batch() {
        // 20 train rows, batches of 6 → lengths 6,6,6,2 per epoch. At one
        // virtual second per sample, τ=13 admits two batches (12 s); the
        // third would reach 18 s and must not run.
        let mut client = LocalClient::new("c0", blob_shard(1));
        let mut cfg = fit_config(2, 6, 42);
        cfg.insert_float("seconds_per_sample", 1.0);
        cfg.insert_float("power_watts", 2.0);
        cfg.insert_float("cutoff_seconds", 13.0);
        let ins = FitIns {
            parameters: initial_params(),
            config: cfg,
        };
        let res = client.fit(&ins).unwrap();
        assert_eq!(res.num_examples, 12);
        assert_eq!(res.metrics.get_float("virtual_time_s"), Some(12.0));
        assert_eq!(res.metrics.get_float("energy_J"), Some(24.0));
        assert_eq!(res.metrics.get_float("completed_epochs"), Some(0.6));
    }

    #[test]
    fn generous_cutoff_is_bit_identical_to_no_cutoff() {
        let fit_with = |cfg: ConfigMap| {
            let mut client = LocalClient::new("c0", blob_shard(1));
            let ins = FitIns {
                parameters: initial_params(),
                config: cfg,
            };
            client.fit(&ins).unwrap()
        };
        let mut base = fit_config(2, 6, 42);
        base.insert_float("seconds_per_sample", 1.0);
        let mut generous = base.clone();
        generous.insert_float("cutoff_seconds", 1e9);
        let plain = fit_with(base);
        let cut = fit_with(generous);
        assert_eq!(plain.parameters, cut.parameters);
        assert_eq!(plain.num_examples, cut.num_examples);
    }

    #[test]
    fn one_full_batch_epoch_equals_one_gradient_descent_step() {
        let shard = blob_shard(1);
        let mut client = LocalClient::new("c0", shard.clone());
        let mut cfg = fit_config(1, 20, 7);
        cfg.insert_float("learning_rate", 0.1);
        let ins = FitIns {
            parameters: initial_params(),
            config: cfg,
        };
        let res = client.fit(&ins).unwrap();

        let mut reference = HeadModel::zeros(3, 2);
        let rows: Vec<usize> = (0..20).collect();
        reference.sgd_step(shard.features(), shard.labels(), &rows, 0.1);
        let expect = reference.to_parameters().unwrap();
        for (a, b) in res.parameters.tensors.iter().zip(&expect.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn evaluate_is_pure_and_correct_at_zero() {
        let client = LocalClient::new("c0", blob_shard(1));
        let ins = EvaluateIns {
            parameters: initial_params(),
            config: ConfigMap::new(),
        };
        let a = client.evaluate(&ins).unwrap();
        let b = client.evaluate(&ins).unwrap();
        assert_eq!(a, b);
        assert!((a.loss - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(a.num_examples, 10);
        assert!(
            client.get_parameters().tensors.is_empty(),
            "evaluate must not train"
        );
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let shard = Shard::new(vec![0.0; 6], vec![0, 5], 3, 1).unwrap();
        let mut client = LocalClient::new("c0", shard);
        let ins = FitIns {
            parameters: initial_params(),
            config: fit_config(1, 4, 1),
        };
        match client.fit(&ins) {
            Err(ClientError::LabelOutOfRange {
                label: 5,
                n_classes: 2,
            }) => {}
            other => panic!("expected label range error, got {other:?}"),
        }
    }

    #[test]
    fn fit_response_folds_errors_into_failure_flag() {
        let mut client = LocalClient::new("c0", blob_shard(1));
        let ins = FitIns {
            parameters: initial_params(),
            config: ConfigMap::new(), // everything missing
        };
        let res = client.fit_response(&ins);
        assert_eq!(res.metrics.get_bool("failed"), Some(true));
        assert_eq!(res.num_examples, 0);
        assert!(res.metrics.get_str("error").is_some());
    }

    #[test]
    fn handle_dispatches_and_stops_on_disconnect() {
        let mut client = LocalClient::new("c0", blob_shard(1));
        match client.handle(&Message::GetParametersIns) {
            Handled::Reply(Message::GetParametersRes(p)) => {
                assert!(p.tensors.is_empty(), "no training has happened yet")
            }
            other => panic!("unexpected {other:?}"),
        }
        let ins = FitIns {
            parameters: initial_params(),
            config: fit_config(1, 8, 3),
        };
        match client.handle(&Message::FitIns(ins)) {
            Handled::Reply(Message::FitRes(res)) => assert_eq!(res.num_examples, 20),
            other => panic!("unexpected {other:?}"),
        }
        assert!(!client.get_parameters().tensors.is_empty());
        assert_eq!(
            client.handle(&Message::Disconnect {
                reason: DisconnectReason::Shutdown
            }),
            Handled::Stop
        );
        match client.handle(&Message::HelloAck) {
            Handled::ReplyThenStop(Message::Disconnect {
                reason: DisconnectReason::ProtocolViolation,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
