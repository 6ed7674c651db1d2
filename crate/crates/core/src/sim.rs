//! Deterministic hardware and data simulation: virtual clocks, per-device
//! speed and power figures, a synthetic Gaussian-blob dataset, and the
//! partitioner that deals it out to clients.
//!
//! Nothing here touches the wall clock. Time is `samples_visited ×
//! seconds_per_sample` and energy is `power_watts × virtual seconds`, so
//! every figure is a pure function of profiles, configs, shards, and seeds
//! — rerunning an experiment reproduces it bit for bit, regardless of
//! scheduler or host load.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use thiserror::Error;

use crate::client::{ClientError, LocalClient, Shard};
use crate::codec::{ByteReader, CodecError};
use crate::config::{encode_config, read_config, ConfigMap};
use crate::protocol::FitIns;
use crate::seed::derive_seed;
use crate::tensor::{encode_parameters, read_parameters, Parameters, Tensor};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("cannot cut {samples} samples into {shards} shards")]
    TooManyShards { shards: usize, samples: usize },
    #[error("empty input list")]
    EmptyList,
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed shard file: {0}")]
    MalformedShardFile(String),
}

/// Simulated device: how fast it chews through samples, what it burns
/// doing so, and which data shard it holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientProfile {
    pub client_id: String,
    pub processor_class: String,
    pub seconds_per_sample: f64,
    pub power_watts: f64,
    pub shard_index: usize,
}

impl ClientProfile {
    fn check_rates(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("seconds_per_sample", self.seconds_per_sample),
            ("power_watts", self.power_watts),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidSpec(format!(
                    "client {:?}: {name} must be positive and finite, got {v}",
                    self.client_id
                )));
            }
        }
        Ok(())
    }
}

/// Per-client virtual clock; advances only through simulation accounting,
/// never from the wall clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    elapsed_virtual_s: f64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn elapsed_virtual_s(&self) -> f64 {
        self.elapsed_virtual_s
    }

    pub fn advance(&mut self, seconds: f64) {
        assert!(
            seconds.is_finite() && seconds >= 0.0,
            "clock advanced by {seconds}"
        );
        self.elapsed_virtual_s += seconds;
    }
}

/// Recipe for a synthetic classification dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Radius of the sphere the class centers sit on; bigger is easier.
    pub class_separation: f64,
    pub seed: u64,
}

impl DatasetSpec {
    fn validate(&self) -> Result<(), SimError> {
        if self.n_features == 0 {
            return Err(SimError::InvalidSpec("n_features must be ≥ 1".into()));
        }
        if self.n_classes == 0 {
            return Err(SimError::InvalidSpec("n_classes must be ≥ 1".into()));
        }
        if self.n_samples < self.n_classes {
            return Err(SimError::InvalidSpec(format!(
                "{} samples cannot cover {} classes",
                self.n_samples, self.n_classes
            )));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(SimError::InvalidSpec(format!(
                "class_separation must be positive and finite, got {}",
                self.class_separation
            )));
        }
        Ok(())
    }
}

/// Fully materialized dataset: row-major features plus integer labels,
/// rows grouped by class in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, index: usize) -> &[f64] {
        &self.features[index * self.n_features..(index + 1) * self.n_features]
    }
}

/// Gaussian blobs: one unit-variance cluster per class, centers drawn
/// uniformly on the sphere of radius `class_separation`. Class counts are
/// balanced to within one sample; everything is a function of the seed.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, SimError> {
    spec.validate()?;
    let (n, d, k) = (spec.n_samples, spec.n_features, spec.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut centers = Vec::with_capacity(k);
    for _ in 0..k {
        // A normalized Gaussian vector is uniform on the sphere.
        let direction = loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
            }
        };
        centers.push(
            direction
                .into_iter()
                .map(|x| x * spec.class_separation)
                .collect::<Vec<f64>>(),
        );
    }

    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        let count = n / k + usize::from(class < n % k);
        for _ in 0..count {
            for &c in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(c + noise);
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        features,
        labels,
        n_features: d,
        n_classes: k,
    })
}

/// How rows are dealt out to shards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    /// Seeded global shuffle, then contiguous equal cuts (sizes within one).
    Iid,
    /// Per-class shard proportions drawn from a symmetric Dirichlet; small
    /// `alpha` concentrates each class on few shards.
    LabelSkew { alpha: f64 },
}

/// Split a dataset into `n_shards` client shards, each with an 80/20
/// train/test boundary (train = ⌊0.8·rows⌋, at least one row). The shards
/// cover the dataset exactly: every row lands in precisely one shard.
pub fn partition(
    dataset: &Dataset,
    n_shards: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<Shard>, SimError> {
    let n = dataset.len();
    if n_shards == 0 {
        return Err(SimError::InvalidSpec("n_shards must be ≥ 1".into()));
    }
    if n_shards > n {
        return Err(SimError::TooManyShards {
            shards: n_shards,
            samples: n,
        });
    }

    let row_lists: Vec<Vec<usize>> = match scheme {
        PartitionScheme::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut lists = Vec::with_capacity(n_shards);
            let mut cursor = 0;
            for i in 0..n_shards {
                let size = n / n_shards + usize::from(i < n % n_shards);
                lists.push(order[cursor..cursor + size].to_vec());
                cursor += size;
            }
            lists
        }
        PartitionScheme::LabelSkew { alpha } => {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(SimError::InvalidSpec(format!(
                    "label_skew alpha must be positive and finite, got {alpha}"
                )));
            }
            label_skew_lists(dataset, n_shards, alpha, seed)?
        }
    };

    row_lists
        .into_iter()
        .map(|rows| {
            let mut features = Vec::with_capacity(rows.len() * dataset.n_features);
            let mut labels = Vec::with_capacity(rows.len());
            for &r in &rows {
                features.extend_from_slice(dataset.row(r));
                labels.push(dataset.labels[r]);
            }
            let train_count = ((rows.len() as f64 * 0.8).floor() as usize).max(1);
            Shard::new(features, labels, dataset.n_features, train_count).map_err(SimError::from)
        })
        .collect()
}

fn label_skew_lists(
    dataset: &Dataset,
    n_shards: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>, SimError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for (row, &label) in dataset.labels.iter().enumerate() {
        by_class[label].push(row);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n_shards];
    for rows in &by_class {
        let proportions: Vec<f64> = if n_shards == 1 {
            vec![1.0]
        } else {
            Dirichlet::new_with_size(alpha, n_shards)
                .map_err(|e| SimError::InvalidSpec(format!("dirichlet: {e}")))?
                .sample(&mut rng)
        };
        // Largest-remainder apportionment: exact total, deterministic ties.
        let quotas: Vec<f64> = proportions.iter().map(|p| p * rows.len() as f64).collect();
        let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = shares.iter().sum();
        let mut order: Vec<usize> = (0..n_shards).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for extra in 0..rows.len().saturating_sub(assigned) {
            shares[order[extra % n_shards]] += 1;
        }

        let mut cursor = 0;
        for (list, &share) in lists.iter_mut().zip(&shares) {
            list.extend_from_slice(&rows[cursor..cursor + share]);
            cursor += share;
        }
    }

    // Heavy skew can starve a shard entirely; every client needs at least
    // one row, so repair by taking one from the currently largest shard.
    while let Some(empty) = lists.iter().position(|l| l.is_empty()) {
        let donor = (0..n_shards)
            .max_by(|&a, &b| lists[a].len().cmp(&lists[b].len()).then(b.cmp(&a)))
            .expect("at least one shard");
        let moved = lists[donor].pop().expect("donor has rows");
        lists[empty].push(moved);
    }

    // Shuffle inside each shard so the train/test boundary is not aligned
    // with class blocks.
    for (i, list) in lists.iter_mut().enumerate() {
        list.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed, i as u64, "shard",
        )));
    }
    Ok(lists)
}

/// Run one local fit under a hardware profile: the profile's rates ride in
/// on the instruction config, the client accounts virtual time and energy,
/// and both come back alongside the result.
pub fn simulate_fit(
    profile: &ClientProfile,
    client: &mut LocalClient,
    parameters: &Parameters,
    config: &ConfigMap,
) -> Result<(crate::protocol::FitRes, f64, f64), SimError> {
    profile.check_rates()?;
    let mut cfg = config.clone();
    cfg.insert_float("seconds_per_sample", profile.seconds_per_sample);
    cfg.insert_float("power_watts", profile.power_watts);
    let ins = FitIns {
        parameters: parameters.clone(),
        config: cfg,
    };
    let res = client.fit(&ins)?;
    let virtual_time_s = res.metrics.get_float("virtual_time_s").unwrap_or(0.0);
    let energy_j = res.metrics.get_float("energy_J").unwrap_or(0.0);
    Ok((res, virtual_time_s, energy_j))
}

/// A synchronous round lasts as long as its slowest client.
pub fn round_time(client_times: &[f64]) -> Result<f64, SimError> {
    if client_times.is_empty() {
        return Err(SimError::EmptyList);
    }
    Ok(client_times
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Fleet energy is additive across clients.
pub fn round_energy(client_energies: &[f64]) -> Result<f64, SimError> {
    if client_energies.is_empty() {
        return Err(SimError::EmptyList);
    }
    Ok(client_energies.iter().sum())
}

/// Serialize a shard: a config map `{train_count}` followed by two tensors
/// — features `[rows, columns]` and labels `[rows]` as integral floats.
pub fn write_shard_file(path: &Path, shard: &Shard) -> Result<(), SimError> {
    let rows = u32::try_from(shard.len())
        .map_err(|_| SimError::InvalidSpec("shard too large for file format".into()))?;
    let cols = u32::try_from(shard.n_features())
        .map_err(|_| SimError::InvalidSpec("shard too wide for file format".into()))?;
    let mut header = ConfigMap::new();
    header.insert_int("train_count", shard.train_count() as i64);

    let features = Tensor::new(vec![rows, cols], shard.features().to_vec())?;
    let labels = Tensor::new(
        vec![rows],
        shard.labels().iter().map(|&l| l as f64).collect(),
    )?;
    let mut bytes = encode_config(&header);
    bytes.extend_from_slice(&encode_parameters(&Parameters::new(vec![features, labels])));
    fs::write(path, bytes)?;
    Ok(())
}

/// Inverse of [`write_shard_file`], validating shapes, integral labels,
/// and the train boundary.
pub fn read_shard_file(path: &Path) -> Result<Shard, SimError> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let header = read_config(&mut r)?;
    let parameters = read_parameters(&mut r)?;
    r.finish()?;

    let train_count = header
        .get_int("train_count")
        .ok_or_else(|| SimError::MalformedShardFile("missing train_count".into()))?;
    let train_count = usize::try_from(train_count)
        .map_err(|_| SimError::MalformedShardFile(format!("train_count {train_count}")))?;
    let [features, labels] = parameters.tensors.as_slice() else {
        return Err(SimError::MalformedShardFile(format!(
            "expected 2 tensors, got {}",
            parameters.len()
        )));
    };
    let (&[rows, cols], &[label_rows]) = (features.shape(), labels.shape()) else {
        return Err(SimError::MalformedShardFile(format!(
            "unexpected tensor shapes {:?} and {:?}",
            features.shape(),
            labels.shape()
        )));
    };
    if rows != label_rows {
        return Err(SimError::MalformedShardFile(format!(
            "{rows} feature rows vs {label_rows} labels"
        )));
    }
    let labels: Vec<usize> = labels
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && v <= usize::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(SimError::MalformedShardFile(format!("label {v}")))
            }
        })
        .collect::<Result<_, _>>()?;
    Shard::new(features.data().to_vec(), labels, cols as usize, train_count).map_err(Into::into)
}

/// Rows of a dataset as order-independent fingerprints, for set equality.
#[cfg(test)]
fn row_fingerprints(features: &[f64], labels: &[usize], d: usize) -> Vec<Vec<u64>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut fp: Vec<u64> = features[i * d..(i + 1) * d]
                .iter()
                .map(|v| v.to_bits())
                .collect();
            fp.push(label as u64);
            fp
        })
        .collect()
}
