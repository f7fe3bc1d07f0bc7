// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Synthetic clustered Non-IID classification tasks.
//!
//! Each class is a Gaussian blob around its own centroid. Clients belong to
//! one cluster and only ever see the classes of that cluster, which is the
//! property implicit specialization relies on.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::ClientId;
use crate::matrix;
use crate::model::DatasetShard;
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterTaskConfig {
    pub num_clusters: usize,
    pub clients_per_cluster: usize,
    /// Disjoint label sets, one per cluster.
    pub classes_per_cluster: Vec<Vec<usize>>,
    pub input_dim: usize,
    pub samples_per_client: usize,
    /// Minimum distance between class centroids.
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ClusterTaskConfig {
    fn default() -> Self {
        Self {
            num_clusters: 3,
            clients_per_cluster: 10,
            classes_per_cluster: vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]],
            input_dim: 16,
            samples_per_client: 200,
            class_separation: 3.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl ClusterTaskConfig {
    pub fn num_classes(&self) -> usize {
        self.classes_per_cluster
            .iter()
            .flatten()
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn num_clients(&self) -> usize {
        self.num_clusters * self.clients_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_clusters == 0 || self.clients_per_cluster == 0 {
            return fail("task needs at least one cluster and one client per cluster".into());
        }
        if self.classes_per_cluster.len() != self.num_clusters {
            return fail(format!(
                "task.classes_per_cluster has {} sets for {} clusters",
                self.classes_per_cluster.len(),
                self.num_clusters
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for set in &self.classes_per_cluster {
            if set.is_empty() {
                return fail("task.classes_per_cluster contains an empty label set".into());
            }
            for &label in set {
                if !seen.insert(label) {
                    return fail(format!("label {label} appears in more than one cluster"));
                }
            }
        }
        if seen.len() < 2 {
            return fail("task needs at least 2 classes overall".into());
        }
        if self.input_dim == 0 {
            return fail("task.input_dim must be positive".into());
        }
        if self.samples_per_client < 2 {
            return fail("task.samples_per_client must be >= 2 for a train/test split".into());
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return fail("task.class_separation must be positive".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail("task.noise_sigma must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub id: ClientId,
    pub cluster: usize,
    pub train: DatasetShard,
    pub test: DatasetShard,
}

/// Number of held-out rows for a client with `n` samples (9:1 split).
pub fn test_rows(n: usize) -> usize {
    ((n as f64 / 10.0).round() as usize).clamp(1, n - 1)
}

/// Class centroids with pairwise distance at least `class_separation`.
pub fn centroids(cfg: &ClusterTaskConfig) -> Vec<Vec<f64>> {
    let mut r = rng::stream(cfg.seed, purpose::DATA);
    let mut half_width = cfg.class_separation;
    let mut placed: Vec<Vec<f64>> = Vec::new();
    let mut failures = 0;
    while placed.len() < cfg.num_classes() {
        let candidate: Vec<f64> = (0..cfg.input_dim)
            .map(|_| r.random_range(-half_width..half_width))
            .collect();
        let far_enough = placed
            .iter()
            .all(|c| distance(c, &candidate) >= cfg.class_separation);
        if far_enough {
            placed.push(candidate);
            failures = 0;
        } else {
            failures += 1;
            if failures == 256 {
                half_width *= 1.5;
                failures = 0;
            }
        }
    }
    placed
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn generate(cfg: &ClusterTaskConfig) -> Result<Vec<ClientData>> {
    cfg.validate()?;
    let centers = centroids(cfg);
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("task.noise_sigma: {e}")))?;
    let n = cfg.samples_per_client;
    let n_test = test_rows(n);

    let mut clients = Vec::with_capacity(cfg.num_clients());
    for id in 0..cfg.num_clients() {
        let cluster = id / cfg.clients_per_cluster;
        let labels_available = &cfg.classes_per_cluster[cluster];
        let mut r = rng::stream(cfg.seed, purpose::DATA_CLIENT_BASE + id as u64);

        let mut rows: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| {
                let label = labels_available[r.random_range(0..labels_available.len())];
                let x = centers[label].iter().map(|c| c + noise.sample(&mut r)).collect();
                (x, label)
            })
            .collect();
        rows.shuffle(&mut r);
        let test_part = rows.split_off(n - n_test);

        clients.push(ClientData {
            id: ClientId(id as u32),
            cluster,
            train: to_shard(rows, cfg.input_dim)?,
            test: to_shard(test_part, cfg.input_dim)?,
        });
    }
    Ok(clients)
}

fn to_shard(rows: Vec<(Vec<f64>, usize)>, input_dim: usize) -> Result<DatasetShard> {
    let mut features = Vec::with_capacity(rows.len() * input_dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (x, y) in rows {
        features.extend(x);
        labels.push(y);
    }
    DatasetShard::new(features, labels, input_dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub client: ClientId,
    pub cluster: usize,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Writes `dataset.bin` (features plus a trailing label column, train rows
/// then test rows per client) and `dataset.json` (the row manifest).
pub fn export(clients: &[ClientData], dir: &Path) -> Result<()> {
    let input_dim = clients
        .first()
        .map(|c| c.train.input_dim())
        .ok_or_else(|| Error::Argument("no clients to export".into()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut manifest = Vec::with_capacity(clients.len());
    for c in clients {
        for shard in [&c.train, &c.test] {
            for (i, &y) in shard.labels().iter().enumerate() {
                let mut row = shard.row(i).to_vec();
                row.push(y as f64);
                rows.push(row);
            }
        }
        manifest.push(ManifestEntry {
            client: c.id,
            cluster: c.cluster,
            train_rows: c.train.len(),
            test_rows: c.test.len(),
        });
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    matrix::write_matrix(BufWriter::new(File::create(dir.join("dataset.bin"))?), input_dim + 1, &refs)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("dataset.json"))?), &manifest)?;
    Ok(())
}

pub fn import(dir: &Path) -> Result<Vec<ClientData>> {
    let manifest: Vec<ManifestEntry> =
        serde_json::from_reader(BufReader::new(File::open(dir.join("dataset.json"))?))?;
    let (cols, values) = matrix::read_matrix(BufReader::new(File::open(dir.join("dataset.bin"))?))?;
    if cols < 2 {
        return Err(Error::Argument("dataset matrix needs a feature and a label column".into()));
    }
    let input_dim = cols - 1;
    let mut rows = values.chunks_exact(cols);
    let mut take = |count: usize| -> Result<DatasetShard> {
        let mut part = Vec::with_capacity(count);
        for _ in 0..count {
            let row = rows
                .next()
                .ok_or_else(|| Error::Argument("dataset matrix shorter than manifest".into()))?;
            part.push((row[..input_dim].to_vec(), row[input_dim] as usize));
        }
        to_shard(part, input_dim)
    };
    manifest
        .into_iter()
        .map(|m| {
            Ok(ClientData {
                id: m.client,
                cluster: m.cluster,
                train: take(m.train_rows)?,
                test: take(m.test_rows)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, ModelSpec, ParamVector};
    use std::collections::BTreeSet;

    fn small() -> ClusterTaskConfig {
        ClusterTaskConfig {
            clients_per_cluster: 2,
            samples_per_client: 40,
            ..ClusterTaskConfig::default()
        }
    }

    #[test]
    fn three_cluster_layout() {
        let cfg = ClusterTaskConfig {
            samples_per_client: 30,
            ..ClusterTaskConfig::default()
        };
        let clients = generate(&cfg).unwrap();
        assert_eq!(clients.len(), 30);
        let first: BTreeSet<usize> = clients[0]
            .train
            .labels()
            .iter()
            .chain(clients[0].test.labels())
            .copied()
            .collect();
        assert!(first.is_subset(&BTreeSet::from([0, 1, 2, 3])));
        for c in &clients {
            let allowed: BTreeSet<usize> = cfg.classes_per_cluster[c.cluster].iter().copied().collect();
            assert!(c.train.labels().iter().chain(c.test.labels()).all(|y| allowed.contains(y)));
            assert_eq!(c.cluster, c.id.0 as usize / 10);
        }
    }

    #[test]
    fn label_support_is_the_cluster_set() {
        let clients = generate(&ClusterTaskConfig::default()).unwrap();
        for c in &clients {
            let support: BTreeSet<usize> = c.train.labels().iter().chain(c.test.labels()).copied().collect();
            let want: BTreeSet<usize> = ClusterTaskConfig::default().classes_per_cluster[c.cluster]
                .iter()
                .copied()
                .collect();
            assert_eq!(support, want);
        }
    }

    #[test]
    fn two_clusters_have_equal_samples() {
        let cfg = ClusterTaskConfig {
            num_clusters: 2,
            classes_per_cluster: vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]],
            ..small()
        };
        let clients = generate(&cfg).unwrap();
        let per_cluster = |k: usize| -> usize {
            clients
                .iter()
                .filter(|c| c.cluster == k)
                .map(|c| c.train.len() + c.test.len())
                .sum()
        };
        assert_eq!(per_cluster(0), per_cluster(1));
    }

    #[test]
    fn nine_to_one_split() {
        let cfg = ClusterTaskConfig { samples_per_client: 10, ..small() };
        let clients = generate(&cfg).unwrap();
        assert!(clients.iter().all(|c| c.train.len() == 9 && c.test.len() == 1));
        let cfg = ClusterTaskConfig { samples_per_client: 200, ..small() };
        assert_eq!(generate(&cfg).unwrap()[0].test.len(), 20);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = ClusterTaskConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn centroids_are_separated() {
        let cfg = ClusterTaskConfig { input_dim: 2, class_separation: 3.0, ..small() };
        let c = centroids(&cfg);
        for i in 0..c.len() {
            for j in 0..i {
                assert!(distance(&c[i], &c[j]) >= 3.0);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let overlapping = ClusterTaskConfig {
            classes_per_cluster: vec![vec![0, 1], vec![1, 2], vec![3]],
            ..small()
        };
        assert!(matches!(generate(&overlapping), Err(Error::Config(_))));
        let wrong_count = ClusterTaskConfig { num_clusters: 2, ..small() };
        assert!(matches!(generate(&wrong_count), Err(Error::Config(_))));
        let single_class = ClusterTaskConfig {
            num_clusters: 1,
            classes_per_cluster: vec![vec![0]],
            ..small()
        };
        assert!(matches!(generate(&single_class), Err(Error::Config(_))));
    }

    #[test]
    fn separable_clusters_train_quickly() {
        let cfg = small();
        let clients = generate(&cfg).unwrap();
        let spec = ModelSpec::softmax(cfg.input_dim, cfg.num_classes());
        for cluster in 0..cfg.num_clusters {
            let rows: Vec<&ClientData> = clients.iter().filter(|c| c.cluster == cluster).collect();
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            for c in rows {
                feats.extend_from_slice(c.train.features());
                labels.extend_from_slice(c.train.labels());
            }
            let shard = DatasetShard::new(feats, labels, cfg.input_dim).unwrap();
            let mut w = ParamVector::zeros(spec.param_count());
            for _ in 0..200 {
                let g = model::gradient(&spec, &w, &shard).unwrap();
                w = w.difference(&g.scaled(0.1).unwrap()).unwrap();
            }
            assert!(model::accuracy(&spec, &w, &shard).unwrap() >= 0.95);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clients = generate(&small()).unwrap();
        export(&clients, dir.path()).unwrap();
        assert_eq!(import(dir.path()).unwrap(), clients);
    }
}
