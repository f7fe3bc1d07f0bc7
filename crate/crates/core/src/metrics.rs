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

//! Specialization and performance metrics.
//!
//! Specialization is measured on the client-level approval graph: an
//! undirected weighted graph where every approval between two published
//! nodes adds weight 1 between their publishers.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{ClientId, DagLedger, NodeId};
use crate::model::{self, DatasetShard, ModelSpec};
use crate::rng::{self, RngStream};
use crate::walk::{self, WalkConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApprovalGraph {
    vertices: BTreeSet<ClientId>,
    /// Keyed by `(min, max)`; self-loops have equal endpoints.
    edges: BTreeMap<(ClientId, ClientId), f64>,
}

impl ApprovalGraph {
    pub fn add_edge(&mut self, a: ClientId, b: ClientId, weight: f64) {
        self.vertices.insert(a);
        self.vertices.insert(b);
        *self.edges.entry((a.min(b), a.max(b))).or_default() += weight;
    }

    pub fn vertices(&self) -> &BTreeSet<ClientId> {
        &self.vertices
    }

    pub fn edges(&self) -> &BTreeMap<(ClientId, ClientId), f64> {
        &self.edges
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Weighted degree; a self-loop contributes twice its weight.
    fn degrees(&self) -> BTreeMap<ClientId, f64> {
        let mut deg: BTreeMap<ClientId, f64> = self.vertices.iter().map(|&v| (v, 0.0)).collect();
        for (&(a, b), &w) in &self.edges {
            *deg.get_mut(&a).expect("endpoint") += w;
            *deg.get_mut(&b).expect("endpoint") += w;
        }
        deg
    }
}

/// Approval graph over nodes published in `rounds`. Approvals of the task
/// node are skipped.
pub fn approval_graph(ledger: &DagLedger, rounds: RangeInclusive<u64>) -> ApprovalGraph {
    let mut g = ApprovalGraph::default();
    for tx in ledger.nodes().iter().filter(|t| rounds.contains(&t.round)) {
        let Some(publisher) = tx.publisher else { continue };
        for &p in &tx.parents {
            if p == NodeId::GENESIS {
                continue;
            }
            if let Some(parent_publisher) = ledger.nodes()[p.index()].publisher {
                g.add_edge(publisher, parent_publisher, 1.0);
            }
        }
    }
    g
}

/// Newman modularity of `partition` on `g`; 0 for an empty graph.
pub fn modularity(g: &ApprovalGraph, partition: &BTreeMap<ClientId, usize>) -> Result<f64> {
    let total = g.total_weight();
    if total == 0.0 {
        return Ok(0.0);
    }
    let community = |v: &ClientId| {
        partition
            .get(v)
            .copied()
            .ok_or_else(|| Error::Argument(format!("client {v} has no community")))
    };
    let mut inside: BTreeMap<usize, f64> = BTreeMap::new();
    let mut degree: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(a, b), &w) in &g.edges {
        let (ca, cb) = (community(&a)?, community(&b)?);
        if ca == cb {
            *inside.entry(ca).or_default() += w;
        }
    }
    for (v, d) in g.degrees() {
        *degree.entry(community(&v)?).or_default() += d;
    }
    Ok(degree
        .iter()
        .map(|(c, d)| inside.get(c).copied().unwrap_or(0.0) / total - (d / (2.0 * total)).powi(2))
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Communities {
    /// Community labels are `0..module_count`, numbered by smallest member.
    pub partition: BTreeMap<ClientId, usize>,
    pub modularity: f64,
    pub module_count: usize,
}

/// Louvain-style modularity maximization. `rng` fixes the vertex visiting
/// order; identical inputs give identical partitions.
pub fn detect_communities(g: &ApprovalGraph, rng: &mut RngStream) -> Result<Communities> {
    let vertices: Vec<ClientId> = g.vertices.iter().copied().collect();
    if vertices.is_empty() {
        return Err(Error::Argument("cannot detect communities in an empty graph".into()));
    }
    let position: BTreeMap<ClientId, usize> = vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut level = Level::new(vertices.len());
    for (&(a, b), &w) in &g.edges {
        level.add(position[&a], position[&b], w);
    }

    // membership[v] = current community of original vertex v
    let mut membership: Vec<usize> = (0..vertices.len()).collect();
    loop {
        let (assignment, moved) = level.local_moving(rng);
        if !moved {
            break;
        }
        let (relabeled, count) = relabel(&assignment);
        for m in membership.iter_mut() {
            *m = relabeled[*m];
        }
        level = level.aggregate(&relabeled, count);
    }

    let (labels, module_count) = relabel(&membership);
    let mut partition: BTreeMap<ClientId, usize> =
        vertices.iter().zip(&labels).map(|(&v, &c)| (v, c)).collect();
    let mut q = modularity(g, &partition)?;
    let mut module_count = module_count;
    if q < 0.0 {
        partition.values_mut().for_each(|c| *c = 0);
        q = 0.0;
        module_count = 1;
    }
    Ok(Communities {
        partition,
        modularity: q,
        module_count,
    })
}

/// Renumbers labels densely in order of first appearance.
fn relabel(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// One level of the Louvain hierarchy.
struct Level {
    /// Neighbor weights excluding self-loops.
    adjacency: Vec<BTreeMap<usize, f64>>,
    self_loops: Vec<f64>,
    two_m: f64,
}

impl Level {
    fn new(n: usize) -> Self {
        Self {
            adjacency: vec![BTreeMap::new(); n],
            self_loops: vec![0.0; n],
            two_m: 0.0,
        }
    }

    fn add(&mut self, a: usize, b: usize, w: f64) {
        if a == b {
            self.self_loops[a] += w;
        } else {
            *self.adjacency[a].entry(b).or_default() += w;
            *self.adjacency[b].entry(a).or_default() += w;
        }
        self.two_m += 2.0 * w;
    }

    fn degree(&self, v: usize) -> f64 {
        self.adjacency[v].values().sum::<f64>() + 2.0 * self.self_loops[v]
    }

    /// Greedy single-vertex moves until no move improves modularity.
    fn local_moving(&self, rng: &mut RngStream) -> (Vec<usize>, bool) {
        let n = self.adjacency.len();
        let mut community: Vec<usize> = (0..n).collect();
        let degrees: Vec<f64> = (0..n).map(|v| self.degree(v)).collect();
        let mut totals = degrees.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut any_move = false;
        if self.two_m == 0.0 {
            return (community, false);
        }

        loop {
            let mut improved = false;
            for &v in &order {
                let home = community[v];
                let k = degrees[v];
                let mut links: BTreeMap<usize, f64> = BTreeMap::new();
                for (&u, &w) in &self.adjacency[v] {
                    *links.entry(community[u]).or_default() += w;
                }
                totals[home] -= k;
                let gain = |c: usize, links_to: f64| links_to - totals[c] * k / self.two_m;
                let mut best = home;
                let mut best_gain = gain(home, links.get(&home).copied().unwrap_or(0.0));
                for (&c, &l) in &links {
                    let g = gain(c, l);
                    if g > best_gain + 1e-12 {
                        best = c;
                        best_gain = g;
                    }
                }
                totals[best] += k;
                if best != home {
                    community[v] = best;
                    improved = true;
                    any_move = true;
                }
            }
            if !improved {
                break;
            }
        }
        (community, any_move)
    }

    fn aggregate(&self, community: &[usize], count: usize) -> Level {
        let mut next = Level::new(count);
        for v in 0..self.adjacency.len() {
            let cv = community[v];
            if self.self_loops[v] > 0.0 {
                next.add(cv, cv, self.self_loops[v]);
            }
            for (&u, &w) in &self.adjacency[v] {
                // each undirected edge is stored twice; add it once
                if u > v {
                    next.add(cv, community[u], w);
                }
            }
        }
        next
    }
}

/// Share of approval weight between distinct clients of the same cluster.
/// Self-approvals are ignored; an empty graph counts as fully pure.
pub fn approval_pureness(g: &ApprovalGraph, truth: &BTreeMap<ClientId, usize>) -> Result<f64> {
    let mut same = 0.0;
    let mut all = 0.0;
    for (&(a, b), &w) in &g.edges {
        if a == b {
            continue;
        }
        let cluster = |v: ClientId| {
            truth
                .get(&v)
                .copied()
                .ok_or_else(|| Error::Argument(format!("client {v} has no ground-truth cluster")))
        };
        if cluster(a)? == cluster(b)? {
            same += w;
        }
        all += w;
    }
    Ok(if all == 0.0 { 1.0 } else { same / all })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationScore {
    pub mean_accuracy: f64,
    pub mean_loss: f64,
    pub sampled: usize,
}

/// Samples `ceil(sample_fraction * n)` clients; each selects two tips, averages
/// them and scores the average on its own test shard.
pub fn evaluate_population(
    spec: &ModelSpec,
    ledger: &DagLedger,
    clients: &[(ClientId, &DatasetShard)],
    sample_fraction: f64,
    walk_cfg: &WalkConfig,
    rng: &mut RngStream,
) -> Result<PopulationScore> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::Argument(format!("sample fraction {sample_fraction} outside (0, 1]")));
    }
    if clients.is_empty() {
        return Err(Error::Argument("no clients to evaluate".into()));
    }
    let mut sorted = clients.to_vec();
    sorted.sort_by_key(|(id, _)| *id);
    let count = ((sample_fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let round_seed: u64 = rng.random();
    let mut picked: Vec<usize> = index::sample(rng, sorted.len(), count).into_vec();
    picked.sort_unstable();

    let mut acc_sum = 0.0;
    let mut loss_sum = 0.0;
    for i in picked {
        let (id, test) = sorted[i];
        let mut walker = rng::stream(round_seed, u64::from(id.0));
        let mut evaluator = |n: NodeId| model::accuracy(spec, ledger.payload(n)?, test);
        let (a, b) = walk::select_two_tips(ledger, &mut evaluator, walk_cfg, &mut walker)?;
        let avg = model::average(ledger.payload(a)?, ledger.payload(b)?)?;
        acc_sum += model::accuracy(spec, &avg, test)?;
        loss_sum += model::loss(spec, &avg, test)?;
    }
    Ok(PopulationScore {
        mean_accuracy: acc_sum / count as f64,
        mean_loss: loss_sum / count as f64,
        sampled: count,
    })
}

/// Per-round simulation output. Evaluation and specialization columns are
/// only filled on evaluation rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub trained: usize,
    pub published: usize,
    pub publish_rate: f64,
    pub nodes: usize,
    pub mean_accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
    pub modularity: Option<f64>,
    pub modules: Option<usize>,
    pub pureness: Option<f64>,
    /// Cumulative energy across all updates so far.
    pub energy_total: f64,
    /// Cumulative reference-search energy so far.
    pub energy_reference: f64,
    /// Summed update time of this round.
    pub round_time: f64,
}

pub const ROUND_COLUMNS: [&str; 13] = [
    "round",
    "trained",
    "published",
    "publish_rate",
    "nodes",
    "mean_accuracy",
    "mean_loss",
    "modularity",
    "modules",
    "pureness",
    "energy_total",
    "energy_reference",
    "round_time",
];

pub fn write_rounds_csv<W: std::io::Write>(records: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(ROUND_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
