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

//! Accuracy-biased random walks over the ledger.
//!
//! A walk repeatedly scores every child of the current node with the
//! walker's local accuracy, turns the scores into weights with
//! [`child_weights`], and steps to a weighted-random child until it reaches a
//! tip. Tip selection runs two such walks; the baseline reference search runs
//! `ref_walks` of them and ranks the visited nodes by confidence and rating.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{DagLedger, NodeId};
use crate::rng::RngStream;

/// Where walks enter the ledger.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// `start_depth` uniform parent steps back from a uniformly random tip.
    #[default]
    TipAncestor,
    /// Always genesis. Keeps walks inside their own cluster's branch once the
    /// ledger has specialized.
    Genesis,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    /// Bias strength; 0 gives uniform transitions.
    pub alpha: f64,
    pub ref_walks: usize,
    /// Parent steps taken back from a random tip to find the walk entry point.
    /// Also the walk depth `d` of the energy model.
    pub start_depth: usize,
    pub start: StartRule,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            ref_walks: 5,
            start_depth: 15,
            start: StartRule::TipAncestor,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config("walk.alpha must be finite and >= 0".into()));
        }
        if self.ref_walks == 0 {
            return Err(Error::Config("walk.ref_walks must be >= 1".into()));
        }
        if self.start_depth == 0 {
            return Err(Error::Config("walk.start_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Transition weights `exp(alpha * normalized)` where `normalized` maps the
/// best accuracy to 0 and the worst to -1. Equal accuracies give equal weights.
pub fn child_weights(accuracies: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if accuracies.is_empty() {
        return Err(Error::Argument("child_weights needs at least one accuracy".into()));
    }
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    let span = max - min;
    Ok(accuracies
        .iter()
        .map(|&a| {
            let normalized = if span > 0.0 { (a - max) / span } else { 0.0 };
            (alpha * normalized).exp()
        })
        .collect())
}

/// Walks from `start` to a tip and returns every node visited, `start` first.
pub fn walk_path<F>(
    ledger: &DagLedger,
    start: NodeId,
    evaluator: &mut F,
    cfg: &WalkConfig,
    rng: &mut RngStream,
) -> Result<Vec<NodeId>>
where
    F: FnMut(NodeId) -> Result<f64>,
{
    let mut path = vec![start];
    let mut current = start;
    let mut scores = Vec::new();
    loop {
        let children = ledger.children(current)?;
        current = match children.len() {
            0 => return Ok(path),
            1 => *children.first().expect("nonempty"),
            _ => {
                scores.clear();
                for &child in children {
                    scores.push(evaluator(child)?);
                }
                let weights = child_weights(&scores, cfg.alpha)?;
                let pick = WeightedIndex::new(&weights)
                    .map_err(|e| Error::Argument(format!("walk weights: {e}")))?
                    .sample(rng);
                *children.iter().nth(pick).expect("index within children")
            }
        };
        path.push(current);
    }
}

/// Single accuracy-biased walk; returns the tip it reaches.
pub fn random_walk<F>(
    ledger: &DagLedger,
    start: NodeId,
    evaluator: &mut F,
    cfg: &WalkConfig,
    rng: &mut RngStream,
) -> Result<NodeId>
where
    F: FnMut(NodeId) -> Result<f64>,
{
    let path = walk_path(ledger, start, evaluator, cfg, rng)?;
    Ok(*path.last().expect("path holds start"))
}

/// Entry point for a walk. Under [`StartRule::TipAncestor`]: a uniformly
/// random tip, followed back `start_depth` steps through uniformly chosen
/// parents, stopping early at genesis. Draws nothing under `Genesis`.
pub fn walk_start(ledger: &DagLedger, cfg: &WalkConfig, rng: &mut RngStream) -> NodeId {
    if cfg.start == StartRule::Genesis {
        return NodeId::GENESIS;
    }
    let tips = ledger.tips();
    let mut node = *tips
        .iter()
        .nth(rng.random_range(0..tips.len()))
        .expect("ledger always has a tip");
    for _ in 0..cfg.start_depth {
        let parents = ledger.parents(node).expect("ledger nodes are valid");
        if parents.is_empty() {
            break;
        }
        node = parents[rng.random_range(0..parents.len())];
    }
    node
}

/// Two independent walks from a shared entry point. The tips may coincide.
pub fn select_two_tips<F>(
    ledger: &DagLedger,
    evaluator: &mut F,
    cfg: &WalkConfig,
    rng: &mut RngStream,
) -> Result<(NodeId, NodeId)>
where
    F: FnMut(NodeId) -> Result<f64>,
{
    let start = walk_start(ledger, cfg, rng);
    let first = random_walk(ledger, start, evaluator, cfg, rng)?;
    let second = random_walk(ledger, start, evaluator, cfg, rng)?;
    Ok((first, second))
}

/// Second-walk attempts before [`select_parents`] falls back to the tip's parent.
pub const DISTINCT_RETRIES: usize = 8;

/// Tip selection for a publish: like [`select_two_tips`], but once the ledger
/// holds more than the task node the two approvals must differ. The second
/// walk is repeated up to [`DISTINCT_RETRIES`] times; if it keeps reaching the
/// same tip, that tip's first parent is approved instead.
pub fn select_parents<F>(
    ledger: &DagLedger,
    evaluator: &mut F,
    cfg: &WalkConfig,
    rng: &mut RngStream,
) -> Result<(NodeId, NodeId)>
where
    F: FnMut(NodeId) -> Result<f64>,
{
    let start = walk_start(ledger, cfg, rng);
    let first = random_walk(ledger, start, evaluator, cfg, rng)?;
    let mut second = random_walk(ledger, start, evaluator, cfg, rng)?;
    if ledger.node_count() == 1 {
        return Ok((first, second));
    }
    for _ in 0..DISTINCT_RETRIES {
        if second != first {
            return Ok((first, second));
        }
        second = random_walk(ledger, start, evaluator, cfg, rng)?;
    }
    if second == first {
        second = ledger.parents(first)?[0];
    }
    Ok((first, second))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceChoice {
    pub node: NodeId,
    /// Number of walks whose path contained `node`.
    pub confidence: usize,
    /// Number of nodes approving `node` directly or transitively.
    pub rating: usize,
    pub paths: Vec<Vec<NodeId>>,
}

/// Baseline reference-model search over `cfg.ref_walks` walks.
pub fn reference_model<F>(
    ledger: &DagLedger,
    evaluator: &mut F,
    cfg: &WalkConfig,
    rng: &mut RngStream,
) -> Result<ReferenceChoice>
where
    F: FnMut(NodeId) -> Result<f64>,
{
    let start = walk_start(ledger, cfg, rng);
    let paths = (0..cfg.ref_walks)
        .map(|_| walk_path(ledger, start, evaluator, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let (node, confidence, rating) = rank_reference(ledger, &paths)?;
    Ok(ReferenceChoice {
        node,
        confidence,
        rating,
        paths,
    })
}

/// Picks the lexicographic maximum of `(confidence, rating, -id)` over the
/// visited nodes, preferring interior nodes, then any non-tip.
pub fn rank_reference(ledger: &DagLedger, paths: &[Vec<NodeId>]) -> Result<(NodeId, usize, usize)> {
    let mut confidence: BTreeMap<NodeId, usize> = BTreeMap::new();
    for path in paths {
        let mut seen: Vec<NodeId> = path.clone();
        seen.sort_unstable();
        seen.dedup();
        for n in seen {
            *confidence.entry(n).or_default() += 1;
        }
    }
    if confidence.is_empty() {
        return Err(Error::Argument("reference search recorded no nodes".into()));
    }
    let interior: Vec<NodeId> = confidence
        .keys()
        .copied()
        .filter(|&n| n != NodeId::GENESIS && !ledger.is_tip(n))
        .collect();
    let candidates = if !interior.is_empty() {
        interior
    } else {
        let non_tips: Vec<NodeId> = confidence.keys().copied().filter(|&n| !ledger.is_tip(n)).collect();
        if non_tips.is_empty() {
            confidence.keys().copied().collect()
        } else {
            non_tips
        }
    };

    let top = candidates.iter().map(|n| confidence[n]).max().expect("nonempty");
    let mut best: Option<(NodeId, usize)> = None;
    // candidates ascend by id, so strict comparison keeps the smallest id on ties
    for &n in candidates.iter().filter(|n| confidence[n] == top) {
        let rating = ledger.subtree_size(n)?;
        if best.is_none_or(|(_, r)| rating > r) {
            best = Some((n, rating));
        }
    }
    let (node, rating) = best.expect("at least one candidate");
    Ok((node, top, rating))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::ClientId;
    use crate::model::ParamVector;
    use crate::rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn w() -> ParamVector {
        ParamVector::zeros(1)
    }

    fn genesis() -> DagLedger {
        DagLedger::init(w(), 1).unwrap()
    }

    /// Node 1 with `k` tip children. The ledger only allows a duplicate
    /// genesis approval once, so this is the closest buildable star.
    fn fan(k: usize) -> DagLedger {
        let mut l = genesis();
        l.publish(w(), (NodeId(0), NodeId(0)), ClientId(0), 1).unwrap();
        for _ in 0..k {
            l.publish(w(), (NodeId(0), NodeId(1)), ClientId(0), 2).unwrap();
        }
        l
    }

    fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
        let total: usize = counts.iter().sum();
        let stat: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&o, &p)| {
                let e = p * total as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    fn star_frequencies(alpha: f64, trials: usize, seed: u64) -> Vec<usize> {
        let l = fan(3);
        let accs = [0.9, 0.6, 0.3];
        let cfg = WalkConfig {
            alpha,
            ..WalkConfig::default()
        };
        let mut r = rng::stream(seed, 0);
        let mut counts = vec![0; 3];
        let mut eval = |n: NodeId| Ok(accs[n.index() - 2]);
        for _ in 0..trials {
            let tip = random_walk(&l, NodeId(1), &mut eval, &cfg, &mut r).unwrap();
            counts[tip.index() - 2] += 1;
        }
        counts
    }

    #[test]
    fn weights_follow_normalized_exponent() {
        let got = child_weights(&[0.9, 0.6, 0.3], 1.0).unwrap();
        let want = [1.0, (-0.5f64).exp(), (-1.0f64).exp()];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((got[1] - 0.6065).abs() < 1e-4);
        assert!((got[2] - 0.3679).abs() < 1e-4);
        assert_eq!(child_weights(&[0.4, 0.4, 0.4], 7.0).unwrap(), vec![1.0; 3]);
        assert_eq!(child_weights(&[0.1, 0.8], 0.0).unwrap(), vec![1.0; 2]);
        assert!(matches!(child_weights(&[], 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn tip_start_returns_itself() {
        let mut l = genesis();
        l.publish(w(), (NodeId(0), NodeId(0)), ClientId(0), 1).unwrap();
        let mut r = rng::stream(0, 0);
        let mut calls = 0;
        let mut eval = |_n: NodeId| {
            calls += 1;
            Ok(0.5)
        };
        let tip = random_walk(&l, NodeId(1), &mut eval, &WalkConfig::default(), &mut r).unwrap();
        assert_eq!(tip, NodeId(1));
        assert_eq!(calls, 0);
    }

    #[test]
    fn chain_walk_reaches_the_end() {
        let mut l = genesis();
        l.publish(w(), (NodeId(0), NodeId(0)), ClientId(0), 1).unwrap();
        for i in 1..6 {
            l.publish(w(), (NodeId(i - 1), NodeId(i)), ClientId(0), i + 1).unwrap();
        }
        for alpha in [0.0, 1.0, 50.0] {
            let cfg = WalkConfig { alpha, ..WalkConfig::default() };
            let mut eval = |n: NodeId| Ok(n.0 as f64);
            let tip = random_walk(&l, NodeId(0), &mut eval, &cfg, &mut rng::stream(1, 0)).unwrap();
            assert_eq!(tip, NodeId(6));
        }
    }

    #[test]
    fn unbiased_walk_is_uniform() {
        let counts = star_frequencies(0.0, 10_000, 21);
        let p = chi_square_p(&counts, &[1.0 / 3.0; 3]);
        assert!(p > 0.01, "counts {counts:?} p {p}");
    }

    #[test]
    fn biased_walk_matches_closed_form() {
        let counts = star_frequencies(10.0, 10_000, 22);
        let raw = [1.0, (-5.0f64).exp(), (-10.0f64).exp()];
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / z).collect();
        // the e^-10 cell expects < 1 hit; pool it with the middle cell
        let pooled_counts = [counts[0], counts[1] + counts[2]];
        let pooled_probs = [probs[0], probs[1] + probs[2]];
        let p = chi_square_p(&pooled_counts, &pooled_probs);
        assert!(p > 0.01, "counts {counts:?} p {p}");
    }

    #[test]
    fn top_child_probability_grows_with_alpha() {
        let mut last = 0;
        for alpha in [0.0, 1.0, 5.0, 10.0] {
            let top = star_frequencies(alpha, 10_000, 23)[0];
            assert!(top >= last, "alpha {alpha}: {top} < {last}");
            last = top;
        }
    }

    #[test]
    fn two_tips_on_fresh_ledger_are_genesis() {
        let l = genesis();
        let mut eval = |_n: NodeId| Ok(0.0);
        let tips = select_two_tips(&l, &mut eval, &WalkConfig::default(), &mut rng::stream(0, 0)).unwrap();
        assert_eq!(tips, (NodeId(0), NodeId(0)));
    }

    #[test]
    fn unbiased_tip_pairs_are_uniform() {
        let l = fan(2);
        let cfg = WalkConfig { alpha: 0.0, ..WalkConfig::default() };
        let mut r = rng::stream(5, 0);
        let mut counts = [0usize; 4];
        let mut eval = |_n: NodeId| Ok(0.5);
        for _ in 0..10_000 {
            let (a, b) = select_two_tips(&l, &mut eval, &cfg, &mut r).unwrap();
            counts[(a.index() - 2) * 2 + (b.index() - 2)] += 1;
        }
        let p = chi_square_p(&counts, &[0.25; 4]);
        assert!(p > 0.01, "counts {counts:?} p {p}");
    }

    #[test]
    fn parents_are_distinct_after_bootstrap() {
        let l = genesis();
        let mut eval = |_n: NodeId| Ok(0.0);
        let mut r = rng::stream(0, 0);
        assert_eq!(
            select_parents(&l, &mut eval, &WalkConfig::default(), &mut r).unwrap(),
            (NodeId(0), NodeId(0))
        );

        // chain: every walk ends at the single tip, so the fallback kicks in
        let mut chain = genesis();
        chain.publish(w(), (NodeId(0), NodeId(0)), ClientId(0), 1).unwrap();
        chain.publish(w(), (NodeId(0), NodeId(1)), ClientId(0), 2).unwrap();
        let (a, b) = select_parents(&chain, &mut eval, &WalkConfig::default(), &mut r).unwrap();
        assert_eq!((a, b), (NodeId(2), NodeId(0)));

        let l = fan(3);
        for _ in 0..200 {
            let (a, b) = select_parents(&l, &mut eval, &WalkConfig::default(), &mut r).unwrap();
            assert_ne!(a, b);
            assert!(l.is_tip(a) && l.is_tip(b));
        }
    }

    #[test]
    fn walk_start_respects_depth() {
        let mut l = genesis();
        l.publish(w(), (NodeId(0), NodeId(0)), ClientId(0), 1).unwrap();
        for i in 1..30 {
            l.publish(w(), (NodeId(i - 1), NodeId(i)), ClientId(0), i + 1).unwrap();
        }
        let cfg = WalkConfig { start_depth: 3, ..WalkConfig::default() };
        let mut r = rng::stream(2, 0);
        for _ in 0..50 {
            let s = walk_start(&l, &cfg, &mut r);
            // each step goes back one or two ids along this braid
            assert!((24..=27).contains(&s.0), "start {s}");
        }
        let deep = WalkConfig { start_depth: 100, ..WalkConfig::default() };
        assert_eq!(walk_start(&l, &deep, &mut r), NodeId::GENESIS);
        let genesis = WalkConfig { start: StartRule::Genesis, ..WalkConfig::default() };
        assert_eq!(walk_start(&l, &genesis, &mut r), NodeId::GENESIS);
    }

    #[test]
    fn reference_on_chain_is_the_interior_node() {
        let mut l = genesis();
        l.publish(w(), (NodeId(0), NodeId(0)), ClientId(0), 1).unwrap();
        l.publish(w(), (NodeId(0), NodeId(1)), ClientId(0), 2).unwrap();
        let mut eval = |_n: NodeId| Ok(0.5);
        let choice =
            reference_model(&l, &mut eval, &WalkConfig::default(), &mut rng::stream(0, 0)).unwrap();
        // genesis also links straight to 2, so not every walk passes through 1
        assert_eq!(choice.node, NodeId(1));
        let through = choice.paths.iter().filter(|p| p.contains(&NodeId(1))).count();
        assert_eq!(choice.confidence, through);
        assert_eq!(choice.rating, 1);
    }

    #[test]
    fn reference_on_fresh_ledger_is_genesis() {
        let l = genesis();
        let mut eval = |_n: NodeId| Ok(0.5);
        let choice =
            reference_model(&l, &mut eval, &WalkConfig::default(), &mut rng::stream(0, 0)).unwrap();
        assert_eq!(choice.node, NodeId::GENESIS);
    }

    #[test]
    fn reference_on_diamond_matches_brute_force() {
        // diamond {2, 3} <- 4, both sides approving 0 and 1
        let mut l = genesis();
        l.publish(w(), (NodeId(0), NodeId(0)), ClientId(0), 1).unwrap();
        l.publish(w(), (NodeId(0), NodeId(1)), ClientId(1), 2).unwrap();
        l.publish(w(), (NodeId(0), NodeId(1)), ClientId(2), 2).unwrap();
        l.publish(w(), (NodeId(2), NodeId(3)), ClientId(3), 3).unwrap();
        for seed in 0..30 {
            let mut eval = |_n: NodeId| Ok(0.5);
            let choice =
                reference_model(&l, &mut eval, &WalkConfig::default(), &mut rng::stream(seed, 0))
                    .unwrap();
            // brute force over the recorded paths
            let mut best: Option<(usize, usize, i64)> = None;
            let mut best_node = NodeId(0);
            for n in 1..l.node_count() as u64 {
                let node = NodeId(n);
                if l.is_tip(node) {
                    continue;
                }
                let conf = choice.paths.iter().filter(|p| p.contains(&node)).count();
                if conf == 0 {
                    continue;
                }
                let key = (conf, l.subtree_size(node).unwrap(), -(n as i64));
                if best.is_none_or(|b| key > b) {
                    best = Some(key);
                    best_node = node;
                }
            }
            assert_eq!(choice.node, best_node, "seed {seed}");
            assert!(!l.is_tip(choice.node));
            let c2 = choice.paths.iter().filter(|p| p.contains(&NodeId(2))).count();
            let c3 = choice.paths.iter().filter(|p| p.contains(&NodeId(3))).count();
            assert_eq!(c2 + c3, WalkConfig::default().ref_walks);
            assert_eq!(l.subtree_size(NodeId(2)).unwrap(), l.subtree_size(NodeId(3)).unwrap());
        }
    }
}
