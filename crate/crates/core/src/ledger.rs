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

//! Append-only DAG ledger shared by all simulated clients.
//!
//! Node 0 is the task (genesis) node carrying the initial model. Every later
//! node approves exactly two earlier nodes, so acyclicity holds by
//! construction. The tips set is maintained incrementally and always equals
//! the set of nodes without children.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix;
use crate::model::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const GENESIS: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transaction {
    pub id: NodeId,
    /// Empty for genesis, exactly two entries otherwise.
    pub parents: Vec<NodeId>,
    pub payload: ParamVector,
    /// `None` for the task node.
    pub publisher: Option<ClientId>,
    pub round: u64,
}

/// One line of the NDJSON snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub id: NodeId,
    pub parents: Vec<NodeId>,
    pub publisher: Option<ClientId>,
    pub round: u64,
}

#[derive(Clone, Debug)]
pub struct DagLedger {
    nodes: Vec<Transaction>,
    children: Vec<BTreeSet<NodeId>>,
    tips: BTreeSet<NodeId>,
    dimension: usize,
}

impl DagLedger {
    /// Creates a ledger holding only the task node.
    pub fn init(genesis_params: ParamVector, expected_dim: usize) -> Result<Self> {
        if genesis_params.len() != expected_dim {
            return Err(Error::Config(format!(
                "genesis model has {} parameters, model spec expects {expected_dim}",
                genesis_params.len()
            )));
        }
        genesis_params.check_finite()?;
        Ok(Self {
            nodes: vec![Transaction {
                id: NodeId::GENESIS,
                parents: Vec::new(),
                payload: genesis_params,
                publisher: None,
                round: 0,
            }],
            children: vec![BTreeSet::new()],
            tips: BTreeSet::from([NodeId::GENESIS]),
            dimension: expected_dim,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn tips(&self) -> &BTreeSet<NodeId> {
        &self.tips
    }

    pub fn is_tip(&self, n: NodeId) -> bool {
        self.tips.contains(&n)
    }

    pub fn nodes(&self) -> &[Transaction] {
        &self.nodes
    }

    pub fn node(&self, n: NodeId) -> Result<&Transaction> {
        self.nodes.get(n.index()).ok_or(Error::InvalidReference(n))
    }

    pub fn payload(&self, n: NodeId) -> Result<&ParamVector> {
        Ok(&self.node(n)?.payload)
    }

    pub fn children(&self, n: NodeId) -> Result<&BTreeSet<NodeId>> {
        self.children.get(n.index()).ok_or(Error::InvalidReference(n))
    }

    pub fn parents(&self, n: NodeId) -> Result<&[NodeId]> {
        Ok(&self.node(n)?.parents)
    }

    /// Appends a node approving `parents` and returns its id.
    ///
    /// Both parent slots may name the same node only when it is genesis.
    pub fn publish(
        &mut self,
        payload: ParamVector,
        parents: (NodeId, NodeId),
        publisher: ClientId,
        round: u64,
    ) -> Result<NodeId> {
        let (a, b) = parents;
        self.node(a)?;
        self.node(b)?;
        // clients of the first round all see a genesis-only ledger
        if a == b && a != NodeId::GENESIS {
            return Err(Error::Argument(format!("parents must be distinct unless both are genesis (got {a} twice)")));
        }
        if payload.len() != self.dimension {
            return Err(Error::Payload {
                expected: self.dimension,
                found: payload.len(),
            });
        }
        payload.check_finite()?;

        let id = NodeId(self.nodes.len() as u64);
        for p in [a, b] {
            self.children[p.index()].insert(id);
            self.tips.remove(&p);
        }
        self.nodes.push(Transaction {
            id,
            parents: vec![a, b],
            payload,
            publisher: Some(publisher),
            round,
        });
        self.children.push(BTreeSet::new());
        self.tips.insert(id);
        Ok(id)
    }

    /// Number of distinct nodes approving `n` directly or transitively.
    pub fn subtree_size(&self, n: NodeId) -> Result<usize> {
        self.node(n)?;
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([n]);
        let mut count = 0;
        while let Some(cur) = queue.pop_front() {
            for &c in &self.children[cur.index()] {
                if !seen[c.index()] {
                    seen[c.index()] = true;
                    count += 1;
                    queue.push_back(c);
                }
            }
        }
        Ok(count)
    }

    pub fn records(&self) -> impl Iterator<Item = TransactionRecord> + '_ {
        self.nodes.iter().map(|t| TransactionRecord {
            id: t.id,
            parents: t.parents.clone(),
            publisher: t.publisher,
            round: t.round,
        })
    }

    /// Writes one JSON object per transaction, in id order.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes all payloads as a `node_count x dimension` matrix.
    pub fn write_payloads<W: Write>(&self, out: W) -> Result<()> {
        let rows: Vec<&[f64]> = self.nodes.iter().map(|t| t.payload.as_slice()).collect();
        matrix::write_matrix(out, self.dimension, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ledger() -> DagLedger {
        DagLedger::init(ParamVector::zeros(2), 2).unwrap()
    }

    fn w() -> ParamVector {
        ParamVector::zeros(2)
    }

    fn c(i: u32) -> ClientId {
        ClientId(i)
    }

    #[test]
    fn init_holds_only_genesis() {
        let l = ledger();
        assert_eq!(l.node_count(), 1);
        assert_eq!(l.tips(), &BTreeSet::from([NodeId(0)]));
        assert!(l.parents(NodeId(0)).unwrap().is_empty());
        assert!(matches!(
            DagLedger::init(ParamVector::zeros(3), 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bootstrap_publish_may_duplicate_genesis() {
        let mut l = ledger();
        let id = l.publish(w(), (NodeId(0), NodeId(0)), c(1), 1).unwrap();
        assert_eq!(id, NodeId(1));
        assert_eq!(l.tips(), &BTreeSet::from([NodeId(1)]));
        assert_eq!(l.children(NodeId(0)).unwrap(), &BTreeSet::from([NodeId(1)]));
        assert!(l.children(NodeId(1)).unwrap().is_empty());
        assert!(matches!(
            l.publish(w(), (NodeId(1), NodeId(1)), c(1), 2),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn publish_consumes_both_tips() {
        let mut l = ledger();
        l.publish(w(), (NodeId(0), NodeId(0)), c(1), 1).unwrap();
        l.publish(w(), (NodeId(0), NodeId(1)), c(2), 1).unwrap();
        // tips are now {2}; fork another branch off 1
        l.publish(w(), (NodeId(0), NodeId(1)), c(3), 1).unwrap();
        assert_eq!(l.tips(), &BTreeSet::from([NodeId(2), NodeId(3)]));
        let id = l.publish(w(), (NodeId(2), NodeId(3)), c(3), 2).unwrap();
        assert_eq!(id, NodeId(4));
        assert_eq!(l.tips(), &BTreeSet::from([NodeId(4)]));
    }

    #[test]
    fn invalid_references_and_payloads() {
        let mut l = ledger();
        assert!(matches!(
            l.publish(w(), (NodeId(9), NodeId(9)), c(0), 1),
            Err(Error::InvalidReference(NodeId(9)))
        ));
        assert!(matches!(
            l.publish(ParamVector::zeros(3), (NodeId(0), NodeId(0)), c(0), 1),
            Err(Error::Payload { .. })
        ));
        assert!(matches!(l.children(NodeId(5)), Err(Error::InvalidReference(_))));
        assert!(matches!(l.subtree_size(NodeId(5)), Err(Error::InvalidReference(_))));
        assert_eq!(l.node_count(), 1);
    }

    #[test]
    fn subtree_sizes() {
        // chain 0 <- 1 <- 2
        let mut chain = ledger();
        chain.publish(w(), (NodeId(0), NodeId(0)), c(0), 1).unwrap();
        chain.publish(w(), (NodeId(0), NodeId(1)), c(0), 2).unwrap();
        assert_eq!(chain.children(NodeId(1)).unwrap(), &BTreeSet::from([NodeId(2)]));
        assert_eq!(chain.subtree_size(NodeId(0)).unwrap(), 2);
        assert_eq!(chain.subtree_size(NodeId(2)).unwrap(), 0);

        // diamond 0 <- {1, 2} <- 3; node 3 is reached twice but counted once
        let mut diamond = ledger();
        diamond.publish(w(), (NodeId(0), NodeId(0)), c(0), 1).unwrap();
        diamond.publish(w(), (NodeId(0), NodeId(1)), c(1), 1).unwrap();
        diamond.publish(w(), (NodeId(1), NodeId(2)), c(2), 2).unwrap();
        assert_eq!(diamond.subtree_size(NodeId(0)).unwrap(), 3);
        assert_eq!(diamond.subtree_size(NodeId(1)).unwrap(), 2);
    }

    #[test]
    fn ndjson_and_payload_export() {
        let mut l = ledger();
        l.publish(ParamVector::from_vec(vec![1.0, 2.0]).unwrap(), (NodeId(0), NodeId(0)), c(4), 1)
            .unwrap();
        let mut buf = Vec::new();
        l.write_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"id":0,"parents":[],"publisher":null,"round":0}"#);
        assert_eq!(lines[1], r#"{"id":1,"parents":[0,0],"publisher":4,"round":1}"#);

        let mut bin = Vec::new();
        l.write_payloads(&mut bin).unwrap();
        let (cols, values) = matrix::read_matrix(bin.as_slice()).unwrap();
        assert_eq!(cols, 2);
        assert_eq!(values, vec![0.0, 0.0, 1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn random_publish_sequences_keep_invariants(choices in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..60)) {
            let mut l = ledger();
            for (k, (a, b)) in choices.iter().enumerate() {
                let n = l.node_count();
                let pa = NodeId((a * n as f64) as u64 % n as u64);
                let mut pb = NodeId((b * n as f64) as u64 % n as u64);
                if n > 1 && pa == pb {
                    pb = NodeId((pa.0 + 1) % n as u64);
                }
                l.publish(w(), (pa, pb), c(0), k as u64).unwrap();
            }
            prop_assert_eq!(l.node_count(), choices.len() + 1);
            let brute: BTreeSet<NodeId> = (0..l.node_count() as u64)
                .map(NodeId)
                .filter(|&n| l.nodes().iter().all(|t| !t.parents.contains(&n)))
                .collect();
            prop_assert_eq!(l.tips(), &brute);
            for t in &l.nodes()[1..] {
                prop_assert_eq!(t.parents.len(), 2);
                prop_assert!(t.parents.iter().all(|p| p.0 < t.id.0));
            }
            prop_assert!(!l.is_tip(NodeId::GENESIS));
            prop_assert_eq!(l.subtree_size(NodeId::GENESIS).unwrap(), l.node_count() - 1);
        }
    }
}
