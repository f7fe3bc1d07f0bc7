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

//! CPU energy and time accounting for one client update.
//!
//! Every term has the shape `C * cycles * f^2` for energy and `cycles / f`
//! for time, so the two are related by the constant factor `C * f^3`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::ClientId;
use crate::model::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Effective switched capacitance of the CPU.
    pub capacitance: f64,
    pub cpu_freq: f64,
    /// Cycles per model accuracy test.
    pub eval_cycles: f64,
    /// Cycles per two-model aggregation.
    pub agg_cycles: f64,
    pub train_cycles_per_sample: f64,
    /// Cycles per confidence update during reference search.
    pub confidence_cycles: f64,
    /// Cycles per rating computation during reference search.
    pub rating_cycles: f64,
    /// Walk depth; the simulator copies it from the walk configuration.
    #[serde(skip)]
    pub walk_depth: usize,
    /// Expected children per visited node.
    pub avg_children: f64,
    /// Reference walks; the simulator copies it from the walk configuration.
    #[serde(skip)]
    pub ref_walks: usize,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            capacitance: 1e-2,
            cpu_freq: 1.0,
            eval_cycles: 10.0,
            agg_cycles: 5.0,
            train_cycles_per_sample: 1.0,
            confidence_cycles: 2.0,
            rating_cycles: 2.0,
            walk_depth: 15,
            avg_children: 2.0,
            ref_walks: 5,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("capacitance", self.capacitance),
            ("cpu_freq", self.cpu_freq),
            ("eval_cycles", self.eval_cycles),
            ("agg_cycles", self.agg_cycles),
            ("train_cycles_per_sample", self.train_cycles_per_sample),
            ("confidence_cycles", self.confidence_cycles),
            ("rating_cycles", self.rating_cycles),
            ("avg_children", self.avg_children),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("cost.{name} must be positive, got {v}")));
            }
        }
        if self.walk_depth == 0 || self.ref_walks == 0 {
            return Err(Error::Config("cost walk depth and reference walks must be positive".into()));
        }
        Ok(())
    }

    fn energy(&self, cycles: f64) -> f64 {
        self.capacitance * cycles * self.cpu_freq * self.cpu_freq
    }

    fn time(&self, cycles: f64) -> f64 {
        cycles / self.cpu_freq
    }

    pub fn tip_cycles(&self) -> f64 {
        2.0 * self.walk_depth as f64 * self.avg_children * self.eval_cycles
    }

    pub fn training_cycles(&self, batch_size: usize, batches: usize, epochs: usize) -> f64 {
        (batch_size * batches * epochs) as f64 * self.train_cycles_per_sample
    }

    pub fn reference_cycles(&self) -> f64 {
        let l = self.avg_children;
        self.ref_walks as f64
            * self.walk_depth as f64
            * (l * self.eval_cycles + self.confidence_cycles + l * self.rating_cycles)
    }

    /// Solves for `train_cycles_per_sample` so the reference term is `share`
    /// of the full update energy under `train`.
    pub fn calibrate_reference_share(&mut self, share: f64, train: &TrainConfig) -> Result<()> {
        if !(share > 0.0 && share < 1.0) {
            return Err(Error::Config(format!("reference share {share} outside (0, 1)")));
        }
        let reference = self.reference_cycles();
        let training = reference * (1.0 - share) / share - self.tip_cycles() - self.agg_cycles;
        let samples = (train.batch_size * train.batches * train.epochs) as f64;
        if !(training > 0.0 && samples > 0.0) {
            return Err(Error::Config(format!(
                "reference share {share} unreachable: tip and aggregation cycles already exceed it"
            )));
        }
        self.train_cycles_per_sample = training / samples;
        Ok(())
    }
}

pub fn tip_energy(p: &CostParams) -> f64 {
    p.energy(p.tip_cycles())
}

pub fn aggregation_energy(p: &CostParams) -> f64 {
    p.energy(p.agg_cycles)
}

pub fn training_energy(p: &CostParams, batch_size: usize, batches: usize, epochs: usize) -> f64 {
    p.energy(p.training_cycles(batch_size, batches, epochs))
}

pub fn reference_energy(p: &CostParams) -> f64 {
    p.energy(p.reference_cycles())
}

pub fn total_update_energy(p: &CostParams, train: &TrainConfig, include_reference: bool) -> f64 {
    let mut total = tip_energy(p)
        + aggregation_energy(p)
        + training_energy(p, train.batch_size, train.batches, train.epochs);
    if include_reference {
        total += reference_energy(p);
    }
    total
}

pub fn tip_time(p: &CostParams) -> f64 {
    p.time(p.tip_cycles())
}

/// How walk costs are charged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// Closed-form expectation using `walk_depth` and `avg_children`.
    #[default]
    Formula,
    /// Counts the model evaluations the walks actually performed.
    Measured,
}

/// Work observed while a client executed one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WalkWork {
    pub tip_evaluations: usize,
    pub reference_evaluations: usize,
    /// Steps taken across all reference walks.
    pub reference_steps: usize,
    pub reference_search: bool,
}

/// Energy and time of one client update, split by phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub round: u64,
    pub client: ClientId,
    pub e_tip: f64,
    pub e_agg: f64,
    pub e_train: f64,
    pub e_ref: f64,
    pub e_total: f64,
    pub t_tip: f64,
    #[serde(skip)]
    pub t_total: f64,
}

impl EnergyRow {
    pub fn for_update(
        round: u64,
        client: ClientId,
        p: &CostParams,
        train: &TrainConfig,
        accounting: Accounting,
        work: &WalkWork,
    ) -> Self {
        let agg = p.agg_cycles;
        let training = p.training_cycles(train.batch_size, train.batches, train.epochs);
        let (tip, reference) = match accounting {
            Accounting::Formula => (
                p.tip_cycles(),
                if work.reference_search { p.reference_cycles() } else { 0.0 },
            ),
            Accounting::Measured => (
                work.tip_evaluations as f64 * p.eval_cycles,
                work.reference_evaluations as f64 * (p.eval_cycles + p.rating_cycles)
                    + work.reference_steps as f64 * p.confidence_cycles,
            ),
        };
        let (e_tip, e_agg, e_train, e_ref) =
            (p.energy(tip), p.energy(agg), p.energy(training), p.energy(reference));
        Self {
            round,
            client,
            e_tip,
            e_agg,
            e_train,
            e_ref,
            e_total: e_tip + e_agg + e_train + e_ref,
            t_tip: p.time(tip),
            t_total: p.time(tip + agg + training + reference),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub tip: f64,
    pub aggregation: f64,
    pub training: f64,
    pub reference: f64,
    pub total: f64,
    pub time: f64,
}

impl EnergyTotals {
    fn add(&mut self, row: &EnergyRow) {
        self.tip += row.e_tip;
        self.aggregation += row.e_agg;
        self.training += row.e_train;
        self.reference += row.e_ref;
        self.total += row.e_total;
        self.time += row.t_total;
    }
}

/// Per-update rows with running per-client and overall totals.
#[derive(Clone, Debug, Default)]
pub struct EnergyLedger {
    rows: Vec<EnergyRow>,
    per_client: BTreeMap<ClientId, EnergyTotals>,
    totals: EnergyTotals,
}

impl EnergyLedger {
    pub fn record(&mut self, row: EnergyRow) {
        self.per_client.entry(row.client).or_default().add(&row);
        self.totals.add(&row);
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[EnergyRow] {
        &self.rows
    }

    pub fn totals(&self) -> &EnergyTotals {
        &self.totals
    }

    pub fn client_totals(&self, client: ClientId) -> Option<&EnergyTotals> {
        self.per_client.get(&client)
    }

    pub fn per_client(&self) -> &BTreeMap<ClientId, EnergyTotals> {
        &self.per_client
    }

    /// Energy and time accrued in `round`.
    pub fn round_totals(&self, round: u64) -> EnergyTotals {
        let mut t = EnergyTotals::default();
        for row in self.rows.iter().filter(|r| r.round == round) {
            t.add(row);
        }
        t
    }

    /// CSV with columns `round,client,e_tip,e_agg,e_train,e_ref,e_total,t_tip`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["round", "client", "e_tip", "e_agg", "e_train", "e_ref", "e_total", "t_tip"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}
