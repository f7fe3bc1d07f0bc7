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

//! Round-based simulation of the specializing DAG learning loop.
//!
//! Each round samples `clients_per_round` clients. Every selected client
//! works against the ledger as it stood at the start of the round: it picks
//! two tips, averages them, trains locally and applies the variant's publish
//! rule. Accepted models are committed at the end of the round in client-id
//! order, so results do not depend on how client work is scheduled across
//! threads.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, ClusterTaskConfig};
use crate::energy::{Accounting, CostParams, EnergyLedger, EnergyRow, EnergyTotals, WalkWork};
use crate::error::{Error, Result};
use crate::ledger::{ClientId, DagLedger, NodeId};
use crate::metrics::{self, RoundRecord};
use crate::model::{self, DatasetShard, ModelKind, ModelSpec, ParamVector, TrainConfig};
use crate::publish::{self, TriggerConfig, Variant};
use crate::rng::{self, purpose, RngStream};
use crate::walk::{self, WalkConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden units for the MLP; ignored for softmax.
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Softmax,
            hidden_dim: 16,
        }
    }
}

fn default_rounds() -> u64 {
    100
}
fn default_clients_per_round() -> usize {
    10
}
fn default_eval_every() -> u64 {
    5
}
fn default_eval_fraction() -> f64 {
    0.05
}
fn default_metrics_window() -> u64 {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub variant: Variant,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default = "default_clients_per_round")]
    pub clients_per_round: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Fraction of all clients sampled for accuracy/loss evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Rounds of publishes included in the specialization metrics.
    #[serde(default = "default_metrics_window")]
    pub metrics_window: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: ClusterTaskConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub walk: WalkConfig,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub cost: CostParams,
    #[serde(default)]
    pub accounting: Accounting,
    /// When set, `cost.train_cycles_per_sample` is solved so the reference
    /// search makes up this share of a baseline update's energy.
    #[serde(default)]
    pub reference_share: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            rounds: default_rounds(),
            clients_per_round: default_clients_per_round(),
            eval_every: default_eval_every(),
            eval_fraction: default_eval_fraction(),
            metrics_window: default_metrics_window(),
            model: ModelConfig::default(),
            task: ClusterTaskConfig::default(),
            train: TrainConfig::default(),
            walk: WalkConfig::default(),
            trigger: TriggerConfig::default(),
            cost: CostParams::default(),
            accounting: Accounting::default(),
            reference_share: None,
            seed: 0,
        }
    }

    /// Fills derived fields and checks every invariant.
    pub fn resolve(mut self) -> Result<Self> {
        self.cost.walk_depth = self.walk.start_depth;
        self.cost.ref_walks = self.walk.ref_walks;
        if let Some(share) = self.reference_share {
            self.cost.calibrate_reference_share(share, &self.train)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model_spec().validate()?;
        self.train.validate()?;
        self.walk.validate()?;
        self.trigger.validate()?;
        self.cost.validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.task.num_clients() {
            return Err(Error::Config(format!(
                "clients_per_round must be in 1..={}",
                self.task.num_clients()
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return Err(Error::Config("eval_fraction must be in (0, 1]".into()));
        }
        if self.metrics_window == 0 {
            return Err(Error::Config("metrics_window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            input_dim: self.task.input_dim,
            hidden_dim: match self.model.kind {
                ModelKind::Softmax => 0,
                ModelKind::Mlp => self.model.hidden_dim,
            },
            num_classes: self.task.num_classes(),
        }
    }

    /// SHA-256 over `"simconfig <len>\0"` followed by the canonical JSON.
    pub fn content_hash(&self) -> String {
        let body = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(format!("simconfig {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: ClientId,
    pub cluster: usize,
    pub train: DatasetShard,
    pub test: DatasetShard,
    pub rng: RngStream,
    pub publishes: usize,
    pub rejections: usize,
}

/// What one client decided in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishDecision {
    pub round: u64,
    pub client: ClientId,
    pub parents: (NodeId, NodeId),
    pub published: bool,
    /// Relative parameter change; `None` when the average had zero norm.
    pub change_rate: Option<f64>,
    pub reference: Option<NodeId>,
    pub new_loss: Option<f64>,
    pub reference_loss: Option<f64>,
    /// Ledger id assigned on commit.
    pub node: Option<NodeId>,
}

struct UpdateOutcome {
    decision: PublishDecision,
    model: ParamVector,
    energy: EnergyRow,
}

pub struct Simulation {
    cfg: SimConfig,
    spec: ModelSpec,
    clients: Vec<ClientState>,
    ledger: DagLedger,
    energy: EnergyLedger,
    records: Vec<RoundRecord>,
    decisions: Vec<PublishDecision>,
    schedule_rng: RngStream,
    eval_rng: RngStream,
    community_rng: RngStream,
    round: u64,
}

pub struct SimOutput {
    pub config: SimConfig,
    pub records: Vec<RoundRecord>,
    pub energy: EnergyLedger,
    pub ledger: DagLedger,
    pub decisions: Vec<PublishDecision>,
    pub clients: Vec<ClientState>,
    pub objective: Objective,
}

/// Energy spent on reference search paired with the final training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub reference_energy: f64,
    /// Sample-weighted mean training loss of the models clients would start
    /// from after the last round.
    pub training_loss: f64,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let cfg = cfg.resolve()?;
        let spec = cfg.model_spec();
        let clients = data::generate(&cfg.task)?
            .into_iter()
            .map(|c| ClientState {
                id: c.id,
                cluster: c.cluster,
                train: c.train,
                test: c.test,
                rng: rng::client_stream(cfg.seed, c.id.0),
                publishes: 0,
                rejections: 0,
            })
            .collect();
        let genesis = spec.initial_params(&mut rng::stream(cfg.seed, purpose::INIT));
        let ledger = DagLedger::init(genesis, spec.param_count())?;
        Ok(Self {
            spec,
            clients,
            ledger,
            energy: EnergyLedger::default(),
            records: Vec::new(),
            decisions: Vec::new(),
            schedule_rng: rng::stream(cfg.seed, purpose::SCHEDULE),
            eval_rng: rng::stream(cfg.seed, purpose::EVALUATION),
            community_rng: rng::stream(cfg.seed, purpose::COMMUNITY),
            round: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &DagLedger {
        &self.ledger
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    /// Executes one round and returns its record.
    pub fn step(&mut self) -> Result<&RoundRecord> {
        self.round += 1;
        let round = self.round;
        let n = self.clients.len();
        let mut chosen = index::sample(&mut self.schedule_rng, n, self.cfg.clients_per_round).into_vec();
        chosen.sort_unstable();
        let mut selected = vec![false; n];
        for &i in &chosen {
            selected[i] = true;
        }

        let ctx = RoundContext {
            cfg: &self.cfg,
            spec: &self.spec,
            ledger: &self.ledger,
            round,
        };
        let outcomes: Vec<UpdateOutcome> = self
            .clients
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| selected[*i])
            .map(|(_, client)| ctx.client_update(client))
            .collect::<Result<_>>()?;

        let mut published = 0;
        let mut round_time = 0.0;
        for mut outcome in outcomes {
            let client = &mut self.clients[outcome.decision.client.0 as usize];
            if outcome.decision.published {
                let id = self.ledger.publish(
                    outcome.model,
                    outcome.decision.parents,
                    outcome.decision.client,
                    round,
                )?;
                outcome.decision.node = Some(id);
                client.publishes += 1;
                published += 1;
            } else {
                client.rejections += 1;
            }
            round_time += outcome.energy.t_total;
            self.energy.record(outcome.energy);
            self.decisions.push(outcome.decision);
        }

        let trained = chosen.len();
        let totals = *self.energy.totals();
        let mut record = RoundRecord {
            round,
            trained,
            published,
            publish_rate: published as f64 / trained as f64,
            nodes: self.ledger.node_count(),
            mean_accuracy: None,
            mean_loss: None,
            modularity: None,
            modules: None,
            pureness: None,
            energy_total: totals.total,
            energy_reference: totals.reference,
            round_time,
        };
        if round.is_multiple_of(self.cfg.eval_every) || round == self.cfg.rounds {
            self.evaluate(&mut record)?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    fn evaluate(&mut self, record: &mut RoundRecord) -> Result<()> {
        let tests: Vec<(ClientId, &DatasetShard)> = self.clients.iter().map(|c| (c.id, &c.test)).collect();
        let score = metrics::evaluate_population(
            &self.spec,
            &self.ledger,
            &tests,
            self.cfg.eval_fraction,
            &self.cfg.walk,
            &mut self.eval_rng,
        )?;
        record.mean_accuracy = Some(score.mean_accuracy);
        record.mean_loss = Some(score.mean_loss);

        let first = (record.round + 1).saturating_sub(self.cfg.metrics_window).max(1);
        let graph = metrics::approval_graph(&self.ledger, first..=record.round);
        if !graph.is_empty() {
            let truth: BTreeMap<ClientId, usize> = self.clients.iter().map(|c| (c.id, c.cluster)).collect();
            let found = metrics::detect_communities(&graph, &mut self.community_rng)?;
            record.modularity = Some(found.modularity);
            record.modules = Some(found.module_count);
            record.pureness = Some(metrics::approval_pureness(&graph, &truth)?);
        }
        Ok(())
    }

    /// Weighted training loss `sum_i n_i / n * F_i` over all clients, each
    /// scored at the average of two tips it selects on the final ledger.
    pub fn objective_loss(&mut self) -> Result<f64> {
        let seed: u64 = self.eval_rng.random();
        let total: usize = self.clients.iter().map(|c| c.train.len()).sum();
        let mut acc = 0.0;
        for c in &self.clients {
            let mut walker = rng::stream(seed, u64::from(c.id.0));
            let mut evaluator = |n: NodeId| model::accuracy(&self.spec, self.ledger.payload(n)?, &c.test);
            let (a, b) = walk::select_two_tips(&self.ledger, &mut evaluator, &self.cfg.walk, &mut walker)?;
            let avg = model::average(self.ledger.payload(a)?, self.ledger.payload(b)?)?;
            acc += c.train.len() as f64 / total as f64 * model::loss(&self.spec, &avg, &c.train)?;
        }
        Ok(acc)
    }

    pub fn finish(mut self) -> Result<SimOutput> {
        while !self.is_finished() {
            self.step()?;
        }
        let objective = Objective {
            reference_energy: self.energy.totals().reference,
            training_loss: self.objective_loss()?,
        };
        Ok(SimOutput {
            config: self.cfg,
            records: self.records,
            energy: self.energy,
            ledger: self.ledger,
            decisions: self.decisions,
            clients: self.clients,
            objective,
        })
    }
}

struct RoundContext<'a> {
    cfg: &'a SimConfig,
    spec: &'a ModelSpec,
    ledger: &'a DagLedger,
    round: u64,
}

impl RoundContext<'_> {
    fn client_update(&self, client: &mut ClientState) -> Result<UpdateOutcome> {
        let (spec, ledger, cfg) = (self.spec, self.ledger, self.cfg);
        let test = &client.test;
        let mut work = WalkWork::default();

        let mut evaluations = 0;
        let parents = {
            let mut evaluator = |n: NodeId| {
                evaluations += 1;
                model::accuracy(spec, ledger.payload(n)?, test)
            };
            walk::select_parents(ledger, &mut evaluator, &cfg.walk, &mut client.rng)?
        };
        work.tip_evaluations = evaluations;

        let averaged = model::average(ledger.payload(parents.0)?, ledger.payload(parents.1)?)?;
        let trained = model::local_train(spec, &averaged, &client.train, &cfg.train, &mut client.rng)?;
        let rate = publish::delta(&trained, &averaged)?;

        let mut decision = PublishDecision {
            round: self.round,
            client: client.id,
            parents,
            published: false,
            change_rate: (!rate.degenerate).then_some(rate.value),
            reference: None,
            new_loss: None,
            reference_loss: None,
            node: None,
        };
        decision.published = match cfg.variant {
            Variant::AlwaysPublish => true,
            Variant::Esdagfl => rate.value >= cfg.trigger.threshold,
            Variant::Sdagfl => {
                let mut evaluations = 0;
                let choice = {
                    let mut evaluator = |n: NodeId| {
                        evaluations += 1;
                        model::accuracy(spec, ledger.payload(n)?, test)
                    };
                    walk::reference_model(ledger, &mut evaluator, &cfg.walk, &mut client.rng)?
                };
                work.reference_search = true;
                work.reference_evaluations = evaluations;
                work.reference_steps = choice.paths.iter().map(|p| p.len() - 1).sum();
                let cmp = publish::compare_with_reference(spec, &trained, ledger.payload(choice.node)?, test)?;
                decision.reference = Some(choice.node);
                decision.new_loss = Some(cmp.new_loss);
                decision.reference_loss = Some(cmp.reference_loss);
                cmp.publish()
            }
        };

        let energy = EnergyRow::for_update(self.round, client.id, &cfg.cost, &cfg.train, cfg.accounting, &work);
        Ok(UpdateOutcome {
            decision,
            model: trained,
            energy,
        })
    }
}

pub fn run(cfg: SimConfig) -> Result<SimOutput> {
    Simulation::new(cfg)?.finish()
}

impl SimOutput {
    /// Published share of all trained models.
    pub fn publish_rate(&self) -> f64 {
        let trained: usize = self.records.iter().map(|r| r.trained).sum();
        let published: usize = self.records.iter().map(|r| r.published).sum();
        published as f64 / trained.max(1) as f64
    }

    pub fn last_evaluation(&self) -> Option<&RoundRecord> {
        self.records.iter().rev().find(|r| r.mean_accuracy.is_some())
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.last_evaluation();
        RunSummary {
            config_hash: self.config.content_hash(),
            variant: self.config.variant,
            seed: self.config.seed,
            rounds: self.config.rounds,
            nodes: self.ledger.node_count(),
            publish_rate: self.publish_rate(),
            final_metrics: FinalMetrics {
                round: last.map_or(0, |r| r.round),
                mean_accuracy: last.and_then(|r| r.mean_accuracy),
                mean_loss: last.and_then(|r| r.mean_loss),
                modularity: last.and_then(|r| r.modularity),
                modules: last.and_then(|r| r.modules),
                pureness: last.and_then(|r| r.pureness),
            },
            energy: *self.energy.totals(),
            objective: self.objective,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalMetrics {
    pub round: u64,
    pub mean_accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
    pub modularity: Option<f64>,
    pub modules: Option<usize>,
    pub pureness: Option<f64>,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub config_hash: String,
    pub variant: Variant,
    pub seed: u64,
    pub rounds: u64,
    pub nodes: usize,
    pub publish_rate: f64,
    pub final_metrics: FinalMetrics,
    pub energy: EnergyTotals,
    pub objective: Objective,
}

impl RunSummary {
    /// Checks a parsed `summary.json` against the shipped schema rules.
    pub fn validate_json(value: &serde_json::Value) -> Result<RunSummary> {
        let summary: RunSummary = serde_json::from_value(value.clone())?;
        if summary.config_hash.len() != 64 || !summary.config_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Argument("config_hash must be 64 hex digits".into()));
        }
        if !(0.0..=1.0).contains(&summary.publish_rate) {
            return Err(Error::Argument("publish_rate outside [0, 1]".into()));
        }
        let m = &summary.final_metrics;
        let in_unit = |v: Option<f64>| v.is_none_or(|x| (0.0..=1.0).contains(&x));
        if !in_unit(m.mean_accuracy) || !in_unit(m.pureness) {
            return Err(Error::Argument("accuracy and pureness must lie in [0, 1]".into()));
        }
        if m.modularity.is_some_and(|q| !(-0.5..=1.0).contains(&q)) {
            return Err(Error::Argument("modularity outside [-0.5, 1]".into()));
        }
        Ok(summary)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub final_accuracy: Option<f64>,
    pub pureness: Option<f64>,
    pub publish_rate: f64,
    pub total_energy: f64,
}

/// One event-triggered run per threshold, all with the same seed.
pub fn sweep_threshold(cfg: &SimConfig, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() {
        return Err(Error::Argument("threshold sweep needs at least one threshold".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let mut run_cfg = cfg.clone();
            run_cfg.variant = Variant::Esdagfl;
            run_cfg.trigger.threshold = t;
            let out = run(run_cfg)?;
            let last = out.last_evaluation();
            Ok(SweepRow {
                threshold: t,
                final_accuracy: last.and_then(|r| r.mean_accuracy),
                pureness: last.and_then(|r| r.pureness),
                publish_rate: out.publish_rate(),
                total_energy: out.energy.totals().total,
            })
        })
        .collect()
}

/// Per-round cost of the two variants side by side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub round: u64,
    pub sdagfl_time: f64,
    pub esdagfl_time: f64,
    pub sdagfl_energy: f64,
    pub esdagfl_energy: f64,
    pub sdagfl_reference_energy: f64,
    pub esdagfl_reference_energy: f64,
    pub sdagfl_accuracy: Option<f64>,
    pub esdagfl_accuracy: Option<f64>,
}

pub struct Comparison {
    pub baseline: SimOutput,
    pub triggered: SimOutput,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Percentage of baseline energy saved by the event trigger.
    pub fn energy_reduction_percent(&self) -> f64 {
        let base = self.baseline.energy.totals().total;
        100.0 * (base - self.triggered.energy.totals().total) / base
    }

    pub fn time_reduction_percent(&self) -> f64 {
        let base = self.baseline.energy.totals().time;
        100.0 * (base - self.triggered.energy.totals().time) / base
    }
}

/// Runs the baseline and the event-triggered variant with the same seed.
pub fn compare(cfg: &SimConfig) -> Result<Comparison> {
    let mut base_cfg = cfg.clone();
    base_cfg.variant = Variant::Sdagfl;
    let mut trig_cfg = cfg.clone();
    trig_cfg.variant = Variant::Esdagfl;
    let baseline = run(base_cfg)?;
    let triggered = run(trig_cfg)?;
    let rows = baseline
        .records
        .iter()
        .zip(&triggered.records)
        .map(|(b, t)| {
            let (eb, et) = (baseline.energy.round_totals(b.round), triggered.energy.round_totals(t.round));
            ComparisonRow {
                round: b.round,
                sdagfl_time: eb.time,
                esdagfl_time: et.time,
                sdagfl_energy: eb.total,
                esdagfl_energy: et.total,
                sdagfl_reference_energy: eb.reference,
                esdagfl_reference_energy: et.reference,
                sdagfl_accuracy: b.mean_accuracy,
                esdagfl_accuracy: t.mean_accuracy,
            }
        })
        .collect();
    Ok(Comparison {
        baseline,
        triggered,
        rows,
    })
}
