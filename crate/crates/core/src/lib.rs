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

//! Simulator for specializing DAG federated learning and its event-triggered,
//! energy-optimized variant.
//!
//! Clients share an append-only DAG ledger of models. Each update walks the
//! ledger with an accuracy bias to pick two tips, averages them, trains
//! locally and then decides whether to publish: the baseline compares against
//! a reference model found by repeated walks, the event-triggered variant
//! publishes only when the relative parameter change crosses a threshold.

pub mod cli;
pub mod data;
pub mod energy;
pub mod error;
pub mod ledger;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod publish;
pub mod rng;
pub mod sim;
pub mod walk;

pub use error::{Error, Result};
