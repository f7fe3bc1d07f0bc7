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

//! Publish decisions: the baseline reference-model comparison and the
//! event trigger on relative parameter change.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DatasetShard, ModelSpec, ParamVector};

/// Which publish rule a simulation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Reference-model search plus local loss comparison.
    Sdagfl,
    /// Event-triggered publishing on relative parameter change.
    Esdagfl,
    /// Publishes every trained model. Experimental control.
    AlwaysPublish,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sdagfl => "sdagfl",
            Variant::Esdagfl => "esdagfl",
            Variant::AlwaysPublish => "always_publish",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerConfig {
    pub threshold: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self { threshold: 0.008 }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::Config("trigger.threshold must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Relative parameter change `||new - avg|| / ||avg||`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangeRate {
    pub value: f64,
    /// Set when `||avg|| == 0`; `value` is then `+inf` for any change and 0
    /// otherwise.
    pub degenerate: bool,
}

pub fn delta(new: &ParamVector, avg: &ParamVector) -> Result<ChangeRate> {
    let change = new.difference(avg)?.norm();
    let base = avg.norm();
    if base == 0.0 {
        let value = if change == 0.0 { 0.0 } else { f64::INFINITY };
        return Ok(ChangeRate {
            value,
            degenerate: true,
        });
    }
    Ok(ChangeRate {
        value: change / base,
        degenerate: false,
    })
}

pub fn should_publish_event(new: &ParamVector, avg: &ParamVector, cfg: &TriggerConfig) -> Result<bool> {
    Ok(delta(new, avg)?.value >= cfg.threshold)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceComparison {
    pub new_loss: f64,
    pub reference_loss: f64,
}

impl ReferenceComparison {
    pub fn publish(&self) -> bool {
        self.new_loss < self.reference_loss
    }
}

pub fn compare_with_reference(
    spec: &ModelSpec,
    new: &ParamVector,
    reference: &ParamVector,
    test: &DatasetShard,
) -> Result<ReferenceComparison> {
    Ok(ReferenceComparison {
        new_loss: model::loss(spec, new, test)?,
        reference_loss: model::loss(spec, reference, test)?,
    })
}

/// True iff the new model's local test loss is strictly below the reference's.
pub fn should_publish_reference(
    spec: &ModelSpec,
    new: &ParamVector,
    reference: &ParamVector,
    test: &DatasetShard,
) -> Result<bool> {
    Ok(compare_with_reference(spec, new, reference, test)?.publish())
}
