// SPDX-License-Identifier: MIT OR Apache-2.0

//! The evaluation oracle abstraction that separates the knockout drivers from
//! the model substrate.

use crate::error::Result;
use crate::harness::{evaluate_items, score_outcomes, ItemOutcome, McqItem, Score};
use crate::intervention::{apply_many, InterventionSpec};
use crate::model::LayerStackModel;

/// Anything that can answer multiple-choice items under a list of
/// interventions.
pub trait EvalOracle: Sync {
    fn num_layers(&self) -> usize;

    /// Per-item outcomes, in item order.
    fn evaluate(&self, interventions: &[InterventionSpec], items: &[McqItem]) -> Result<Vec<ItemOutcome>>;

    fn score(&self, interventions: &[InterventionSpec], items: &[McqItem]) -> Result<Score> {
        score_outcomes(&self.evaluate(interventions, items)?)
    }
}

impl<T: EvalOracle + ?Sized> EvalOracle for &T {
    fn num_layers(&self) -> usize {
        (**self).num_layers()
    }

    fn evaluate(&self, interventions: &[InterventionSpec], items: &[McqItem]) -> Result<Vec<ItemOutcome>> {
        (**self).evaluate(interventions, items)
    }
}

/// Oracle backed by an in-process model.
#[derive(Debug, Clone)]
pub struct LocalOracle {
    model: LayerStackModel,
}

impl LocalOracle {
    pub fn new(model: LayerStackModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &LayerStackModel {
        &self.model
    }
}

impl EvalOracle for LocalOracle {
    fn num_layers(&self) -> usize {
        self.model.num_layers()
    }

    fn evaluate(&self, interventions: &[InterventionSpec], items: &[McqItem]) -> Result<Vec<ItemOutcome>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        if interventions.is_empty() {
            return evaluate_items(|item| self.model.predict_choice(item), items);
        }
        let view = apply_many(&self.model, interventions)?;
        evaluate_items(|item| view.predict_choice(item), items)
    }
}
