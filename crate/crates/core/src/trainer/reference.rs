//! Frozen reference policy for DPO.

use crate::autodiff::Tape;
use crate::data::GenBatch;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Real;

/// Scores sequences under the policy as it was before training.
///
/// With LoRA adapters the base weights never change, so bypassing the
/// adapters reproduces the initial policy at no memory cost. Without
/// adapters a full copy of the parameters is taken instead.
#[derive(Clone, Debug)]
pub enum ReferenceScorer<T> {
    AdapterBypass,
    Snapshot(Box<Model<T>>),
}

impl<T: Real> ReferenceScorer<T> {
    pub fn new(model: &Model<T>) -> Self {
        if model.has_adapters() {
            Self::AdapterBypass
        } else {
            Self::Snapshot(Box::new(model.clone()))
        }
    }

    /// Deep copy of the current parameters regardless of adapters.
    pub fn snapshot(model: &Model<T>) -> Self {
        Self::Snapshot(Box::new(model.clone()))
    }

    /// Sequence log-likelihood sums for every row of `gen`.
    pub fn sums(&self, policy: &Model<T>, gen: &GenBatch) -> Result<Vec<T>> {
        let mut tape = Tape::no_grad();
        let s = match self {
            Self::AdapterBypass => policy.gen_scores_tape(&mut tape, gen, false, None)?,
            Self::Snapshot(m) => m.gen_scores_tape(&mut tape, gen, true, None)?,
        };
        Ok(tape.value(s.sums).to_vec())
    }

    pub fn sequence_log_probs(&self, policy: &Model<T>, query: &[u32], passage: &[u32]) -> Result<Vec<T>> {
        match self {
            Self::AdapterBypass => policy.sequence_log_probs_with(query, passage, false),
            Self::Snapshot(m) => m.sequence_log_probs(query, passage),
        }
    }
}
