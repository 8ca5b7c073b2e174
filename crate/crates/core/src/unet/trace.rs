//! Instrumentation filled in by forward passes.

use serde::Serialize;

use crate::matching::MergePlan;

/// Partition and merge plans of one `(step, layer)`, one per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionRecord {
    pub step: usize,
    pub layer: usize,
    pub masks: Vec<Vec<bool>>,
    pub plans: Vec<MergePlan>,
}

/// One block evaluation over a whole batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockEval {
    pub step: usize,
    pub layer: usize,
    pub tokens: usize,
    /// Rows each batch element's merged components ran on; `None` for a plain block.
    pub reduced_tokens: Option<Vec<usize>>,
    /// Counted multiply-add FLOPs of the block's components, summed over the batch.
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    /// Keep every partition mask in `partitions`.
    pub record_masks: bool,
    /// One entry per `(step, layer)` whose similarities were computed.
    pub similarity_passes: Vec<(usize, usize)>,
    pub partitions: Vec<PartitionRecord>,
    pub block_evals: Vec<BlockEval>,
}

impl ForwardTrace {
    pub fn recording_masks() -> Self {
        Self {
            record_masks: true,
            ..Self::default()
        }
    }

    /// Sum over all merged block evaluations of the rows each element ran on.
    pub fn merged_token_evaluations(&self) -> usize {
        self.block_evals
            .iter()
            .filter_map(|e| e.reduced_tokens.as_ref())
            .flatten()
            .sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.block_evals.iter().map(|e| e.flops).sum()
    }
}
