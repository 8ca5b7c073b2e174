//! Per-step records and their aggregation into a run report.
//!
//! FLOP and memory figures are per batch element. Wall time lives only in
//! [`Timing`] so that a [`RunReport`] is a pure function of the run.

use serde::{Deserialize, Serialize};

use crate::diffusion::ErrorMetrics;
use crate::error::{Error, Result};
use crate::unet::{BlockFlops, ComponentFlops};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStepRecord {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    /// Rows each batch element's merged components ran on; `None` when the block did not merge.
    pub reduced_tokens: Option<Vec<usize>>,
    /// FLOPs counted during the forward pass, summed over the batch.
    pub counted_flops: u64,
    /// Closed-form counts for one batch element.
    pub flops: BlockFlops,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub run: String,
    pub step: usize,
    pub ratio: f64,
    pub batch: usize,
    pub similarity_passes: usize,
    pub blocks: Vec<BlockStepRecord>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
    pub eligible_steps: usize,
    pub baseline: ComponentFlops,
    pub merged: ComponentFlops,
    pub merge_overhead: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopTotals {
    pub baseline: ComponentFlops,
    pub merged: ComponentFlops,
    pub baseline_total: u64,
    pub merged_total: u64,
    pub merge_overhead: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryProxy {
    pub baseline_peak_elements: u64,
    pub merged_peak_elements: u64,
}

/// Rows evaluated by merged components against `N - r` per eligible block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub merged_block_evaluations: usize,
    pub observed_rows: usize,
    pub expected_rows: usize,
}

impl TokenLedger {
    pub fn balanced(&self) -> bool {
        self.observed_rows == self.expected_rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub steps: usize,
    pub batch: usize,
    pub ratios: Vec<f64>,
    pub blocks: Vec<BlockSummary>,
    pub flops: FlopTotals,
    pub speedup_estimate: f64,
    /// FLOPs counted during the forward passes over the whole batch.
    pub counted_flops: u64,
    pub memory: MemoryProxy,
    pub similarity_passes: usize,
    pub token_ledger: TokenLedger,
    pub error: Option<ErrorMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub step_seconds: Vec<f64>,
    pub total_seconds: f64,
}

pub fn timing(records: &[StepRecord]) -> Timing {
    let step_seconds: Vec<f64> = records.iter().map(|r| r.wall_seconds).collect();
    Timing {
        total_seconds: step_seconds.iter().sum(),
        step_seconds,
    }
}

/// Baseline over merged component FLOPs; 1 when nothing ran.
pub fn speedup_estimate(totals: &FlopTotals) -> f64 {
    if totals.merged_total == 0 {
        1.0
    } else {
        totals.baseline_total as f64 / totals.merged_total as f64
    }
}

pub fn aggregate(records: &[StepRecord]) -> Result<RunReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::Aggregation("no step records".into()))?;
    if let Some(r) = records.iter().find(|r| r.run != first.run) {
        return Err(Error::Aggregation(format!(
            "records from runs {:?} and {:?} cannot be combined",
            first.run, r.run
        )));
    }
    let mut seen = vec![false; records.len()];
    for r in records {
        if r.step >= records.len() || std::mem::replace(&mut seen[r.step], true) {
            return Err(Error::Aggregation(format!(
                "step {} is duplicated or out of range for {} records",
                r.step,
                records.len()
            )));
        }
        if r.blocks.len() != first.blocks.len() || r.batch != first.batch {
            return Err(Error::Aggregation(format!("step {} has a different block layout", r.step)));
        }
    }
    let mut ordered: Vec<&StepRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.step);

    let mut blocks: Vec<BlockSummary> = first
        .blocks
        .iter()
        .map(|b| BlockSummary {
            layer: b.layer,
            height: b.height,
            width: b.width,
            tokens: b.flops.tokens,
            eligible_steps: 0,
            baseline: ComponentFlops::default(),
            merged: ComponentFlops::default(),
            merge_overhead: 0,
        })
        .collect();
    let mut memory = MemoryProxy {
        baseline_peak_elements: 0,
        merged_peak_elements: 0,
    };
    let mut ledger = TokenLedger {
        merged_block_evaluations: 0,
        observed_rows: 0,
        expected_rows: 0,
    };
    let mut counted_flops = 0u64;
    for r in &ordered {
        for (sum, b) in blocks.iter_mut().zip(&r.blocks) {
            if b.layer != sum.layer {
                return Err(Error::Aggregation(format!("step {} has a different block layout", r.step)));
            }
            sum.baseline = sum.baseline.add(&b.flops.baseline);
            sum.merged = sum.merged.add(&b.flops.merged);
            sum.merge_overhead += b.flops.merge_overhead;
            counted_flops += b.counted_flops;
            memory.baseline_peak_elements = memory.baseline_peak_elements.max(b.flops.baseline_peak_elements);
            memory.merged_peak_elements = memory.merged_peak_elements.max(b.flops.merged_peak_elements);
            if b.flops.eligible {
                sum.eligible_steps += 1;
                ledger.expected_rows += r.batch * b.flops.reduced_tokens;
            }
            if let Some(rows) = &b.reduced_tokens {
                ledger.merged_block_evaluations += 1;
                ledger.observed_rows += rows.iter().sum::<usize>();
            }
        }
    }
    let baseline = blocks
        .iter()
        .fold(ComponentFlops::default(), |acc, b| acc.add(&b.baseline));
    let merged = blocks
        .iter()
        .fold(ComponentFlops::default(), |acc, b| acc.add(&b.merged));
    let flops = FlopTotals {
        baseline_total: baseline.total(),
        merged_total: merged.total(),
        merge_overhead: blocks.iter().map(|b| b.merge_overhead).sum(),
        baseline,
        merged,
    };
    Ok(RunReport {
        run: first.run.clone(),
        steps: ordered.len(),
        batch: first.batch,
        ratios: ordered.iter().map(|r| r.ratio).collect(),
        speedup_estimate: speedup_estimate(&flops),
        blocks,
        flops,
        counted_flops,
        memory,
        similarity_passes: ordered.iter().map(|r| r.similarity_passes).sum(),
        token_ledger: ledger,
        error: None,
    })
}
