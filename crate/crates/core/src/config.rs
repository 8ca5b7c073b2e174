use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::RatioPolicy;
use crate::merging::Reduction;
use crate::partition::PartitionScheme;

/// How and where token merging is applied.
///
/// Defaults: self-attention only, constant ratio, one random `dst` per 2x2
/// tile shared across the batch. `min_tokens` defaults to 1 here; harnesses
/// usually raise it to the top-scale token count so only the largest blocks
/// merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToMeConfig {
    pub ratio: f64,
    pub ratio_start: Option<f64>,
    pub ratio_end: Option<f64>,
    pub partition: PartitionScheme,
    pub apply_self: bool,
    pub apply_cross: bool,
    pub apply_mlp: bool,
    pub min_tokens: usize,
    pub seed: u64,
    /// Drop selected `src` tokens instead of merging them.
    pub prune: bool,
    /// Reuse the first batch element's edges for the whole batch.
    pub share_edges: bool,
}

impl Default for ToMeConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            ratio_start: None,
            ratio_end: None,
            partition: PartitionScheme::default(),
            apply_self: true,
            apply_cross: false,
            apply_mlp: false,
            min_tokens: 1,
            seed: 0,
            prune: false,
            share_edges: false,
        }
    }
}

impl ToMeConfig {
    /// The identity policy: nothing is merged.
    pub fn disabled() -> Self {
        Self {
            ratio: 0.0,
            ..Self::default()
        }
    }

    pub fn start_ratio(&self) -> f64 {
        self.ratio_start.unwrap_or(self.ratio)
    }

    pub fn end_ratio(&self) -> f64 {
        self.ratio_end.unwrap_or(self.ratio)
    }

    pub fn reduction(&self) -> Reduction {
        if self.prune {
            Reduction::Prune
        } else {
            Reduction::Merge
        }
    }

    pub fn any_component(&self) -> bool {
        self.apply_self || self.apply_cross || self.apply_mlp
    }

    /// Whether a block of `tokens` tokens merges at `ratio`.
    pub fn is_eligible(&self, tokens: usize, ratio: f64) -> bool {
        ratio > 0.0 && tokens >= self.min_tokens && self.any_component()
    }

    pub fn validate(&self) -> Result<()> {
        for r in [Some(self.ratio), self.ratio_start, self.ratio_end]
            .into_iter()
            .flatten()
        {
            RatioPolicy::new(r)?;
        }
        if self.min_tokens == 0 {
            return Err(Error::Config("min_tokens must be at least 1".into()));
        }
        self.partition.variant.validate()
    }
}
