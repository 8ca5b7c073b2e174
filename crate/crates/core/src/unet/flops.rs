//! Closed-form FLOP counts of the toy U-Net blocks, per batch element.
//!
//! A multiply-add counts as 2 FLOPs. With `N'` rows in a component (`N - r`
//! when it merges, `N` otherwise), `C` channels and `P` prompt tokens:
//!
//! | term                  | count        |
//! |-----------------------|--------------|
//! | `self_attn_pairwise`  | `4 N'^2 C`   |
//! | `self_attn_linear`    | `8 N' C^2`   |
//! | `cross_attn_linear`   | `4 N' C^2 + 4 N' P C` |
//! | `cross_attn_context`  | `4 P C^2`    |
//! | `mlp`                 | `16 N' C^2`  |
//!
//! Normalisation, softmax and activations are not counted. The merge itself
//! (similarities and averaging) is reported separately as overhead.

use serde::{Deserialize, Serialize};

use crate::config::ToMeConfig;
use crate::matching::tokens_to_remove;
use crate::unet::block::Mlp;

use super::UNetSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentFlops {
    pub self_attn_pairwise: u64,
    pub self_attn_linear: u64,
    pub cross_attn_linear: u64,
    pub cross_attn_context: u64,
    pub mlp: u64,
}

impl ComponentFlops {
    pub fn total(&self) -> u64 {
        self.self_attn_pairwise
            + self.self_attn_linear
            + self.cross_attn_linear
            + self.cross_attn_context
            + self.mlp
    }

    /// Terms proportional to the row count.
    pub fn linear_terms(&self) -> u64 {
        self.self_attn_linear + self.cross_attn_linear + self.mlp
    }

    pub fn add(&self, o: &ComponentFlops) -> ComponentFlops {
        ComponentFlops {
            self_attn_pairwise: self.self_attn_pairwise + o.self_attn_pairwise,
            self_attn_linear: self.self_attn_linear + o.self_attn_linear,
            cross_attn_linear: self.cross_attn_linear + o.cross_attn_linear,
            cross_attn_context: self.cross_attn_context + o.cross_attn_context,
            mlp: self.mlp + o.mlp,
        }
    }

    pub fn scaled(&self, k: u64) -> ComponentFlops {
        ComponentFlops {
            self_attn_pairwise: self.self_attn_pairwise * k,
            self_attn_linear: self.self_attn_linear * k,
            cross_attn_linear: self.cross_attn_linear * k,
            cross_attn_context: self.cross_attn_context * k,
            mlp: self.mlp * k,
        }
    }
}

/// Counts for one block whose self-attention, cross-attention and mlp run
/// on the given row counts.
pub fn component_flops(
    self_rows: usize,
    cross_rows: usize,
    mlp_rows: usize,
    channels: usize,
    prompt_tokens: usize,
) -> ComponentFlops {
    let (c, p) = (channels as u64, prompt_tokens as u64);
    let (ns, nc, nm) = (self_rows as u64, cross_rows as u64, mlp_rows as u64);
    let hidden = Mlp::EXPANSION as u64;
    ComponentFlops {
        self_attn_pairwise: 4 * ns * ns * c,
        self_attn_linear: 8 * ns * c * c,
        cross_attn_linear: 4 * nc * c * c + 4 * nc * p * c,
        cross_attn_context: 4 * p * c * c,
        mlp: 2 * 2 * hidden * nm * c * c,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub tokens: usize,
    /// Rows merged components run on; equals `tokens` when the block does not merge.
    pub reduced_tokens: usize,
    pub eligible: bool,
    pub baseline: ComponentFlops,
    pub merged: ComponentFlops,
    /// Similarity evaluation of the merge plan, `2 |src| |dst| C`.
    pub merge_overhead: u64,
    /// Peak live token-matrix elements, baseline and merged.
    pub baseline_peak_elements: u64,
    pub merged_peak_elements: u64,
}

fn peak_elements(n: usize, s: usize, x: usize, m: usize, c: usize, p: usize) -> u64 {
    let (n, s, x, m, c, p) = (n as u64, s as u64, x as u64, m as u64, c as u64, p as u64);
    let self_attn = 5 * s * c + s * s;
    let cross = 3 * x * c + 2 * p * c + x * p;
    let mlp = (2 + Mlp::EXPANSION as u64) * m * c;
    n * c + self_attn.max(cross).max(mlp)
}

/// Counts for one block over a `height x width` grid at merge ratio `ratio`.
pub fn block_flops(
    height: usize,
    width: usize,
    channels: usize,
    prompt_tokens: usize,
    tome: &ToMeConfig,
    ratio: f64,
) -> BlockFlops {
    let tokens = height * width;
    let eligible = tome.is_eligible(tokens, ratio);
    let reduced = if eligible {
        tokens - tokens_to_remove(ratio, tokens)
    } else {
        tokens
    };
    let rows = |on: bool| if on && eligible { reduced } else { tokens };
    let (s, x, m) = (rows(tome.apply_self), rows(tome.apply_cross), rows(tome.apply_mlp));
    let merge_overhead = if eligible {
        let src = tome.partition.variant.src_count(height, width);
        2 * (src * (tokens - src) * channels) as u64
    } else {
        0
    };
    BlockFlops {
        tokens,
        reduced_tokens: reduced,
        eligible,
        baseline: component_flops(tokens, tokens, tokens, channels, prompt_tokens),
        merged: component_flops(s, x, m, channels, prompt_tokens),
        merge_overhead,
        baseline_peak_elements: peak_elements(tokens, tokens, tokens, tokens, channels, prompt_tokens),
        merged_peak_elements: peak_elements(tokens, s, x, m, channels, prompt_tokens),
    }
}

/// Per-block counts for every block of `spec`, in execution order, at the
/// ratio in force for one step.
pub fn flop_count(spec: &UNetSpec, tome: &ToMeConfig, ratio: f64) -> Vec<BlockFlops> {
    spec.block_sites()
        .iter()
        .map(|site| block_flops(site.height, site.width, spec.channels, spec.prompt_tokens, tome, ratio))
        .collect()
}
