//! Pre-norm transformer block with token merging around each component.
//!
//! ```text
//! h = x + SelfAttn(LN(x))
//! h = h + CrossAttn(LN(h), prompt)
//! h = h + Mlp(LN(h))
//! ```
//!
//! When the block merges, one partition and one merge plan per batch element
//! are built from the block input `x`. Each enabled component then sees the
//! merged rows of its normalised input, and its output is unmerged before the
//! residual add. Cross-attention only merges its queries; prompt tokens are
//! never touched. Attention weights never see group sizes.

use crate::config::ToMeConfig;
use crate::error::{Error, Result};
use crate::matching::{build_merge_plan, RatioPolicy};
use crate::merging::TokenGroups;
use crate::partition::make_partition;
use crate::rng::Rng;
use crate::tensor::{layernorm_rows, matmul, softmax_in_place, Matrix};

use super::trace::{BlockEval, ForwardTrace, PartitionRecord};
use super::{init_weight, TokenGrid, LN_EPS};

/// Where a block evaluation happens and the merge ratio in force.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    pub step: usize,
    pub layer: usize,
    pub ratio: f64,
}

fn mm(a: &Matrix, b: &Matrix, flops: &mut u64) -> Result<Matrix> {
    *flops += 2 * (a.rows() * a.cols() * b.cols()) as u64;
    matmul(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    heads: usize,
}

impl Attention {
    fn init(rng: &Rng, layer: usize, base: u64, channels: usize, heads: usize) -> Self {
        let w = |k: u64| init_weight(rng, base + k, layer, channels, channels);
        Self {
            wq: w(0),
            wk: w(1),
            wv: w(2),
            wo: w(3),
            heads,
        }
    }

    /// Scaled dot-product attention of `queries` over `context`.
    pub fn forward(&self, queries: &Matrix, context: &Matrix, flops: &mut u64) -> Result<Matrix> {
        let q = mm(queries, &self.wq, flops)?;
        let k = mm(context, &self.wk, flops)?;
        let v = mm(context, &self.wv, flops)?;
        let c = q.cols();
        let d = c / self.heads;
        let scale = 1.0 / (d as f32).sqrt();
        let mut mixed = Matrix::zeros(q.rows(), c);
        for head in 0..self.heads {
            let (lo, hi) = (head * d, (head + 1) * d);
            let qh = q.column_block(lo, hi);
            let kh_t = k.column_block(lo, hi).transpose();
            let vh = v.column_block(lo, hi);
            let mut scores = mm(&qh, &kh_t, flops)?;
            *flops += 2 * (qh.rows() * vh.rows() * d) as u64;
            let mut out = Matrix::zeros(qh.rows(), d);
            let mut coef = Vec::with_capacity(vh.rows());
            for i in 0..scores.rows() {
                let row = scores.row_mut(i);
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_in_place(row);
                weighted_mean(row, &vh, out.row_mut(i), &mut coef);
            }
            mixed.set_column_block(lo, &out);
        }
        mm(&mixed, &self.wo, flops)
    }
}

/// `sum_j w_j v_j` for weights summing to one, accumulated as a running
/// weighted mean so identical value rows come back bit-exact.
fn weighted_mean(weights: &[f32], values: &Matrix, out: &mut [f32], coef: &mut Vec<f32>) {
    coef.clear();
    let mut total = 0.0f32;
    coef.extend(weights.iter().map(|&w| {
        total += w;
        total
    }));
    for (f, &w) in coef.iter_mut().zip(weights) {
        *f = if *f > 0.0 { w / *f } else { 0.0 };
    }
    for (j, &f) in coef.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(values.row(j)) {
            *o += (v - *o) * f;
        }
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    w1: Matrix,
    w2: Matrix,
}

impl Mlp {
    pub const EXPANSION: usize = 4;

    pub fn forward(&self, x: &Matrix, flops: &mut u64) -> Result<Matrix> {
        let hidden = mm(x, &self.w1, flops)?.map(gelu);
        mm(&hidden, &self.w2, flops)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    self_attn: Attention,
    cross_attn: Attention,
    mlp: Mlp,
    channels: usize,
}

impl Block {
    pub fn init(rng: &Rng, layer: usize, channels: usize, heads: usize) -> Self {
        let hidden = channels * Mlp::EXPANSION;
        Self {
            self_attn: Attention::init(rng, layer, 0, channels, heads),
            cross_attn: Attention::init(rng, layer, 10, channels, heads),
            mlp: Mlp {
                w1: init_weight(rng, 20, layer, channels, hidden),
                w2: init_weight(rng, 21, layer, hidden, channels),
            },
            channels,
        }
    }

    pub fn forward(
        &self,
        x: &TokenGrid,
        prompts: &[Matrix],
        tome: &ToMeConfig,
        ctx: &StepContext,
        trace: &mut ForwardTrace,
    ) -> Result<TokenGrid> {
        let batch = x.shape().batch;
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "block expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        if prompts.len() != batch {
            return Err(Error::Shape(format!(
                "{} prompts for a batch of {batch}",
                prompts.len()
            )));
        }

        let groups = if tome.is_eligible(x.tokens(), ctx.ratio) {
            Some(self.plan_groups(x, tome, ctx, trace)?)
        } else {
            None
        };

        let mut flops = 0u64;
        let mut values = Vec::with_capacity(batch);
        for (b, prompt) in prompts.iter().enumerate() {
            let g = groups.as_ref().map(|gs| &gs[b]);
            let pick = |on: bool| if on { g } else { None };
            let mut h = x.element(b).clone();

            let out = around(pick(tome.apply_self), &layernorm_rows(&h, LN_EPS), |t| {
                self.self_attn.forward(t, t, &mut flops)
            })?;
            h = h.add(&out)?;
            let out = around(pick(tome.apply_cross), &layernorm_rows(&h, LN_EPS), |t| {
                self.cross_attn.forward(t, prompt, &mut flops)
            })?;
            h = h.add(&out)?;
            let out = around(pick(tome.apply_mlp), &layernorm_rows(&h, LN_EPS), |t| {
                self.mlp.forward(t, &mut flops)
            })?;
            h = h.add(&out)?;
            values.push(h);
        }

        trace.block_evals.push(BlockEval {
            step: ctx.step,
            layer: ctx.layer,
            tokens: x.tokens(),
            reduced_tokens: groups
                .as_ref()
                .map(|gs| gs.iter().map(TokenGroups::reduced_count).collect()),
            flops,
        });
        TokenGrid::new(x.shape(), self.channels, values)
    }

    /// The single similarity pass of this `(step, layer)`.
    fn plan_groups(
        &self,
        x: &TokenGrid,
        tome: &ToMeConfig,
        ctx: &StepContext,
        trace: &mut ForwardTrace,
    ) -> Result<Vec<TokenGroups>> {
        let partition = make_partition(
            x.shape(),
            &tome.partition,
            &Rng::new(tome.seed),
            ctx.step,
            ctx.layer,
        )?;
        trace.similarity_passes.push((ctx.step, ctx.layer));
        let policy = RatioPolicy::new(ctx.ratio)?;
        let batch = x.shape().batch;
        let plans = if tome.share_edges {
            vec![build_merge_plan(x.element(0), &partition, 0, policy)?; batch]
        } else {
            (0..batch)
                .map(|b| build_merge_plan(x.element(b), &partition, b, policy))
                .collect::<Result<Vec<_>>>()?
        };
        if trace.record_masks {
            trace.partitions.push(PartitionRecord {
                step: ctx.step,
                layer: ctx.layer,
                masks: partition.masks().to_vec(),
                plans: plans.clone(),
            });
        }
        Ok(plans
            .iter()
            .map(|p| TokenGroups::new(p, tome.reduction()))
            .collect())
    }
}

/// Runs `f` on the merged rows of `input` and unmerges the result, or on
/// `input` directly when the component is not merged.
fn around(
    groups: Option<&TokenGroups>,
    input: &Matrix,
    f: impl FnOnce(&Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    match groups {
        Some(g) => g.expand(&f(&g.reduce(input)?)?),
        None => f(input),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{GridShape, PartitionScheme, PartitionVariant};
    use crate::rng::Purpose;
    use crate::unet::flops::block_flops;

    const C: usize = 8;

    fn block() -> Block {
        Block::init(&Rng::new(3), 0, C, 2)
    }

    fn noise_grid(batch: usize, h: usize, w: usize, seed: u64) -> TokenGrid {
        let shape = GridShape::new(batch, h, w).unwrap();
        let values = (0..batch)
            .map(|b| {
                let mut s = Rng::new(seed).stream(Purpose::Noise, b as u64, 0);
                Matrix::from_vec(h * w, C, (0..h * w * C).map(|_| s.normal() as f32).collect()).unwrap()
            })
            .collect();
        TokenGrid::new(shape, C, values).unwrap()
    }

    fn prompts(batch: usize) -> Vec<Matrix> {
        let mut s = Rng::new(1).stream(Purpose::Prompt, 0, 0);
        let p = Matrix::from_vec(3, C, (0..3 * C).map(|_| s.normal() as f32).collect()).unwrap();
        vec![p; batch]
    }

    fn all_on(ratio: f64) -> ToMeConfig {
        ToMeConfig {
            ratio,
            apply_self: true,
            apply_cross: true,
            apply_mlp: true,
            ..ToMeConfig::default()
        }
    }

    fn run(b: &Block, x: &TokenGrid, tome: &ToMeConfig, ratio: f64) -> (TokenGrid, ForwardTrace) {
        let mut trace = ForwardTrace::default();
        let ctx = StepContext {
            step: 0,
            layer: 0,
            ratio,
        };
        let out = b.forward(x, &prompts(x.shape().batch), tome, &ctx, &mut trace).unwrap();
        (out, trace)
    }

    #[test]
    fn zero_ratio_matches_plain_block() {
        let b = block();
        let x = noise_grid(2, 4, 4, 0);
        let (plain, _) = run(&b, &x, &ToMeConfig::disabled(), 0.0);
        let (zero, trace) = run(&b, &x, &all_on(0.0), 0.0);
        assert_eq!(plain, zero);
        assert!(trace.similarity_passes.is_empty());
    }

    #[test]
    fn tiny_ratio_with_no_removed_tokens_matches_plain_block() {
        let b = block();
        let x = noise_grid(1, 4, 4, 2);
        let (plain, _) = run(&b, &x, &ToMeConfig::disabled(), 0.0);
        // floor(0.05 * 16) = 0 edges
        let (tiny, trace) = run(&b, &x, &all_on(0.05), 0.05);
        assert_eq!(plain, tiny);
        assert_eq!(trace.similarity_passes.len(), 1);
    }

    #[test]
    fn min_tokens_gates_merging() {
        let b = block();
        let x = noise_grid(1, 4, 4, 5);
        let (plain, _) = run(&b, &x, &ToMeConfig::disabled(), 0.0);
        let gated = ToMeConfig {
            min_tokens: 17,
            ..all_on(0.5)
        };
        let (out, trace) = run(&b, &x, &gated, 0.5);
        assert_eq!(out, plain);
        assert!(trace.similarity_passes.is_empty());
        assert_eq!(trace.block_evals[0].reduced_tokens, None);
    }

    #[test]
    fn identical_tokens_are_unaffected_by_merging() {
        let b = block();
        let shape = GridShape::new(1, 4, 4).unwrap();
        let row: Vec<f32> = (0..C).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = TokenGrid::new(shape, C, vec![Matrix::repeat_row(&row, 16)]).unwrap();
        let (plain, _) = run(&b, &x, &ToMeConfig::disabled(), 0.0);
        for ratio in [0.1, 0.25, 0.5, 0.7] {
            let (merged, _) = run(&b, &x, &all_on(ratio), ratio);
            assert_eq!(merged, plain, "ratio {ratio}");
        }
    }

    #[test]
    fn attention_over_duplicated_tokens_hand_case() {
        // Two queries attending over two identical key/value rows: the
        // softmax is uniform and the output must equal the single-row result.
        let attn = Attention::init(&Rng::new(4), 0, 0, 2, 1);
        let x = Matrix::from_rows(&[[0.3f32, -0.8], [0.3, -0.8]]).unwrap();
        let one = Matrix::from_rows(&[[0.3f32, -0.8]]).unwrap();
        let mut f = 0;
        let full = attn.forward(&x, &x, &mut f).unwrap();
        let single = attn.forward(&one, &one, &mut f).unwrap();
        assert_eq!(full.row(0), single.row(0));
        assert_eq!(full.row(1), single.row(0));
        // and the output is v = x Wv projected by Wo
        let v = matmul(&matmul(&one, &attn.wv).unwrap(), &attn.wo).unwrap();
        assert_eq!(single, v);
    }

    #[test]
    fn merged_block_keeps_shape_and_counts_tokens() {
        let b = block();
        let x = noise_grid(2, 8, 8, 9);
        let (out, trace) = run(&b, &x, &all_on(0.5), 0.5);
        assert_eq!(out.shape(), x.shape());
        assert_eq!(trace.block_evals[0].reduced_tokens, Some(vec![32, 32]));
        assert_eq!(trace.similarity_passes, vec![(0, 0)]);
    }

    #[test]
    fn counted_flops_match_closed_form() {
        let b = block();
        let x = noise_grid(1, 8, 8, 1);
        for (tome, ratio) in [
            (ToMeConfig::disabled(), 0.0),
            (all_on(0.5), 0.5),
            (ToMeConfig::default(), 0.3),
            (
                ToMeConfig {
                    apply_self: false,
                    apply_mlp: true,
                    ..ToMeConfig::default()
                },
                0.4,
            ),
        ] {
            let (_, trace) = run(&b, &x, &tome, ratio);
            let closed = block_flops(8, 8, C, 3, &tome, ratio);
            assert_eq!(trace.total_flops(), closed.merged.total(), "{tome:?}");
        }
    }

    #[test]
    fn batch_fix_shares_masks_between_branches() {
        let b = block();
        let x = noise_grid(2, 8, 8, 4);
        for fix in [true, false] {
            let tome = ToMeConfig {
                partition: PartitionScheme::new(PartitionVariant::Random { dst_fraction: 0.25 })
                    .with_batch_fix(fix),
                ..all_on(0.5)
            };
            let mut trace = ForwardTrace::recording_masks();
            let ctx = StepContext {
                step: 3,
                layer: 0,
                ratio: 0.5,
            };
            b.forward(&x, &prompts(2), &tome, &ctx, &mut trace).unwrap();
            let masks = &trace.partitions[0].masks;
            assert_eq!(masks[0] == masks[1], fix);
        }
    }

    #[test]
    fn shared_edges_use_one_plan() {
        let b = block();
        let x = noise_grid(2, 4, 4, 6);
        let tome = ToMeConfig {
            share_edges: true,
            ..all_on(0.5)
        };
        let (out, _) = run(&b, &x, &tome, 0.5);
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn prune_mode_differs_from_merge() {
        let b = block();
        let x = noise_grid(1, 4, 4, 8);
        let (merged, _) = run(&b, &x, &all_on(0.5), 0.5);
        let prune = ToMeConfig {
            prune: true,
            ..all_on(0.5)
        };
        let (pruned, _) = run(&b, &x, &prune, 0.5);
        assert_ne!(merged, pruned);
        assert!(pruned.values().iter().all(Matrix::is_finite));
    }
}
