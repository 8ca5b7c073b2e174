//! Bipartite soft matching over the block input.
//!
//! Each `src` token's best edge is its most similar `dst` token (cosine
//! similarity over the full channel dimension). The `r` `src` tokens with the
//! strongest best edges are selected to merge. Ties go to the lower `src`
//! index, then the lower `dst` index.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::PartitionPlan;
use crate::tensor::{matmul, Matrix};

/// Fraction of all tokens a block removes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPolicy {
    ratio: f64,
}

impl RatioPolicy {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!(
                "ratio must lie in [0, 1), got {ratio}"
            )));
        }
        Ok(Self { ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn tokens_to_remove(&self, tokens: usize) -> usize {
        tokens_to_remove(self.ratio, tokens)
    }
}

/// `floor(ratio * tokens)`. The nudge keeps products such as `0.29 * 100`,
/// which evaluate to `28.999999999999996`, on the intended integer.
pub fn tokens_to_remove(ratio: f64, tokens: usize) -> usize {
    (ratio * tokens as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEdge {
    pub src: usize,
    pub dst: usize,
    pub similarity: f32,
}

/// The `r` selected `src -> dst` edges of one batch element.
///
/// Edges are listed strongest first. Indices are flat token indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MergePlan {
    token_count: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    edges: Vec<MergeEdge>,
    kept_src: Vec<usize>,
}

impl MergePlan {
    /// A plan over `token_count` tokens. `dst_mask` marks `dst` tokens; the
    /// edges must connect distinct `src` tokens to `dst` tokens.
    pub fn from_edges(dst_mask: &[bool], edges: Vec<MergeEdge>) -> Result<Self> {
        let (src, dst) = split_mask(dst_mask);
        let mut merged = vec![false; dst_mask.len()];
        for e in &edges {
            if e.src >= dst_mask.len() || e.dst >= dst_mask.len() {
                return Err(Error::Index {
                    index: e.src.max(e.dst),
                    len: dst_mask.len(),
                });
            }
            if dst_mask[e.src] || !dst_mask[e.dst] {
                return Err(Error::Shape(format!(
                    "edge {} -> {} does not run from src to dst",
                    e.src, e.dst
                )));
            }
            if std::mem::replace(&mut merged[e.src], true) {
                return Err(Error::Shape(format!("src token {} merged twice", e.src)));
            }
        }
        let kept_src = src.iter().copied().filter(|&i| !merged[i]).collect();
        Ok(Self {
            token_count: dst_mask.len(),
            src,
            dst,
            edges,
            kept_src,
        })
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn merged_token_count(&self) -> usize {
        self.token_count - self.edges.len()
    }

    pub fn removed(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[MergeEdge] {
        &self.edges
    }

    pub fn src_indices(&self) -> &[usize] {
        &self.src
    }

    pub fn dst_indices(&self) -> &[usize] {
        &self.dst
    }

    pub fn kept_src(&self) -> &[usize] {
        &self.kept_src
    }

    /// One `src_index dst_index` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let _ = writeln!(out, "{} {}", e.src, e.dst);
        }
        out
    }

    /// Parses [`MergePlan::to_edge_list`] output back into `(src, dst)` pairs.
    pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let mut it = line.split_whitespace().map(str::parse::<usize>);
                match (it.next(), it.next(), it.next()) {
                    (Some(Ok(s)), Some(Ok(d)), None) => Ok((s, d)),
                    _ => Err(Error::Config(format!("malformed edge line `{line}`"))),
                }
            })
            .collect()
    }
}

fn split_mask(dst_mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (i, &is_dst) in dst_mask.iter().enumerate() {
        if is_dst {
            dst.push(i);
        } else {
            src.push(i);
        }
    }
    (src, dst)
}

fn row_norms(a: &Matrix) -> Vec<f32> {
    a.iter_rows()
        .map(|row| {
            let mut sq = 0.0f32;
            for &v in row {
                sq += v * v;
            }
            sq.sqrt()
        })
        .collect()
}

/// `|src| x |dst|` cosine similarities. Rows with zero norm score 0 against everything.
pub fn cosine_similarity(src_feats: &Matrix, dst_feats: &Matrix) -> Result<Matrix> {
    if src_feats.cols() != dst_feats.cols() {
        return Err(Error::Shape(format!(
            "similarity between {} and {} channels",
            src_feats.cols(),
            dst_feats.cols()
        )));
    }
    let mut sim = matmul(src_feats, &dst_feats.transpose())?;
    let src_norms = row_norms(src_feats);
    let dst_norms = row_norms(dst_feats);
    for (i, &ns) in src_norms.iter().enumerate() {
        for (v, &nd) in sim.row_mut(i).iter_mut().zip(&dst_norms) {
            let denom = ns * nd;
            // `+ 0.0` folds -0.0 into 0.0 so the total order used for ranking agrees with `==`
            *v = if denom > 0.0 {
                (*v / denom).clamp(-1.0, 1.0) + 0.0
            } else {
                0.0
            };
        }
    }
    Ok(sim)
}

/// Selects the `floor(ratio * N)` most similar `src` tokens of batch element
/// `batch_index` of `x` (`N x channels`).
pub fn build_merge_plan(
    x: &Matrix,
    partition: &PartitionPlan,
    batch_index: usize,
    ratio: RatioPolicy,
) -> Result<MergePlan> {
    build_merge_plan_masked(x, partition.dst_mask(batch_index), ratio)
}

/// [`build_merge_plan`] against an explicit `dst` mask.
pub fn build_merge_plan_masked(x: &Matrix, dst_mask: &[bool], ratio: RatioPolicy) -> Result<MergePlan> {
    let n = dst_mask.len();
    if x.rows() != n {
        return Err(Error::Shape(format!(
            "{} token rows against a {n}-token partition",
            x.rows()
        )));
    }
    let (src, dst) = split_mask(dst_mask);
    let r = ratio.tokens_to_remove(n);
    if r > src.len() {
        return Err(Error::Ratio {
            ratio: ratio.ratio(),
            tokens: n,
            requested: r,
            available: src.len(),
        });
    }
    if r == 0 {
        return MergePlan::from_edges(dst_mask, Vec::new());
    }

    let src_feats = crate::tensor::gather_rows(x, &src)?;
    let dst_feats = crate::tensor::gather_rows(x, &dst)?;
    let sim = cosine_similarity(&src_feats, &dst_feats)?;

    // best dst per src; the first maximum wins, i.e. the lowest dst index
    let mut best: Vec<MergeEdge> = src
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let row = sim.row(i);
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[arg] {
                    arg = j;
                }
            }
            MergeEdge {
                src: s,
                dst: dst[arg],
                similarity: row[arg],
            }
        })
        .collect();

    best.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.src.cmp(&b.src))
    });
    best.truncate(r);
    MergePlan::from_edges(dst_mask, best)
}

/// Exhaustive reference for [`build_merge_plan`], used to check it in tests.
pub mod oracle {
    use super::*;

    pub const MAX_TOKENS: usize = 64;

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        let mut dot = 0.0f32;
        let mut na = 0.0f32;
        let mut nb = 0.0f32;
        for k in 0..a.len() {
            dot += a[k] * b[k];
        }
        for v in a {
            na += v * v;
        }
        for v in b {
            nb += v * v;
        }
        let denom = na.sqrt() * nb.sqrt();
        if denom > 0.0 {
            (dot / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    }

    /// Scores every `src x dst` edge, then repeatedly takes the globally best
    /// remaining edge and retires its `src` token, `r` times.
    pub fn brute_force_oracle(
        x: &Matrix,
        partition: &PartitionPlan,
        batch_index: usize,
        ratio: RatioPolicy,
    ) -> Result<MergePlan> {
        let mask = partition.dst_mask(batch_index);
        let n = mask.len();
        if n > MAX_TOKENS {
            return Err(Error::OracleTooLarge {
                got: n,
                max: MAX_TOKENS,
            });
        }
        if x.rows() != n {
            return Err(Error::Shape(format!("{} rows vs {n} tokens", x.rows())));
        }
        let r = ratio.tokens_to_remove(n);
        let srcs: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
        if r > srcs.len() {
            return Err(Error::Ratio {
                ratio: ratio.ratio(),
                tokens: n,
                requested: r,
                available: srcs.len(),
            });
        }

        let mut all = Vec::new();
        for &s in &srcs {
            for d in (0..n).filter(|&i| mask[i]) {
                all.push(MergeEdge {
                    src: s,
                    dst: d,
                    similarity: cosine(x.row(s), x.row(d)),
                });
            }
        }

        let better = |a: &MergeEdge, b: &MergeEdge| {
            a.similarity > b.similarity
                || (a.similarity == b.similarity && (a.src, a.dst) < (b.src, b.dst))
        };
        let mut retired = vec![false; n];
        let mut chosen = Vec::with_capacity(r);
        for _ in 0..r {
            let mut pick: Option<MergeEdge> = None;
            for e in all.iter().filter(|e| !retired[e.src]) {
                if pick.as_ref().map_or(true, |p| better(e, p)) {
                    pick = Some(*e);
                }
            }
            let e = pick.expect("r <= |src| leaves a candidate");
            retired[e.src] = true;
            chosen.push(e);
        }
        MergePlan::from_edges(mask, chosen)
    }
}
