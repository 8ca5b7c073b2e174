//! Merging and unmerging tokens along a [`MergePlan`].
//!
//! A group is a `dst` token together with every `src` token merged into it;
//! an unmerged `src` token is a group of one. The merged value of a group is
//! the running mean of its members in ascending token order,
//! `m_k = m_{k-1} + (x_k - m_{k-1}) / k`, which reduces to `(x1 + x2) / 2` for
//! a pair and reproduces a group of equal tokens exactly. Unmerging copies the
//! merged value back to every member.
//!
//! Pruning is the comparator: selected `src` tokens are dropped instead of
//! averaged and come back as zero vectors.

use crate::error::{Error, Result};
use crate::matching::MergePlan;
use crate::tensor::{gather_rows, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Merge,
    Prune,
}

/// Group bookkeeping shared by every component of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGroups {
    token_count: usize,
    /// Members of each reduced row, ascending; rows ordered by representative.
    groups: Vec<Vec<usize>>,
    /// Reduced row for each original token, `None` when pruned.
    row_of: Vec<Option<usize>>,
    dropped: Vec<usize>,
}

impl TokenGroups {
    pub fn new(plan: &MergePlan, reduction: Reduction) -> Self {
        let n = plan.token_count();
        // representative of each token: itself, or its dst when merged
        let mut rep: Vec<Option<usize>> = (0..n).map(Some).collect();
        for e in plan.edges() {
            rep[e.src] = match reduction {
                Reduction::Merge => Some(e.dst),
                Reduction::Prune => None,
            };
        }

        let mut row_of_rep = vec![usize::MAX; n];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, r) in rep.iter().enumerate() {
            if *r == Some(i) {
                row_of_rep[i] = groups.len();
                groups.push(Vec::new());
            }
        }
        let mut row_of = vec![None; n];
        let mut dropped = Vec::new();
        for (i, r) in rep.iter().enumerate() {
            match r {
                Some(r) => {
                    let row = row_of_rep[*r];
                    groups[row].push(i);
                    row_of[i] = Some(row);
                }
                None => dropped.push(i),
            }
        }
        Self {
            token_count: n,
            groups,
            row_of,
            dropped,
        }
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// Rows after reduction, `N - r`.
    pub fn reduced_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// Reduced row holding original token `i`, or `None` if it was pruned.
    pub fn row_of(&self, i: usize) -> Option<usize> {
        self.row_of[i]
    }

    /// `N x C` to `(N - r) x C`.
    pub fn reduce(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.token_count {
            return Err(Error::Shape(format!(
                "{} rows against a plan over {} tokens",
                x.rows(),
                self.token_count
            )));
        }
        let mut out = Matrix::zeros(self.groups.len(), x.cols());
        for (row, members) in self.groups.iter().enumerate() {
            let acc = out.row_mut(row);
            acc.copy_from_slice(x.row(members[0]));
            for (k, &i) in members.iter().enumerate().skip(1) {
                let w = 1.0 / (k + 1) as f32;
                for (m, &v) in acc.iter_mut().zip(x.row(i)) {
                    *m += (v - *m) * w;
                }
            }
        }
        Ok(out)
    }

    /// `(N - r) x C` back to `N x C`; pruned tokens become zero rows.
    pub fn expand(&self, reduced: &Matrix) -> Result<Matrix> {
        if reduced.rows() != self.groups.len() {
            return Err(Error::Shape(format!(
                "{} reduced rows, expected {}",
                reduced.rows(),
                self.groups.len()
            )));
        }
        if self.dropped.is_empty() {
            let idx: Vec<usize> = self.row_of.iter().map(|r| r.expect("no drops")).collect();
            return gather_rows(reduced, &idx);
        }
        let mut out = Matrix::zeros(self.token_count, reduced.cols());
        for (i, row) in self.row_of.iter().enumerate() {
            if let Some(row) = row {
                out.row_mut(i).copy_from_slice(reduced.row(*row));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedTokens {
    pub values: Matrix,
    pub groups: TokenGroups,
}

impl MergedTokens {
    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.group_sizes()
    }
}

pub fn apply_merge(x: &Matrix, plan: &MergePlan) -> Result<MergedTokens> {
    let groups = TokenGroups::new(plan, Reduction::Merge);
    Ok(MergedTokens {
        values: groups.reduce(x)?,
        groups,
    })
}

pub fn apply_unmerge(merged: &MergedTokens) -> Matrix {
    merged
        .groups
        .expand(&merged.values)
        .expect("values were produced by these groups")
}

/// Round trip with the selected `src` tokens pruned: they come back as zeros.
pub fn apply_prune(x: &Matrix, plan: &MergePlan) -> Result<Matrix> {
    let groups = TokenGroups::new(plan, Reduction::Prune);
    groups.expand(&groups.reduce(x)?)
}
