//! Minimum-cost bipartite assignment (Kuhn–Munkres with potentials).

use stmixer_tensor::TensorError;

use crate::error::Result;

/// Matched `(prediction, ground truth)` pairs and unmatched predictions.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Assignment {
    /// Sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Sum of `cost[pred][gt]` over pairs, accumulated in ground-truth order.
    pub fn total(&self, cost: &[Vec<f64>]) -> f64 {
        let mut by_gt = self.pairs.clone();
        by_gt.sort_by_key(|&(_, g)| g);
        by_gt.iter().map(|&(p, g)| cost[p][g]).sum()
    }
}

/// Optimal assignment for `cost[prediction][ground_truth]`. With at least as
/// many predictions as ground truths every ground truth is matched;
/// otherwise every prediction is. Among equal reduced costs the lowest
/// prediction index is preferred.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let preds = cost.len();
    let gts = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|row| row.len() != gts) {
        return Err(crate::error::Error::Geometry("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(TensorError::NonFinite {
            name: "matching cost".into(),
        }
        .into());
    }
    if preds == 0 || gts == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..preds).collect(),
        });
    }
    let mut pairs = if gts <= preds {
        // rows are ground truths, columns predictions
        solve(gts, preds, |r, c| cost[c][r])
            .into_iter()
            .map(|(g, p)| (p, g))
            .collect::<Vec<_>>()
    } else {
        solve(preds, gts, |r, c| cost[r][c])
    };
    pairs.sort_unstable();
    let unmatched = (0..preds)
        .filter(|i| pairs.binary_search_by_key(i, |&(p, _)| p).is_err())
        .collect();
    Ok(Assignment { pairs, unmatched })
}

/// Assigns each of `rows ≤ cols` rows to a distinct column; returns
/// `(row, col)` pairs.
fn solve(rows: usize, cols: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // owner[j]: 1-based row assigned to column j (0 = free); column 0 is virtual
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}
