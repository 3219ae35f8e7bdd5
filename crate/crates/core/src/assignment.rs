//! Minimum-cost perfect matching on a square cost matrix (Hungarian method,
//! shortest augmenting paths with vertex potentials, `O(n^3)`).

use crate::error::{Error, Result};
use crate::tensor::l1_distance;

/// Optimal assignment: row `i` is matched to column `cols[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub cols: Vec<usize>,
    pub cost: f64,
}

/// Solves the assignment problem for the `n x n` row-major `cost`.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Matching> {
    if cost.len() != n * n {
        return Err(Error::dim("hungarian", format!("{} costs for n = {n}", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Validation("assignment costs must be finite".into()));
    }
    if n == 0 {
        return Ok(Matching {
            cols: Vec::new(),
            cost: 0.0,
        });
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=n {
        cols[row_of[j] - 1] = j - 1;
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(Matching { cols, cost: total })
}

/// Pairwise `l1` costs between the rows of two `n x k` row-major matrices.
pub fn l1_cost_matrix(u: &[f64], v: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let ui = &u[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(l1_distance(ui, &v[j * k..(j + 1) * k]));
        }
    }
    out
}
