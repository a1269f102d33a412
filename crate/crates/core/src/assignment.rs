//! Dense linear assignment by shortest augmenting paths (Hungarian method
//! with row/column potentials), `O(n³)`.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `col_of_row[i]` is the column matched to row `i`.
    pub col_of_row: Vec<usize>,
    /// Sum of the matched entries, accumulated in row order.
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// Optimal perfect matching of a square cost matrix.
pub fn solve(cost: &Matrix, sense: Sense) -> Result<Assignment> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::Shape(format!("assignment needs a square matrix, got {}x{}", n, cost.cols())));
    }
    if !cost.is_finite() {
        return Err(Error::Validation("assignment costs must be finite".into()));
    }
    let sign = match sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let c = |i: usize, j: usize| sign * cost[(i, j)];

    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = usize::MAX;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == usize::MAX {
                return Err(Error::Internal("assignment search found no augmenting column".into()));
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    let value = col_of_row.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(Assignment { col_of_row, value })
}
