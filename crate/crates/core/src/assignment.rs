//! Minimum-cost perfect matching on square cost matrices.
//!
//! Shortest augmenting paths with row/column potentials, O(n³). Among
//! equally cheap matchings the lexicographically smallest column vector is
//! returned, so the result never depends on solver internals.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost matrix is not square: {rows} rows, {len} entries")]
    NotSquare { rows: usize, len: usize },
}

/// Row-major square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self, AssignError> {
        if data.len() != n * n {
            return Err(AssignError::NotSquare {
                rows: n,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(AssignError::NonFiniteCost {
                row: i / n,
                col: i % n,
            });
        }
        Ok(Self { n, data })
    }

    /// Pads an `rows x cols` matrix to square with `pad` entries.
    pub fn padded(rows: usize, cols: usize, data: &[f64], pad: f64) -> Result<Self, AssignError> {
        assert_eq!(data.len(), rows * cols);
        let n = rows.max(cols);
        let mut out = vec![pad; n * n];
        for r in 0..rows {
            out[r * n..r * n + cols].copy_from_slice(&data[r * cols..(r + 1) * cols]);
        }
        Self::new(n, out)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    /// Cost of assigning `cols[r]` to row `r`, summed in row order.
    pub fn cost_of(&self, cols: &[usize]) -> f64 {
        cols.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row.
    pub col_for_row: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn row_for_col(&self) -> Vec<usize> {
        let mut out = vec![0; self.col_for_row.len()];
        for (r, &c) in self.col_for_row.iter().enumerate() {
            out[c] = r;
        }
        out
    }
}

/// Hungarian solve over the submatrix `rows x cols`; returns the chosen
/// column position (into `cols`) per row and the optimal cost.
fn solve_sub(m: &CostMatrix, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let a = |i: usize, j: usize| m.get(rows[i - 1], cols[j - 1]);
    // 1-based arrays; index 0 is the virtual start column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
    }
    let cost = col_of
        .iter()
        .enumerate()
        .map(|(i, &j)| a(i + 1, j + 1))
        .sum();
    (col_of, cost)
}

/// Minimum-cost perfect matching; ties resolve to the lexicographically
/// smallest `col_for_row`.
pub fn linear_sum_assignment(m: &CostMatrix) -> Assignment {
    let n = m.size();
    let all: Vec<usize> = (0..n).collect();
    let (first, optimum) = solve_sub(m, &all, &all);
    let scale = m.data.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-12 * scale * n.max(1) as f64;

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut col_for_row = Vec::with_capacity(n);
    let mut free: Vec<usize> = all.clone();
    let mut prefix = 0.0;
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for (pos, &col) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free
                .iter()
                .enumerate()
                .filter(|&(q, _)| q != pos)
                .map(|(_, &c)| c)
                .collect();
            let (_, rest) = solve_sub(m, &rest_rows, &rest_cols);
            if prefix + m.get(row, col) + rest <= optimum + tol {
                chosen = Some(pos);
                break;
            }
        }
        // rounding can reject every candidate; fall back to the solver's pick
        let pos = chosen.unwrap_or_else(|| free.iter().position(|&c| c == first[row]).unwrap_or(0));
        let col = free.remove(pos);
        prefix += m.get(row, col);
        col_for_row.push(col);
    }
    let total_cost = m.cost_of(&col_for_row);
    Assignment {
        col_for_row,
        total_cost,
    }
}

/// Maximum-weight perfect matching, via negated costs.
pub fn max_weight_assignment(m: &CostMatrix) -> Assignment {
    let neg = CostMatrix {
        n: m.n,
        data: m.data.iter().map(|v| -v).collect(),
    };
    let a = linear_sum_assignment(&neg);
    Assignment {
        total_cost: m.cost_of(&a.col_for_row),
        col_for_row: a.col_for_row,
    }
}
