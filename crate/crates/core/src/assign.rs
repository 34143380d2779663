//! Exact linear assignment for minibatch optimal-transport coupling.
//!
//! Ties between optimal assignments are broken by the lexicographically
//! smallest permutation, so `solve` and `brute_force` agree exactly.

use crate::error::{Error, Result};

/// Largest size accepted by [`brute_force`].
pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    /// Row-major `n × n` matrix of finite, non-negative costs.
    pub fn new(n: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: costs.len(),
            });
        }
        if let Some(c) = costs.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::invalid(format!("cost entry {c} is not finite and non-negative")));
        }
        Ok(Self { n, costs })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let costs = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self::new(n, costs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.n + j]
    }

    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }

    fn tolerance(&self) -> f64 {
        let max = self.costs.iter().cloned().fold(0.0, f64::max);
        1e-12 * max * (self.n.max(1) as f64)
    }
}

/// Minimum-cost permutation `σ` with row `i` assigned to column `σ[i]`.
pub fn solve(c: &CostMatrix) -> Vec<usize> {
    let n = c.n;
    if n == 0 {
        return Vec::new();
    }
    let (u, v, mut col_of_row) = shortest_augmenting_path(c);
    let tol = c.tolerance();
    let tight = |i: usize, j: usize| c.get(i, j) - u[i] - v[j] <= tol;
    lexicographic_refine(n, &tight, &mut col_of_row);
    col_of_row
}

/// Shortest augmenting path with dual potentials. Returns row potentials,
/// column potentials and an optimal assignment.
fn shortest_augmenting_path(c: &CostMatrix) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = c.n;
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), col_of_row)
}

/// Every optimal assignment uses only tight edges of an optimal dual, so the
/// lexicographically smallest perfect matching of the tight subgraph is the
/// lexicographically smallest optimal permutation.
fn lexicographic_refine(n: usize, tight: &impl Fn(usize, usize) -> bool, col_of_row: &mut [usize]) {
    let mut row_of_col = vec![0; n];
    for (i, &j) in col_of_row.iter().enumerate() {
        row_of_col[j] = i;
    }
    let mut prev_col = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..n {
            if j == col_of_row[i] {
                break;
            }
            let r = row_of_col[j];
            if r < i || !tight(i, j) {
                continue;
            }
            // Row r must move to a free-able column along an alternating path
            // over rows > i that ends at column col_of_row[i].
            let target = col_of_row[i];
            seen.fill(false);
            queue.clear();
            queue.push(r);
            let mut head = 0;
            let mut found = false;
            'bfs: while head < queue.len() {
                let row = queue[head];
                head += 1;
                for col in 0..n {
                    if seen[col] || col == j || !tight(row, col) {
                        continue;
                    }
                    let owner = row_of_col[col];
                    if col != target && owner <= i {
                        continue;
                    }
                    seen[col] = true;
                    prev_col[col] = row;
                    if col == target {
                        found = true;
                        break 'bfs;
                    }
                    queue.push(owner);
                }
            }
            if !found {
                continue;
            }
            // Shift along the path back from the target column.
            let mut col = target;
            loop {
                let row = prev_col[col];
                let old = col_of_row[row];
                col_of_row[row] = col;
                row_of_col[col] = row;
                if row == r {
                    break;
                }
                col = old;
            }
            col_of_row[i] = j;
            row_of_col[j] = i;
            break;
        }
    }
}

/// Exhaustive minimum over all permutations, lexicographically smallest on ties.
pub fn brute_force(c: &CostMatrix) -> Result<Vec<usize>> {
    let n = c.n;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::invalid(format!(
            "brute force refused for n = {n} > {BRUTE_FORCE_MAX}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut all = Vec::new();
    loop {
        all.push((c.cost_of(&perm), perm.clone()));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let min = all.iter().map(|(cost, _)| *cost).fold(f64::INFINITY, f64::min);
    let tol = c.tolerance();
    Ok(all.into_iter().find(|(cost, _)| *cost <= min + tol).map(|(_, p)| p).unwrap())
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
