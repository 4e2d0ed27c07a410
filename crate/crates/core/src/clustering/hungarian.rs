use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row `i` is matched to column `columns[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub columns: Vec<usize>,
    pub cost: f64,
}

impl Matching {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.columns.iter().copied().enumerate().collect()
    }
}

/// Minimum-cost perfect matching on a square matrix. Among optimal
/// permutations the lexicographically smallest one is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Matching> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::shape("hungarian", "empty cost matrix"));
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::shape("hungarian", format!("row {i} has {} entries, matrix has {n} rows", row.len())));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("hungarian", format!("row {i} has a non-finite cost")));
        }
    }
    let rows: Vec<usize> = (0..n).collect();
    let optimum = solve(cost, &rows, &rows);
    let tolerance = 1e-9 * (1.0 + optimum.abs());

    // fix rows in order, each to the smallest column that keeps the optimum
    let mut columns = Vec::with_capacity(n);
    let mut free: Vec<usize> = (0..n).collect();
    let mut fixed = 0.0;
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut pick = None;
        for (slot, &j) in free.iter().enumerate() {
            let others: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let tail = if rest.is_empty() { 0.0 } else { solve(cost, &rest, &others) };
            if fixed + cost[i][j] + tail <= optimum + tolerance {
                pick = Some(slot);
                break;
            }
        }
        // rounding can in principle reject every column; fall back to the best one
        let slot = pick.unwrap_or_else(|| {
            (0..free.len())
                .min_by(|&a, &b| cost[i][free[a]].total_cmp(&cost[i][free[b]]))
                .expect("free column")
        });
        let j = free.remove(slot);
        fixed += cost[i][j];
        columns.push(j);
    }
    let cost = columns.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Matching { columns, cost })
}

/// Optimal cost of matching `rows` to `cols` (equal lengths) with the
/// shortest augmenting path method and dual potentials.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len();
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
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
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    (1..=n).map(|j| c(p[j], j)).sum()
}

/// Matches the rows of an `r x c` matrix to columns. Non-square inputs are
/// padded with `10 * max entry`; pairs touching padding are dropped.
pub fn match_rectangular(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let r = cost.len();
    let c = cost.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || cost.iter().any(|row| row.len() != c) {
        return Err(Error::shape("match_rectangular", format!("{r} rows with ragged or empty columns")));
    }
    let n = r.max(c);
    let max = cost.iter().flatten().fold(0.0f64, |m, &x| m.max(x.abs()));
    let pad = 10.0 * max;
    let square: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i < r && j < c { cost[i][j] } else { pad }).collect())
        .collect();
    let m = hungarian(&square)?;
    Ok(m.pairs().into_iter().filter(|&(i, j)| i < r && j < c).collect())
}
