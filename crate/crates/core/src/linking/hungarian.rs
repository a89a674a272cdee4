use ndarray::Array2;

use crate::error::{Error, Result};

/// Maximum-weight matching on a non-negative score matrix.
///
/// Solved with the Hungarian method (shortest augmenting paths with
/// potentials) on negated scores. Because every entry is non-negative, a
/// maximum-weight assignment that covers the smaller side is also a
/// maximum-weight matching; pairs whose score is zero are dropped. Pairs are
/// returned sorted by row.
pub fn solve_assignment(scores: &Array2<f64>) -> Result<Vec<(usize, usize)>> {
    if let Some(bad) = scores.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::precondition(format!(
            "assignment scores must be finite and non-negative, got {bad}"
        )));
    }
    let (rows, cols) = scores.dim();
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }

    let transpose = rows > cols;
    let (n, m) = if transpose {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let cost = |i: usize, j: usize| -> f64 {
        if transpose {
            -scores[[j, i]]
        } else {
            -scores[[i, j]]
        }
    };

    let row_of = min_cost_assignment(n, m, cost);

    let mut pairs: Vec<(usize, usize)> = row_of
        .iter()
        .enumerate()
        .filter_map(|(j, r)| r.map(|i| if transpose { (j, i) } else { (i, j) }))
        .filter(|&(i, j)| scores[[i, j]] > 0.0)
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Sum of the matched entries, accumulated in row order.
pub fn assignment_total(scores: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().fold(0.0, |acc, &(i, j)| acc + scores[[i, j]])
}

/// Assigns every one of `n` rows to a distinct column among `m >= n`,
/// minimizing total cost. Returns, per column, the row assigned to it.
fn min_cost_assignment(
    n: usize,
    m: usize,
    cost: impl Fn(usize, usize) -> f64,
) -> Vec<Option<usize>> {
    debug_assert!(n <= m);
    // 1-based arrays; column 0 is the virtual root of each augmenting search
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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

    (1..=m).map(|j| (p[j] != 0).then(|| p[j] - 1)).collect()
}
