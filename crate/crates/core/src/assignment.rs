//! Minimum-cost rectangular assignment (Hungarian / Kuhn–Munkres with
//! potentials, O(n²m)).

use crate::error::{Error, Result};

/// Solves the rectangular assignment problem for `cost[row][col]`.
///
/// Returns `min(rows, cols)` pairs `(row, col)` sorted by row. Every row of
/// `cost` must have the same length and all entries must be finite.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidArgument("cost matrix rows differ in length".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("hungarian"));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    let mut pairs = if rows <= cols {
        solve(rows, cols, |i, j| cost[i][j])
    } else {
        solve(cols, rows, |i, j| cost[j][i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Sum of `cost` over an assignment.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r][c]).sum()
}

// Shortest augmenting path with row/column potentials; requires n <= m.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; 0 = free
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
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

/// Exhaustive minimum over all injective assignments; for tests and oracles.
///
/// Each candidate is summed in row order, as in [`assignment_cost`].
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    // choose, for each of the min(rows, cols) "short side" indices, a distinct partner
    let (short, long) = (rows.min(cols), rows.max(cols));
    let mut best = f64::INFINITY;
    let mut partner = Vec::with_capacity(short);
    let mut used = vec![false; long];
    fn rec(cost: &[Vec<f64>], short: usize, long: usize, partner: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
        if partner.len() == short {
            let mut pairs: Vec<(usize, usize)> = if cost.len() <= cost[0].len() {
                partner.iter().enumerate().map(|(r, &c)| (r, c)).collect()
            } else {
                partner.iter().enumerate().map(|(c, &r)| (r, c)).collect()
            };
            pairs.sort_unstable();
            *best = best.min(assignment_cost(cost, &pairs));
            return;
        }
        for j in 0..long {
            if !used[j] {
                used[j] = true;
                partner.push(j);
                rec(cost, short, long, partner, used, best);
                partner.pop();
                used[j] = false;
            }
        }
    }
    rec(cost, short, long, &mut partner, &mut used, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_optimum() {
        let c = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let a = hungarian(&c).unwrap();
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&c, &a), 0.0);
    }

    #[test]
    fn anti_diagonal_optimum() {
        let c = vec![vec![4.0, 1.0], vec![2.0, 3.0]];
        let a = hungarian(&c).unwrap();
        assert_eq!(a, vec![(0, 1), (1, 0)]);
        assert_eq!(assignment_cost(&c, &a), 3.0);
    }

    #[test]
    fn empty_and_rectangular() {
        assert!(hungarian(&[]).unwrap().is_empty());
        assert!(hungarian(&[vec![], vec![]]).unwrap().is_empty());
        let wide = vec![vec![5.0, 1.0, 3.0]];
        assert_eq!(hungarian(&wide).unwrap(), vec![(0, 1)]);
        let tall = vec![vec![5.0], vec![1.0], vec![3.0]];
        assert_eq!(hungarian(&tall).unwrap(), vec![(1, 0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn equal_costs_are_deterministic() {
        let c = vec![vec![1.0; 3]; 3];
        let a = hungarian(&c).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, hungarian(&c).unwrap());
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=6, 1usize..=6)
            .prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, c), r))
    }

    proptest! {
        #[test]
        fn matches_brute_force(c in matrix()) {
            let a = hungarian(&c).unwrap();
            let rows = c.len();
            let cols = c[0].len();
            prop_assert_eq!(a.len(), rows.min(cols));
            let mut rs: Vec<_> = a.iter().map(|p| p.0).collect();
            let mut cs: Vec<_> = a.iter().map(|p| p.1).collect();
            rs.dedup();
            cs.sort_unstable();
            cs.dedup();
            prop_assert_eq!(rs.len(), a.len());
            prop_assert_eq!(cs.len(), a.len());
            let got = assignment_cost(&c, &a);
            let best = brute_force_min_cost(&c);
            prop_assert_eq!(got, best);
        }
    }
}
