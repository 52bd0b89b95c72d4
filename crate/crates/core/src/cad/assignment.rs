//! Exact minimum-cost assignment (Hungarian algorithm with potentials).

/// Optimal assignment for a row-major `rows × cols` cost matrix with
/// `rows <= cols`. Returns the column chosen for every row.
///
/// The solver is fully deterministic: rows are inserted in index order and
/// the first minimal column wins every comparison, so equal-cost ties go to
/// the lowest index.
pub fn assign(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(
        rows <= cols,
        "assignment needs rows <= cols ({rows} > {cols})"
    );
    assert_eq!(cost.len(), rows * cols, "cost matrix size");
    if rows == 0 {
        return Vec::new();
    }
    let c = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    // 1-based potentials and matching; column 0 is a virtual start node.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut matched = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
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
            for j in 0..=cols {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; rows];
    for j in 1..=cols {
        if matched[j] != 0 {
            out[matched[j] - 1] = j - 1;
        }
    }
    out
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[f64], cols: usize, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * cols + j])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all injective row → column maps.
    fn brute_force(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn go(i: usize, rows: usize, cols: usize, used: &mut [bool], cost: &[f64]) -> f64 {
            if i == rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cols {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[i * cols + j] + go(i + 1, rows, cols, used, cost));
                    used[j] = false;
                }
            }
            best
        }
        go(0, rows, cols, &mut vec![false; cols], cost)
    }

    #[test]
    fn trivial_cases() {
        assert!(assign(&[], 0, 0).is_empty());
        assert_eq!(assign(&[5.0], 1, 1), vec![0]);
        assert_eq!(
            assign(&[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0], 3, 3),
            vec![1, 0, 2]
        );
    }

    #[test]
    fn ties_are_resolved_deterministically() {
        let a = assign(&[1.0; 16], 4, 4);
        assert_eq!(a, assign(&[1.0; 16], 4, 4));
        let mut seen = a.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(
            rows in 1usize..=6,
            extra in 0usize..=2,
            seed in prop::collection::vec(0.0f64..10.0, 64),
        ) {
            let cols = (rows + extra).min(6);
            let cost: Vec<f64> = seed[..rows * cols].to_vec();
            let a = assign(&cost, rows, cols);
            let mut distinct = a.clone();
            distinct.sort();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), rows);
            let got = assignment_cost(&cost, cols, &a);
            prop_assert!((got - brute_force(&cost, rows, cols)).abs() < 1e-9);
        }
    }
}
