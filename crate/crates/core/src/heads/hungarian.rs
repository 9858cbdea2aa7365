//! Minimum-cost injective assignment of rows to columns (Kuhn-Munkres with
//! potentials, O(n^2 m)).

use crate::error::{Result, WwtError};

/// Assign every row of an `n x m` cost matrix (`n <= m`, row-major) to a
/// distinct column, minimizing the total cost. Returns the column of each row.
pub fn assign(cost: &[f64], n: usize, m: usize) -> Result<Vec<usize>> {
    if n > m {
        return Err(WwtError::invalid(
            "assign",
            format!("{n} rows cannot be matched injectively into {m} columns"),
        ));
    }
    if cost.len() != n * m {
        return Err(WwtError::shape("assign", &[cost.len()], &[n, m]));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(WwtError::NonFinite {
            op: "assign".into(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Total cost of an assignment, summed in row order.
pub fn assignment_cost(cost: &[f64], m: usize, cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum()
}

/// Minimum over every injective assignment, by enumeration. Exponential;
/// meant as a reference for small problems.
pub fn brute_force_min(cost: &[f64], n: usize, m: usize) -> f64 {
    fn rec(
        cost: &[f64],
        n: usize,
        m: usize,
        row: usize,
        used: &mut [bool],
        cols: &mut Vec<usize>,
        best: &mut f64,
    ) {
        if row == n {
            let c = assignment_cost(cost, m, cols);
            if c < *best {
                *best = c;
            }
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cols.push(j);
                rec(cost, n, m, row + 1, used, cols, best);
                cols.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(
        cost,
        n,
        m,
        0,
        &mut vec![false; m],
        &mut Vec::new(),
        &mut best,
    );
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trivial_cases() {
        assert_eq!(assign(&[3.0], 1, 1).unwrap(), vec![0]);
        let c = [1.0, 2.0, 2.0, 1.0];
        let a = assign(&c, 2, 2).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(assignment_cost(&c, 2, &a), 2.0);
        assert!(assign(&[1.0, 2.0], 2, 1).is_err());
        assert!(assign(&[f64::NAN], 1, 1).is_err());
        assert!(assign(&[], 0, 3).unwrap().is_empty());
    }

    #[test]
    fn matches_enumeration_on_random_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [5, 6] {
            for _ in 0..100 {
                let c: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let a = assign(&c, n, n).unwrap();
                let mut seen = a.clone();
                seen.sort();
                seen.dedup();
                assert_eq!(seen.len(), n);
                assert_eq!(assignment_cost(&c, n, &a), brute_force_min(&c, n, n));
            }
        }
    }

    proptest! {
        #[test]
        fn rectangular_matches_enumeration(
            n in 1usize..=6,
            extra in 0usize..3,
            seed in any::<u64>(),
        ) {
            let m = n + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // small integer costs exercise ties
            let c: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0..5) as f64).collect();
            let a = assign(&c, n, m).unwrap();
            prop_assert_eq!(assignment_cost(&c, m, &a), brute_force_min(&c, n, m));
        }
    }
}
