//! Minimum-cost assignment on dense rectangular cost matrices.

/// Hungarian algorithm with potentials, O(n^3). Rows and columns are padded
/// with zero-cost dummies to a square matrix; the result maps each row to a
/// column, or `None` when the row was matched to a dummy column.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut assignment = vec![None; rows];
    for j in 1..=n {
        if p[j] > 0 && p[j] - 1 < rows && j - 1 < cols {
            assignment[p[j] - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Exhaustive minimum over all assignments of a square-padded matrix.
/// Returns the same shape as [`hungarian`]. Intended for small inputs.
pub fn exhaustive_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, perm.clone());
    let total = |perm: &[usize]| -> f64 {
        (0..rows)
            .filter(|&i| perm[i] < cols)
            .map(|i| cost[i][perm[i]])
            .sum()
    };
    permute(&mut perm, 0, &mut |p| {
        let c = total(p);
        if c < best.0 {
            best = (c, p.to_vec());
        }
    });
    (0..rows)
        .map(|i| (best.1[i] < cols).then_some(best.1[i]))
        .collect()
}

pub(crate) fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn total(cost: &[Vec<f64>], a: &[Option<usize>]) -> f64 {
        a.iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| cost[i][j]))
            .sum()
    }

    #[test]
    fn solves_small_square_case() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&cost);
        assert_eq!(total(&cost, &a), 5.0);
        assert_eq!(a, exhaustive_assignment(&cost));
    }

    #[test]
    fn matches_exhaustive_on_random_rectangles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let r = rng.gen_range(1..6);
            let c = rng.gen_range(1..6);
            let cost: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let h = hungarian(&cost);
            let e = exhaustive_assignment(&cost);
            assert!((total(&cost, &h) - total(&cost, &e)).abs() < 1e-9);
            assert_eq!(h.iter().filter(|x| x.is_some()).count(), r.min(c));
        }
    }
}
