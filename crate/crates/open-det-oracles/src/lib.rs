//! Brute-force reference oracles for testing.
//!
//! Everything here is intentionally slow and written in the most obvious way
//! possible: exhaustive enumeration, central finite differences, double loops.
//! Production code must never call into this crate; it is a dev-dependency of
//! `open-det` only.

/// Exhaustive minimum-cost assignment over all injections.
///
/// `cost` is row-major with `rows x cols` entries. Matches `min(rows, cols)`
/// pairs. Among all optimal assignments, returns the lexicographically
/// smallest pair list (pairs sorted by row index; lower row first, then lower
/// column). Panics if `rows.min(cols) > 8` to keep runtime bounded.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
    let rows = cost.len();
    let cols = if rows == 0 { 0 } else { cost[0].len() };
    let m = rows.min(cols);
    assert!(m <= 8, "brute force oracle limited to min(N,G) <= 8");
    if m == 0 {
        return (Vec::new(), 0.0);
    }

    let mut best_total = f64::INFINITY;
    let mut best_pairs: Option<Vec<(usize, usize)>> = None;

    // Enumerate every ordered choice of m rows out of `rows` and every
    // permutation of m columns out of `cols` assigned to them. To keep the
    // lexicographic tie-break exact we enumerate row subsets in increasing
    // order and column injections in increasing order per row.
    let mut col_used = vec![false; cols];
    let mut pairs = Vec::with_capacity(m);

    fn recurse(
        cost: &[Vec<f64>],
        m: usize,
        next_row: usize,
        col_used: &mut [bool],
        pairs: &mut Vec<(usize, usize)>,
        running: f64,
        best_total: &mut f64,
        best_pairs: &mut Option<Vec<(usize, usize)>>,
    ) {
        let rows = cost.len();
        if pairs.len() == m {
            // Strict comparison: the first optimum found in visit order wins
            // ties, and the visit order is lexicographic in the pair list.
            if running < *best_total {
                *best_total = running;
                *best_pairs = Some(pairs.clone());
            }
            return;
        }
        let remaining = m - pairs.len();
        if rows - next_row < remaining {
            return;
        }
        for row in next_row..rows {
            // Rows ascending, columns ascending per row; using `row` is
            // explored before skipping it.
            for col in 0..col_used.len() {
                if col_used[col] {
                    continue;
                }
                col_used[col] = true;
                pairs.push((row, col));
                recurse(
                    cost,
                    m,
                    row + 1,
                    col_used,
                    pairs,
                    running + cost[row][col],
                    best_total,
                    best_pairs,
                );
                pairs.pop();
                col_used[col] = false;
            }
        }
    }

    recurse(
        cost,
        m,
        0,
        &mut col_used,
        &mut pairs,
        0.0,
        &mut best_total,
        &mut best_pairs,
    );

    (best_pairs.unwrap(), best_total)
}

/// Central finite-difference gradient estimate of a scalar function.
///
/// `f` is evaluated at `x` with one coordinate perturbed by `±step` at a time.
pub fn finite_diff_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest relative error between an analytic gradient and its finite
/// difference estimate, with a small absolute floor to avoid 0/0.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-3);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Double-loop pairwise cosine similarity between row sets.
///
/// `a` has `na` rows of dimension `d` (row-major), `b` has `nb` rows. A row
/// with zero norm yields cosine 0 against everything.
pub fn naive_pairwise_cosine(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize) -> Vec<f64> {
    assert_eq!(a.len(), na * d);
    assert_eq!(b.len(), nb * d);
    let mut out = vec![0.0; na * nb];
    for i in 0..na {
        for j in 0..nb {
            let mut dot = 0.0;
            let mut norm_a = 0.0;
            let mut norm_b = 0.0;
            for k in 0..d {
                let x = a[i * d + k];
                let y = b[j * d + k];
                dot += x * y;
                norm_a += x * x;
                norm_b += y * y;
            }
            out[i * nb + j] = if norm_a <= 0.0 || norm_b <= 0.0 {
                0.0
            } else {
                dot / (norm_a.sqrt() * norm_b.sqrt())
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_2x2_obvious_optimum() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let (pairs, total) = brute_force_assignment(&cost);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(total, 2.0);
    }

    #[test]
    fn assignment_1x1_single_pair() {
        let (pairs, total) = brute_force_assignment(&[vec![3.5]]);
        assert_eq!(pairs, vec![(0, 0)]);
        assert_eq!(total, 3.5);
    }

    #[test]
    fn assignment_tie_break_prefers_low_indices() {
        // Both diagonals cost 1; lexicographic preference keeps (0,0).
        let cost = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let (pairs, total) = brute_force_assignment(&cost);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(total, 1.0);
    }

    #[test]
    fn assignment_rectangular_uses_best_rows() {
        // 3 rows, 1 col: row 2 is cheapest.
        let cost = vec![vec![5.0], vec![4.0], vec![1.0]];
        let (pairs, total) = brute_force_assignment(&cost);
        assert_eq!(pairs, vec![(2, 0)]);
        assert_eq!(total, 1.0);
    }

    #[test]
    fn finite_diff_on_square() {
        let f = |x: &[f64]| x[0] * x[0];
        let g = finite_diff_gradient(&f, &[3.0], 1e-6);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_identical_and_orthogonal() {
        let a = vec![1.0, 0.0, 0.0, 1.0]; // rows e0, e1
        let sims = naive_pairwise_cosine(&a, 2, &a, 2, 2);
        assert!((sims[0] - 1.0).abs() < 1e-12);
        assert!((sims[1]).abs() < 1e-12);
        assert!((sims[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_guard() {
        let a = vec![0.0, 0.0];
        let b = vec![1.0, 2.0];
        let sims = naive_pairwise_cosine(&a, 1, &b, 1, 2);
        assert_eq!(sims[0], 0.0);
    }
}
