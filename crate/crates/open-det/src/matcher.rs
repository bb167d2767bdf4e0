//! Query-to-ground-truth matching: cost construction, one-to-one Hungarian
//! assignment (decoder layers 5-6), and greedy one-to-many assignment
//! (layers 1-4).

use crate::boxes::{giou_cxcywh, l1_cxcywh};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of the matching cost components.
#[derive(Clone, Copy, Debug)]
pub struct CostWeights {
    pub l1: f64,
    pub giou: f64,
    pub align: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            align: 2.0,
        }
    }
}

/// N x G matching cost matrix.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    pub matrix: Tensor,
}

impl CostMatrix {
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn g(&self) -> usize {
        self.matrix.cols()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix.at2(i, j)
    }
}

/// Result of a matching pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// (query_index, gt_index) pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, n: usize) -> Self {
        pairs.sort_unstable();
        let mut matched = vec![false; n];
        for &(q, _) in &pairs {
            matched[q] = true;
        }
        let unmatched_queries = (0..n).filter(|&q| !matched[q]).collect();
        Self {
            pairs,
            unmatched_queries,
        }
    }

    /// Gt index matched to query `q`, if any.
    pub fn gt_of(&self, q: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(qq, _)| qq == q)
            .map(|&(_, g)| g)
    }

    /// One-hot N x M alignment-label matrix: row q is one-hot at the text row
    /// of its matched gt; unmatched rows are all-zero.
    pub fn vl_align(&self, n: usize, m: usize, gt_text_rows: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(&[n, m]);
        for &(q, g) in &self.pairs {
            out.set2(q, gt_text_rows[g], 1.0);
        }
        out
    }
}

/// Cost entry (i,j): w_l1 * L1(box_i, gt_j) + w_giou * (1 - GIoU) +
/// w_align * (1 - align_prob[i, text_row(j)]).
pub fn pairwise_cost(
    boxes: &[[f64; 4]],
    align_probs: &Tensor,
    gt_boxes: &[[f64; 4]],
    gt_text_rows: &[usize],
    weights: CostWeights,
) -> Result<CostMatrix> {
    let n = boxes.len();
    let g = gt_boxes.len();
    if n == 0 || g == 0 {
        return Err(Error::Validation("pairwise_cost needs N >= 1, G >= 1".into()));
    }
    assert_eq!(gt_text_rows.len(), g);
    if !align_probs.all_finite()
        || boxes.iter().chain(gt_boxes).any(|b| b.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Validation("NaN in matching inputs".into()));
    }
    let mut out = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            let l1 = l1_cxcywh(boxes[i], gt_boxes[j]);
            let giou = giou_cxcywh(boxes[i], gt_boxes[j])?;
            let ap = align_probs.at2(i, gt_text_rows[j]);
            out[i * g + j] = weights.l1 * l1 + weights.giou * (1.0 - giou) + weights.align * (1.0 - ap);
        }
    }
    Ok(CostMatrix {
        matrix: Tensor::from_vec(out, &[n, g]),
    })
}

/// Minimum-total-cost one-to-one assignment of min(N,G) pairs.
///
/// Ties between optimal assignments are broken deterministically, preferring
/// the lower query index, then the lower gt index.
pub fn match_one_to_one(cost: &CostMatrix) -> MatchResult {
    let (n, g) = (cost.n(), cost.g());
    let m = n.min(g);
    if m == 0 {
        return MatchResult::from_pairs(Vec::new(), n);
    }

    // Run the augmenting-path solver over the smaller side.
    let pairs = if n <= g {
        let at = |i: usize, j: usize| cost.at(i, j);
        jv_assign(n, g, &at)
            .into_iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (i, j)))
            .collect::<Vec<_>>()
    } else {
        let at = |i: usize, j: usize| cost.at(j, i);
        jv_assign(g, n, &at)
            .into_iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (j, i)))
            .collect::<Vec<_>>()
    };

    let pairs = canonicalize_ties(pairs, cost);
    MatchResult::from_pairs(pairs, n)
}

/// Jonker-Volgenant-style shortest augmenting path; assigns each of the
/// `n` small-side indices a distinct large-side index (n <= m).
fn jv_assign(n: usize, m: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j] = row (1-based) matched to column j
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
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

    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Deterministic tie canonicalization: equal-cost local moves that route
/// matches toward lower query indices, then lower gt indices. Total cost is
/// preserved exactly (moves only fire on exact cost equality).
fn canonicalize_ties(mut pairs: Vec<(usize, usize)>, cost: &CostMatrix) -> Vec<(usize, usize)> {
    let n = cost.n();
    let g = cost.g();
    pairs.sort_unstable();
    loop {
        let mut changed = false;

        // Move a match to an equal-cost unmatched lower-index query.
        let mut q_used = vec![false; n];
        for &(q, _) in &pairs {
            q_used[q] = true;
        }
        for k in 0..pairs.len() {
            let (q, gt) = pairs[k];
            for q2 in 0..q {
                if !q_used[q2] && cost.at(q2, gt) == cost.at(q, gt) {
                    q_used[q] = false;
                    q_used[q2] = true;
                    pairs[k] = (q2, gt);
                    changed = true;
                    break;
                }
            }
        }
        pairs.sort_unstable();

        // Move a match to an equal-cost unmatched lower-index gt.
        let mut g_used = vec![false; g];
        for &(_, gt) in &pairs {
            g_used[gt] = true;
        }
        for k in 0..pairs.len() {
            let (q, gt) = pairs[k];
            for g2 in 0..gt {
                if !g_used[g2] && cost.at(q, g2) == cost.at(q, gt) {
                    g_used[gt] = false;
                    g_used[g2] = true;
                    pairs[k] = (q, g2);
                    changed = true;
                    break;
                }
            }
        }
        pairs.sort_unstable();

        // Swap gts between two matched pairs when the totals tie and the
        // lower query would get the lower gt.
        for a in 0..pairs.len() {
            for b in (a + 1)..pairs.len() {
                let (q1, g1) = pairs[a];
                let (q2, g2) = pairs[b];
                if g2 < g1
                    && cost.at(q1, g2) + cost.at(q2, g1) == cost.at(q1, g1) + cost.at(q2, g2)
                {
                    pairs[a] = (q1, g2);
                    pairs[b] = (q2, g1);
                    changed = true;
                }
            }
        }
        pairs.sort_unstable();

        if !changed {
            return pairs;
        }
    }
}

/// One-to-many assignment: for each gt in ascending index order, take the `k`
/// lowest-cost still-unassigned queries (each query used at most once); cost
/// ties prefer the lower query index.
pub fn match_one_to_many(cost: &CostMatrix, k: usize) -> MatchResult {
    assert!(k >= 1, "k must be >= 1");
    let (n, g) = (cost.n(), cost.g());
    let mut taken = vec![false; n];
    let mut pairs = Vec::new();
    for j in 0..g {
        let mut candidates: Vec<usize> = (0..n).filter(|&q| !taken[q]).collect();
        candidates.sort_by(|&a, &b| {
            cost.at(a, j)
                .partial_cmp(&cost.at(b, j))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &q in candidates.iter().take(k) {
            taken[q] = true;
            pairs.push((q, j));
        }
    }
    MatchResult::from_pairs(pairs, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cm(rows: &[&[f64]]) -> CostMatrix {
        let n = rows.len();
        let g = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            data.extend_from_slice(r);
        }
        CostMatrix {
            matrix: Tensor::from_vec(data, &[n, g]),
        }
    }

    #[test]
    fn obvious_diagonal_optimum() {
        let result = match_one_to_one(&cm(&[&[1.0, 2.0], &[2.0, 1.0]]));
        assert_eq!(result.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn tie_break_prefers_low_query_then_low_gt() {
        let result = match_one_to_one(&cm(&[&[0.0, 1.0], &[0.0, 1.0]]));
        assert_eq!(result.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_equals_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _case in 0..200 {
            let n = rng.gen_range(1..=6);
            let g = rng.gen_range(1..=6);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..g).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let cost = CostMatrix {
                matrix: Tensor::from_vec(rows.concat(), &[n, g]),
            };
            let ours = match_one_to_one(&cost);
            let total: f64 = ours.pairs.iter().map(|&(q, j)| cost.at(q, j)).sum();
            let (_, expect) = open_det_oracles::brute_force_assignment(&rows);
            assert!(
                (total - expect).abs() < 1e-9,
                "n={} g={} ours {} oracle {}",
                n,
                g,
                total,
                expect
            );
        }
    }

    #[test]
    fn one_to_many_counts() {
        // N=8, G=2, k=4 -> every query matched, 4 per gt.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cost = CostMatrix {
            matrix: Tensor::from_vec(data, &[8, 2]),
        };
        let result = match_one_to_many(&cost, 4);
        assert_eq!(result.pairs.len(), 8);
        assert!(result.unmatched_queries.is_empty());
        for j in 0..2 {
            assert_eq!(result.pairs.iter().filter(|&&(_, g)| g == j).count(), 4);
        }
    }

    #[test]
    fn one_to_many_k1_matches_each_gt_once() {
        let cost = cm(&[&[5.0, 1.0], &[2.0, 8.0], &[3.0, 3.0]]);
        let result = match_one_to_many(&cost, 1);
        assert_eq!(result.pairs.len(), 2);
        // gt 0 first takes its cheapest query (1), then gt 1 takes query 0.
        assert_eq!(result.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn one_to_many_greedy_trace_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(4..10);
            let g = rng.gen_range(1..4);
            let k = rng.gen_range(1..4);
            let data: Vec<f64> = (0..n * g).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cost = CostMatrix {
                matrix: Tensor::from_vec(data, &[n, g]),
            };
            let result = match_one_to_many(&cost, k);
            // Replay: at gt j's selection moment, every chosen query's cost
            // must be <= any query left unassigned at the end of the pass.
            let mut taken = vec![false; n];
            for j in 0..g {
                let chosen: Vec<usize> = result
                    .pairs
                    .iter()
                    .filter(|&&(_, gg)| gg == j)
                    .map(|&(q, _)| q)
                    .collect();
                let avail: Vec<usize> = (0..n).filter(|&q| !taken[q]).collect();
                for &q in &chosen {
                    assert!(avail.contains(&q));
                }
                let unchosen: Vec<usize> =
                    avail.iter().copied().filter(|q| !chosen.contains(q)).collect();
                for &q in &chosen {
                    for &q2 in &unchosen {
                        assert!(
                            cost.at(q, j) <= cost.at(q2, j) + 1e-12,
                            "chosen {} worse than unchosen {} for gt {}",
                            q,
                            q2,
                            j
                        );
                    }
                }
                for &q in &chosen {
                    taken[q] = true;
                }
            }
        }
    }

    #[test]
    fn vl_align_rows_are_one_hot_or_zero() {
        let cost = cm(&[&[1.0, 2.0], &[0.5, 0.1], &[9.0, 9.0]]);
        let result = match_one_to_one(&cost);
        let vl = result.vl_align(3, 4, &[2, 0]);
        for q in 0..3 {
            let row_sum: f64 = (0..4).map(|m| vl.at2(q, m)).sum();
            if result.gt_of(q).is_some() {
                assert_eq!(row_sum, 1.0);
            } else {
                assert_eq!(row_sum, 0.0);
            }
        }
    }

    #[test]
    fn cost_matches_hand_computed_weighted_sum() {
        // Random 4x3 instance recomputed with the independent naive formula.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let boxes: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                ]
            })
            .collect();
        let gts: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                ]
            })
            .collect();
        let probs_data: Vec<f64> = (0..4 * 5).map(|_| rng.gen_range(0.01..0.99)).collect();
        let probs = Tensor::from_vec(probs_data, &[4, 5]);
        let rows = [4usize, 0, 2];
        let w = CostWeights::default();
        let cost = pairwise_cost(&boxes, &probs, &gts, &rows, w).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let l1: f64 = boxes[i]
                    .iter()
                    .zip(&gts[j])
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                let giou = crate::boxes::giou_cxcywh(boxes[i], gts[j]).unwrap();
                let expect =
                    w.l1 * l1 + w.giou * (1.0 - giou) + w.align * (1.0 - probs.at2(i, rows[j]));
                assert!((cost.at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_match_has_zero_cost() {
        let b = [[0.5, 0.5, 0.2, 0.2]];
        let probs = Tensor::ones(&[1, 1]);
        let cost = pairwise_cost(&b, &probs, &b, &[0], CostWeights::default()).unwrap();
        assert!(cost.at(0, 0).abs() < 1e-12);
    }

    #[test]
    fn nan_input_rejected() {
        let b = [[0.5, 0.5, 0.2, 0.2]];
        let probs = Tensor::from_vec(vec![f64::NAN], &[1, 1]);
        assert!(pairwise_cost(&b, &probs, &b, &[0], CostWeights::default()).is_err());
    }

    proptest! {
        #[test]
        fn hungarian_invariant_under_constant_shift(
            n in 1usize..5, g in 1usize..5, shift in -3.0f64..3.0,
            seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n*g).map(|_| rng.gen_range(0.0..5.0)).collect();
            let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
            let a = match_one_to_one(&CostMatrix { matrix: Tensor::from_vec(data, &[n, g]) });
            let b = match_one_to_one(&CostMatrix { matrix: Tensor::from_vec(shifted, &[n, g]) });
            prop_assert_eq!(a.pairs, b.pairs);
        }

        #[test]
        fn cost_monotone_in_alignment_prob(p1 in 0.01f64..0.5, p2 in 0.5f64..0.99) {
            let b = [[0.4, 0.4, 0.2, 0.2]];
            let gt = [[0.6, 0.6, 0.2, 0.2]];
            let w = CostWeights::default();
            let lo = pairwise_cost(&b, &Tensor::from_vec(vec![p1], &[1,1]), &gt, &[0], w).unwrap();
            let hi = pairwise_cost(&b, &Tensor::from_vec(vec![p2], &[1,1]), &gt, &[0], w).unwrap();
            prop_assert!(hi.at(0,0) < lo.at(0,0));
        }
    }
}
