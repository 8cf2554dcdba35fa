use serde::{Deserialize, Serialize};

use super::{binomial, check_sizes, for_each_combination, AoUQueue, SearchMethod, SelectionDecision};
use crate::error::{FedselError, Result};
use crate::numerics::Polarization;
use crate::sketch::{estimate_cos_p, GradientSummary};

pub const DEFAULT_SUBSET_BUDGET: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PncsParams {
    pub p: f64,
    pub variant: Polarization,
    pub segment_weights: Option<Vec<f64>>,
    /// Largest number of subsets searched exhaustively before falling back
    /// to greedy search.
    pub budget: usize,
}

impl Default for PncsParams {
    fn default() -> Self {
        Self {
            p: 4.0,
            variant: Polarization::Powered,
            segment_weights: None,
            budget: DEFAULT_SUBSET_BUDGET,
        }
    }
}

/// Symmetric similarity matrix over a list of clients. The diagonal is 1 and
/// is never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrix {
    pub clients: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    /// Pairs `(a, b)` that involved a zero-norm gradient and were scored 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate_pairs: Vec<(usize, usize)>,
}

impl PairwiseMatrix {
    /// Wraps a precomputed matrix; `values` must be square and symmetric.
    pub fn from_values(clients: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = clients.len();
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(FedselError::Dimension(format!(
                "similarity matrix must be {n}x{n}"
            )));
        }
        for i in 0..n {
            for j in i + 1..n {
                if values[i][j] != values[j][i] || !values[i][j].is_finite() {
                    return Err(FedselError::Numeric(format!(
                        "similarity matrix not symmetric and finite at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            clients,
            values,
            degenerate_pairs: Vec::new(),
        })
    }

    fn position(&self, client: usize) -> Option<usize> {
        self.clients.iter().position(|&c| c == client)
    }

    /// Similarity between two clients by id.
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        Some(self.values[self.position(a)?][self.position(b)?])
    }

    /// Mean over unordered pairs of the given matrix positions, summed in
    /// lexicographic pair order.
    fn mean_over(&self, positions: &[usize]) -> f64 {
        let mut sum = 0.0;
        for (i, &a) in positions.iter().enumerate() {
            for &b in &positions[i + 1..] {
                sum += self.values[a][b];
            }
        }
        sum / binomial(positions.len(), 2) as f64
    }
}

/// Similarity of every pair of `clients`, estimated from their summaries.
/// Pairs with a zero-norm summary score 0 and are flagged.
pub fn pairwise_matrix(summaries: &[GradientSummary], clients: &[usize], params: &PncsParams) -> Result<PairwiseMatrix> {
    let lookup = |id: usize| {
        summaries
            .iter()
            .find(|s| s.client_id == id)
            .ok_or_else(|| FedselError::Config(format!("no summary for client {id}")))
    };
    let picked: Vec<&GradientSummary> = clients.iter().map(|&c| lookup(c)).collect::<Result<_>>()?;
    let n = clients.len();
    let mut values = vec![vec![1.0; n]; n];
    let mut degenerate_pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = match estimate_cos_p(picked[i], picked[j], params.p, params.variant, params.segment_weights.as_deref()) {
                Ok(s) => s,
                Err(FedselError::DegenerateGradient(_)) => {
                    degenerate_pairs.push((clients[i], clients[j]));
                    0.0
                }
                Err(e) => return Err(e),
            };
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(PairwiseMatrix {
        clients: clients.to_vec(),
        values,
        degenerate_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetScore {
    pub score: f64,
    pub degenerate: bool,
}

/// Mean pairwise similarity over all unordered pairs of `subset`.
pub fn subset_score(summaries: &[GradientSummary], subset: &[usize], params: &PncsParams) -> Result<SubsetScore> {
    if subset.len() < 2 {
        return Err(FedselError::Config(format!(
            "subset score needs at least 2 clients, got {}",
            subset.len()
        )));
    }
    let mut ids = subset.to_vec();
    ids.sort_unstable();
    let m = pairwise_matrix(summaries, &ids, params)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    Ok(SubsetScore {
        score: m.mean_over(&positions),
        degenerate: !m.degenerate_pairs.is_empty(),
    })
}

/// Subset of `per_round` clients minimizing the mean pairwise similarity.
///
/// Searches exhaustively when `C(n, per_round) <= budget`, otherwise greedily
/// from the globally least similar pair. Ties go to the lexicographically
/// smallest client ids. Returns `(client ids ascending, score, method)`.
pub fn select_from_matrix(matrix: &PairwiseMatrix, per_round: usize, budget: usize) -> Result<(Vec<usize>, f64, SearchMethod)> {
    let n = matrix.clients.len();
    if per_round < 2 || per_round > n {
        return Err(FedselError::Config(format!(
            "cannot select {per_round} of {n} eligible clients by similarity"
        )));
    }
    // clients ascending <=> positions ascending
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| matrix.clients[i]);

    let (positions, method) = if binomial(n, per_round) <= budget as u64 {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for_each_combination(n, per_round, |c| {
            let pos: Vec<usize> = c.iter().map(|&i| order[i]).collect();
            let s = matrix.mean_over(&pos);
            if best.as_ref().is_none_or(|(b, _)| s < *b) {
                best = Some((s, pos));
            }
        });
        (best.expect("at least one subset").1, SearchMethod::Exhaustive)
    } else {
        (greedy(matrix, &order, per_round), SearchMethod::Greedy)
    };
    let mut ids: Vec<usize> = positions.iter().map(|&p| matrix.clients[p]).collect();
    ids.sort_unstable();
    let mut sorted_pos = positions;
    sorted_pos.sort_by_key(|&p| matrix.clients[p]);
    Ok((ids, matrix.mean_over(&sorted_pos), method))
}

fn greedy(matrix: &PairwiseMatrix, order: &[usize], per_round: usize) -> Vec<usize> {
    let v = &matrix.values;
    let mut seed = (order[0], order[1]);
    for (i, &a) in order.iter().enumerate() {
        for &b in &order[i + 1..] {
            if v[a][b] < v[seed.0][seed.1] {
                seed = (a, b);
            }
        }
    }
    let mut chosen = vec![seed.0, seed.1];
    let mut pair_sum = v[seed.0][seed.1];
    while chosen.len() < per_round {
        let pairs_after = binomial(chosen.len() + 1, 2) as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        for &c in order {
            if chosen.contains(&c) {
                continue;
            }
            let added: f64 = chosen.iter().map(|&s| v[c][s]).sum();
            let mean = (pair_sum + added) / pairs_after;
            if best.is_none_or(|(m, _, _)| mean < m) {
                best = Some((mean, c, added));
            }
        }
        let (_, c, added) = best.expect("enough candidates");
        chosen.push(c);
        pair_sum += added;
    }
    chosen
}

/// PNCS selection over the queue-eligible clients; records the choice in
/// the queue.
pub fn select_pncs(
    summaries: &[GradientSummary],
    per_round: usize,
    queue: &mut AoUQueue,
    params: &PncsParams,
    round: usize,
) -> Result<SelectionDecision> {
    let k = summaries.len();
    check_sizes(k, per_round)?;
    if per_round < 2 {
        return Err(FedselError::Config("pncs needs at least 2 clients per round".into()));
    }
    let mut ids: Vec<usize> = summaries.iter().map(|s| s.client_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) || ids.last() != Some(&(k - 1)) {
        return Err(FedselError::Config(
            "summaries must cover client ids 0..K exactly once".into(),
        ));
    }
    let (eligible, evicted) = queue.make_room(k, per_round, round);
    let matrix = pairwise_matrix(summaries, &eligible, params)?;
    let (selected, score, method) = select_from_matrix(&matrix, per_round, params.budget)?;
    queue.record(&selected, round);
    Ok(SelectionDecision {
        round,
        degenerate: matrix
            .degenerate_pairs
            .iter()
            .any(|(a, b)| selected.contains(a) && selected.contains(b)),
        selected,
        score: Some(score),
        pairwise: Some(matrix),
        eligible,
        evicted,
        search: Some(method),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GradientVector;
    use crate::sketch::{sketch, SketchConfig};

    fn summaries(vectors: &[Vec<f64>]) -> Vec<GradientSummary> {
        vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                sketch(&GradientVector::from_flat(v.clone()).unwrap(), &SketchConfig::default(), i, 0).unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_pair_scores_one() {
        let s = summaries(&[vec![1.0, -2.0, 0.5], vec![1.0, -2.0, 0.5]]);
        let sc = subset_score(&s, &[0, 1], &PncsParams::default()).unwrap();
        assert!((sc.score - 1.0).abs() < 1e-12);
        assert!(!sc.degenerate);
    }

    #[test]
    fn opposite_and_third_vector_average_to_minus_third() {
        let u = vec![1.0, 2.0, -0.5];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let v = vec![0.3, -1.0, 2.0];
        let s = summaries(&[u, neg, v]);
        let sc = subset_score(&s, &[0, 1, 2], &PncsParams::default()).unwrap();
        assert!((sc.score + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_pair_is_neutral_and_flagged() {
        let s = summaries(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]);
        let sc = subset_score(&s, &[0, 1, 2], &PncsParams::default()).unwrap();
        assert!(sc.degenerate);
        assert!((sc.score - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn three_client_matrix_picks_most_negative_pair() {
        let m = PairwiseMatrix::from_values(
            vec![0, 1, 2],
            vec![vec![1.0, 0.9, -0.2], vec![0.9, 1.0, 0.5], vec![-0.2, 0.5, 1.0]],
        )
        .unwrap();
        let (sel, score, method) = select_from_matrix(&m, 2, 100).unwrap();
        assert_eq!(sel, vec![0, 2]);
        assert_eq!(score, -0.2);
        assert_eq!(method, SearchMethod::Exhaustive);
        let (gsel, _, gmethod) = select_from_matrix(&m, 2, 1).unwrap();
        assert_eq!(gsel, vec![0, 2]);
        assert_eq!(gmethod, SearchMethod::Greedy);
    }

    #[test]
    fn ties_choose_lexicographically_smallest() {
        let n = 5;
        let m = PairwiseMatrix::from_values((0..n).collect(), vec![vec![0.25; n]; n]).unwrap();
        assert_eq!(select_from_matrix(&m, 3, 1000).unwrap().0, vec![0, 1, 2]);
        assert_eq!(select_from_matrix(&m, 3, 1).unwrap().0, vec![0, 1, 2]);
        // non-contiguous eligible ids
        let m = PairwiseMatrix::from_values(vec![1, 4, 6], vec![vec![0.0; 3]; 3]).unwrap();
        assert_eq!(select_from_matrix(&m, 2, 10).unwrap().0, vec![1, 4]);
    }

    #[test]
    fn queue_restricts_and_records() {
        let vecs: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64 - 2.0, (i * i) as f64 * 0.1]).collect();
        let s = summaries(&vecs);
        let mut q = AoUQueue::new(2, 2);
        let d0 = select_pncs(&s, 2, &mut q, &PncsParams::default(), 0).unwrap();
        let d1 = select_pncs(&s, 2, &mut q, &PncsParams::default(), 1).unwrap();
        assert!(d0.selected.iter().all(|c| !d1.selected.contains(c)));
        assert!(d1.selected.iter().all(|c| d1.eligible.contains(c)));
        assert_eq!(d1.eligible.len(), 3);
        let pos: Vec<usize> = d1.selected.clone();
        let recomputed = subset_score(&s, &pos, &PncsParams::default()).unwrap().score;
        assert!((recomputed - d1.score.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_sizes() {
        let s = summaries(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut q = AoUQueue::new(0, 3);
        assert!(matches!(
            select_pncs(&s, 3, &mut q, &PncsParams::default(), 0),
            Err(FedselError::Config(_))
        ));
        assert!(select_pncs(&s, 1, &mut q, &PncsParams::default(), 0).is_err());
    }
}
