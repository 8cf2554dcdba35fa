use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{binomial, check_sizes, combinations, SelectionDecision};
use crate::error::{FedselError, Result};
use crate::model::{apply_update, evaluate, Batch, ModelParameters};
use crate::numerics::GradientVector;

pub const DEFAULT_ORACLE_BUDGET: usize = 10_000;

/// Validation outcome of one hypothetical aggregated update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub subset: Vec<usize>,
    pub loss: f64,
    pub accuracy: f64,
}

/// Every subset's hypothetical outcome, lexicographic by subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub table: Vec<OracleEntry>,
    /// Index of the lowest-loss subset (first in table order on ties).
    pub best: usize,
}

impl OracleOutcome {
    pub fn best_entry(&self) -> &OracleEntry {
        &self.table[self.best]
    }

    pub fn entry(&self, subset: &[usize]) -> Option<&OracleEntry> {
        let mut key = subset.to_vec();
        key.sort_unstable();
        self.table.iter().find(|e| e.subset == key)
    }

    /// Validation loss of `subset` minus the best achievable loss; `None`
    /// when the subset is not in the table.
    pub fn regret(&self, subset: &[usize]) -> Option<f64> {
        Some(self.entry(subset)?.loss - self.best_entry().loss)
    }

    pub fn worst_entry(&self) -> &OracleEntry {
        self.table
            .iter()
            .max_by(|a, b| a.loss.total_cmp(&b.loss))
            .expect("non-empty table")
    }
}

/// Evaluates `w − η·mean(g_s)` on the validation batch for every subset of
/// `per_round` clients. `gradients[k]` is client `k`'s full gradient.
pub fn oracle_table(
    params: &ModelParameters,
    gradients: &[&GradientVector],
    validation: &Batch,
    per_round: usize,
    eta: f64,
    budget: usize,
) -> Result<OracleOutcome> {
    let k = gradients.len();
    check_sizes(k, per_round)?;
    let count = binomial(k, per_round);
    if count > budget as u64 {
        return Err(FedselError::Config(format!(
            "oracle would evaluate {count} subsets, budget is {budget}"
        )));
    }
    let table = combinations(k, per_round)
        .into_par_iter()
        .map(|subset| {
            let parts: Vec<&GradientVector> = subset.iter().map(|&c| gradients[c]).collect();
            let g = GradientVector::mean(&parts)?;
            let next = apply_update(params, &g, eta)?;
            let (loss, accuracy) = evaluate(&next, validation)?;
            Ok(OracleEntry {
                subset,
                loss,
                accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, e) in table.iter().enumerate() {
        if e.loss < table[best].loss {
            best = i;
        }
    }
    Ok(OracleOutcome { table, best })
}

/// The myopic optimal subset: lowest validation loss after the hypothetical
/// update.
pub fn select_oracle(
    params: &ModelParameters,
    gradients: &[&GradientVector],
    validation: &Batch,
    per_round: usize,
    eta: f64,
    round: usize,
    budget: usize,
) -> Result<(SelectionDecision, OracleOutcome)> {
    let outcome = oracle_table(params, gradients, validation, per_round, eta, budget)?;
    let decision = SelectionDecision::plain(round, outcome.best_entry().subset.clone(), gradients.len());
    Ok((decision, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gradient, Arch};
    use crate::rng;

    fn fixture() -> (ModelParameters, Vec<GradientVector>, Batch) {
        let arch = Arch::Linear { d_in: 2, classes: 3 };
        let params = ModelParameters::init(arch, &mut rng::stream(1, "oracle"));
        let rows = [
            (vec![1.0, 0.2], 0),
            (vec![0.1, 1.1], 1),
            (vec![-1.0, -0.7], 2),
            (vec![0.9, -0.4], 0),
        ];
        let grads = rows
            .iter()
            .map(|(x, y)| gradient(&params, &Batch::new(x.clone(), vec![*y], 2).unwrap()).unwrap())
            .collect();
        let val = Batch::new(vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0], vec![0, 1, 2], 2).unwrap();
        (params, grads, val)
    }

    #[test]
    fn full_subset_has_zero_regret() {
        let (p, g, v) = fixture();
        let refs: Vec<&GradientVector> = g.iter().collect();
        let (d, o) = select_oracle(&p, &refs, &v, 4, 0.5, 0, 100).unwrap();
        assert_eq!(o.table.len(), 1);
        assert_eq!(d.selected, vec![0, 1, 2, 3]);
        assert_eq!(o.regret(&d.selected), Some(0.0));
    }

    #[test]
    fn argmin_matches_direct_reevaluation() {
        let (p, g, v) = fixture();
        let refs: Vec<&GradientVector> = g.iter().collect();
        let (d, o) = select_oracle(&p, &refs, &v, 2, 0.5, 3, 100).unwrap();
        assert_eq!(o.table.len(), 6);
        // second path: perturb flattened parameters directly
        let base = p.flatten();
        let mut best = (f64::INFINITY, vec![]);
        for a in 0..4 {
            for b in a + 1..4 {
                let (ga, gb) = (g[a].flatten(), g[b].flatten());
                let w: Vec<f64> = base
                    .iter()
                    .zip(ga.iter().zip(&gb))
                    .map(|(w, (x, y))| w - 0.5 * ((x + y) / 2.0))
                    .collect();
                let m = ModelParameters::from_flat(p.arch, &w).unwrap();
                let l = crate::model::loss(&m, &v).unwrap();
                assert!((o.entry(&[a, b]).unwrap().loss - l).abs() < 1e-12);
                if l < best.0 {
                    best = (l, vec![a, b]);
                }
            }
        }
        assert_eq!(d.selected, best.1);
        assert_eq!(o.regret(&d.selected), Some(0.0));
        assert!(o.table.iter().all(|e| o.regret(&e.subset).unwrap() >= 0.0));
        assert!(o.worst_entry().loss >= o.best_entry().loss);
    }

    #[test]
    fn budget_is_enforced() {
        let (p, g, v) = fixture();
        let refs: Vec<&GradientVector> = g.iter().collect();
        assert!(matches!(
            oracle_table(&p, &refs, &v, 2, 0.1, 5),
            Err(FedselError::Config(_))
        ));
    }
}
