//! Client-selection policies.
//!
//! PNCS picks the subset with the lowest mean pairwise power-norm cosine
//! similarity among clients not cooling down in the [`AoUQueue`]. Baselines
//! (uniform random, loss-based, full participation) and the exhaustive
//! validation-loss oracle share the same [`SelectionDecision`] output.

mod baselines;
mod oracle;
mod pncs;
mod queue;

pub use baselines::{select_full, select_loss_softmax, select_random, select_top_loss};
pub use oracle::{oracle_table, select_oracle, OracleEntry, OracleOutcome, DEFAULT_ORACLE_BUDGET};
pub use pncs::{
    pairwise_matrix, select_from_matrix, select_pncs, subset_score, PairwiseMatrix, PncsParams,
    SubsetScore, DEFAULT_SUBSET_BUDGET,
};
pub use queue::{AoUQueue, QueueEntry};

use serde::{Deserialize, Serialize};

use crate::error::{FedselError, Result};
use crate::numerics::Polarization;

/// How a PNCS subset was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub round: usize,
    /// Selected client ids, ascending.
    pub selected: Vec<usize>,
    /// Mean pairwise similarity of the selected subset (PNCS only).
    pub score: Option<f64>,
    /// Pairwise similarities over the eligible clients (PNCS only).
    pub pairwise: Option<PairwiseMatrix>,
    /// Clients that were eligible when the decision was made.
    pub eligible: Vec<usize>,
    /// Clients force-evicted from the cooldown queue to reach `J` candidates.
    pub evicted: Vec<usize>,
    /// At least one pair involved a zero-norm gradient and scored 0.
    pub degenerate: bool,
    pub search: Option<SearchMethod>,
}

impl SelectionDecision {
    pub(crate) fn plain(round: usize, mut selected: Vec<usize>, num_clients: usize) -> Self {
        selected.sort_unstable();
        Self {
            round,
            selected,
            score: None,
            pairwise: None,
            eligible: (0..num_clients).collect(),
            evicted: Vec::new(),
            degenerate: false,
            search: None,
        }
    }
}

fn default_p() -> f64 {
    4.0
}
fn default_queue_len() -> usize {
    4
}
fn default_budget() -> usize {
    DEFAULT_SUBSET_BUDGET
}
fn default_candidate_frac() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    1.0
}

/// Policy as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Pncs {
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default)]
        variant: Polarization,
        #[serde(default = "default_queue_len")]
        queue_len: usize,
        #[serde(default = "default_budget")]
        budget: usize,
        /// Per-layer weights over the selection layers; uniform when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        segment_weights: Option<Vec<f64>>,
    },
    Random,
    TopLoss {
        #[serde(default = "default_candidate_frac")]
        candidate_frac: f64,
    },
    LossSoftmax {
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    Full,
    Oracle,
}

impl PolicySpec {
    pub fn pncs_default() -> Self {
        PolicySpec::Pncs {
            p: default_p(),
            variant: Polarization::Powered,
            queue_len: default_queue_len(),
            budget: default_budget(),
            segment_weights: None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PolicySpec::Pncs { .. } => "pncs",
            PolicySpec::Random => "random",
            PolicySpec::TopLoss { .. } => "top_loss",
            PolicySpec::LossSoftmax { .. } => "loss_softmax",
            PolicySpec::Full => "full",
            PolicySpec::Oracle => "oracle",
        }
    }

    pub fn queue_len(&self) -> usize {
        match self {
            PolicySpec::Pncs { queue_len, .. } => *queue_len,
            _ => 0,
        }
    }

    /// Clients aggregated per round: `K` for full participation, else `J`.
    pub fn effective_per_round(&self, num_clients: usize, clients_per_round: usize) -> usize {
        match self {
            PolicySpec::Full => num_clients,
            _ => clients_per_round,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicySpec::Pncs { p, budget, segment_weights, .. } => {
                if ![1.0, 2.0, 4.0].contains(p) {
                    return Err(FedselError::Config(format!("pncs p must be 1, 2 or 4, got {p}")));
                }
                if *budget == 0 {
                    return Err(FedselError::Config("pncs budget must be >= 1".into()));
                }
                if let Some(w) = segment_weights {
                    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                        return Err(FedselError::Config(
                            "segment_weights must be non-negative".into(),
                        ));
                    }
                }
            }
            PolicySpec::TopLoss { candidate_frac } => {
                if !(*candidate_frac > 0.0 && *candidate_frac <= 1.0) {
                    return Err(FedselError::Config(format!(
                        "candidate_frac must be in (0, 1], got {candidate_frac}"
                    )));
                }
            }
            PolicySpec::LossSoftmax { temperature } => {
                if !(temperature.is_finite() && *temperature > 0.0) {
                    return Err(FedselError::Config(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
            }
            PolicySpec::Random | PolicySpec::Full | PolicySpec::Oracle => {}
        }
        Ok(())
    }
}

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Visits every `k`-subset of `0..n` in lexicographic order.
pub fn for_each_combination<F: FnMut(&[usize])>(n: usize, k: usize, mut f: F) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        // rightmost position that can still advance
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] < n - k + i {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// All `k`-subsets of `0..n`, lexicographic.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_combination(n, k, |c| out.push(c.to_vec()));
    out
}

pub(crate) fn check_sizes(num_clients: usize, per_round: usize) -> Result<()> {
    if per_round == 0 || per_round > num_clients {
        return Err(FedselError::Config(format!(
            "cannot select {per_round} of {num_clients} clients"
        )));
    }
    Ok(())
}
