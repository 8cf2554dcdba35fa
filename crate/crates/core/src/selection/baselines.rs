use rand::seq::index;
use rand::Rng;

use super::{check_sizes, SelectionDecision};
use crate::error::{FedselError, Result};
use crate::rng;

fn check_losses(losses: &[f64]) -> Result<()> {
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(FedselError::Numeric(format!("local loss of client {i} is not finite")));
    }
    Ok(())
}

/// Every client.
pub fn select_full(num_clients: usize, round: usize) -> SelectionDecision {
    SelectionDecision::plain(round, (0..num_clients).collect(), num_clients)
}

/// `per_round` clients uniformly without replacement; a pure function of
/// `(seed, round)`.
pub fn select_random(num_clients: usize, per_round: usize, seed: u64, round: usize) -> Result<SelectionDecision> {
    check_sizes(num_clients, per_round)?;
    let mut rng = rng::round_stream(seed, rng::STREAM_SELECTION, round);
    let picked = index::sample(&mut rng, num_clients, per_round).into_vec();
    Ok(SelectionDecision::plain(round, picked, num_clients))
}

/// Power-of-choice: a uniform candidate set of size
/// `max(J, round(candidate_frac·K))`, then the `J` candidates with the highest
/// local loss (ties to the lower client id).
pub fn select_top_loss(
    losses: &[f64],
    per_round: usize,
    candidate_frac: f64,
    seed: u64,
    round: usize,
) -> Result<SelectionDecision> {
    let k = losses.len();
    check_sizes(k, per_round)?;
    check_losses(losses)?;
    if !(candidate_frac > 0.0 && candidate_frac <= 1.0) {
        return Err(FedselError::Config(format!(
            "candidate_frac must be in (0, 1], got {candidate_frac}"
        )));
    }
    let m = per_round.max((candidate_frac * k as f64).round() as usize).min(k);
    let mut rng = rng::round_stream(seed, rng::STREAM_SELECTION, round);
    let mut candidates = index::sample(&mut rng, k, m).into_vec();
    candidates.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    candidates.truncate(per_round);
    Ok(SelectionDecision::plain(round, candidates, k))
}

/// Samples `J` clients without replacement with probability proportional to
/// `exp(loss / τ)`, renormalizing after every draw.
pub fn select_loss_softmax(
    losses: &[f64],
    per_round: usize,
    temperature: f64,
    seed: u64,
    round: usize,
) -> Result<SelectionDecision> {
    let k = losses.len();
    check_sizes(k, per_round)?;
    check_losses(losses)?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(FedselError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut pool: Vec<(usize, f64)> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| (i, ((l - max) / temperature).exp()))
        .collect();
    let mut rng = rng::round_stream(seed, rng::STREAM_SELECTION, round);
    let mut picked = Vec::with_capacity(per_round);
    while picked.len() < per_round {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let choice = if total > 0.0 && total.is_finite() {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut at = pool.len() - 1;
            for (pos, (_, w)) in pool.iter().enumerate() {
                acc += w;
                if u < acc {
                    at = pos;
                    break;
                }
            }
            at
        } else {
            // all remaining weights underflowed
            rng.random_range(0..pool.len())
        };
        picked.push(pool.remove(choice).0);
    }
    Ok(SelectionDecision::plain(round, picked, k))
}
