use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub client_id: usize,
    pub selected_at: usize,
}

/// Age-of-update cooldown queue.
///
/// A client selected at round `t` is ineligible for every round
/// `t' <= t + ceil(L / J)` and eligible again strictly after. Entries are kept
/// oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AoUQueue {
    queue_len: usize,
    clients_per_round: usize,
    entries: VecDeque<QueueEntry>,
}

impl AoUQueue {
    pub fn new(queue_len: usize, clients_per_round: usize) -> Self {
        Self {
            queue_len,
            clients_per_round: clients_per_round.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue_len
    }

    /// Cooldown in rounds, `ceil(L / J)`.
    pub fn cooldown(&self) -> usize {
        self.queue_len.div_ceil(self.clients_per_round)
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn is_eligible(&self, client_id: usize, round: usize) -> bool {
        let cooldown = self.cooldown();
        self.entries
            .iter()
            .find(|e| e.client_id == client_id)
            .is_none_or(|e| round > e.selected_at + cooldown)
    }

    fn expire(&mut self, round: usize) {
        let cooldown = self.cooldown();
        self.entries.retain(|e| round <= e.selected_at + cooldown);
    }

    pub fn eligible(&self, num_clients: usize, round: usize) -> Vec<usize> {
        (0..num_clients)
            .filter(|&k| self.is_eligible(k, round))
            .collect()
    }

    /// Eligible clients at `round`, evicting the oldest entries when fewer
    /// than `needed` clients are eligible. Returns `(eligible, evicted)`.
    pub fn make_room(&mut self, num_clients: usize, needed: usize, round: usize) -> (Vec<usize>, Vec<usize>) {
        self.expire(round);
        let mut evicted = Vec::new();
        let mut eligible = self.eligible(num_clients, round);
        while eligible.len() < needed {
            let Some(e) = self.entries.pop_front() else {
                break;
            };
            log::warn!(
                "round {round}: evicting client {} (selected at round {}) from the cooldown queue",
                e.client_id,
                e.selected_at
            );
            evicted.push(e.client_id);
            eligible = self.eligible(num_clients, round);
        }
        (eligible, evicted)
    }

    /// Enqueues the clients selected at `round`.
    pub fn record(&mut self, selected: &[usize], round: usize) {
        if self.cooldown() == 0 {
            return;
        }
        self.entries.retain(|e| !selected.contains(&e.client_id));
        let mut ids = selected.to_vec();
        ids.sort_unstable();
        for client_id in ids {
            self.entries.push_back(QueueEntry {
                client_id,
                selected_at: round,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_length_queue_never_blocks() {
        let mut q = AoUQueue::new(0, 2);
        q.record(&[0, 1], 0);
        assert_eq!(q.eligible(4, 1), vec![0, 1, 2, 3]);
        assert_eq!(q.entries().count(), 0);
    }

    #[test]
    fn cooldown_is_ceil_of_len_over_per_round() {
        assert_eq!(AoUQueue::new(4, 2).cooldown(), 2);
        assert_eq!(AoUQueue::new(5, 2).cooldown(), 3);
        assert_eq!(AoUQueue::new(6, 4).cooldown(), 2);
        assert_eq!(AoUQueue::new(1, 3).cooldown(), 1);
    }

    #[test]
    fn eligibility_boundary() {
        let mut q = AoUQueue::new(4, 2);
        q.record(&[3, 1], 5);
        assert!(!q.is_eligible(1, 5));
        assert!(!q.is_eligible(1, 6));
        assert!(!q.is_eligible(3, 7));
        assert!(q.is_eligible(3, 8));
        assert!(q.is_eligible(0, 6));
        let (eligible, evicted) = q.make_room(6, 2, 6);
        assert_eq!(eligible, vec![0, 2, 4, 5]);
        assert!(evicted.is_empty());
    }

    #[test]
    fn reselection_keeps_one_entry() {
        let mut q = AoUQueue::new(2, 1);
        q.record(&[0], 0);
        q.record(&[0], 1);
        assert_eq!(q.entries().count(), 1);
        assert_eq!(q.entries().next().unwrap().selected_at, 1);
    }

    #[test]
    fn forced_eviction_takes_oldest_first() {
        let mut q = AoUQueue::new(6, 1);
        q.record(&[2], 0);
        q.record(&[0], 1);
        q.record(&[1], 2);
        // round 3: clients 0, 1, 2 all cooling down; only 3 is free
        let (eligible, evicted) = q.make_room(4, 2, 3);
        assert_eq!(evicted, vec![2]);
        assert_eq!(eligible, vec![2, 3]);
        let (eligible, evicted) = q.make_room(4, 4, 3);
        assert_eq!(evicted, vec![0, 1]);
        assert_eq!(eligible.len(), 4);
    }
}
