//! Replay memory shared by every charger.

use std::collections::VecDeque;

use rand::Rng;

use crate::station::ActionSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: f64,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Feasible actions at `next_state`, for the bootstrap maximum.
    pub next_actions: ActionSet,
}

#[derive(Debug, Clone)]
struct Slot {
    transition: Transition,
    /// `max_a' Q(s', a'; target)` tagged with the target generation it was computed for.
    bootstrap: Option<(u64, f64)>,
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    slots: VecDeque<Slot>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { slots: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, transition: Transition) {
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(Slot { transition, bootstrap: None });
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.slots[i].transition
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.slots.iter().map(|s| &s.transition)
    }

    /// `k` distinct indices drawn uniformly, or `None` when fewer than `k`
    /// transitions are stored (the caller skips training).
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<Vec<usize>> {
        if self.slots.len() < k {
            return None;
        }
        Some(rand::seq::index::sample(rng, self.slots.len(), k).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        self.sample_indices(k, rng).map(|idx| idx.into_iter().map(|i| self.get(i)).collect())
    }

    pub(crate) fn cached_bootstrap(&self, i: usize, generation: u64) -> Option<f64> {
        match self.slots[i].bootstrap {
            Some((g, v)) if g == generation => Some(v),
            _ => None,
        }
    }

    pub(crate) fn store_bootstrap(&mut self, i: usize, generation: u64, value: f64) {
        self.slots[i].bootstrap = Some((generation, value));
    }
}
