//! Centralized assignment of present EVs to chargers or waiting spots.
//!
//! Each EV `k` is scored with the shared Q-network as if it were plugged in:
//! `q_c = max_a Q(s_k, a)` and `q_w = Q(s_k, 0)` (waiting is charging at zero
//! power). Maximizing `sum_k alpha_k q_c + (1 - alpha_k) q_w` under
//! `sum_k alpha_k = min(N^c, N^EV)` is separable, so taking the largest
//! `q_c - q_w` gaps is exact.

use std::cmp::Ordering;

use crate::qnet::{input_rows, QNetwork, Scalar};
use crate::station::Station;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvScore {
    pub session: usize,
    pub id: u64,
    pub q_charge: f64,
    pub q_wait: f64,
}

impl EvScore {
    pub fn gain(&self) -> f64 {
        self.q_charge - self.q_wait
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationDecision {
    /// `alpha_k`, aligned with the scores passed to [`allocate`].
    pub connected: Vec<bool>,
    pub objective: f64,
}

impl AllocationDecision {
    pub fn connected_sessions(&self, scores: &[EvScore]) -> Vec<usize> {
        scores.iter().zip(&self.connected).filter(|(_, c)| **c).map(|(s, _)| s.session).collect()
    }
}

/// Objective value of an assignment, summed in score order.
pub fn objective(scores: &[EvScore], connected: &[bool]) -> f64 {
    scores
        .iter()
        .zip(connected)
        .map(|(s, &c)| if c { s.q_charge } else { s.q_wait })
        .sum()
}

/// Connects the `min(n_chargers, N^EV)` EVs with the largest gains; ties go
/// to the lower EV id.
pub fn allocate(scores: &[EvScore], n_chargers: usize) -> AllocationDecision {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .gain()
            .partial_cmp(&scores[a].gain())
            .unwrap_or(Ordering::Equal)
            .then(scores[a].id.cmp(&scores[b].id))
    });
    let mut connected = vec![false; scores.len()];
    for &k in order.iter().take(n_chargers.min(scores.len())) {
        connected[k] = true;
    }
    let objective = objective(scores, &connected);
    AllocationDecision { connected, objective }
}

/// Scores the given sessions with the waiting-area summary from the previous
/// allocation, in one batched forward pass.
pub fn score_evs<F: Scalar>(net: &QNetwork<F>, station: &Station, sessions: &[usize]) -> Vec<EvScore> {
    if sessions.is_empty() {
        return Vec::new();
    }
    let waiting = station.previous_waiting();
    let scale = *station.scale();
    let feats: Vec<Vec<f64>> =
        sessions.iter().map(|&i| station.observe_session(i, waiting).encode(&scale)).collect();
    let acts: Vec<Vec<f64>> =
        sessions.iter().map(|&i| station.session_actions(i).iter().collect()).collect();
    let pairs: Vec<(&[f64], &[f64])> =
        feats.iter().zip(&acts).map(|(f, a)| (f.as_slice(), a.as_slice())).collect();
    let x = input_rows::<F>(&pairs, station.config().a_max, net.n_inputs());
    let q = net.forward(x.view());
    let mut row = 0;
    sessions
        .iter()
        .zip(&acts)
        .map(|(&i, a)| {
            let vals = &q.as_slice().expect("contiguous")[row..row + a.len()];
            row += a.len();
            let zero = a.iter().position(|&v| v == 0.0).expect("zero is always feasible");
            let q_charge = vals.iter().map(|v| v.to_real()).fold(f64::NEG_INFINITY, f64::max);
            EvScore {
                session: i,
                id: station.session(i).request.id,
                q_charge,
                q_wait: vals[zero].to_real(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::QNetwork;
    use crate::scenario::{EvRequest, StationConfig, Tariff};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn score(id: u64, q_charge: f64, q_wait: f64) -> EvScore {
        EvScore { session: id as usize, id, q_charge, q_wait }
    }

    #[test]
    fn all_connected_when_chargers_suffice() {
        let s = vec![score(1, 1.0, 0.0), score(2, -3.0, -3.0)];
        assert_eq!(allocate(&s, 5).connected, vec![true, true]);
    }

    #[test]
    fn largest_gains_win() {
        let s = vec![score(1, 2.0, 0.0), score(2, 0.0, 1.0), score(3, 5.0, 0.0)];
        let d = allocate(&s, 2);
        assert_eq!(d.connected, vec![true, false, true]);
        assert_eq!(d.objective, 8.0);
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let s = vec![score(7, 1.0, 0.0), score(3, 1.0, 0.0), score(5, 1.0, 0.0)];
        let d = allocate(&s, 2);
        assert_eq!(d.connected, vec![false, true, true]);
    }

    #[test]
    fn scores_dominate_waiting_value() {
        let cfg = StationConfig { n_chargers: 2, n_waiting: 2, delta_a: 10.0, ..Default::default() };
        let mut st = Station::new(cfg, Tariff::default()).unwrap();
        let reqs: Vec<EvRequest> = (1..=3)
            .map(|id| EvRequest { id, t_a: 0, t_d: 20, e_ini: 20.0 * id as f64, e_tgt: 70.0 })
            .collect();
        st.admit(&reqs);
        let net = QNetwork::<f64>::new(12, &[16, 8], &mut ChaCha8Rng::seed_from_u64(4));
        let present = st.present_sessions();
        let scores = score_evs(&net, &st, &present);
        for (s, &i) in scores.iter().zip(&present) {
            assert!(s.q_charge >= s.q_wait);
            let feats = st.observe_session(i, st.previous_waiting()).encode(st.scale());
            let (_, best) = net.best_action(&feats, &st.session_actions(i), 100.0);
            assert!((best - s.q_charge).abs() < 1e-12);
            assert!((net.q_value(&feats, 0.0, 100.0) - s.q_wait).abs() < 1e-12);
        }
        let mut flat = net.clone();
        flat.set_params(&vec![0.0; flat.n_params()]);
        for s in score_evs(&flat, &st, &present) {
            assert_eq!(s.q_charge, s.q_wait);
        }
    }
}
