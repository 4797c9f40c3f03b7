//! Shared-replay Q-learning for the whole station.
//!
//! Every charger is an agent with the same network. Each step the allocator
//! picks which EVs are plugged in, every charger chooses a power
//! epsilon-greedily, all transitions go into one replay memory, and one
//! minibatch gradient step is taken.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{allocate, score_evs};
use crate::error::ConfigError;
use crate::policy::Policy;
use crate::qnet::{input_rows, sync_target, QNetwork, Scalar, TargetNetwork, DEFAULT_HIDDEN};
use crate::replay::{ReplayMemory, Transition};
use crate::scenario::{
    arrivals_by_step, generate_episode, stream_rng, ArrivalPattern, EvRequest, RngStream,
    StationConfig, Tariff,
};
use crate::station::{ActionSet, Station};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_decay_every` episodes.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub target_sync_episodes: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_min: f64,
    /// Fraction of `episodes` over which epsilon falls linearly to `epsilon_min`.
    pub epsilon_decay_fraction: f64,
    pub episodes: usize,
    pub hidden: Vec<usize>,
    /// Rescale each gradient to at most this norm.
    pub grad_clip: Option<f64>,
    /// Multiplies rewards before they are stored.
    pub reward_scale: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lr: 0.01,
            lr_decay: 0.5,
            lr_decay_every: 200,
            target_sync_episodes: 25,
            batch_size: 64,
            replay_capacity: 100_000,
            epsilon_start: 1.0,
            epsilon_min: 0.05,
            epsilon_decay_fraction: 0.8,
            episodes: 2000,
            hidden: DEFAULT_HIDDEN.to_vec(),
            grad_clip: None,
            reward_scale: 1.0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ConfigError::invalid("gamma", "must lie in [0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::invalid("lr", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(ConfigError::invalid("lr_decay", "must lie in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(ConfigError::invalid("lr_decay_every", "must be at least 1"));
        }
        if self.target_sync_episodes == 0 {
            return Err(ConfigError::invalid("target_sync_episodes", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::invalid("batch_size", "must be at least 1"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(ConfigError::invalid("replay_capacity", "must hold at least one batch"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_min)
            || !(self.epsilon_min..=1.0).contains(&self.epsilon_start)
        {
            return Err(ConfigError::invalid(
                "epsilon_start",
                "need 0 <= epsilon_min <= epsilon_start <= 1",
            ));
        }
        if !(self.epsilon_decay_fraction > 0.0 && self.epsilon_decay_fraction <= 1.0) {
            return Err(ConfigError::invalid("epsilon_decay_fraction", "must lie in (0, 1]"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(ConfigError::invalid("hidden", "need at least one nonempty layer"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(ConfigError::invalid("grad_clip", "must be positive"));
            }
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(ConfigError::invalid("reward_scale", "must be positive"));
        }
        Ok(())
    }

    /// Exploration rate during episode `episode` (zero-based).
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = (self.epsilon_decay_fraction * self.episodes as f64).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_min - self.epsilon_start) * frac
    }

    pub fn learning_rate(&self, episode: usize) -> f64 {
        self.lr * self.lr_decay.powi((episode / self.lr_decay_every) as i32)
    }
}

/// Epsilon-greedy choice for one charger. A singleton set consumes no
/// randomness.
pub fn select_action<F: Scalar, R: Rng + ?Sized>(
    net: &QNetwork<F>,
    features: &[f64],
    actions: &ActionSet,
    a_max: f64,
    epsilon: f64,
    rng: &mut R,
) -> f64 {
    if actions.len() == 1 {
        return actions.get(0);
    }
    if rng.random::<f64>() < epsilon {
        return actions.get(rng.random_range(0..actions.len()));
    }
    net.best_action(features, actions, a_max).0
}

/// Target value `max_a' Q(s', a'; target)` for a batch of next states.
fn bootstrap_values<F: Scalar>(
    target: &TargetNetwork<F>,
    queries: &[(&[f64], ActionSet)],
    a_max: f64,
) -> Vec<f64> {
    target.best_actions(queries, a_max).into_iter().map(|(_, q)| q).collect()
}

/// Mean squared Bellman error on a minibatch and one gradient step.
pub fn sgd_step<F: Scalar>(
    net: &mut QNetwork<F>,
    target: &TargetNetwork<F>,
    batch: &[&Transition],
    gamma: f64,
    lr: f64,
    a_max: f64,
    grad_clip: Option<f64>,
) -> f64 {
    let mut boot = vec![0.0; batch.len()];
    let pending: Vec<usize> = (0..batch.len()).filter(|&k| !batch[k].done && gamma != 0.0).collect();
    let queries: Vec<(&[f64], ActionSet)> =
        pending.iter().map(|&k| (batch[k].next_state.as_slice(), batch[k].next_actions)).collect();
    for (&k, v) in pending.iter().zip(bootstrap_values(target, &queries, a_max)) {
        boot[k] = v;
    }
    fit_batch(net, batch, &boot, gamma, lr, a_max, grad_clip)
}

fn fit_batch<F: Scalar>(
    net: &mut QNetwork<F>,
    batch: &[&Transition],
    boot: &[f64],
    gamma: f64,
    lr: f64,
    a_max: f64,
    grad_clip: Option<f64>,
) -> f64 {
    let targets: Vec<F> = batch
        .iter()
        .zip(boot)
        .map(|(t, b)| F::from_real(t.reward + if t.done { 0.0 } else { gamma * b }))
        .collect();
    let actions: Vec<[f64; 1]> = batch.iter().map(|t| [t.action]).collect();
    let pairs: Vec<(&[f64], &[f64])> =
        batch.iter().zip(&actions).map(|(t, a)| (t.state.as_slice(), &a[..])).collect();
    let x = input_rows::<F>(&pairs, a_max, net.n_inputs());
    let (loss, mut grad) = net.loss_and_gradient(x.view(), &targets);
    if let Some(c) = grad_clip {
        let n = grad.norm();
        if n > c {
            grad.scale(c / n);
        }
    }
    net.apply_gradient(&grad, lr);
    loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub profit: f64,
    pub charge_revenue: f64,
    pub discharge_revenue: f64,
    pub penalty: f64,
    pub demand_charge: f64,
    pub loss: f64,
    pub epsilon: f64,
    pub lr: f64,
}

/// Trains a shared network on freshly sampled episodes.
#[derive(Debug, Clone)]
pub struct Trainer<F: Scalar = f32> {
    station: StationConfig,
    tariff: Tariff,
    pattern: ArrivalPattern,
    cfg: TrainConfig,
    seed: u64,
    net: QNetwork<F>,
    target: TargetNetwork<F>,
    generation: u64,
    memory: ReplayMemory,
    episodes_done: usize,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(
        station: StationConfig,
        tariff: Tariff,
        pattern: ArrivalPattern,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        let n_inputs = Station::new(station.clone(), tariff.clone())?.scale().feature_len() + 1;
        let mut init = stream_rng(seed, RngStream::Exploration, u64::MAX);
        let net = QNetwork::<F>::new(n_inputs, &cfg.hidden, &mut init);
        Self::resume(station, tariff, pattern, cfg, seed, net, 0)
    }

    /// Continues from saved weights; the replay memory starts empty and the
    /// target network equals the loaded weights.
    pub fn resume(
        station: StationConfig,
        tariff: Tariff,
        pattern: ArrivalPattern,
        cfg: TrainConfig,
        seed: u64,
        net: QNetwork<F>,
        episodes_done: usize,
    ) -> Result<Self, ConfigError> {
        station.validate()?;
        tariff.validate()?;
        pattern.validate()?;
        cfg.validate()?;
        let expected = Station::new(station.clone(), tariff.clone())?.scale().feature_len() + 1;
        if net.n_inputs() != expected {
            return Err(ConfigError::invalid(
                "hidden",
                format!("network takes {} inputs, station needs {expected}", net.n_inputs()),
            ));
        }
        let memory = ReplayMemory::new(cfg.replay_capacity);
        Ok(Self {
            target: sync_target(&net),
            net,
            generation: 0,
            memory,
            station,
            tariff,
            pattern,
            cfg,
            seed,
            episodes_done,
        })
    }

    pub fn network(&self) -> &QNetwork<F> {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    /// Training requests for a given episode index.
    pub fn episode_requests(&self, episode: usize) -> Vec<EvRequest> {
        let mut rng = stream_rng(self.seed, RngStream::TrainScenario, episode as u64);
        generate_episode(&self.pattern, &self.station, &mut rng)
    }

    /// Runs episodes until `cfg.episodes` are done, calling `on_episode` after each.
    pub fn train_with<C: FnMut(&EpisodeMetrics, &Self)>(&mut self, mut on_episode: C) -> Vec<EpisodeMetrics> {
        let mut out = Vec::new();
        while self.episodes_done < self.cfg.episodes {
            let m = self.train_episode();
            on_episode(&m, self);
            out.push(m);
        }
        out
    }

    pub fn train(&mut self) -> Vec<EpisodeMetrics> {
        self.train_with(|_, _| {})
    }

    /// One full training episode.
    pub fn train_episode(&mut self) -> EpisodeMetrics {
        let episode = self.episodes_done;
        let eps = self.cfg.epsilon(episode);
        let lr = self.cfg.learning_rate(episode);
        let requests = self.episode_requests(episode);
        let mut rng = stream_rng(self.seed, RngStream::Exploration, episode as u64);
        let mut station =
            Station::new(self.station.clone(), self.tariff.clone()).expect("validated config");
        let n_steps = station.n_steps();
        let n_chargers = self.station.n_chargers;
        let a_max = self.station.a_max;
        let arrivals = arrivals_by_step(&requests, n_steps);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for t in 0..n_steps {
            station.admit(&arrivals[t]);
            let connected = cade_allocation(&self.net, &station);
            station.apply_allocation(&connected);
            let scale = *station.scale();
            let states: Vec<Vec<f64>> = (0..n_chargers).map(|j| station.observe(j).encode(&scale)).collect();
            let sets: Vec<ActionSet> = (0..n_chargers).map(|j| station.charger_actions(j)).collect();
            let mut actions = vec![0.0; n_chargers];
            let mut greedy = Vec::new();
            for j in 0..n_chargers {
                if sets[j].len() == 1 {
                    actions[j] = sets[j].get(0);
                } else if rng.random::<f64>() < eps {
                    actions[j] = sets[j].get(rng.random_range(0..sets[j].len()));
                } else {
                    greedy.push(j);
                }
            }
            if !greedy.is_empty() {
                let queries: Vec<(&[f64], ActionSet)> =
                    greedy.iter().map(|&j| (states[j].as_slice(), sets[j])).collect();
                for (&j, (a, _)) in greedy.iter().zip(self.net.best_actions(&queries, a_max)) {
                    actions[j] = a;
                }
            }
            let outcome = station.step_with(&actions);
            let rewards = outcome.rewards();
            let done = station.is_done();
            for (j, state) in states.into_iter().enumerate() {
                self.memory.push(Transition {
                    state,
                    action: actions[j],
                    next_state: station.observe(j).encode(&scale),
                    reward: rewards[j] * self.cfg.reward_scale,
                    done,
                    next_actions: station.charger_actions(j),
                });
            }
            if let Some(l) = self.learn(lr, &mut rng) {
                loss_sum += l;
                loss_count += 1;
            }
        }
        self.episodes_done += 1;
        if self.episodes_done % self.cfg.target_sync_episodes == 0 {
            self.target = sync_target(&self.net);
            self.generation += 1;
        }
        let p = station.episode_profit();
        EpisodeMetrics {
            episode,
            profit: p.profit,
            charge_revenue: p.charge_revenue,
            discharge_revenue: p.discharge_revenue,
            penalty: p.penalty,
            demand_charge: p.demand_charge,
            loss: if loss_count == 0 { f64::NAN } else { loss_sum / loss_count as f64 },
            epsilon: eps,
            lr,
        }
    }

    /// One gradient step on a sampled minibatch, reusing bootstrap maxima
    /// already computed for the current target network.
    fn learn<R: Rng + ?Sized>(&mut self, lr: f64, rng: &mut R) -> Option<f64> {
        let idx = self.memory.sample_indices(self.cfg.batch_size, rng)?;
        let gamma = self.cfg.gamma;
        let a_max = self.station.a_max;
        let mut boot = vec![0.0; idx.len()];
        let mut missing = Vec::new();
        for (k, &i) in idx.iter().enumerate() {
            let t = self.memory.get(i);
            if t.done || gamma == 0.0 {
                continue;
            }
            match self.memory.cached_bootstrap(i, self.generation) {
                Some(v) => boot[k] = v,
                None => missing.push(k),
            }
        }
        if !missing.is_empty() {
            let queries: Vec<(&[f64], ActionSet)> = missing
                .iter()
                .map(|&k| {
                    let t = self.memory.get(idx[k]);
                    (t.next_state.as_slice(), t.next_actions)
                })
                .collect();
            let values = bootstrap_values(&self.target, &queries, a_max);
            for (&k, v) in missing.iter().zip(values) {
                boot[k] = v;
                self.memory.store_bootstrap(idx[k], self.generation, v);
            }
        }
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.memory.get(i)).collect();
        Some(fit_batch(&mut self.net, &batch, &boot, gamma, lr, a_max, self.cfg.grad_clip))
    }
}

/// Allocation used by CADE: everyone is plugged in while chargers suffice,
/// otherwise the EVs with the largest `q_c - q_w` gaps.
pub fn cade_allocation<F: Scalar>(net: &QNetwork<F>, station: &Station) -> Vec<usize> {
    let present = station.present_sessions();
    if present.len() <= station.config().n_chargers {
        return present;
    }
    let scores = score_evs(net, station, &present);
    allocate(&scores, station.config().n_chargers).connected_sessions(&scores)
}

/// Deployed CADE: greedy actions, no exploration or learning.
#[derive(Debug, Clone)]
pub struct CadePolicy<F: Scalar = f64> {
    net: QNetwork<F>,
}

impl<F: Scalar> CadePolicy<F> {
    pub fn new(net: QNetwork<F>) -> Self {
        Self { net }
    }

    pub fn network(&self) -> &QNetwork<F> {
        &self.net
    }
}

impl<F: Scalar> Policy for CadePolicy<F> {
    fn name(&self) -> String {
        "CADE".into()
    }

    fn allocate(&mut self, station: &Station) -> Vec<usize> {
        cade_allocation(&self.net, station)
    }

    fn act(&mut self, station: &Station) -> Vec<f64> {
        let n = station.config().n_chargers;
        let scale = *station.scale();
        let mut actions = vec![0.0; n];
        let mut rows = Vec::new();
        let mut feats = Vec::new();
        for j in 0..n {
            let set = station.charger_actions(j);
            if set.len() > 1 {
                rows.push((j, set));
                feats.push(station.observe(j).encode(&scale));
            }
        }
        let queries: Vec<(&[f64], ActionSet)> =
            rows.iter().zip(&feats).map(|((_, s), f)| (f.as_slice(), *s)).collect();
        for ((j, _), (a, _)) in rows.iter().zip(self.net.best_actions(&queries, station.config().a_max)) {
            actions[*j] = a;
        }
        actions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::run_episode;
    use crate::scenario::PatternKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (StationConfig, TrainConfig) {
        let station = StationConfig { n_chargers: 2, n_waiting: 1, delta_a: 25.0, horizon_hours: 6.0, ..Default::default() };
        let cfg = TrainConfig {
            episodes: 4,
            hidden: vec![8, 4],
            batch_size: 8,
            replay_capacity: 500,
            target_sync_episodes: 2,
            ..Default::default()
        };
        (station, cfg)
    }

    #[test]
    fn epsilon_schedule_is_monotone_and_reaches_floor() {
        let cfg = TrainConfig { episodes: 100, ..Default::default() };
        let eps: Vec<f64> = (0..100).map(|e| cfg.epsilon(e)).collect();
        assert_eq!(eps[0], 1.0);
        assert!(eps.windows(2).all(|w| w[1] <= w[0]));
        assert!((eps[80] - 0.05).abs() < 1e-12 && (eps[99] - 0.05).abs() < 1e-12);
        assert_eq!(cfg.learning_rate(199), 0.01);
        assert_eq!(cfg.learning_rate(200), 0.005);
        assert_eq!(cfg.learning_rate(450), 0.0025);
    }

    #[test]
    fn single_transition_loss() {
        let mut net = QNetwork::<f64>::new(12, &[4], &mut ChaCha8Rng::seed_from_u64(1));
        net.set_params(&vec![0.0; net.n_params()]);
        let target = sync_target(&net);
        let t = Transition {
            state: vec![0.5; 11],
            action: 10.0,
            next_state: vec![0.5; 11],
            reward: 2.0,
            done: true,
            next_actions: ActionSet::zero(10.0),
        };
        let loss = sgd_step(&mut net, &target, &[&t], 1.0, 1e-3, 100.0, None);
        assert_eq!(loss, 4.0);
    }

    #[test]
    fn zero_discount_ignores_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = QNetwork::<f64>::new(12, &[6], &mut rng);
        let t = Transition {
            state: vec![0.2; 11],
            action: -10.0,
            next_state: vec![0.7; 11],
            reward: 1.5,
            done: false,
            next_actions: crate::station::feasible_actions(Some(50.0), &StationConfig { delta_a: 10.0, ..Default::default() }),
        };
        let t1 = sync_target(&QNetwork::<f64>::new(12, &[6], &mut rng));
        let t2 = sync_target(&QNetwork::<f64>::new(12, &[6], &mut rng));
        let (mut a, mut b) = (net.clone(), net.clone());
        let la = sgd_step(&mut a, &t1, &[&t], 0.0, 0.01, 100.0, None);
        let lb = sgd_step(&mut b, &t2, &[&t], 0.0, 0.01, 100.0, None);
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_learning_rate_leaves_outputs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = QNetwork::<f64>::new(12, &[16, 8], &mut rng);
        let target = sync_target(&net);
        let batch: Vec<Transition> = (0..5)
            .map(|k| Transition {
                state: (0..11).map(|_| rng.random_range(0.0..1.0)).collect(),
                action: 10.0 * k as f64,
                next_state: (0..11).map(|_| rng.random_range(0.0..1.0)).collect(),
                reward: k as f64,
                done: k == 4,
                next_actions: ActionSet::zero(10.0),
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let mut moved = net.clone();
        sgd_step(&mut moved, &target, &refs, 1.0, 1e-15, 100.0, None);
        for t in &batch {
            let a = net.q_value(&t.state, t.action, 100.0);
            let b = moved.q_value(&t.state, t.action, 100.0);
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn select_action_extremes() {
        let cfg = StationConfig { delta_a: 25.0, ..Default::default() };
        let net = QNetwork::<f64>::new(12, &[8], &mut ChaCha8Rng::seed_from_u64(4));
        let feats = vec![0.3; 11];
        let set = crate::station::feasible_actions(Some(50.0), &cfg);
        assert_eq!(set.len(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let best = net.best_action(&feats, &set, 100.0).0;
        for _ in 0..20 {
            assert_eq!(select_action(&net, &feats, &set, 100.0, 0.0, &mut rng), best);
        }
        let single = crate::station::feasible_actions(None, &cfg);
        assert_eq!(select_action(&net, &feats, &single, 100.0, 1.0, &mut rng), 0.0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        // chi-square with 4 degrees of freedom; 18.47 is the 0.999 quantile
        let five = ActionSet { lo: -2, hi: 2, step: 10.0 };
        let net = QNetwork::<f64>::new(12, &[4], &mut ChaCha8Rng::seed_from_u64(6));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            let a = select_action(&net, &[0.1; 11], &five, 100.0, 1.0, &mut rng);
            counts[five.index_of(a).unwrap()] += 1;
        }
        let e = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 18.47, "{chi2} {counts:?}");
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let (station, cfg) = small();
        let pattern = ArrivalPattern::preset(PatternKind::Highway).scaled(3.0);
        let run = || {
            let mut tr = Trainer::<f64>::new(station.clone(), Tariff::default(), pattern.clone(), cfg.clone(), 9).unwrap();
            let m = tr.train();
            (m, tr.network().clone())
        };
        let (m1, n1) = run();
        let (m2, n2) = run();
        assert_eq!(m1.len(), 4);
        assert_eq!(m1, m2);
        assert_eq!(n1, n2);
        assert!(n1.is_finite());
        assert!(m1.iter().any(|m| m.loss.is_finite()));
    }

    #[test]
    fn trained_policy_runs_feasibly() {
        let (station, cfg) = small();
        let pattern = ArrivalPattern::preset(PatternKind::Retail).scaled(3.0);
        let mut tr = Trainer::<f32>::new(station.clone(), Tariff::default(), pattern.clone(), cfg, 1).unwrap();
        tr.train();
        let mut pol = CadePolicy::new(tr.network().cast::<f64>());
        let reqs = tr.episode_requests(99);
        let out = run_episode(&mut pol, &station, &Tariff::default(), &reqs, 0).unwrap();
        assert!((out.reward_sum - out.profit.profit).abs() <= 1e-6 * out.profit.profit.abs().max(1.0));
    }
}
