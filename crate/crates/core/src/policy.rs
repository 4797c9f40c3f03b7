//! Station policies and the episode loop they share.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ConfigError;
use crate::scenario::{arrivals_by_step, EvRequest, StationConfig, Tariff};
use crate::station::{ProfitBreakdown, Station, StepOutcome};

/// A station operator. Each step the episode loop asks for an allocation,
/// applies it, then asks for one power per charger.
pub trait Policy {
    fn name(&self) -> String;

    /// Called before the first step with the episode's full request list
    /// (only clairvoyant policies may look at it) and an episode seed.
    fn begin_episode(&mut self, _requests: &[EvRequest], _seed: u64) {}

    /// Session indices to plug in; every other present EV waits.
    fn allocate(&mut self, station: &Station) -> Vec<usize>;

    /// One feasible power per charger.
    fn act(&mut self, station: &Station) -> Vec<f64>;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn begin_episode(&mut self, requests: &[EvRequest], seed: u64) {
        (**self).begin_episode(requests, seed)
    }
    fn allocate(&mut self, station: &Station) -> Vec<usize> {
        (**self).allocate(station)
    }
    fn act(&mut self, station: &Station) -> Vec<f64> {
        (**self).act(station)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeOutcome {
    pub profit: ProfitBreakdown,
    /// Sum of every charger's reward over the episode.
    pub reward_sum: f64,
    pub admitted: usize,
    pub rejected: usize,
    /// Summed station power and step count per tariff period.
    pub period_power: Vec<f64>,
    pub period_steps: Vec<usize>,
    /// Summed `-R^l` per period.
    pub demand_by_period: Vec<f64>,
    pub final_peaks: Vec<f64>,
    /// Lowest and highest EV energy seen while on site.
    pub energy_range: (f64, f64),
}

impl EpisodeOutcome {
    pub fn mean_power(&self, h: usize) -> f64 {
        if self.period_steps[h] == 0 {
            0.0
        } else {
            self.period_power[h] / self.period_steps[h] as f64
        }
    }
}

/// First `min(N^c, len)` sessions of an ordered list.
pub fn fill_chargers(station: &Station, ordered: &[usize]) -> Vec<usize> {
    ordered.iter().copied().take(station.config().n_chargers).collect()
}

pub fn run_episode<P: Policy + ?Sized>(
    policy: &mut P,
    cfg: &StationConfig,
    tariff: &Tariff,
    requests: &[EvRequest],
    seed: u64,
) -> Result<EpisodeOutcome, ConfigError> {
    run_episode_observed(policy, cfg, tariff, requests, seed, |_, _| {})
}

/// [`run_episode`] with a callback after every step (traces, plots).
pub fn run_episode_observed<P, O>(
    policy: &mut P,
    cfg: &StationConfig,
    tariff: &Tariff,
    requests: &[EvRequest],
    seed: u64,
    mut observer: O,
) -> Result<EpisodeOutcome, ConfigError>
where
    P: Policy + ?Sized,
    O: FnMut(&Station, &StepOutcome),
{
    let mut station = Station::new(cfg.clone(), tariff.clone())?;
    let n_steps = station.n_steps();
    let arrivals = arrivals_by_step(requests, n_steps);
    let n_periods = tariff.n_periods();
    let mut out = EpisodeOutcome {
        period_power: vec![0.0; n_periods],
        period_steps: vec![0; n_periods],
        demand_by_period: vec![0.0; n_periods],
        energy_range: (f64::INFINITY, f64::NEG_INFINITY),
        ..Default::default()
    };
    policy.begin_episode(requests, seed);
    for t in 0..n_steps {
        let adm = station.admit(&arrivals[t]);
        out.admitted += adm.admitted.len();
        out.rejected += adm.rejected.len();
        let connected = policy.allocate(&station);
        station.apply_allocation(&connected);
        let actions = policy.act(&station);
        let step = station.step_with(&actions);
        out.reward_sum += step.rewards().iter().sum::<f64>();
        out.period_power[step.period] += step.actions.iter().sum::<f64>();
        out.period_steps[step.period] += 1;
        out.demand_by_period[step.period] -= step.demand_total;
        for s in station.sessions().iter().filter(|s| s.is_present()) {
            out.energy_range.0 = out.energy_range.0.min(s.energy);
            out.energy_range.1 = out.energy_range.1.max(s.energy);
        }
        observer(&station, &step);
    }
    out.profit = station.episode_profit();
    out.final_peaks = station.peaks().to_vec();
    Ok(out)
}

/// Does nothing: EVs are plugged in by id and never charged.
#[derive(Debug, Clone, Default)]
pub struct NullPolicy;

impl Policy for NullPolicy {
    fn name(&self) -> String {
        "null".into()
    }
    fn allocate(&mut self, station: &Station) -> Vec<usize> {
        fill_chargers(station, &station.present_sessions())
    }
    fn act(&mut self, station: &Station) -> Vec<f64> {
        vec![0.0; station.config().n_chargers]
    }
}

/// Uniformly random feasible powers and random allocations; for testing.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }
    fn begin_episode(&mut self, _requests: &[EvRequest], seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    }
    fn allocate(&mut self, station: &Station) -> Vec<usize> {
        let mut present = station.present_sessions();
        for i in (1..present.len()).rev() {
            let k = self.rng.random_range(0..=i);
            present.swap(i, k);
        }
        fill_chargers(station, &present)
    }
    fn act(&mut self, station: &Station) -> Vec<f64> {
        (0..station.config().n_chargers)
            .map(|j| {
                let set = station.charger_actions(j);
                set.get(self.rng.random_range(0..set.len()))
            })
            .collect()
    }
}
