//! The charging-station environment.
//!
//! One call to [`Station::step`] runs, in order: energy update with the
//! chargers' actions, departures and their penalties, the online peak update
//! and demand charge, then advances the clock. Admission and allocation happen
//! before it, driven by the caller.

use crate::error::ConfigError;
use crate::scenario::{tou_period_of, EvRequest, StationConfig, Tariff};

const GRID_EPS: f64 = 1e-9;
const ENERGY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionStatus {
    Waiting,
    Charging(usize),
    Departed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvSession {
    pub request: EvRequest,
    pub energy: f64,
    pub status: SessionStatus,
}

impl EvSession {
    pub fn is_present(&self) -> bool {
        matches!(self.status, SessionStatus::Waiting | SessionStatus::Charging(_))
    }

    pub fn charger(&self) -> Option<usize> {
        match self.status {
            SessionStatus::Charging(j) => Some(j),
            _ => None,
        }
    }

    /// Steps left before departure, counting the current one.
    pub fn remaining_steps(&self, step: usize) -> usize {
        self.request.t_d.saturating_sub(step)
    }

    /// `e_tgt - e`; negative once the target is exceeded.
    pub fn remaining_energy(&self) -> f64 {
        self.request.e_tgt - self.energy
    }
}

/// Discrete feasible powers `k * step` for `k` in `lo..=hi`. Always contains 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSet {
    pub lo: i64,
    pub hi: i64,
    pub step: f64,
}

impl ActionSet {
    pub fn zero(step: f64) -> Self {
        Self { lo: 0, hi: 0, step }
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lower(&self) -> f64 {
        self.lo as f64 * self.step
    }

    pub fn upper(&self) -> f64 {
        self.hi as f64 * self.step
    }

    pub fn get(&self, i: usize) -> f64 {
        (self.lo + i as i64) as f64 * self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        (self.lo..=self.hi).map(move |k| k as f64 * self.step)
    }

    /// Grid index of `a`, if it is one of the set's actions.
    pub fn index_of(&self, a: f64) -> Option<usize> {
        let k = (a / self.step).round();
        if (k * self.step - a).abs() > 1e-9 * self.step.max(1.0) {
            return None;
        }
        let k = k as i64;
        (self.lo..=self.hi).contains(&k).then(|| (k - self.lo) as usize)
    }

    pub fn contains(&self, a: f64) -> bool {
        self.index_of(a).is_some()
    }

    /// Largest grid action not above `a`, clipped into the set.
    pub fn floor_of(&self, a: f64) -> f64 {
        let k = ((a / self.step) + GRID_EPS).floor() as i64;
        k.clamp(self.lo, self.hi) as f64 * self.step
    }

    /// Smallest grid action not below `a`, clipped into the set.
    pub fn ceil_of(&self, a: f64) -> f64 {
        let k = ((a / self.step) - GRID_EPS).ceil() as i64;
        k.clamp(self.lo, self.hi) as f64 * self.step
    }

    /// Grid action obtained by rounding `a` toward zero, clipped into the set.
    pub fn toward_zero(&self, a: f64) -> f64 {
        if a >= 0.0 {
            self.floor_of(a)
        } else {
            self.ceil_of(a)
        }
    }
}

/// Feasible power grid for an EV at `energy`, or `{0}` for a vacant charger.
///
/// Upper bound `min(a_max, (e_max - e)/dt)`, lower bound
/// `max(a_min, (e_min - e)/dt)`, both rounded inward onto the grid.
pub fn feasible_actions(energy: Option<f64>, cfg: &StationConfig) -> ActionSet {
    let Some(e) = energy else {
        return ActionSet::zero(cfg.delta_a);
    };
    let upper = cfg.a_max.min((cfg.e_max - e) / cfg.dt_hours);
    let lower = cfg.a_min.max((cfg.e_min - e) / cfg.dt_hours);
    let hi = ((upper / cfg.delta_a) + GRID_EPS).floor().max(0.0) as i64;
    let lo = ((lower / cfg.delta_a) - GRID_EPS).ceil().min(0.0) as i64;
    ActionSet { lo, hi, step: cfg.delta_a }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WaitingSummary {
    pub count: usize,
    /// Sum of `e_tgt - e` over waiting EVs.
    pub remaining_energy: f64,
}

/// Normalization constants for observation vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScale {
    pub n_steps: usize,
    pub n_periods: usize,
    pub e_max: f64,
    pub n_waiting: usize,
    pub n_chargers: usize,
    pub a_max: f64,
}

impl FeatureScale {
    pub fn new(cfg: &StationConfig, tariff: &Tariff) -> Self {
        Self {
            n_steps: cfg.n_steps(),
            n_periods: tariff.n_periods(),
            e_max: cfg.e_max,
            n_waiting: cfg.n_waiting,
            n_chargers: cfg.n_chargers,
            a_max: cfg.a_max,
        }
    }

    /// Observation length: eight scalars plus the one-hot period vector.
    pub fn feature_len(&self) -> usize {
        8 + self.n_periods
    }

    fn wait_norm(&self) -> f64 {
        self.n_waiting.max(1) as f64
    }
}

/// The per-charger state seen by the Q-network. Vacant chargers report
/// zero remaining time, energy and remaining energy.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargerObservation {
    pub occupied: bool,
    pub step: usize,
    pub remaining_steps: usize,
    pub energy: f64,
    pub remaining_energy: f64,
    pub n_waiting: usize,
    pub waiting_energy: f64,
    pub period: usize,
    pub current_peak: f64,
}

impl ChargerObservation {
    pub fn encode(&self, scale: &FeatureScale) -> Vec<f64> {
        let n = scale.n_steps as f64;
        let mut v = Vec::with_capacity(scale.feature_len());
        v.push(if self.occupied { 1.0 } else { 0.0 });
        v.push(self.step as f64 / n);
        v.push(self.remaining_steps as f64 / n);
        v.push(self.energy / scale.e_max);
        v.push(self.remaining_energy / scale.e_max);
        v.push(self.n_waiting as f64 / scale.wait_norm());
        v.push(self.waiting_energy / (scale.wait_norm() * scale.e_max));
        v.extend((0..scale.n_periods).map(|h| if h == self.period { 1.0 } else { 0.0 }));
        v.push(self.current_peak / (scale.n_chargers as f64 * scale.a_max));
        v
    }

    pub fn decode(v: &[f64], scale: &FeatureScale) -> Self {
        assert_eq!(v.len(), scale.feature_len(), "observation length");
        let n = scale.n_steps as f64;
        let hp = &v[7..7 + scale.n_periods];
        let period = hp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Self {
            occupied: v[0] > 0.5,
            step: (v[1] * n).round() as usize,
            remaining_steps: (v[2] * n).round() as usize,
            energy: v[3] * scale.e_max,
            remaining_energy: v[4] * scale.e_max,
            n_waiting: (v[5] * scale.wait_norm()).round() as usize,
            waiting_energy: v[6] * scale.wait_norm() * scale.e_max,
            period,
            current_peak: v[7 + scale.n_periods] * scale.n_chargers as f64 * scale.a_max,
        }
    }
}

/// Running profit components. `charge_revenue` and `discharge_revenue`
/// together form the net revenue.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ledger {
    pub charge_revenue: f64,
    pub discharge_revenue: f64,
    pub penalty: f64,
    pub demand_charge: f64,
}

/// `(Z, B^c, B^d, C^p, C^l)` of an episode.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProfitBreakdown {
    pub profit: f64,
    pub charge_revenue: f64,
    pub discharge_revenue: f64,
    pub penalty: f64,
    pub demand_charge: f64,
}

impl ProfitBreakdown {
    pub fn revenue(&self) -> f64 {
        self.charge_revenue + self.discharge_revenue
    }
}

impl From<Ledger> for ProfitBreakdown {
    fn from(l: Ledger) -> Self {
        let revenue = l.charge_revenue + l.discharge_revenue;
        Self {
            profit: revenue - l.penalty - l.demand_charge,
            charge_revenue: l.charge_revenue,
            discharge_revenue: l.discharge_revenue,
            penalty: l.penalty,
            demand_charge: l.demand_charge,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Admission {
    pub admitted: Vec<u64>,
    pub rejected: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Departures {
    /// Penalty `c^p` owed through each charger's departing EV.
    pub charger_penalty: Vec<f64>,
    /// Summed penalty `R^{p,w}` of EVs leaving from the waiting area.
    pub waiting_penalty: f64,
    pub departed: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakCharge {
    /// `R^l`, zero or negative.
    pub total: f64,
    pub per_charger: Vec<f64>,
}

/// Everything one environment step produced, per charger where applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub period: usize,
    pub actions: Vec<f64>,
    pub revenue: Vec<f64>,
    pub charger_penalty: Vec<f64>,
    pub waiting_share: Vec<f64>,
    pub waiting_penalty: f64,
    pub demand: Vec<f64>,
    pub demand_total: f64,
}

impl StepOutcome {
    /// `r^p = -(c^p + c^{p,w})` per charger.
    pub fn penalty_reward(&self) -> Vec<f64> {
        self.charger_penalty.iter().zip(&self.waiting_share).map(|(c, w)| -(c + w)).collect()
    }

    /// Total reward `r = r^b + r^p + r^l` per charger.
    pub fn rewards(&self) -> Vec<f64> {
        (0..self.actions.len())
            .map(|j| {
                self.revenue[j] - self.charger_penalty[j] - self.waiting_share[j] + self.demand[j]
            })
            .collect()
    }
}

/// Splits the waiting-area penalty so chargers running closer to `a_max`
/// receive less of it. Falls back to an equal split when every charger is
/// already at `a_max`.
pub fn split_waiting_penalty(total: f64, actions: &[f64], a_max: f64) -> Vec<f64> {
    let n = actions.len();
    if n == 0 || total == 0.0 {
        return vec![0.0; n];
    }
    let slack: Vec<f64> = actions.iter().map(|a| (a_max - a).max(0.0)).collect();
    let denom: f64 = slack.iter().sum();
    if denom <= 0.0 {
        return vec![total / n as f64; n];
    }
    slack.iter().map(|s| total * s / denom).collect()
}

#[derive(Debug, Clone)]
pub struct Station {
    cfg: StationConfig,
    tariff: Tariff,
    scale: FeatureScale,
    step: usize,
    sessions: Vec<EvSession>,
    chargers: Vec<Option<usize>>,
    peaks: Vec<f64>,
    ledger: Ledger,
    prev_waiting: WaitingSummary,
}

impl Station {
    pub fn new(cfg: StationConfig, tariff: Tariff) -> Result<Self, ConfigError> {
        cfg.validate()?;
        tariff.validate()?;
        let scale = FeatureScale::new(&cfg, &tariff);
        Ok(Self {
            chargers: vec![None; cfg.n_chargers],
            peaks: vec![0.0; tariff.n_periods()],
            cfg,
            tariff,
            scale,
            step: 0,
            sessions: Vec::new(),
            ledger: Ledger::default(),
            prev_waiting: WaitingSummary::default(),
        })
    }

    pub fn config(&self) -> &StationConfig {
        &self.cfg
    }

    pub fn tariff(&self) -> &Tariff {
        &self.tariff
    }

    pub fn scale(&self) -> &FeatureScale {
        &self.scale
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn n_steps(&self) -> usize {
        self.scale.n_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.n_steps()
    }

    pub fn current_period(&self) -> usize {
        tou_period_of(self.step, &self.tariff, &self.cfg)
    }

    pub fn sessions(&self) -> &[EvSession] {
        &self.sessions
    }

    pub fn session(&self, idx: usize) -> &EvSession {
        &self.sessions[idx]
    }

    /// Session index plugged into charger `j`.
    pub fn charger_session(&self, j: usize) -> Option<usize> {
        self.chargers[j]
    }

    pub fn peaks(&self) -> &[f64] {
        &self.peaks
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Indices of sessions currently on site, ordered by EV id.
    pub fn present_sessions(&self) -> Vec<usize> {
        let mut out: Vec<usize> =
            (0..self.sessions.len()).filter(|&i| self.sessions[i].is_present()).collect();
        out.sort_by_key(|&i| self.sessions[i].request.id);
        out
    }

    pub fn n_present(&self) -> usize {
        self.sessions.iter().filter(|s| s.is_present()).count()
    }

    pub fn waiting_summary(&self) -> WaitingSummary {
        self.sessions
            .iter()
            .filter(|s| s.status == SessionStatus::Waiting)
            .fold(WaitingSummary::default(), |acc, s| WaitingSummary {
                count: acc.count + 1,
                remaining_energy: acc.remaining_energy + s.remaining_energy(),
            })
    }

    /// Waiting-area summary recorded right after the previous allocation.
    pub fn previous_waiting(&self) -> WaitingSummary {
        self.prev_waiting
    }

    /// Admits requests in order while fewer than `N` EVs are on site; the rest
    /// are turned away without penalty.
    pub fn admit(&mut self, requests: &[EvRequest]) -> Admission {
        let mut present = self.n_present();
        let mut admission = Admission { admitted: Vec::new(), rejected: Vec::new() };
        for r in requests {
            debug_assert!(r.t_a == self.step, "request {} does not arrive now", r.id);
            let status = if present < self.cfg.n_total() {
                present += 1;
                admission.admitted.push(r.id);
                SessionStatus::Waiting
            } else {
                admission.rejected.push(r.id);
                SessionStatus::Rejected
            };
            self.sessions.push(EvSession { request: r.clone(), energy: r.e_ini, status });
        }
        admission
    }

    /// Connects exactly the listed sessions; every other present EV waits.
    /// EVs that stay connected keep their charger, freed chargers are handed
    /// out in EV id order.
    pub fn apply_allocation(&mut self, connected: &[usize]) {
        let mut wanted = vec![false; self.sessions.len()];
        for &i in connected {
            assert!(self.sessions[i].is_present(), "session {i} is not on site");
            assert!(!wanted[i], "session {i} allocated twice");
            wanted[i] = true;
        }
        assert!(connected.len() <= self.cfg.n_chargers, "more EVs connected than chargers");
        let n_present = self.n_present();
        assert!(
            n_present - connected.len() <= self.cfg.n_waiting,
            "waiting area over capacity: {} present, {} connected",
            n_present,
            connected.len()
        );
        for j in 0..self.chargers.len() {
            if let Some(i) = self.chargers[j] {
                if !wanted[i] || !self.sessions[i].is_present() {
                    self.chargers[j] = None;
                    if self.sessions[i].is_present() {
                        self.sessions[i].status = SessionStatus::Waiting;
                    }
                }
            }
        }
        let mut newcomers: Vec<usize> =
            connected.iter().copied().filter(|&i| self.sessions[i].charger().is_none()).collect();
        newcomers.sort_by_key(|&i| self.sessions[i].request.id);
        let free: Vec<usize> = (0..self.chargers.len()).filter(|&j| self.chargers[j].is_none()).collect();
        let mut free = free.into_iter();
        for i in newcomers {
            let j = free.next().expect("a free charger exists");
            self.chargers[j] = Some(i);
            self.sessions[i].status = SessionStatus::Charging(j);
        }
        self.prev_waiting = self.waiting_summary();
    }

    pub fn observe(&self, j: usize) -> ChargerObservation {
        let waiting = self.waiting_summary();
        match self.chargers[j] {
            Some(i) => self.observe_session(i, waiting),
            None => ChargerObservation {
                occupied: false,
                step: self.step,
                remaining_steps: 0,
                energy: 0.0,
                remaining_energy: 0.0,
                n_waiting: waiting.count,
                waiting_energy: waiting.remaining_energy,
                period: self.current_period(),
                current_peak: self.peaks[self.current_period()],
            },
        }
    }

    /// Observation a charger would see if session `i` were plugged into it,
    /// with the given waiting-area summary.
    pub fn observe_session(&self, i: usize, waiting: WaitingSummary) -> ChargerObservation {
        let s = &self.sessions[i];
        let h = self.current_period();
        ChargerObservation {
            occupied: true,
            step: self.step,
            remaining_steps: s.remaining_steps(self.step),
            energy: s.energy,
            remaining_energy: s.remaining_energy(),
            n_waiting: waiting.count,
            waiting_energy: waiting.remaining_energy,
            period: h,
            current_peak: self.peaks[h],
        }
    }

    pub fn charger_actions(&self, j: usize) -> ActionSet {
        feasible_actions(self.chargers[j].map(|i| self.sessions[i].energy), &self.cfg)
    }

    pub fn session_actions(&self, i: usize) -> ActionSet {
        feasible_actions(Some(self.sessions[i].energy), &self.cfg)
    }

    /// Applies one power per charger and returns each charger's `r^b`.
    ///
    /// Panics if an action is outside its charger's feasible set.
    pub fn apply_actions(&mut self, actions: &[f64]) -> Vec<f64> {
        assert_eq!(actions.len(), self.cfg.n_chargers, "one action per charger");
        let h = self.current_period();
        let dt = self.cfg.dt_hours;
        let mut revenue = vec![0.0; actions.len()];
        for (j, &a) in actions.iter().enumerate() {
            let set = self.charger_actions(j);
            assert!(set.contains(a), "charger {j}: action {a} kW outside feasible set {set:?}");
            let Some(i) = self.chargers[j] else { continue };
            if a == 0.0 {
                continue;
            }
            let r = self.tariff.net_margin(h, a >= 0.0) * a.abs() * dt;
            revenue[j] = r;
            if a > 0.0 {
                self.ledger.charge_revenue += r;
            } else {
                self.ledger.discharge_revenue += r;
            }
            let s = &mut self.sessions[i];
            let e = s.energy + a * dt;
            debug_assert!(
                e >= self.cfg.e_min - ENERGY_TOL && e <= self.cfg.e_max + ENERGY_TOL,
                "energy {e} out of bounds"
            );
            s.energy = e.clamp(self.cfg.e_min, self.cfg.e_max);
        }
        revenue
    }

    /// Removes EVs whose departure is due at the next step and charges their
    /// unmet-energy penalties.
    pub fn settle_departures(&mut self) -> Departures {
        let next = self.step + 1;
        let mut out = Departures {
            charger_penalty: vec![0.0; self.cfg.n_chargers],
            waiting_penalty: 0.0,
            departed: Vec::new(),
        };
        for i in 0..self.sessions.len() {
            let s = &self.sessions[i];
            if !s.is_present() || s.request.t_d > next {
                continue;
            }
            let penalty = self.cfg.mu * (s.request.e_tgt - s.energy).max(0.0);
            match s.status {
                SessionStatus::Charging(j) => {
                    out.charger_penalty[j] += penalty;
                    self.chargers[j] = None;
                }
                _ => out.waiting_penalty += penalty,
            }
            self.ledger.penalty += penalty;
            out.departed.push(s.request.id);
            self.sessions[i].status = SessionStatus::Departed;
        }
        out
    }

    /// Online demand-charge update: a new station-wide peak in the current
    /// period costs the increment, shared in proportion to each charger's power.
    pub fn update_peak_and_charge(&mut self, actions: &[f64]) -> PeakCharge {
        let h = self.current_period();
        let load: f64 = actions.iter().sum();
        let mut out = PeakCharge { total: 0.0, per_charger: vec![0.0; actions.len()] };
        if load > self.peaks[h] {
            let frac = self.cfg.billing_fraction(&self.tariff);
            out.total = -frac * self.tariff.p_l[h] * (load - self.peaks[h]);
            self.peaks[h] = load;
            assert!(load > 0.0);
            for (r, a) in out.per_charger.iter_mut().zip(actions) {
                *r = a / load * out.total;
            }
            self.ledger.demand_charge -= out.total;
        }
        out
    }

    /// Runs one full environment step with the given per-charger powers.
    pub fn step_with(&mut self, actions: &[f64]) -> StepOutcome {
        assert!(!self.is_done(), "episode already finished");
        let step = self.step;
        let period = self.current_period();
        let revenue = self.apply_actions(actions);
        let departures = self.settle_departures();
        let waiting_share =
            split_waiting_penalty(departures.waiting_penalty, actions, self.cfg.a_max);
        let peak = self.update_peak_and_charge(actions);
        self.step += 1;
        StepOutcome {
            step,
            period,
            actions: actions.to_vec(),
            revenue,
            charger_penalty: departures.charger_penalty,
            waiting_share,
            waiting_penalty: departures.waiting_penalty,
            demand: peak.per_charger,
            demand_total: peak.total,
        }
    }

    pub fn episode_profit(&self) -> ProfitBreakdown {
        ProfitBreakdown::from(self.ledger)
    }

    /// Demand charge recomputed from the recorded peaks alone.
    pub fn demand_charge_from_peaks(&self) -> f64 {
        let frac = self.cfg.billing_fraction(&self.tariff);
        frac * self.peaks.iter().zip(&self.tariff.p_l).map(|(l, p)| p * l.max(0.0)).sum::<f64>()
    }
}
