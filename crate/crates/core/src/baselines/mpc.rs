//! Rolling-horizon control: each step, plan the next window as a linear
//! program over known and predicted EVs, then execute the first step.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::grd::{grd_act, grd_allocate, ReserveRule};
use crate::lp::{build_lp, HorizonEv, HorizonInstance};
use crate::policy::Policy;
use crate::scenario::{sample_arrivals, stream_rng, ArrivalPattern, EvRequest, RngStream};
use crate::station::Station;

/// Where future arrivals in the window come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Sampled from the arrival model with a dedicated random stream.
    Sampled,
    /// The episode's true requests.
    Perfect,
}

/// How chargers are assigned on window steps after the current one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowAllocation {
    /// Fixed in advance by urgency with energies frozen at planning time.
    Urgency,
    /// Left to the LP as a shared power pool.
    #[default]
    Pooled,
}

#[derive(Debug, Clone)]
pub struct Mpc {
    /// Window length in steps, including the current one.
    pub window: usize,
    pub prediction: Prediction,
    pub pattern: ArrivalPattern,
    pub fallback_reserve: ReserveRule,
    pub window_allocation: WindowAllocation,
    truth: Vec<EvRequest>,
    rng: ChaCha8Rng,
    /// Steps where the LP failed and greedy rules were used instead.
    pub fallbacks: usize,
}

impl Mpc {
    pub fn new(window: usize, prediction: Prediction, pattern: ArrivalPattern) -> Self {
        assert!(window >= 1, "window must cover the current step");
        Self {
            window,
            prediction,
            pattern,
            fallback_reserve: ReserveRule::JustInTime,
            window_allocation: WindowAllocation::default(),
            truth: Vec::new(),
            rng: stream_rng(0, RngStream::Prediction, 0),
            fallbacks: 0,
        }
    }

    /// Window of `hours`, rounded to whole steps.
    pub fn with_hours(hours: f64, dt_hours: f64, prediction: Prediction, pattern: ArrivalPattern) -> Self {
        Self::new(((hours / dt_hours).round() as usize).max(1), prediction, pattern)
    }

    fn predicted(&mut self, station: &Station, w: usize) -> Vec<EvRequest> {
        let t = station.step();
        match self.prediction {
            Prediction::Perfect => {
                self.truth.iter().filter(|r| r.t_a > t && r.t_a < t + w).cloned().collect()
            }
            Prediction::Sampled => {
                let mut id = u64::MAX / 2;
                (t + 1..t + w)
                    .flat_map(|s| sample_arrivals(&self.pattern, station.config(), s, &mut id, &mut self.rng))
                    .collect()
            }
        }
    }

    /// The window's LP instance: EVs on site plus predicted arrivals that
    /// would be admitted; later steps are connected per `window_allocation`.
    pub fn instance(&mut self, station: &Station) -> HorizonInstance {
        let cfg = station.config();
        let t = station.step();
        let w = self.window.min(station.n_steps() - t);
        let mut evs: Vec<HorizonEv> = station
            .present_sessions()
            .into_iter()
            .map(|i| {
                let s = station.session(i);
                let on = s.charger().is_some();
                HorizonEv {
                    id: s.request.id,
                    energy: s.energy,
                    e_tgt: s.request.e_tgt,
                    first: 0,
                    depart: s.request.t_d - t,
                    connected: (0..w).map(|k| k == 0 && on).collect(),
                }
            })
            .collect();
        for r in self.predicted(station, w) {
            let k = r.t_a - t;
            let on_site = evs.iter().filter(|e| e.first <= k && e.depart > k).count();
            if on_site < cfg.n_total() {
                evs.push(HorizonEv {
                    id: r.id,
                    energy: r.e_ini,
                    e_tgt: r.e_tgt,
                    first: k,
                    depart: r.t_d - t,
                    connected: vec![false; w],
                });
            }
        }
        let pooled = self.window_allocation == WindowAllocation::Pooled;
        for k in 1..w {
            if pooled {
                for e in evs.iter_mut().filter(|e| e.first <= k && e.depart > k) {
                    e.connected[k] = true;
                }
                continue;
            }
            let mut here: Vec<usize> = (0..evs.len()).filter(|&i| evs[i].first <= k && evs[i].depart > k).collect();
            let urgency = |e: &HorizonEv| (e.e_tgt - e.energy) / (e.depart - k) as f64;
            here.sort_by(|&a, &b| {
                urgency(&evs[b])
                    .partial_cmp(&urgency(&evs[a]))
                    .unwrap_or(Ordering::Equal)
                    .then(evs[a].depart.cmp(&evs[b].depart))
                    .then(evs[a].id.cmp(&evs[b].id))
            });
            for &i in here.iter().take(cfg.n_chargers) {
                evs[i].connected[k] = true;
            }
        }
        HorizonInstance {
            start_step: t,
            n_steps: w,
            station: cfg.clone(),
            tariff: station.tariff().clone(),
            evs,
            peaks: station.peaks().to_vec(),
            pooled: (0..w).map(|k| pooled && k > 0).collect(),
        }
    }
}

impl Policy for Mpc {
    fn name(&self) -> String {
        let tag = match self.prediction {
            Prediction::Sampled => "MPC",
            Prediction::Perfect => "MPC-ideal",
        };
        format!("{tag}({})", self.window)
    }

    fn begin_episode(&mut self, requests: &[EvRequest], seed: u64) {
        self.truth = requests.to_vec();
        self.rng = stream_rng(seed, RngStream::Prediction, 0);
    }

    fn allocate(&mut self, station: &Station) -> Vec<usize> {
        grd_allocate(station)
    }

    fn act(&mut self, station: &Station) -> Vec<f64> {
        let n = station.config().n_chargers;
        if (0..n).all(|j| station.charger_session(j).is_none()) {
            return vec![0.0; n];
        }
        let inst = self.instance(station);
        let lp = build_lp(&inst);
        let Ok(sol) = lp.lp.solve() else {
            self.fallbacks += 1;
            return grd_act(station, true, self.fallback_reserve);
        };
        let powers = lp.powers(&sol.x, 0);
        (0..n)
            .map(|j| match station.charger_session(j) {
                Some(i) => {
                    let id = station.session(i).request.id;
                    let k = inst.evs.iter().position(|e| e.id == id).expect("connected EV in window");
                    station.charger_actions(j).toward_zero(powers[k])
                }
                None => 0.0,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::HorizonInstance;
    use crate::policy::run_episode;
    use crate::scenario::{generate_episode, PatternKind, StationConfig, Tariff};

    #[test]
    fn empty_station_idles() {
        let cfg = StationConfig { n_chargers: 2, n_waiting: 1, ..Default::default() };
        let st = Station::new(cfg, Tariff::default()).unwrap();
        let mut mpc = Mpc::new(8, Prediction::Sampled, ArrivalPattern::preset(PatternKind::Office));
        assert_eq!(mpc.act(&st), vec![0.0, 0.0]);
    }

    #[test]
    fn single_ev_without_arrivals_matches_lp_fixture() {
        let cfg = StationConfig { n_chargers: 1, n_waiting: 0, start_hour: 2.0, ..Default::default() };
        let mut tariff = Tariff::default();
        tariff.p_l = vec![0.0; 3];
        let mut st = Station::new(cfg, tariff).unwrap();
        st.admit(&[EvRequest { id: 1, t_a: 0, t_d: 5, e_ini: 75.0, e_tgt: 75.0 }]);
        st.apply_allocation(&[0]);
        let mut pattern = ArrivalPattern::preset(PatternKind::Office);
        pattern.lambda_by_hour = vec![0.0; 24];
        let mut mpc = Mpc::new(1, Prediction::Sampled, pattern);
        let inst: HorizonInstance = mpc.instance(&st);
        assert_eq!(inst.evs.len(), 1);
        assert_eq!(mpc.act(&st), vec![100.0]);
    }

    #[test]
    fn episodes_stay_consistent() {
        let cfg = StationConfig { n_chargers: 3, n_waiting: 2, delta_a: 10.0, horizon_hours: 8.0, start_hour: 8.0, ..Default::default() };
        let pattern = ArrivalPattern::preset(PatternKind::Retail);
        let reqs = generate_episode(&pattern, &cfg, &mut stream_rng(3, RngStream::EvalScenario, 0));
        for pred in [Prediction::Sampled, Prediction::Perfect] {
            let mut mpc = Mpc::with_hours(2.0, cfg.dt_hours, pred, pattern.clone());
            let out = run_episode(&mut mpc, &cfg, &Tariff::default(), &reqs, 5).unwrap();
            assert_eq!(mpc.fallbacks, 0);
            assert!((out.reward_sum - out.profit.profit).abs() <= 1e-6 * out.profit.profit.abs().max(1.0));
            assert!(out.energy_range.0 >= cfg.e_min - 1e-9 && out.energy_range.1 <= cfg.e_max + 1e-9);
        }
    }
}
