//! Greedy rule-based operator.
//!
//! The most urgent EVs (`e^r / t^r`) get the chargers. Off-peak every
//! connected EV charges as fast as it can, mid-peak only as much as
//! just-in-time charging requires, and on-peak it discharges at full power
//! down to a reserve level (or idles when discharging is disabled).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::policy::Policy;
use crate::scenario::PeriodClass;
use crate::station::{ActionSet, Station};

/// How far an EV below its target may discharge on-peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReserveRule {
    /// Down to the just-in-time level; EVs at or above target keep their target.
    JustInTime,
    /// Never below the target: only energy above `e_tgt` is sold.
    #[default]
    Target,
}

/// Lowest energy after this step from which `e_tgt` is still reachable at
/// full power by departure.
pub fn just_in_time_level(e_tgt: f64, remaining_steps: usize, a_max: f64, dt: f64) -> f64 {
    e_tgt - a_max * remaining_steps.saturating_sub(1) as f64 * dt
}

/// Connects the `N^c` most urgent EVs; ties go to the earlier departure,
/// then the lower id.
pub fn grd_allocate(station: &Station) -> Vec<usize> {
    let t = station.step();
    let mut present = station.present_sessions();
    let urgency = |i: usize| {
        let s = station.session(i);
        s.remaining_energy() / s.remaining_steps(t).max(1) as f64
    };
    present.sort_by(|&a, &b| {
        urgency(b)
            .partial_cmp(&urgency(a))
            .unwrap_or(Ordering::Equal)
            .then(station.session(a).request.t_d.cmp(&station.session(b).request.t_d))
            .then(station.session(a).request.id.cmp(&station.session(b).request.id))
    });
    present.truncate(station.config().n_chargers);
    present
}

/// Power for one connected EV under the greedy rules.
fn grd_power(station: &Station, session: usize, set: &ActionSet, allow_discharge: bool, reserve: ReserveRule) -> f64 {
    let cfg = station.config();
    let s = station.session(session);
    let t_r = s.remaining_steps(station.step());
    let jit = just_in_time_level(s.request.e_tgt, t_r, cfg.a_max, cfg.dt_hours);
    let required = (jit - s.energy) / cfg.dt_hours;
    let must = if required > 0.0 { set.ceil_of(required) } else { 0.0 };
    let class = station.tariff().period_class(station.current_period());
    match class {
        PeriodClass::OffPeak => set.upper(),
        PeriodClass::MidPeak => must,
        PeriodClass::OnPeak => {
            if must > 0.0 || !allow_discharge {
                return must;
            }
            let floor = match reserve {
                ReserveRule::JustInTime if s.energy < s.request.e_tgt => jit,
                _ => s.request.e_tgt,
            };
            let limit = (floor - s.energy) / cfg.dt_hours;
            if limit >= 0.0 {
                0.0
            } else {
                set.ceil_of(cfg.a_min.max(limit))
            }
        }
    }
}

/// One power per charger; vacant chargers idle.
pub fn grd_act(station: &Station, allow_discharge: bool, reserve: ReserveRule) -> Vec<f64> {
    (0..station.config().n_chargers)
        .map(|j| match station.charger_session(j) {
            Some(i) => grd_power(station, i, &station.charger_actions(j), allow_discharge, reserve),
            None => 0.0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Greedy {
    pub allow_discharge: bool,
    pub reserve: ReserveRule,
}

impl Greedy {
    pub fn with_discharge(reserve: ReserveRule) -> Self {
        Self { allow_discharge: true, reserve }
    }

    pub fn without_discharge() -> Self {
        Self { allow_discharge: false, reserve: ReserveRule::Target }
    }
}

impl Policy for Greedy {
    fn name(&self) -> String {
        if self.allow_discharge { "GRD".into() } else { "GRD-noVGI".into() }
    }

    fn allocate(&mut self, station: &Station) -> Vec<usize> {
        grd_allocate(station)
    }

    fn act(&mut self, station: &Station) -> Vec<f64> {
        grd_act(station, self.allow_discharge, self.reserve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{EvRequest, StationConfig, Tariff};

    fn station_at(hour: f64, n_chargers: usize, reqs: &[EvRequest]) -> Station {
        let cfg = StationConfig { n_chargers, n_waiting: 3, start_hour: hour, ..Default::default() };
        let mut st = Station::new(cfg, Tariff::default()).unwrap();
        st.admit(reqs);
        st
    }

    fn req(id: u64, t_d: usize, e_ini: f64, e_tgt: f64) -> EvRequest {
        EvRequest { id, t_a: 0, t_d, e_ini, e_tgt }
    }

    #[test]
    fn urgency_ranking() {
        // 30 kWh over 2 h is 15 kW, 20 kWh over 0.5 h is 40 kW
        let st = station_at(0.0, 1, &[req(1, 8, 20.0, 50.0), req(2, 2, 40.0, 60.0)]);
        assert_eq!(grd_allocate(&st), vec![1]);
        let st = station_at(0.0, 1, &[req(1, 8, 20.0, 60.0), req(2, 4, 20.0, 40.0)]);
        assert_eq!(grd_allocate(&st), vec![1], "equal urgency goes to the earlier departure");
        let st = station_at(0.0, 1, &[req(1, 8, 20.0, 60.0)]);
        assert_eq!(grd_allocate(&st), vec![0]);
    }

    #[test]
    fn off_peak_charges_at_upper_bound() {
        let mut st = station_at(3.0, 1, &[req(1, 40, 90.0, 95.0)]);
        st.apply_allocation(&[0]);
        assert_eq!(grd_act(&st, true, ReserveRule::Target), vec![40.0]);
    }

    #[test]
    fn on_peak_reserve_binding_gives_zero() {
        // 4 steps left at 100 kW: jit after this step = 80 - 100*3*0.25 = 5 < e_min,
        // so pick a tighter case: 2 steps left, jit = 80 - 25 = 55
        let mut st = station_at(13.0, 1, &[req(1, 2, 55.0, 80.0)]);
        st.apply_allocation(&[0]);
        assert_eq!(grd_act(&st, true, ReserveRule::JustInTime), vec![0.0]);
        assert_eq!(grd_act(&st, false, ReserveRule::Target), vec![0.0]);
    }

    #[test]
    fn on_peak_discharge_and_no_vgi() {
        let mut st = station_at(13.0, 2, &[req(1, 20, 95.0, 80.0), req(2, 20, 30.0, 80.0)]);
        st.apply_allocation(&[0, 1]);
        // EV 1 sells down to its target: at most 15 kWh in one step = 60 kW
        assert_eq!(grd_act(&st, true, ReserveRule::Target), vec![-60.0, 0.0]);
        // just-in-time floor for EV 2: 80 - 100*19*0.25 < e_min, so full discharge
        assert_eq!(grd_act(&st, true, ReserveRule::JustInTime), vec![-60.0, -80.0]);
        assert_eq!(grd_act(&st, false, ReserveRule::Target), vec![0.0, 0.0]);
    }

    #[test]
    fn no_vgi_charges_when_just_in_time_requires() {
        // 2 steps left, needs 50 kWh: at least 100 kW now
        let mut st = station_at(13.0, 1, &[req(1, 2, 30.0, 80.0)]);
        st.apply_allocation(&[0]);
        assert_eq!(grd_act(&st, false, ReserveRule::Target), vec![100.0]);
        let mut st = station_at(9.0, 1, &[req(1, 3, 30.0, 80.0)]);
        st.apply_allocation(&[0]);
        // mid-peak: 3 steps left, jit after step = 80 - 50 = 30, nothing needed yet
        assert_eq!(grd_act(&st, false, ReserveRule::Target), vec![0.0]);
    }
}
