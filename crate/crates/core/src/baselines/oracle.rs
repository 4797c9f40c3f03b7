//! Exact optimum of tiny instances by exhaustive search.
//!
//! Memoized over (step, per-EV energy offsets on the action grid, per-period
//! peak levels). At each step every split of the present EVs into at most
//! `N^c` powered ones and every grid power for them is tried. Admission does
//! not depend on actions, so the set of EVs on site is fixed in advance.

use std::collections::HashMap;
use std::io::Write;

use crate::error::OracleError;
use crate::policy::{fill_chargers, Policy};
use crate::scenario::{tou_period_of, EvRequest, StationConfig, Tariff};
use crate::station::{feasible_actions, Station};

pub const MAX_CHARGERS: usize = 2;
pub const MAX_EVS: usize = 3;
pub const MAX_STEPS: usize = 24;
pub const MAX_ACTIONS: usize = 11;
const MAX_STATES: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub profit: f64,
    /// Per step: `(ev id, power)` for every EV given a nonzero power.
    pub schedule: Vec<Vec<(u64, f64)>>,
}

impl OracleSolution {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "ev_id", "power_kw"])?;
        for (t, step) in self.schedule.iter().enumerate() {
            for (id, a) in step {
                out.write_record([t.to_string(), id.to_string(), a.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Requests admitted under the first-come capacity rule.
fn admitted(requests: &[EvRequest], station: &StationConfig) -> Vec<EvRequest> {
    let mut on_site: Vec<&EvRequest> = Vec::new();
    let mut out = Vec::new();
    let mut sorted: Vec<&EvRequest> = requests.iter().collect();
    sorted.sort_by_key(|r| (r.t_a, r.id));
    for r in sorted {
        on_site.retain(|o| o.t_d > r.t_a);
        if on_site.len() < station.n_total() {
            on_site.push(r);
            out.push(r.clone());
        }
    }
    out
}

struct Search<'a> {
    cfg: &'a StationConfig,
    tariff: &'a Tariff,
    evs: Vec<EvRequest>,
    unit: f64,
    memo: HashMap<(usize, Vec<i32>, Vec<i32>), (f64, Vec<i32>)>,
}

impl Search<'_> {
    fn energy(&self, i: usize, k: i32) -> f64 {
        self.evs[i].e_ini + k as f64 * self.unit
    }

    /// Best profit from step `t` on; also records the chosen grid powers.
    fn value(&mut self, t: usize, offsets: Vec<i32>, peaks: Vec<i32>) -> Result<f64, OracleError> {
        if t >= self.cfg.n_steps() {
            return Ok(0.0);
        }
        let key = (t, offsets, peaks);
        if let Some((v, _)) = self.memo.get(&key) {
            return Ok(*v);
        }
        if self.memo.len() >= MAX_STATES {
            return Err(OracleError::TooLarge(format!("more than {MAX_STATES} search states")));
        }
        let (_, offsets, peaks) = &key;
        let cfg = self.cfg;
        let dt = cfg.dt_hours;
        let h = tou_period_of(t, self.tariff, cfg);
        let frac = cfg.billing_fraction(self.tariff);
        let present: Vec<usize> = (0..self.evs.len()).filter(|&i| self.evs[i].t_a <= t && t < self.evs[i].t_d).collect();
        let sets: Vec<(i64, i64)> = present
            .iter()
            .map(|&i| {
                let s = feasible_actions(Some(self.energy(i, offsets[i])), cfg);
                (s.lo, s.hi)
            })
            .collect();
        let mut best = f64::NEG_INFINITY;
        let mut best_choice = vec![0; self.evs.len()];
        let mut choice: Vec<i64> = sets.iter().map(|s| s.0).collect();
        loop {
            let powered = choice.iter().filter(|&&c| c != 0).count();
            if powered <= cfg.n_chargers {
                let mut gain = 0.0;
                let mut load = 0i32;
                let mut next = offsets.clone();
                for (p, &i) in present.iter().enumerate() {
                    let a = choice[p] as f64 * cfg.delta_a;
                    if choice[p] != 0 {
                        gain += self.tariff.net_margin(h, a >= 0.0) * a.abs() * dt;
                    }
                    load += choice[p] as i32;
                    next[i] += choice[p] as i32;
                }
                let mut next_peaks = peaks.clone();
                if load > peaks[h] {
                    gain -= frac * self.tariff.p_l[h] * (load - peaks[h]) as f64 * cfg.delta_a;
                    next_peaks[h] = load;
                }
                for &i in &present {
                    if self.evs[i].t_d <= t + 1 {
                        gain -= cfg.mu * (self.evs[i].e_tgt - self.energy(i, next[i])).max(0.0);
                    }
                }
                let v = gain + self.value(t + 1, next.clone(), next_peaks)?;
                if v > best {
                    best = v;
                    best_choice = vec![0; self.evs.len()];
                    for (p, &i) in present.iter().enumerate() {
                        best_choice[i] = choice[p] as i32;
                    }
                }
            }
            // odometer over the present EVs' action grids
            let mut p = 0;
            loop {
                if p == present.len() {
                    self.memo.insert(key.clone(), (best, best_choice));
                    return Ok(best);
                }
                if choice[p] < sets[p].1 {
                    choice[p] += 1;
                    break;
                }
                choice[p] = sets[p].0;
                p += 1;
            }
        }
    }
}

/// Optimal profit and schedule on the station's own action grid.
pub fn oracle_solve(
    requests: &[EvRequest],
    station: &StationConfig,
    tariff: &Tariff,
) -> Result<OracleSolution, OracleError> {
    if station.horizon_hours == 0.0 {
        return Ok(OracleSolution { profit: 0.0, schedule: Vec::new() });
    }
    station.validate().map_err(|e| OracleError::TooLarge(e.to_string()))?;
    let evs = admitted(requests, station);
    let n_actions = ((station.a_max - station.a_min) / station.delta_a).floor() as usize + 1;
    if station.n_chargers > MAX_CHARGERS
        || evs.len() > MAX_EVS
        || station.n_steps() > MAX_STEPS
        || n_actions > MAX_ACTIONS
    {
        return Err(OracleError::TooLarge(format!(
            "{} chargers, {} EVs, {} steps, {} actions (limits {MAX_CHARGERS}, {MAX_EVS}, {MAX_STEPS}, {MAX_ACTIONS})",
            station.n_chargers,
            evs.len(),
            station.n_steps(),
            n_actions
        )));
    }
    let mut search = Search {
        cfg: station,
        tariff,
        unit: station.delta_a * station.dt_hours,
        evs,
        memo: HashMap::new(),
    };
    let n = search.evs.len();
    let profit = search.value(0, vec![0; n], vec![0; tariff.n_periods()])?;
    // follow the recorded choices forward
    let mut schedule = Vec::with_capacity(station.n_steps());
    let (mut offsets, mut peaks) = (vec![0; n], vec![0; tariff.n_periods()]);
    for t in 0..station.n_steps() {
        let (_, choice) = search.memo[&(t, offsets.clone(), peaks.clone())].clone();
        let h = tou_period_of(t, tariff, station);
        let load: i32 = choice.iter().sum();
        if load > peaks[h] {
            peaks[h] = load;
        }
        let mut step = Vec::new();
        for i in 0..n {
            offsets[i] += choice[i];
            if choice[i] != 0 {
                step.push((search.evs[i].id, choice[i] as f64 * station.delta_a));
            }
        }
        schedule.push(step);
    }
    Ok(OracleSolution { profit, schedule })
}

/// Replays a fixed schedule: scheduled EVs get the chargers.
#[derive(Debug, Clone)]
pub struct Scripted {
    pub schedule: Vec<Vec<(u64, f64)>>,
}

impl Policy for Scripted {
    fn name(&self) -> String {
        "Oracle".into()
    }

    fn allocate(&mut self, station: &Station) -> Vec<usize> {
        // scheduled EVs first, idle ones fill any spare chargers
        let step = &self.schedule[station.step()];
        let (mut order, idle): (Vec<usize>, Vec<usize>) = station
            .present_sessions()
            .into_iter()
            .partition(|&i| step.iter().any(|(id, _)| *id == station.session(i).request.id));
        order.extend(idle);
        fill_chargers(station, &order)
    }

    fn act(&mut self, station: &Station) -> Vec<f64> {
        let step = &self.schedule[station.step()];
        (0..station.config().n_chargers)
            .map(|j| {
                station
                    .charger_session(j)
                    .and_then(|i| step.iter().find(|(id, _)| *id == station.session(i).request.id))
                    .map_or(0.0, |(_, a)| *a)
            })
            .collect()
    }
}
