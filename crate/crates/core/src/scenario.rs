//! Tariff calendar, station parameters and stochastic EV arrivals.
//!
//! Episodes start at `StationConfig::start_hour` (midnight by default) and
//! every day of the horizon uses the same tariff and arrival-rate table.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// One time-of-use window, half-open `[start_hour, end_hour)`.
/// `start_hour > end_hour` wraps through midnight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouPeriod {
    pub label: String,
    pub start_hour: f64,
    pub end_hour: f64,
}

impl TouPeriod {
    pub fn new(label: &str, start_hour: f64, end_hour: f64) -> Self {
        Self { label: label.to_string(), start_hour, end_hour }
    }

    pub fn contains(&self, hour: f64) -> bool {
        if self.start_hour < self.end_hour {
            hour >= self.start_hour && hour < self.end_hour
        } else if self.start_hour > self.end_hour {
            hour >= self.start_hour || hour < self.end_hour
        } else {
            false
        }
    }
}

/// Coarse role of a period, used by the greedy baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeriodClass {
    OffPeak,
    MidPeak,
    OnPeak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tariff {
    pub periods: Vec<TouPeriod>,
    /// Utility energy price per period, $/kWh.
    pub p_e: Vec<f64>,
    /// Price a customer pays per kWh charged.
    pub p_c: f64,
    /// Price paid to a customer per kWh discharged.
    pub p_d: f64,
    /// Demand-charge price per kW of recorded peak, per period.
    pub p_l: Vec<f64>,
    pub billing_period_hours: f64,
}

impl Default for Tariff {
    fn default() -> Self {
        Self {
            periods: vec![
                TouPeriod::new("on-peak", 12.0, 17.0),
                TouPeriod::new("mid-peak", 8.0, 12.0),
                TouPeriod::new("off-peak", 17.0, 8.0),
            ],
            p_e: vec![0.20, 0.10, 0.05],
            p_c: 0.15,
            p_d: 0.16,
            p_l: vec![2.0, 1.0, 0.5],
            billing_period_hours: 30.0 * 24.0,
        }
    }
}

impl Tariff {
    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.periods.len();
        if n == 0 {
            return Err(ConfigError::invalid("tariff.periods", "at least one period is required"));
        }
        if self.p_e.len() != n {
            return Err(ConfigError::invalid("tariff.p_e", "needs one price per period"));
        }
        if self.p_l.len() != n {
            return Err(ConfigError::invalid("tariff.p_l", "needs one price per period"));
        }
        let all_prices = self.p_e.iter().chain(&self.p_l).chain([&self.p_c, &self.p_d]);
        if all_prices.into_iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ConfigError::invalid("tariff", "prices must be finite and non-negative"));
        }
        if self.p_d <= self.p_c {
            return Err(ConfigError::invalid("tariff.p_d", "must exceed p_c"));
        }
        if !(self.billing_period_hours > 0.0) {
            return Err(ConfigError::invalid("tariff.billing_period_hours", "must be positive"));
        }
        for p in &self.periods {
            let ok = |h: f64| (0.0..=24.0).contains(&h);
            if !ok(p.start_hour) || !ok(p.end_hour) {
                return Err(ConfigError::invalid("tariff.periods", "hours must lie in [0, 24]"));
            }
        }
        // Membership only changes at boundaries, so testing every boundary and
        // every midpoint between consecutive boundaries covers the whole day.
        let mut marks: Vec<f64> = vec![0.0, 24.0];
        for p in &self.periods {
            marks.push(p.start_hour.rem_euclid(24.0));
            marks.push(p.end_hour.rem_euclid(24.0));
        }
        marks.sort_by(f64::total_cmp);
        marks.dedup();
        let mut probes: Vec<f64> = marks.iter().copied().filter(|h| *h < 24.0).collect();
        probes.extend(marks.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        for h in probes {
            let hits = self.periods.iter().filter(|p| p.contains(h)).count();
            if hits != 1 {
                return Err(ConfigError::invalid(
                    "tariff.periods",
                    format!("hour {h} is covered by {hits} periods; periods must partition the day"),
                ));
            }
        }
        Ok(())
    }

    /// Period index containing a clock hour in `[0, 24)`.
    pub fn period_at_hour(&self, hour: f64) -> usize {
        let hour = hour.rem_euclid(24.0);
        self.periods
            .iter()
            .position(|p| p.contains(hour))
            .expect("tariff periods partition the day")
    }

    /// Net revenue per kWh moved through an EV battery in period `h`.
    pub fn net_margin(&self, h: usize, charging: bool) -> f64 {
        if charging {
            self.p_c - self.p_e[h]
        } else {
            self.p_e[h] - self.p_d
        }
    }

    /// Cheapest utility price is off-peak, the most expensive on-peak.
    pub fn period_class(&self, h: usize) -> PeriodClass {
        let price = self.p_e[h];
        let lo = self.p_e.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.p_e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if price <= lo {
            PeriodClass::OffPeak
        } else if price >= hi {
            PeriodClass::OnPeak
        } else {
            PeriodClass::MidPeak
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationConfig {
    pub n_chargers: usize,
    pub n_waiting: usize,
    pub e_min: f64,
    pub e_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Action grid step, kW.
    pub delta_a: f64,
    /// Unmet-energy penalty, $/kWh.
    pub mu: f64,
    pub horizon_hours: f64,
    pub dt_hours: f64,
    /// Clock hour at step 0.
    pub start_hour: f64,
}

impl Default for StationConfig {
    fn default() -> Self {
        Self {
            n_chargers: 10,
            n_waiting: 5,
            e_min: 10.0,
            e_max: 100.0,
            a_min: -100.0,
            a_max: 100.0,
            delta_a: 1.0,
            mu: 0.2,
            horizon_hours: 48.0,
            dt_hours: 0.25,
            start_hour: 0.0,
        }
    }
}

impl StationConfig {
    pub fn n_total(&self) -> usize {
        self.n_chargers + self.n_waiting
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon_hours / self.dt_hours).round() as usize
    }

    /// `T / T_B`, the demand-charge scaling for a horizon shorter than the bill.
    pub fn billing_fraction(&self, tariff: &Tariff) -> f64 {
        self.horizon_hours / tariff.billing_period_hours
    }

    pub fn clock_hour(&self, step: usize) -> f64 {
        (self.start_hour + step as f64 * self.dt_hours).rem_euclid(24.0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_chargers == 0 {
            return Err(ConfigError::invalid("station.n_chargers", "must be at least 1"));
        }
        if !(self.e_min < self.e_max) || self.e_min < 0.0 {
            return Err(ConfigError::invalid("station.e_min", "need 0 <= e_min < e_max"));
        }
        if !(self.a_min < 0.0 && 0.0 < self.a_max) {
            return Err(ConfigError::invalid("station.a_min", "need a_min < 0 < a_max"));
        }
        if !(self.delta_a > 0.0) {
            return Err(ConfigError::invalid("station.delta_a", "must be positive"));
        }
        if !(self.mu >= 0.0) {
            return Err(ConfigError::invalid("station.mu", "must be non-negative"));
        }
        if !(self.dt_hours > 0.0) {
            return Err(ConfigError::invalid("station.dt_hours", "must be positive"));
        }
        let ratio = self.horizon_hours / self.dt_hours;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(ConfigError::invalid(
                "station.horizon_hours",
                "must be a positive integer multiple of dt_hours",
            ));
        }
        if !(0.0..24.0).contains(&self.start_hour) {
            return Err(ConfigError::invalid("station.start_hour", "must lie in [0, 24)"));
        }
        Ok(())
    }
}

/// Period index at an episode step.
pub fn tou_period_of(step: usize, tariff: &Tariff, station: &StationConfig) -> usize {
    tariff.period_at_hour(station.clock_hour(step))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Office,
    Residential,
    Highway,
    Retail,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] =
        [PatternKind::Office, PatternKind::Residential, PatternKind::Highway, PatternKind::Retail];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::Office => "office",
            PatternKind::Residential => "residential",
            PatternKind::Highway => "highway",
            PatternKind::Retail => "retail",
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "office" => Ok(PatternKind::Office),
            "residential" => Ok(PatternKind::Residential),
            "highway" => Ok(PatternKind::Highway),
            "retail" => Ok(PatternKind::Retail),
            _ => Err(ConfigError::invalid("pattern.name", format!("unknown pattern `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalPattern {
    pub name: PatternKind,
    /// Mean arrivals per hour for each clock hour 0..24.
    pub lambda_by_hour: Vec<f64>,
    pub dwell_mean: f64,
    pub dwell_std: f64,
    pub e_ini_mean: f64,
    pub e_ini_std: f64,
    pub e_tgt_mean: f64,
    pub e_tgt_std: f64,
}

impl ArrivalPattern {
    /// Built-in hourly rates. Only the shapes are meaningful: office traffic
    /// peaks 8-10 AM, residential 4-8 PM, highway has several peaks and retail
    /// a noon peak followed by a higher evening one. The magnitudes are
    /// hand-picked approximations for a 10-charger / 5-spot station.
    pub fn preset(kind: PatternKind) -> Self {
        #[rustfmt::skip]
        let lambda: [f64; 24] = match kind {
            PatternKind::Office => [
                0.05, 0.05, 0.05, 0.05, 0.05, 0.1, 0.5, 2.0, 5.0, 5.0, 3.0, 1.5,
                1.0, 0.8, 0.5, 0.3, 0.2, 0.2, 0.1, 0.05, 0.05, 0.05, 0.05, 0.05,
            ],
            PatternKind::Residential => [
                0.1, 0.1, 0.05, 0.05, 0.05, 0.1, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3,
                0.4, 0.4, 0.5, 1.0, 2.5, 3.0, 3.0, 2.5, 1.5, 1.0, 0.5, 0.2,
            ],
            PatternKind::Highway => [
                0.5, 0.3, 0.3, 0.3, 0.5, 1.0, 2.5, 4.0, 6.0, 4.0, 2.5, 4.0,
                6.0, 4.0, 2.5, 3.0, 5.0, 7.0, 5.0, 3.0, 2.0, 1.5, 1.0, 0.5,
            ],
            PatternKind::Retail => [
                0.1, 0.05, 0.05, 0.05, 0.05, 0.1, 0.3, 0.5, 1.0, 2.0, 3.0, 4.0,
                5.0, 4.0, 3.0, 2.5, 3.0, 5.0, 6.5, 7.0, 5.0, 3.0, 1.0, 0.3,
            ],
        };
        let (dwell_mean, dwell_std) = match kind {
            PatternKind::Office => (8.0, 4.0),
            PatternKind::Residential => (16.0, 4.0),
            PatternKind::Highway => (1.0, 0.5),
            PatternKind::Retail => (1.0, 0.75),
        };
        Self {
            name: kind,
            lambda_by_hour: lambda.to_vec(),
            dwell_mean,
            dwell_std,
            e_ini_mean: 20.0,
            e_ini_std: 10.0,
            e_tgt_mean: 80.0,
            e_tgt_std: 10.0,
        }
    }

    /// Same pattern with every hourly rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.lambda_by_hour.iter_mut().for_each(|l| *l *= factor);
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lambda_by_hour.len() != 24 {
            return Err(ConfigError::invalid("pattern.lambda_by_hour", "needs exactly 24 entries"));
        }
        if self.lambda_by_hour.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(ConfigError::invalid("pattern.lambda_by_hour", "rates must be >= 0"));
        }
        if !(self.dwell_std > 0.0) {
            return Err(ConfigError::invalid("pattern.dwell_std", "must be positive"));
        }
        if !(self.e_ini_std >= 0.0 && self.e_tgt_std >= 0.0) {
            return Err(ConfigError::invalid("pattern.e_ini_std", "standard deviations must be >= 0"));
        }
        Ok(())
    }
}

/// One EV's charging contract. Steps are episode step indices; the EV is
/// present for steps `t_a..t_d` and leaves at the start of step `t_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvRequest {
    pub id: u64,
    pub t_a: usize,
    pub t_d: usize,
    pub e_ini: f64,
    pub e_tgt: f64,
}

impl EvRequest {
    pub fn dwell_steps(&self) -> usize {
        self.t_d - self.t_a
    }

    /// Checks the contract invariants against a station.
    pub fn is_valid(&self, station: &StationConfig) -> bool {
        self.t_a < self.t_d
            && self.t_d <= station.n_steps()
            && station.e_min <= self.e_ini
            && self.e_ini <= self.e_tgt
            && self.e_tgt <= target_cap(self.e_ini, self.dwell_steps(), station) + 1e-9
    }
}

/// Highest target the station could physically deliver within the dwell.
pub fn target_cap(e_ini: f64, dwell_steps: usize, station: &StationConfig) -> f64 {
    station.e_max.min(e_ini + station.a_max * dwell_steps as f64 * station.dt_hours)
}

/// Turns raw attribute draws into a valid request: dwell at least one step,
/// departure no later than the episode end, energies clamped into range.
pub fn build_request(
    id: u64,
    t_a: usize,
    dwell_hours: f64,
    e_ini: f64,
    e_tgt: f64,
    station: &StationConfig,
) -> EvRequest {
    let dwell_steps = ((dwell_hours / station.dt_hours).round() as i64).max(1) as usize;
    let t_d = (t_a + dwell_steps).min(station.n_steps());
    let e_ini = e_ini.clamp(station.e_min, station.e_max);
    let cap = target_cap(e_ini, t_d - t_a, station);
    let e_tgt = e_tgt.clamp(e_ini, cap);
    EvRequest { id, t_a, t_d, e_ini, e_tgt }
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std.max(0.0)).expect("finite normal parameters")
}

/// Draws the EVs arriving during `step`. `next_id` is advanced for each EV.
pub fn sample_arrivals<R: Rng + ?Sized>(
    pattern: &ArrivalPattern,
    station: &StationConfig,
    step: usize,
    next_id: &mut u64,
    rng: &mut R,
) -> Vec<EvRequest> {
    let hour = station.clock_hour(step).floor() as usize % 24;
    let rate = pattern.lambda_by_hour[hour] * station.dt_hours;
    if rate <= 0.0 {
        return Vec::new();
    }
    let count = Poisson::new(rate).expect("positive rate").sample(rng) as usize;
    let dwell = normal(pattern.dwell_mean, pattern.dwell_std);
    let e_ini = normal(pattern.e_ini_mean, pattern.e_ini_std);
    let e_tgt = normal(pattern.e_tgt_mean, pattern.e_tgt_std);
    (0..count)
        .map(|_| {
            let d = dwell.sample(rng);
            let ei = e_ini.sample(rng);
            let et = e_tgt.sample(rng);
            let req = build_request(*next_id, step, d, ei, et, station);
            *next_id += 1;
            req
        })
        .collect()
}

/// Every arrival of one episode, ordered by arrival step then id.
pub fn generate_episode<R: Rng + ?Sized>(
    pattern: &ArrivalPattern,
    station: &StationConfig,
    rng: &mut R,
) -> Vec<EvRequest> {
    let mut next_id = 1;
    (0..station.n_steps())
        .flat_map(|t| sample_arrivals(pattern, station, t, &mut next_id, rng))
        .collect()
}

/// Independent random streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    TrainScenario = 1,
    Exploration = 2,
    EvalScenario = 3,
    Prediction = 4,
    Policy = 5,
}

/// Generator for `(seed, stream, index)`; each triple gets its own ChaCha
/// stream, so episodes can be regenerated in any order.
pub fn stream_rng(seed: u64, stream: RngStream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}

/// Requests grouped by arrival step.
pub fn arrivals_by_step(requests: &[EvRequest], n_steps: usize) -> Vec<Vec<EvRequest>> {
    let mut out = vec![Vec::new(); n_steps];
    for r in requests {
        if r.t_a < n_steps {
            out[r.t_a].push(r.clone());
        }
    }
    out
}

pub fn write_requests_csv<W: Write>(requests: &[EvRequest], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in requests {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_requests_csv<R: Read>(reader: R) -> Result<Vec<EvRequest>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tou_lookup_matches_table() {
        let tariff = Tariff::default();
        let station = StationConfig::default();
        let at = |hour: f64| tariff.period_at_hour(hour);
        assert_eq!(tariff.periods[at(13.0)].label, "on-peak");
        assert_eq!(tariff.periods[at(3.0)].label, "off-peak");
        assert_eq!(tariff.periods[at(12.0)].label, "on-peak");
        assert_eq!(tariff.periods[at(11.99)].label, "mid-peak");
        assert_eq!(tariff.periods[at(17.0)].label, "off-peak");
        assert_eq!(tariff.periods[at(8.0)].label, "mid-peak");
        // second simulated day repeats the calendar
        assert_eq!(tou_period_of(48, &tariff, &station), 0);
        assert_eq!(tou_period_of(96 + 52, &tariff, &station), 0);
    }

    #[test]
    fn net_margins_from_default_tariff() {
        let t = Tariff::default();
        assert!((t.net_margin(0, true) - -0.05).abs() < 1e-12);
        assert!((t.net_margin(0, false) - 0.04).abs() < 1e-12);
        assert!((t.net_margin(2, true) - 0.10).abs() < 1e-12);
        assert!((t.net_margin(1, true) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn tariff_validation_rejects_gaps_and_overlaps() {
        assert!(Tariff::default().validate().is_ok());
        let mut gap = Tariff::default();
        gap.periods[1].start_hour = 9.0;
        assert!(gap.validate().is_err());
        let mut overlap = Tariff::default();
        overlap.periods[0].end_hour = 18.0;
        assert!(overlap.validate().is_err());
        let mut cheap = Tariff::default();
        cheap.p_d = 0.10;
        assert!(cheap.validate().is_err());
    }

    #[test]
    fn period_classes() {
        let t = Tariff::default();
        assert_eq!(t.period_class(0), PeriodClass::OnPeak);
        assert_eq!(t.period_class(1), PeriodClass::MidPeak);
        assert_eq!(t.period_class(2), PeriodClass::OffPeak);
    }

    #[test]
    fn target_is_capped_by_physical_limit() {
        let station = StationConfig::default();
        // 0.5 h dwell = 2 steps: cap = min(100, 20 + 100 * 0.5)
        let r = build_request(1, 0, 0.5, 20.0, 80.0, &station);
        assert_eq!(r.dwell_steps(), 2);
        assert!((r.e_tgt - 70.0).abs() < 1e-12);
        assert!(r.is_valid(&station));
    }

    #[test]
    fn truncation_rules() {
        let station = StationConfig::default();
        let r = build_request(1, 10, -3.0, 2.0, 1.0, &station);
        assert_eq!(r.t_d, 11);
        assert_eq!(r.e_ini, station.e_min);
        assert_eq!(r.e_tgt, r.e_ini);
        let late = build_request(2, station.n_steps() - 2, 10.0, 20.0, 80.0, &station);
        assert_eq!(late.t_d, station.n_steps());
        assert!(late.is_valid(&station));
    }

    #[test]
    fn zero_rate_means_no_arrivals() {
        let mut pattern = ArrivalPattern::preset(PatternKind::Office);
        pattern.lambda_by_hour = vec![0.0; 24];
        let station = StationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(generate_episode(&pattern, &station, &mut rng).is_empty());
    }

    #[test]
    fn poisson_zero_count_frequency() {
        // lambda 4/h over 15 min: P(N = 0) = e^-1
        let mut pattern = ArrivalPattern::preset(PatternKind::Highway);
        pattern.lambda_by_hour = vec![4.0; 24];
        let station = StationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 20_000;
        let mut zeros = 0;
        let mut total = 0;
        let mut id = 0;
        for _ in 0..trials {
            let n = sample_arrivals(&pattern, &station, 0, &mut id, &mut rng).len();
            zeros += (n == 0) as usize;
            total += n;
        }
        let p0 = zeros as f64 / trials as f64;
        let expected = (-1.0f64).exp();
        let sigma = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!((p0 - expected).abs() < 4.0 * sigma, "p0 = {p0}");
        let mean = total as f64 / trials as f64;
        assert!((mean - 1.0).abs() < 4.0 * (1.0 / trials as f64).sqrt());
    }

    #[test]
    fn same_seed_same_stream() {
        let pattern = ArrivalPattern::preset(PatternKind::Retail);
        let station = StationConfig::default();
        let a = generate_episode(&pattern, &station, &mut ChaCha8Rng::seed_from_u64(5));
        let b = generate_episode(&pattern, &station, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let pattern = ArrivalPattern::preset(PatternKind::Office);
        let station = StationConfig::default();
        let reqs = generate_episode(&pattern, &station, &mut ChaCha8Rng::seed_from_u64(9));
        let mut buf = Vec::new();
        write_requests_csv(&reqs, &mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("id,t_a,t_d,e_ini,e_tgt"));
        let back = read_requests_csv(buf.as_slice()).unwrap();
        assert_eq!(reqs, back);
    }
}
