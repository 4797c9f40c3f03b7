//! Experiment specs and the commands behind the `cade` binary.
//!
//! Every CSV starts with one `#` line carrying the spec fingerprint, the seed
//! and the command. Files are written to a temporary sibling and renamed, and
//! an existing file is only replaced when `force` is set.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{grd_act, oracle_solve, Greedy, Mpc, Prediction, ReserveRule, Scripted};
use crate::error::{ConfigError, OracleError, WeightsError};
use crate::policy::{run_episode, run_episode_observed, NullPolicy, Policy, RandomPolicy};
use crate::qnet::{QNetwork, Scalar};
use crate::rl::{CadePolicy, EpisodeMetrics, Precision, TrainConfig, Trainer};
use crate::scenario::{
    arrivals_by_step, generate_episode, stream_rng, tou_period_of, ArrivalPattern, EvRequest,
    PatternKind, RngStream, StationConfig, Tariff,
};
use crate::station::{feasible_actions, ChargerObservation, FeatureScale, Station};
use crate::weights::{fingerprint, fingerprint_hex, load_params, save_params, WeightsMeta};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const TRAINING_FILE: &str = "fig3_training.csv";
pub const SOC_FILE: &str = "fig4_soc.csv";
pub const PROFIT_FILE: &str = "fig5_profit.csv";
pub const SCALE_FILE: &str = "fig6_scale.csv";
pub const QSWEEP_FILE: &str = "fig7_qsweep.csv";
pub const LATENCY_FILE: &str = "table3_latency.csv";
pub const SCHEDULE_FILE: &str = "oracle_schedule.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {path}: {reason}")]
    MissingArtifact { path: PathBuf, reason: String },
    #[error("{0} exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// Process exit code: 2 for usage and config problems, 3 for missing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Exists(_) | ExperimentError::Oracle(_) => 2,
            ExperimentError::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// A policy by name: `CADE`, `GRD`, `GRD_noVGI`, `MPC(2h)`, `MPC_ideal(1h)`,
/// `Oracle`, plus the test policies `null` and `random`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyKind {
    Cade,
    Grd,
    GrdNoVgi,
    Mpc { hours: u32 },
    MpcIdeal { hours: u32 },
    Oracle,
    Null,
    Random,
}

impl PolicyKind {
    pub fn needs_weights(self) -> bool {
        self == PolicyKind::Cade
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Cade => write!(f, "CADE"),
            PolicyKind::Grd => write!(f, "GRD"),
            PolicyKind::GrdNoVgi => write!(f, "GRD_noVGI"),
            PolicyKind::Mpc { hours } => write!(f, "MPC({hours}h)"),
            PolicyKind::MpcIdeal { hours } => write!(f, "MPC_ideal({hours}h)"),
            PolicyKind::Oracle => write!(f, "Oracle"),
            PolicyKind::Null => write!(f, "null"),
            PolicyKind::Random => write!(f, "random"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::invalid("policies", format!("unknown policy `{s}`"));
        let lower = s.trim().to_ascii_lowercase();
        let simple = match lower.as_str() {
            "cade" => Some(PolicyKind::Cade),
            "grd" => Some(PolicyKind::Grd),
            "grd_novgi" | "grd-novgi" => Some(PolicyKind::GrdNoVgi),
            "oracle" => Some(PolicyKind::Oracle),
            "null" => Some(PolicyKind::Null),
            "random" => Some(PolicyKind::Random),
            _ => None,
        };
        if let Some(k) = simple {
            return Ok(k);
        }
        let (head, rest) = lower.split_once('(').ok_or_else(bad)?;
        let hours: u32 = rest.strip_suffix("h)").and_then(|h| h.parse().ok()).ok_or_else(bad)?;
        if !(1..=2).contains(&hours) {
            return Err(ConfigError::invalid("policies", format!("prediction horizon of `{s}` must be 1h or 2h")));
        }
        match head {
            "mpc" => Ok(PolicyKind::Mpc { hours }),
            "mpc_ideal" | "mpc-ideal" => Ok(PolicyKind::MpcIdeal { hours }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = ConfigError;
    fn try_from(s: String) -> Result<Self, ConfigError> {
        s.parse()
    }
}

impl From<PolicyKind> for String {
    fn from(k: PolicyKind) -> String {
        k.to_string()
    }
}

/// A preset arrival pattern with optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub name: PatternKind,
    /// Multiplies every hourly rate.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_by_hour: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_ini_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_ini_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_tgt_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_tgt_std: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl PatternSpec {
    pub fn preset(name: PatternKind) -> Self {
        Self {
            name,
            scale: 1.0,
            lambda_by_hour: None,
            dwell_mean: None,
            dwell_std: None,
            e_ini_mean: None,
            e_ini_std: None,
            e_tgt_mean: None,
            e_tgt_std: None,
        }
    }

    pub fn resolve(&self) -> Result<ArrivalPattern, ConfigError> {
        let mut p = ArrivalPattern::preset(self.name);
        if let Some(l) = &self.lambda_by_hour {
            p.lambda_by_hour = l.clone();
        }
        let pairs = [
            (&mut p.dwell_mean, self.dwell_mean),
            (&mut p.dwell_std, self.dwell_std),
            (&mut p.e_ini_mean, self.e_ini_mean),
            (&mut p.e_ini_std, self.e_ini_std),
            (&mut p.e_tgt_mean, self.e_tgt_mean),
            (&mut p.e_tgt_std, self.e_tgt_std),
        ];
        for (slot, v) in pairs {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(ConfigError::invalid("pattern.scale", "must be a finite number >= 0"));
        }
        let p = p.scaled(self.scale);
        p.validate()?;
        Ok(p)
    }
}

/// Base observation for Q-value sweeps; the swept component replaces one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QsweepSpec {
    pub step: usize,
    pub remaining_steps: usize,
    pub energy: f64,
    pub remaining_energy: f64,
    pub n_waiting: usize,
    /// Remaining energy per waiting EV.
    pub waiting_energy_per_ev: f64,
    pub period: usize,
    pub current_peak: f64,
}

impl Default for QsweepSpec {
    fn default() -> Self {
        // 10:00 on the first day, mid-peak, a half-full EV with four hours left
        Self {
            step: 40,
            remaining_steps: 16,
            energy: 50.0,
            remaining_energy: 30.0,
            n_waiting: 0,
            waiting_energy_per_ev: 40.0,
            period: 1,
            current_peak: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub sizes: Vec<usize>,
    /// Sizes at which MPC is also timed.
    pub mpc_sizes: Vec<usize>,
    /// Step at which timing starts (the station is filled greedily before it).
    pub from_step: usize,
    pub cade_steps: usize,
    pub mpc_steps: usize,
    pub repeats: usize,
    /// Sizes and trajectories for the per-charger profit table.
    pub scale_sizes: Vec<usize>,
    pub scale_trajectories: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            sizes: vec![10, 20, 50, 100],
            mpc_sizes: vec![10, 20, 50, 100],
            from_step: 40,
            cade_steps: 48,
            mpc_steps: 2,
            repeats: 2,
            scale_sizes: vec![10, 20, 50],
            scale_trajectories: 10,
        }
    }
}

/// Everything one experiment needs. Missing tables take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Training seed.
    #[serde(default)]
    pub seed: u64,
    /// Seed of the evaluation scenario stream.
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub station: StationConfig,
    #[serde(default)]
    pub tariff: Tariff,
    #[serde(default = "default_pattern")]
    pub pattern: PatternSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bench: BenchSpec,
    #[serde(default)]
    pub qsweep: QsweepSpec,
}

fn default_eval_seed() -> u64 {
    1000
}
fn default_trajectories() -> usize {
    30
}
fn default_policies() -> Vec<PolicyKind> {
    vec![
        PolicyKind::Cade,
        PolicyKind::Grd,
        PolicyKind::GrdNoVgi,
        PolicyKind::Mpc { hours: 2 },
        PolicyKind::MpcIdeal { hours: 2 },
    ]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_pattern() -> PatternSpec {
    PatternSpec::preset(PatternKind::Office)
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        toml::from_str("").expect("empty spec uses defaults")
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let spec: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.station.validate()?;
        self.tariff.validate()?;
        self.pattern.resolve()?;
        self.train.validate()?;
        if self.trajectories == 0 {
            return Err(ConfigError::invalid("trajectories", "must be at least 1"));
        }
        if self.policies.is_empty() {
            return Err(ConfigError::invalid("policies", "list at least one policy"));
        }
        if self.qsweep.period >= self.tariff.n_periods() {
            return Err(ConfigError::invalid("qsweep.period", "no such tariff period"));
        }
        if self.bench.repeats == 0 || self.bench.scale_trajectories == 0 {
            return Err(ConfigError::invalid("bench.repeats", "repeats and trajectories must be at least 1"));
        }
        Ok(())
    }

    pub fn arrival_pattern(&self) -> ArrivalPattern {
        self.pattern.resolve().expect("validated pattern")
    }

    /// Hash of the whole spec except the output directory.
    pub fn fingerprint(&self) -> String {
        let mut s = self.clone();
        s.output_dir = PathBuf::new();
        fingerprint_hex(&s.to_toml())
    }

    /// Hash of what a trained network depends on: station, tariff, arrivals,
    /// architecture and training seed. Episode counts are left out so runs
    /// can be resumed.
    pub fn model_fingerprint(&self) -> [u8; 8] {
        #[derive(Serialize)]
        struct Model<'a> {
            seed: u64,
            hidden: &'a [usize],
            station: &'a StationConfig,
            tariff: &'a Tariff,
            pattern: &'a PatternSpec,
        }
        let m = Model {
            seed: self.seed,
            hidden: &self.train.hidden,
            station: &self.station,
            tariff: &self.tariff,
            pattern: &self.pattern,
        };
        fingerprint(&toml::to_string(&m).expect("model spec serializes"))
    }

    /// Requests of evaluation trajectory `index`.
    pub fn eval_requests(&self, station: &StationConfig, pattern: &ArrivalPattern, index: usize) -> Vec<EvRequest> {
        let mut rng = stream_rng(self.eval_seed, RngStream::EvalScenario, index as u64);
        generate_episode(pattern, station, &mut rng)
    }
}

/// Where a command writes, and whether it may replace files.
#[derive(Debug, Clone)]
pub struct Output {
    pub dir: PathBuf,
    pub force: bool,
}

impl Output {
    pub fn new(dir: impl Into<PathBuf>, force: bool) -> Self {
        Self { dir: dir.into(), force }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Fails if any of `names` exists and `force` is off.
    pub fn check(&self, names: &[&str]) -> Result<(), ExperimentError> {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.path(n);
            if p.exists() {
                return Err(ExperimentError::Exists(p));
            }
        }
        Ok(())
    }

    fn ensure_dir(&self) -> Result<(), ExperimentError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))
    }

    /// Writes `header` as a comment line followed by the CSV rows.
    pub fn write_csv<R: Serialize>(&self, name: &str, header: &str, rows: &[R]) -> Result<PathBuf, ExperimentError> {
        let mut buf = format!("# {header}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(io_err(&self.dir))?;
        }
        self.write_bytes(name, &buf)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, ExperimentError> {
        self.ensure_dir()?;
        let path = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(path)
    }
}

fn header(spec: &ExperimentSpec, seed: u64, command: &str) -> String {
    format!("fingerprint={} seed={seed} command={command}", spec.fingerprint())
}

/// Reads a headed CSV written by this module.
pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, ExperimentError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Overrides `train.episodes`: the total, counting resumed episodes.
    pub episodes: Option<usize>,
    /// Continue from the weight file in the output directory.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub episodes_done: usize,
    pub weights: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<EpisodeMetrics>,
}

fn run_trainer<F: Scalar>(
    spec: &ExperimentSpec,
    cfg: TrainConfig,
    start: Option<(QNetwork<f64>, usize)>,
    on_episode: &mut dyn FnMut(&EpisodeMetrics),
) -> Result<(QNetwork<f64>, Vec<EpisodeMetrics>, usize), ConfigError> {
    let (station, tariff, pattern) = (spec.station.clone(), spec.tariff.clone(), spec.arrival_pattern());
    let mut trainer = match start {
        Some((net, done)) => Trainer::<F>::resume(station, tariff, pattern, cfg, spec.seed, net.cast(), done)?,
        None => Trainer::<F>::new(station, tariff, pattern, cfg, spec.seed)?,
    };
    let metrics = trainer.train_with(|m, _| on_episode(m));
    Ok((trainer.network().cast(), metrics, trainer.episodes_done()))
}

/// Trains CADE and writes the weight file and per-episode metrics.
pub fn cmd_train(
    spec: &ExperimentSpec,
    out: &Output,
    opts: &TrainOptions,
    mut on_episode: impl FnMut(&EpisodeMetrics),
) -> Result<TrainReport, ExperimentError> {
    let mut cfg = spec.train.clone();
    if let Some(e) = opts.episodes {
        cfg.episodes = e;
    }
    cfg.validate()?;
    let weights_path = out.path(WEIGHTS_FILE);
    let mut kept: Vec<EpisodeMetrics> = Vec::new();
    let start = if opts.resume {
        let (net, meta) = load_weights(spec, &weights_path)?;
        let done = meta.episodes_done as usize;
        let metrics_path = out.path(TRAINING_FILE);
        if metrics_path.exists() {
            kept = read_csv::<EpisodeMetrics>(&metrics_path)?;
            kept.retain(|m| m.episode < done);
        }
        Some((net, done))
    } else {
        out.check(&[WEIGHTS_FILE, TRAINING_FILE])?;
        None
    };
    let (net, fresh, episodes_done) = match cfg.precision {
        Precision::F32 => run_trainer::<f32>(spec, cfg, start, &mut on_episode)?,
        Precision::F64 => run_trainer::<f64>(spec, cfg, start, &mut on_episode)?,
    };
    kept.extend(fresh);
    out.ensure_dir()?;
    let meta = WeightsMeta { fingerprint: spec.model_fingerprint(), episodes_done: episodes_done as u64 };
    save_params(&net, &meta, &weights_path)?;
    let metrics = out.write_csv(TRAINING_FILE, &header(spec, spec.seed, "train"), &kept)?;
    Ok(TrainReport { episodes_done, weights: weights_path, metrics, last: kept.last().cloned() })
}

/// Loads weights trained for this spec's station, tariff and arrivals.
pub fn load_weights(spec: &ExperimentSpec, path: &Path) -> Result<(QNetwork<f64>, WeightsMeta), ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact {
            path: path.to_path_buf(),
            reason: "no trained weights; run `cade train` first".into(),
        });
    }
    let (net, meta) = load_params(path, None)?;
    let expected = spec.model_fingerprint();
    if meta.fingerprint != expected {
        return Err(WeightsError::Fingerprint { found: hex::encode(meta.fingerprint), expected: hex::encode(expected) }.into());
    }
    Ok((net, meta))
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfitRow {
    pub policy: String,
    pub seed: usize,
    pub profit: f64,
    pub charge_revenue: f64,
    pub discharge_revenue: f64,
    pub penalty: f64,
    pub demand_charge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocRow {
    pub policy: String,
    pub step: usize,
    pub hour: f64,
    pub period: usize,
    pub ev_id: u64,
    pub charger: Option<usize>,
    pub energy: f64,
    pub e_tgt: f64,
    pub power: f64,
}

/// Builds a policy for a station. `net` is required for CADE.
pub fn build_policy(
    kind: PolicyKind,
    station: &StationConfig,
    pattern: &ArrivalPattern,
    net: Option<&QNetwork<f64>>,
) -> Result<Box<dyn Policy>, ExperimentError> {
    let window = |hours: u32| ((hours as f64 / station.dt_hours).round() as usize).max(1);
    Ok(match kind {
        PolicyKind::Cade => {
            let net = net.ok_or_else(|| ExperimentError::MissingArtifact {
                path: PathBuf::from(WEIGHTS_FILE),
                reason: "CADE needs trained weights".into(),
            })?;
            Box::new(CadePolicy::<f32>::new(net.cast()))
        }
        PolicyKind::Grd => Box::new(Greedy::with_discharge(ReserveRule::JustInTime)),
        PolicyKind::GrdNoVgi => Box::new(Greedy::without_discharge()),
        PolicyKind::Mpc { hours } => Box::new(Mpc::new(window(hours), Prediction::Sampled, pattern.clone())),
        PolicyKind::MpcIdeal { hours } => Box::new(Mpc::new(window(hours), Prediction::Perfect, pattern.clone())),
        PolicyKind::Oracle => Box::new(OracleReplay::default()),
        PolicyKind::Null => Box::new(NullPolicy),
        PolicyKind::Random => Box::new(RandomPolicy::new(0)),
    })
}

/// Solves each episode exactly on its first step, then replays the schedule.
#[derive(Debug, Clone, Default)]
struct OracleReplay {
    requests: Vec<EvRequest>,
    script: Option<Scripted>,
}

impl Policy for OracleReplay {
    fn name(&self) -> String {
        "Oracle".into()
    }
    fn begin_episode(&mut self, requests: &[EvRequest], _seed: u64) {
        self.requests = requests.to_vec();
        self.script = None;
    }
    fn allocate(&mut self, station: &Station) -> Vec<usize> {
        if self.script.is_none() {
            let sol = oracle_solve(&self.requests, station.config(), station.tariff())
                .expect("oracle instance checked before the episode");
            self.script = Some(Scripted { schedule: sol.schedule });
        }
        self.script.as_mut().unwrap().allocate(station)
    }
    fn act(&mut self, station: &Station) -> Vec<f64> {
        self.script.as_mut().unwrap().act(station)
    }
}

fn policy_seed(spec: &ExperimentSpec, index: usize) -> u64 {
    spec.eval_seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64)
}

/// Runs every policy on the same evaluation trajectories.
pub fn evaluate(
    spec: &ExperimentSpec,
    policies: &[PolicyKind],
    net: Option<&QNetwork<f64>>,
) -> Result<(Vec<ProfitRow>, Vec<SocRow>), ExperimentError> {
    let pattern = spec.arrival_pattern();
    let requests: Vec<Vec<EvRequest>> =
        (0..spec.trajectories).map(|s| spec.eval_requests(&spec.station, &pattern, s)).collect();
    if policies.contains(&PolicyKind::Oracle) {
        for r in &requests {
            oracle_solve(r, &spec.station, &spec.tariff)?;
        }
    }
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    for (p, &kind) in policies.iter().enumerate() {
        let mut policy = build_policy(kind, &spec.station, &pattern, net)?;
        for (s, reqs) in requests.iter().enumerate() {
            let name = kind.to_string();
            let record = p == 0 && s == 0;
            let out = run_episode_observed(&mut policy, &spec.station, &spec.tariff, reqs, policy_seed(spec, s), |st, step| {
                if !record {
                    return;
                }
                // EVs still on site after the step, with the power they just received
                let t = step.step;
                for sess in st.sessions().iter().filter(|x| x.is_present()) {
                    let charger = sess.charger();
                    trace.push(SocRow {
                        policy: name.clone(),
                        step: t,
                        hour: st.config().clock_hour(t),
                        period: step.period,
                        ev_id: sess.request.id,
                        charger,
                        energy: sess.energy,
                        e_tgt: sess.request.e_tgt,
                        power: charger.map_or(0.0, |j| step.actions[j]),
                    });
                }
            })?;
            let b = out.profit;
            rows.push(ProfitRow {
                policy: name,
                seed: s,
                profit: b.profit,
                charge_revenue: b.charge_revenue,
                discharge_revenue: b.discharge_revenue,
                penalty: b.penalty,
                demand_charge: b.demand_charge,
            });
        }
    }
    Ok((rows, trace))
}

/// Per-policy means of the profit rows, in first-seen order.
pub fn mean_profits(rows: &[ProfitRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(p, ..)| *p == r.policy) {
            Some(e) => {
                e.1 += r.profit;
                e.2 += 1;
            }
            None => out.push((r.policy.clone(), r.profit, 1)),
        }
    }
    out.into_iter().map(|(p, s, n)| (p, s / n as f64)).collect()
}

/// Evaluates the spec's policies and writes the profit table and the
/// energy trace of the first policy on the first trajectory.
pub fn cmd_eval(
    spec: &ExperimentSpec,
    out: &Output,
    policies: Option<&[PolicyKind]>,
) -> Result<Vec<ProfitRow>, ExperimentError> {
    let policies = policies.unwrap_or(&spec.policies);
    out.check(&[PROFIT_FILE, SOC_FILE])?;
    let net = if policies.iter().any(|p| p.needs_weights()) {
        Some(load_weights(spec, &out.path(WEIGHTS_FILE))?.0)
    } else {
        None
    };
    let (rows, trace) = evaluate(spec, policies, net.as_ref())?;
    let h = header(spec, spec.eval_seed, "eval");
    out.write_csv(PROFIT_FILE, &h, &rows)?;
    out.write_csv(SOC_FILE, &h, &trace)?;
    Ok(rows)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub policy: String,
    pub n_chargers: usize,
    pub repeat: usize,
    pub steps: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub policy: String,
    pub n_chargers: usize,
    pub trajectories: usize,
    pub mean_profit: f64,
    pub profit_per_charger: f64,
}

/// The spec's station resized to `n` chargers, with the waiting area and
/// arrival rates scaled in proportion.
pub fn scaled_station(spec: &ExperimentSpec, n: usize) -> (StationConfig, ArrivalPattern) {
    let base = spec.station.n_chargers as f64;
    let f = n as f64 / base;
    let station = StationConfig {
        n_chargers: n,
        n_waiting: (spec.station.n_waiting as f64 * f).round() as usize,
        ..spec.station.clone()
    };
    (station, spec.arrival_pattern().scaled(f))
}

/// Times `policy`'s allocation plus actions for `steps` steps starting at
/// `from`; earlier steps are driven by the greedy rule to fill the station.
pub fn time_decisions(
    policy: &mut dyn Policy,
    station: &StationConfig,
    tariff: &Tariff,
    requests: &[EvRequest],
    from: usize,
    steps: usize,
) -> Result<Vec<f64>, ConfigError> {
    let mut st = Station::new(station.clone(), tariff.clone())?;
    let arrivals = arrivals_by_step(requests, st.n_steps());
    policy.begin_episode(requests, 0);
    let mut times = Vec::new();
    let end = (from + steps).min(st.n_steps());
    for t in 0..end {
        st.admit(&arrivals[t]);
        let actions = if t < from {
            let alloc = crate::baselines::grd_allocate(&st);
            st.apply_allocation(&alloc);
            grd_act(&st, true, ReserveRule::JustInTime)
        } else {
            let t0 = Instant::now();
            let alloc = policy.allocate(&st);
            st.apply_allocation(&alloc);
            let a = policy.act(&st);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
            a
        };
        st.step_with(&actions);
    }
    Ok(times)
}

/// Decision latency by station size, and per-charger CADE profit by size.
pub fn cmd_bench(spec: &ExperimentSpec, out: &Output) -> Result<(Vec<LatencyRow>, Vec<ScaleRow>), ExperimentError> {
    out.check(&[LATENCY_FILE, SCALE_FILE])?;
    let (net, _) = load_weights(spec, &out.path(WEIGHTS_FILE))?;
    let b = &spec.bench;
    let mut latency = Vec::new();
    for &n in &b.sizes {
        let (station, pattern) = scaled_station(spec, n);
        station.validate()?;
        let reqs = spec.eval_requests(&station, &pattern, 0);
        let mut runs: Vec<(PolicyKind, usize)> = vec![(PolicyKind::Cade, b.cade_steps)];
        if b.mpc_sizes.contains(&n) {
            runs.push((PolicyKind::Mpc { hours: 2 }, b.mpc_steps));
        }
        for (kind, steps) in runs {
            for repeat in 0..b.repeats {
                let mut policy = build_policy(kind, &station, &pattern, Some(&net))?;
                let times = time_decisions(&mut *policy, &station, &spec.tariff, &reqs, b.from_step, steps)?;
                let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
                latency.push(LatencyRow {
                    policy: kind.to_string(),
                    n_chargers: n,
                    repeat,
                    steps: times.len(),
                    mean_ms: mean,
                    max_ms: times.iter().cloned().fold(0.0, f64::max),
                });
            }
        }
    }
    let scale = scale_profits(spec, &net, &b.scale_sizes, b.scale_trajectories)?;
    let h = header(spec, spec.eval_seed, "bench");
    out.write_csv(LATENCY_FILE, &h, &latency)?;
    out.write_csv(SCALE_FILE, &h, &scale)?;
    Ok((latency, scale))
}

/// Mean CADE profit per charger on resized stations.
pub fn scale_profits(
    spec: &ExperimentSpec,
    net: &QNetwork<f64>,
    sizes: &[usize],
    trajectories: usize,
) -> Result<Vec<ScaleRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &n in sizes {
        let (station, pattern) = scaled_station(spec, n);
        let mut policy = CadePolicy::<f32>::new(net.cast());
        let mut total = 0.0;
        for s in 0..trajectories {
            let reqs = spec.eval_requests(&station, &pattern, s);
            total += run_episode(&mut policy, &station, &spec.tariff, &reqs, policy_seed(spec, s))?.profit.profit;
        }
        let mean = total / trajectories as f64;
        rows.push(ScaleRow {
            policy: "CADE".into(),
            n_chargers: n,
            trajectories,
            mean_profit: mean,
            profit_per_charger: mean / n as f64,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- qsweep

/// Which observation component a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    HOnehot,
    TR,
    NWait,
    LCurrent,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [SweepAxis::HOnehot, SweepAxis::TR, SweepAxis::NWait, SweepAxis::LCurrent];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::HOnehot => "h_onehot",
            SweepAxis::TR => "t_r",
            SweepAxis::NWait => "n_wait",
            SweepAxis::LCurrent => "L_current",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::invalid("axis", format!("unknown axis `{s}`; use h_onehot, t_r, n_wait or L_current")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QsweepRow {
    pub axis: String,
    pub value: f64,
    pub action: f64,
    pub q: f64,
    pub argmax: bool,
}

/// Q over the feasible action grid while one observation component moves.
pub fn qsweep(spec: &ExperimentSpec, net: &QNetwork<f64>, axis: SweepAxis) -> Vec<QsweepRow> {
    let cfg = &spec.station;
    let scale = FeatureScale::new(cfg, &spec.tariff);
    let q = &spec.qsweep;
    let base = ChargerObservation {
        occupied: true,
        step: q.step,
        remaining_steps: q.remaining_steps,
        energy: q.energy,
        remaining_energy: q.remaining_energy,
        n_waiting: q.n_waiting,
        waiting_energy: q.n_waiting as f64 * q.waiting_energy_per_ev,
        period: q.period,
        current_peak: q.current_peak,
    };
    let cap = cfg.n_chargers as f64 * cfg.a_max;
    let values: Vec<f64> = match axis {
        SweepAxis::HOnehot => (0..spec.tariff.n_periods()).map(|h| h as f64).collect(),
        SweepAxis::TR => [1, 2, 4, 8, 16, 32, 64].iter().map(|&v| v as f64).collect(),
        SweepAxis::NWait => (0..=cfg.n_waiting).map(|v| v as f64).collect(),
        SweepAxis::LCurrent => (0..=10).map(|k| k as f64 * 0.1 * cap).collect(),
    };
    let actions = feasible_actions(Some(q.energy), cfg);
    let mut rows = Vec::new();
    for v in values {
        let mut o = base.clone();
        match axis {
            SweepAxis::HOnehot => o.period = v as usize,
            SweepAxis::TR => o.remaining_steps = v as usize,
            SweepAxis::NWait => {
                o.n_waiting = v as usize;
                o.waiting_energy = v * q.waiting_energy_per_ev;
            }
            SweepAxis::LCurrent => o.current_peak = v,
        }
        let f = o.encode(&scale);
        let qs = net.q_values(&f, &actions, cfg.a_max);
        let (best, _) = net.best_action(&f, &actions, cfg.a_max);
        for (a, qv) in actions.iter().zip(qs) {
            rows.push(QsweepRow { axis: axis.as_str().into(), value: v, action: a, q: qv, argmax: a == best });
        }
    }
    rows
}

pub fn cmd_qsweep(spec: &ExperimentSpec, out: &Output, axes: &[SweepAxis]) -> Result<Vec<QsweepRow>, ExperimentError> {
    out.check(&[QSWEEP_FILE])?;
    let (net, _) = load_weights(spec, &out.path(WEIGHTS_FILE))?;
    let rows: Vec<QsweepRow> = axes.iter().flat_map(|&a| qsweep(spec, &net, a)).collect();
    out.write_csv(QSWEEP_FILE, &header(spec, spec.seed, "qsweep"), &rows)?;
    Ok(rows)
}

/// Argmax action per swept value.
pub fn sweep_argmax(rows: &[QsweepRow]) -> Vec<(f64, f64)> {
    rows.iter().filter(|r| r.argmax).map(|r| (r.value, r.action)).collect()
}

// ---------------------------------------------------------------- oracle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub step: usize,
    pub ev_id: u64,
    pub power: f64,
}

/// Exact optimum of evaluation trajectory `index`; writes the schedule.
pub fn cmd_oracle(spec: &ExperimentSpec, out: &Output, index: usize) -> Result<f64, ExperimentError> {
    out.check(&[SCHEDULE_FILE])?;
    let pattern = spec.arrival_pattern();
    let reqs = spec.eval_requests(&spec.station, &pattern, index);
    let sol = oracle_solve(&reqs, &spec.station, &spec.tariff)?;
    let rows: Vec<ScheduleRow> = sol
        .schedule
        .iter()
        .enumerate()
        .flat_map(|(t, s)| s.iter().map(move |&(ev_id, power)| ScheduleRow { step: t, ev_id, power }))
        .collect();
    let h = format!("{} profit={}", header(spec, index as u64, "oracle"), sol.profit);
    out.write_csv(SCHEDULE_FILE, &h, &rows)?;
    Ok(sol.profit)
}

/// Period index of every step, for summaries.
pub fn period_by_step(spec: &ExperimentSpec) -> Vec<usize> {
    (0..spec.station.n_steps()).map(|t| tou_period_of(t, &spec.tariff, &spec.station)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for s in ["CADE", "GRD", "GRD_noVGI", "MPC(1h)", "MPC(2h)", "MPC_ideal(2h)", "Oracle", "null", "random"] {
            let k: PolicyKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert!("MPC(3h)".parse::<PolicyKind>().is_err());
        assert!("LQR".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn spec_defaults_and_unknown_fields() {
        let spec = ExperimentSpec::from_toml("seed = 3\n[station]\nn_chargers = 4\n").unwrap();
        assert_eq!(spec.station.n_chargers, 4);
        assert_eq!(spec.station.n_waiting, 5);
        assert_eq!(spec.trajectories, 30);
        let back = ExperimentSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
        let err = ExperimentSpec::from_toml("[station]\nn_charger = 4\n").unwrap_err();
        assert!(err.to_string().contains("n_charger"), "{err}");
        let err = ExperimentSpec::from_toml("[station]\ndelta_a = -1.0\n").unwrap_err();
        assert_eq!(err.field(), Some("station.delta_a"));
    }

    #[test]
    fn fingerprint_ignores_output_dir_but_not_seed() {
        let a = ExperimentSpec::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.train.episodes = 5;
        assert_eq!(a.model_fingerprint(), c.model_fingerprint());
    }

    #[test]
    fn pattern_overrides() {
        let mut p = PatternSpec::preset(PatternKind::Highway);
        p.scale = 0.5;
        p.dwell_mean = Some(3.0);
        let a = p.resolve().unwrap();
        assert_eq!(a.dwell_mean, 3.0);
        assert_eq!(a.lambda_by_hour[8], 3.0);
    }
}
