//! Python bindings: specs, a steppable station, evaluation, training and the
//! tiny-instance oracle.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cade_core::baselines::{grd_act, grd_allocate, oracle_solve, ReserveRule};
use cade_core::experiment::{
    cmd_train, evaluate, load_weights, qsweep, ExperimentError, ExperimentSpec, Output, PolicyKind,
    SweepAxis, TrainOptions, WEIGHTS_FILE,
};
use cade_core::scenario::{arrivals_by_step, EvRequest};
use cade_core::station::Station;

fn py_err(e: ExperimentError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// An experiment spec parsed from TOML.
#[pyclass(name = "Spec", from_py_object)]
#[derive(Clone)]
struct PySpec {
    inner: ExperimentSpec,
}

#[pymethods]
impl PySpec {
    #[new]
    #[pyo3(signature = (toml_text=""))]
    fn new(toml_text: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentSpec::from_toml(toml_text).map_err(value_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn n_chargers(&self) -> usize {
        self.inner.station.n_chargers
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.station.n_steps()
    }

    #[getter]
    fn policies(&self) -> Vec<String> {
        self.inner.policies.iter().map(|p| p.to_string()).collect()
    }

    /// Requests of one evaluation trajectory as `(id, t_a, t_d, e_ini, e_tgt)`.
    fn requests(&self, index: usize) -> Vec<(u64, usize, usize, f64, f64)> {
        let s = &self.inner;
        s.eval_requests(&s.station, &s.arrival_pattern(), index)
            .into_iter()
            .map(|r| (r.id, r.t_a, r.t_d, r.e_ini, r.e_tgt))
            .collect()
    }
}

/// A station driven one step at a time from Python.
#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    spec: ExperimentSpec,
    station: Station,
    arrivals: Vec<Vec<EvRequest>>,
}

#[pymethods]
impl PyEnv {
    /// Station for evaluation trajectory `index` of the spec.
    #[new]
    #[pyo3(signature = (spec, index=0))]
    fn new(spec: &PySpec, index: usize) -> PyResult<Self> {
        let s = spec.inner.clone();
        let station = Station::new(s.station.clone(), s.tariff.clone()).map_err(value_err)?;
        let reqs = s.eval_requests(&s.station, &s.arrival_pattern(), index);
        let arrivals = arrivals_by_step(&reqs, station.n_steps());
        Ok(Self { spec: s, station, arrivals })
    }

    #[getter]
    fn step_index(&self) -> usize {
        self.station.step()
    }

    #[getter]
    fn done(&self) -> bool {
        self.station.is_done()
    }

    /// Admits this step's arrivals; returns `(admitted, rejected)` ids.
    fn admit(&mut self) -> (Vec<u64>, Vec<u64>) {
        let adm = self.station.admit(&self.arrivals[self.station.step()]);
        (adm.admitted, adm.rejected)
    }

    /// Ids of EVs on site, in id order.
    fn present(&self) -> Vec<u64> {
        self.station.present_sessions().iter().map(|&i| self.station.session(i).request.id).collect()
    }

    /// Plugs in the EVs with these ids (at most one per charger).
    fn allocate(&mut self, ids: Vec<u64>) -> PyResult<()> {
        let present = self.station.present_sessions();
        let mut chosen = Vec::new();
        for id in ids {
            let i = present
                .iter()
                .copied()
                .find(|&i| self.station.session(i).request.id == id)
                .ok_or_else(|| PyValueError::new_err(format!("EV {id} is not on site")))?;
            chosen.push(i);
        }
        if chosen.len() > self.station.config().n_chargers {
            return Err(PyValueError::new_err("more EVs than chargers"));
        }
        self.station.apply_allocation(&chosen);
        Ok(())
    }

    /// Urgency-ranked allocation used by the greedy baselines.
    fn allocate_greedy(&mut self) {
        let alloc = grd_allocate(&self.station);
        self.station.apply_allocation(&alloc);
    }

    /// Greedy powers for the current allocation.
    #[pyo3(signature = (allow_discharge=true))]
    fn greedy_actions(&self, allow_discharge: bool) -> Vec<f64> {
        grd_act(&self.station, allow_discharge, ReserveRule::JustInTime)
    }

    /// Feasible power grid of charger `j`.
    fn actions(&self, j: usize) -> PyResult<Vec<f64>> {
        if j >= self.station.config().n_chargers {
            return Err(PyValueError::new_err("no such charger"));
        }
        Ok(self.station.charger_actions(j).iter().collect())
    }

    /// Observation vector of charger `j`.
    fn observe(&self, j: usize) -> PyResult<Vec<f64>> {
        if j >= self.station.config().n_chargers {
            return Err(PyValueError::new_err("no such charger"));
        }
        Ok(self.station.observe(j).encode(&self.station.scale()))
    }

    /// Applies one power per charger and returns the per-charger rewards.
    fn step(&mut self, actions: Vec<f64>) -> PyResult<Vec<f64>> {
        let n = self.station.config().n_chargers;
        if actions.len() != n {
            return Err(PyValueError::new_err(format!("expected {n} actions")));
        }
        for (j, &a) in actions.iter().enumerate() {
            if !self.station.charger_actions(j).contains(a) {
                return Err(PyValueError::new_err(format!("action {a} is infeasible at charger {j}")));
            }
        }
        Ok(self.station.step_with(&actions).rewards())
    }

    /// Episode profit so far as a dict.
    fn profit(&self) -> std::collections::BTreeMap<&'static str, f64> {
        let p = self.station.episode_profit();
        [
            ("profit", p.profit),
            ("charge_revenue", p.charge_revenue),
            ("discharge_revenue", p.discharge_revenue),
            ("penalty", p.penalty),
            ("demand_charge", p.demand_charge),
        ]
        .into_iter()
        .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Env(step={}/{}, chargers={}, fingerprint={})",
            self.station.step(),
            self.station.n_steps(),
            self.station.config().n_chargers,
            self.spec.fingerprint()
        )
    }
}

fn parse_policies(spec: &ExperimentSpec, names: Option<Vec<String>>) -> PyResult<Vec<PolicyKind>> {
    match names {
        None => Ok(spec.policies.clone()),
        Some(n) => n.iter().map(|p| p.parse().map_err(value_err)).collect(),
    }
}

/// Per-trajectory profit rows `(policy, seed, profit, charge, discharge, penalty, demand)`.
/// CADE weights are read from `weights_dir` when CADE is requested.
#[pyfunction]
#[pyo3(signature = (spec, policies=None, weights_dir=None))]
#[allow(clippy::type_complexity)]
fn evaluate_policies(
    spec: &PySpec,
    policies: Option<Vec<String>>,
    weights_dir: Option<PathBuf>,
) -> PyResult<Vec<(String, usize, f64, f64, f64, f64, f64)>> {
    let kinds = parse_policies(&spec.inner, policies)?;
    let net = match (kinds.iter().any(|k| k.needs_weights()), weights_dir) {
        (false, _) => None,
        (true, Some(d)) => Some(load_weights(&spec.inner, &d.join(WEIGHTS_FILE)).map_err(py_err)?.0),
        (true, None) => return Err(PyValueError::new_err("CADE needs weights_dir")),
    };
    let (rows, _) = evaluate(&spec.inner, &kinds, net.as_ref()).map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.policy, r.seed, r.profit, r.charge_revenue, r.discharge_revenue, r.penalty, r.demand_charge))
        .collect())
}

/// Trains CADE into `out_dir`; returns the number of episodes done.
#[pyfunction]
#[pyo3(signature = (spec, out_dir, episodes=None, resume=false, force=false))]
fn train(spec: &PySpec, out_dir: PathBuf, episodes: Option<usize>, resume: bool, force: bool) -> PyResult<usize> {
    let out = Output::new(out_dir, force);
    let report = cmd_train(&spec.inner, &out, &TrainOptions { episodes, resume }, |_| {}).map_err(py_err)?;
    Ok(report.episodes_done)
}

/// Q-value sweep rows `(value, action, q, is_argmax)` along one axis.
#[pyfunction]
fn q_sweep(spec: &PySpec, weights_dir: PathBuf, axis: &str) -> PyResult<Vec<(f64, f64, f64, bool)>> {
    let axis: SweepAxis = axis.parse().map_err(value_err)?;
    let (net, _) = load_weights(&spec.inner, &weights_dir.join(WEIGHTS_FILE)).map_err(py_err)?;
    Ok(qsweep(&spec.inner, &net, axis).into_iter().map(|r| (r.value, r.action, r.q, r.argmax)).collect())
}

/// Optimal profit and schedule `[(step, ev_id, power)]` of a tiny trajectory.
#[pyfunction]
#[pyo3(signature = (spec, index=0))]
fn oracle(spec: &PySpec, index: usize) -> PyResult<(f64, Vec<(usize, u64, f64)>)> {
    let s = &spec.inner;
    let reqs = s.eval_requests(&s.station, &s.arrival_pattern(), index);
    let sol = oracle_solve(&reqs, &s.station, &s.tariff).map_err(value_err)?;
    let sched = sol
        .schedule
        .iter()
        .enumerate()
        .flat_map(|(t, v)| v.iter().map(move |&(id, a)| (t, id, a)))
        .collect();
    Ok((sol.profit, sched))
}

#[pymodule]
fn cade(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(evaluate_policies, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(q_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    Ok(())
}
