//! Dense two-phase simplex with variable bounds.
//!
//! Every row `lo <= a.x <= hi` gets an activity variable `s = a.x` bounded by
//! `[lo, hi]`, so the working system is `A x - s = 0` with bounds on every
//! column. Nonbasic columns sit at one of their finite bounds. Rows whose
//! activity starts out of range receive an artificial column; phase 1
//! drives those to zero.

use std::fmt::Write as _;

use crate::error::LpError;

const FEAS_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-10;
const COST_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

/// `maximize constant + objective.x` subject to row ranges and column bounds.
/// Every column needs at least one finite bound.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constant: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Row>,
    pub var_names: Vec<String>,
    pub row_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub objective: f64,
    pub x: Vec<f64>,
    pub iterations: usize,
}

impl LinearProgram {
    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, cost: f64, lower: f64, upper: f64) -> usize {
        self.objective.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.var_names.push(name.into());
        self.objective.len() - 1
    }

    pub fn add_row(&mut self, name: impl Into<String>, coeffs: Vec<(usize, f64)>, lo: f64, hi: f64) -> usize {
        self.rows.push(Row { coeffs, lo, hi });
        self.row_names.push(name.into());
        self.rows.len() - 1
    }

    pub fn value_of(&self, x: &[f64]) -> f64 {
        self.constant + self.objective.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Largest bound or row violation of `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.n_vars() {
            worst = worst.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        for r in &self.rows {
            let act: f64 = r.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            worst = worst.max(r.lo - act).max(act - r.hi);
        }
        worst
    }

    /// Plain-text listing of columns and rows.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "maximize {:+.6}", self.constant);
        for j in 0..self.n_vars() {
            let _ = writeln!(
                s,
                "  col {:4} {:<16} cost {:+.6} bounds [{}, {}]",
                j, self.var_names[j], self.objective[j], self.lower[j], self.upper[j]
            );
        }
        for (i, r) in self.rows.iter().enumerate() {
            let terms: Vec<String> = r
                .coeffs
                .iter()
                .map(|&(j, a)| format!("{a:+.6} {}", self.var_names[j]))
                .collect();
            let _ = writeln!(s, "  row {:4} {:<16} {} <= {} <= {}", i, self.row_names[i], r.lo, terms.join(" "), r.hi);
        }
        s
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        Tableau::new(self).run(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Basic,
    AtLower,
    AtUpper,
}

struct Tableau {
    n_struct: usize,
    m: usize,
    /// `m x n_cols`, kept equal to `B^-1 [A | -I | art]`.
    t: Vec<f64>,
    n_cols: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    state: Vec<State>,
    basis: Vec<usize>,
    art_start: usize,
    cost: Vec<f64>,
    max_iter: usize,
    iterations: usize,
}

impl Tableau {
    fn new(lp: &LinearProgram) -> Self {
        let n = lp.n_vars();
        let m = lp.rows.len();
        for j in 0..n {
            assert!(
                lp.lower[j].is_finite() || lp.upper[j].is_finite(),
                "column {} ({}) is free",
                j,
                lp.var_names.get(j).map(String::as_str).unwrap_or("?")
            );
            assert!(lp.lower[j] <= lp.upper[j], "column {j} has empty bounds");
        }
        let mut lower: Vec<f64> = lp.lower.clone();
        let mut upper: Vec<f64> = lp.upper.clone();
        let mut x = vec![0.0; n + m];
        let mut state = vec![State::AtLower; n + m];
        for j in 0..n {
            if lower[j].is_finite() {
                x[j] = lower[j];
            } else {
                x[j] = upper[j];
                state[j] = State::AtUpper;
            }
        }
        let mut activity = vec![0.0; m];
        for (i, r) in lp.rows.iter().enumerate() {
            activity[i] = r.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            lower.push(r.lo);
            upper.push(r.hi);
        }
        // rows whose activity lies outside the range need an artificial
        let needs_art: Vec<usize> = (0..m)
            .filter(|&i| activity[i] < lp.rows[i].lo - FEAS_TOL || activity[i] > lp.rows[i].hi + FEAS_TOL)
            .collect();
        let art_start = n + m;
        let n_cols = n + m + needs_art.len();
        let mut t = vec![0.0; m * n_cols];
        let mut basis = vec![0; m];
        let mut art_of_row = vec![usize::MAX; m];
        for (k, &i) in needs_art.iter().enumerate() {
            art_of_row[i] = art_start + k;
        }
        for (i, r) in lp.rows.iter().enumerate() {
            let row = &mut t[i * n_cols..(i + 1) * n_cols];
            for &(j, a) in &r.coeffs {
                row[j] += a;
            }
            row[n + i] = -1.0;
            if art_of_row[i] == usize::MAX {
                // slack basic: row is A x - s = 0, scale by -1 so s has coefficient 1
                row.iter_mut().for_each(|v| *v = -*v);
                basis[i] = n + i;
                x[n + i] = activity[i];
                state[n + i] = State::Basic;
            } else {
                // slack at its violated bound, artificial absorbs the gap
                let s = if activity[i] < r.lo { r.lo } else { r.hi };
                x[n + i] = s;
                state[n + i] = if activity[i] < r.lo { State::AtLower } else { State::AtUpper };
                let resid = activity[i] - s;
                let sigma = if resid > 0.0 { -1.0 } else { 1.0 };
                let a = art_of_row[i];
                row[a] = sigma;
                // divide by sigma so the artificial's coefficient is 1
                row.iter_mut().for_each(|v| *v *= sigma);
                basis[i] = a;
            }
        }
        for &i in &needs_art {
            let a = art_of_row[i];
            let s = x[n + i];
            x.push(0.0);
            state.push(State::Basic);
            lower.push(0.0);
            upper.push(f64::INFINITY);
            x[a] = (activity[i] - s).abs();
        }
        let max_iter = 50 * (n_cols + m) + 1000;
        Self { n_struct: n, m, t, n_cols, lower, upper, x, state, basis, art_start, cost: vec![0.0; n_cols], max_iter, iterations: 0 }
    }

    fn run(mut self, lp: &LinearProgram) -> Result<LpSolution, LpError> {
        if self.art_start < self.n_cols {
            self.cost = (0..self.n_cols).map(|j| if j >= self.art_start { 1.0 } else { 0.0 }).collect();
            self.optimize()?;
            let infeas: f64 = (self.art_start..self.n_cols).map(|j| self.x[j]).sum();
            if infeas > 1e-7 {
                return Err(LpError::Infeasible);
            }
            // artificials stay in the problem, fixed at zero
            for j in self.art_start..self.n_cols {
                self.upper[j] = 0.0;
                if self.state[j] != State::Basic {
                    self.x[j] = 0.0;
                    self.state[j] = State::AtLower;
                }
            }
        }
        self.cost = vec![0.0; self.n_cols];
        for j in 0..self.n_struct {
            self.cost[j] = -lp.objective[j];
        }
        self.optimize()?;
        let x: Vec<f64> = (0..self.n_struct)
            .map(|j| self.x[j].clamp(lp.lower[j], lp.upper[j]))
            .collect();
        Ok(LpSolution { objective: lp.value_of(&x), x, iterations: self.iterations })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.t[i * self.n_cols..(i + 1) * self.n_cols]
    }

    /// Basic values implied by the nonbasic ones.
    fn refresh_basics(&mut self) {
        for i in 0..self.m {
            let b = self.basis[i];
            let row = self.row(i);
            let mut v = 0.0;
            for j in 0..self.n_cols {
                if j != b && self.state[j] != State::Basic {
                    v -= row[j] * self.x[j];
                }
            }
            self.x[b] = v;
        }
    }

    fn reduced_costs(&self) -> Vec<f64> {
        let mut d = self.cost.clone();
        for i in 0..self.m {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                for (dj, tij) in d.iter_mut().zip(self.row(i)) {
                    *dj -= cb * tij;
                }
            }
        }
        d
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let nc = self.n_cols;
        let p = self.t[r * nc + q];
        for v in &mut self.t[r * nc..(r + 1) * nc] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.row(r).to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * nc + q];
            if f == 0.0 {
                continue;
            }
            for (v, pr) in self.t[i * nc..(i + 1) * nc].iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            self.t[i * nc + q] = 0.0;
        }
    }

    /// Minimizes `cost . x` from the current basic feasible point.
    fn optimize(&mut self) -> Result<(), LpError> {
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= self.max_iter {
                return Err(LpError::IterationLimit);
            }
            let bland = degenerate_run > 50;
            let d = self.reduced_costs();
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..self.n_cols {
                let dir = match self.state[j] {
                    State::Basic => continue,
                    _ if self.upper[j] - self.lower[j] <= 0.0 => continue,
                    State::AtLower if d[j] < -COST_TOL => 1.0,
                    State::AtUpper if d[j] > COST_TOL => -1.0,
                    _ => continue,
                };
                match entering {
                    None => entering = Some((j, dir)),
                    Some((k, _)) if !bland && d[j].abs() > d[k].abs() => entering = Some((j, dir)),
                    _ => {}
                }
                if bland {
                    break;
                }
            }
            let Some((q, dir)) = entering else {
                self.refresh_basics();
                return Ok(());
            };
            self.iterations += 1;
            let mut theta = self.upper[q] - self.lower[q];
            let mut leave: Option<(usize, bool)> = None;
            for i in 0..self.m {
                let rate = -self.t[i * self.n_cols + q] * dir;
                let b = self.basis[i];
                let (limit, to_upper) = if rate < -PIVOT_TOL && self.lower[b].is_finite() {
                    (((self.x[b] - self.lower[b]) / -rate).max(0.0), false)
                } else if rate > PIVOT_TOL && self.upper[b].is_finite() {
                    (((self.upper[b] - self.x[b]) / rate).max(0.0), true)
                } else {
                    continue;
                };
                let better = match leave {
                    None => limit < theta,
                    Some((r, _)) => {
                        if limit < theta - FEAS_TOL {
                            true
                        } else if limit <= theta + FEAS_TOL {
                            if bland {
                                b < self.basis[r]
                            } else {
                                rate.abs() > self.t[r * self.n_cols + q].abs()
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    theta = theta.min(limit);
                    leave = Some((i, to_upper));
                }
            }
            if !theta.is_finite() {
                return Err(LpError::Unbounded);
            }
            degenerate_run = if theta <= FEAS_TOL { degenerate_run + 1 } else { 0 };
            self.x[q] += dir * theta;
            for i in 0..self.m {
                let rate = -self.t[i * self.n_cols + q] * dir;
                self.x[self.basis[i]] += rate * theta;
            }
            match leave {
                None => {
                    self.state[q] = if dir > 0.0 { State::AtUpper } else { State::AtLower };
                    self.x[q] = if dir > 0.0 { self.upper[q] } else { self.lower[q] };
                }
                Some((r, to_upper)) => {
                    let b = self.basis[r];
                    self.state[b] = if to_upper { State::AtUpper } else { State::AtLower };
                    self.x[b] = if to_upper { self.upper[b] } else { self.lower[b] };
                    self.pivot(r, q);
                    self.basis[r] = q;
                    self.state[q] = State::Basic;
                }
            }
            if self.iterations % 100 == 0 {
                self.refresh_basics();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_bound() {
        let mut lp = LinearProgram::default();
        let x = lp.add_var("x", 1.0, 0.0, f64::INFINITY);
        lp.add_row("cap", vec![(x, 1.0)], f64::NEG_INFINITY, 5.0);
        let s = lp.solve().unwrap();
        assert!((s.objective - 5.0).abs() < 1e-9);
    }

    #[test]
    fn empty_program() {
        let s = LinearProgram::default().solve().unwrap();
        assert_eq!(s.objective, 0.0);
        assert!(s.x.is_empty());
    }

    #[test]
    fn infeasible_and_unbounded_are_distinct() {
        let mut lp = LinearProgram::default();
        let x = lp.add_var("x", 1.0, 0.0, 1.0);
        lp.add_row("r", vec![(x, 1.0)], 2.0, 3.0);
        assert_eq!(lp.solve(), Err(LpError::Infeasible));
        let mut lp = LinearProgram::default();
        let x = lp.add_var("x", 1.0, 0.0, f64::INFINITY);
        let y = lp.add_var("y", 0.0, 0.0, 4.0);
        lp.add_row("r", vec![(x, 1.0), (y, -1.0)], f64::NEG_INFINITY, 1.0);
        lp.add_row("r2", vec![(x, -1.0)], f64::NEG_INFINITY, 0.0);
        assert_eq!(lp.solve().map(|s| s.objective), Ok(5.0));
        lp.rows.pop();
        lp.row_names.pop();
        lp.rows[0].hi = f64::INFINITY;
        lp.rows[0].lo = 0.0;
        assert_eq!(lp.solve(), Err(LpError::Unbounded));
    }

    #[test]
    fn degenerate_equal_costs() {
        // max x + y, x + y <= 1: any split is optimal
        let mut lp = LinearProgram::default();
        let x = lp.add_var("x", 1.0, 0.0, 1.0);
        let y = lp.add_var("y", 1.0, 0.0, 1.0);
        lp.add_row("a", vec![(x, 1.0), (y, 1.0)], f64::NEG_INFINITY, 1.0);
        lp.add_row("b", vec![(x, 1.0), (y, 1.0)], 0.0, 1.0);
        lp.add_row("c", vec![(x, 2.0), (y, 2.0)], f64::NEG_INFINITY, 2.0);
        let s = lp.solve().unwrap();
        assert!((s.objective - 1.0).abs() < 1e-9);
        assert!(lp.violation(&s.x) < 1e-9);
    }

    #[test]
    fn equality_rows_need_phase_one() {
        // max -x - y, x + 2y = 4, x - y >= 1
        let mut lp = LinearProgram::default();
        let x = lp.add_var("x", -1.0, 0.0, 10.0);
        let y = lp.add_var("y", -1.0, 0.0, 10.0);
        lp.add_row("e", vec![(x, 1.0), (y, 2.0)], 4.0, 4.0);
        lp.add_row("g", vec![(x, 1.0), (y, -1.0)], 1.0, f64::INFINITY);
        let s = lp.solve().unwrap();
        // optimum at y = 2, x = 0 violates g; vertex x = 2, y = 1 gives -3
        assert!((s.objective + 3.0).abs() < 1e-9, "{s:?}");
    }

    /// Solves a small dense system by Gaussian elimination with partial pivoting.
    fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
            if a[p][c].abs() < 1e-10 {
                return None;
            }
            a.swap(c, p);
            b.swap(c, p);
            for r in 0..n {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..n {
                        a[r][k] -= f * a[c][k];
                    }
                    b[r] -= f * b[c];
                }
            }
        }
        Some((0..n).map(|i| b[i] / a[i][i]).collect())
    }

    /// Best objective over all vertices: every choice of `n` tight
    /// hyperplanes among the bounds and row limits.
    fn vertex_enumeration(lp: &LinearProgram) -> Option<f64> {
        let n = lp.n_vars();
        let mut planes: Vec<(Vec<f64>, f64)> = Vec::new();
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for v in [lp.lower[j], lp.upper[j]] {
                if v.is_finite() {
                    planes.push((e.clone(), v));
                }
            }
        }
        for r in &lp.rows {
            let mut a = vec![0.0; n];
            for &(j, c) in &r.coeffs {
                a[j] += c;
            }
            for v in [r.lo, r.hi] {
                if v.is_finite() {
                    planes.push((a.clone(), v));
                }
            }
        }
        let mut best: Option<f64> = None;
        let k = planes.len();
        let mut idx: Vec<usize> = (0..n).collect();
        loop {
            let a = idx.iter().map(|&i| planes[i].0.clone()).collect();
            let b = idx.iter().map(|&i| planes[i].1).collect();
            if let Some(x) = solve_square(a, b) {
                if lp.violation(&x) < 1e-7 {
                    let v = lp.value_of(&x);
                    best = Some(best.map_or(v, |b: f64| b.max(v)));
                }
            }
            // next combination
            let mut i = n;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if idx[i] < k - n + i {
                    idx[i] += 1;
                    for t in i + 1..n {
                        idx[t] = idx[t - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn random_lp(rng: &mut ChaCha8Rng) -> LinearProgram {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(0..=5);
        let mut lp = LinearProgram::default();
        for j in 0..n {
            let lo = rng.random_range(-3..=1) as f64;
            let hi = lo + rng.random_range(0..=4) as f64;
            lp.add_var(format!("x{j}"), rng.random_range(-5..=5) as f64, lo, hi);
        }
        for i in 0..m {
            let mut coeffs = Vec::new();
            for j in 0..n {
                if rng.random_bool(0.7) {
                    coeffs.push((j, rng.random_range(-4..=4) as f64));
                }
            }
            let lo = if rng.random_bool(0.5) { rng.random_range(-6..=2) as f64 } else { f64::NEG_INFINITY };
            let hi = if rng.random_bool(0.7) { rng.random_range(-2..=8) as f64 } else { f64::INFINITY };
            let (lo, hi) = if lo > hi { (hi, lo) } else { (lo, hi) };
            lp.add_row(format!("r{i}"), coeffs, lo, hi);
        }
        lp
    }

    #[test]
    fn matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut feasible, mut infeasible) = (0, 0);
        for _ in 0..2000 {
            let lp = random_lp(&mut rng);
            match (lp.solve(), vertex_enumeration(&lp)) {
                (Ok(s), Some(v)) => {
                    feasible += 1;
                    assert!(lp.violation(&s.x) < 1e-7, "{}", lp.dump());
                    assert!((s.objective - v).abs() < 1e-7 * v.abs().max(1.0), "{} vs {v}\n{}", s.objective, lp.dump());
                }
                (Err(LpError::Infeasible), None) => infeasible += 1,
                (got, want) => panic!("{got:?} vs {want:?}\n{}", lp.dump()),
            }
        }
        assert!(feasible > 500 && infeasible > 50, "{feasible} {infeasible}");
    }

    proptest! {
        #[test]
        fn solution_is_feasible_and_no_worse_than_lower_corner(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lp = random_lp(&mut rng);
            if let Ok(s) = lp.solve() {
                prop_assert!(lp.violation(&s.x) < 1e-7);
                if lp.violation(&lp.lower) < 1e-12 {
                    prop_assert!(s.objective >= lp.value_of(&lp.lower) - 1e-9);
                }
            }
        }
    }
}
