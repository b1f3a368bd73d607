//! Bounded-variable primal simplex with an explicit dense basis inverse.
//!
//! Every row `a_i x` gets a logical variable `r_i = a_i x` whose bounds
//! encode the row sense, so the system is `A x - r = 0` and all variables are
//! boxed. Rows violated at the starting point receive an artificial
//! variable; phase 1 drives those to zero.
//!
//! Pricing is largest reduced cost; after a run of degenerate pivots the
//! method falls back to Bland's smallest-index rule until the objective moves
//! again, which rules out cycling.

use nalgebra::DMatrix;

use super::{LpSolution, LpStatus, MilpError, MilpProblem, ObjectiveSense, Result, Sense};

pub const FEAS_TOL: f64 = 1e-7;
pub const OPT_TOL: f64 = 1e-7;
const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 50;
const DEGENERATE_RUN: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexOptions {
    pub max_iterations: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100_000,
        }
    }
}

/// LP relaxation of `p` (binaries treated as `[0, 1]`).
pub fn simplex_solve(p: &MilpProblem) -> Result<LpSolution> {
    simplex_solve_with(p, &SimplexOptions::default())
}

pub fn simplex_solve_with(p: &MilpProblem, opts: &SimplexOptions) -> Result<LpSolution> {
    p.validate()?;
    let lower: Vec<f64> = p.variables.iter().map(|v| v.lower).collect();
    let upper: Vec<f64> = p.variables.iter().map(|v| v.upper).collect();
    let sf = StandardForm::new(p);
    solve_bounded(&sf, &lower, &upper, opts)
}

/// Column-oriented copy of a problem, reused across bound changes.
pub(crate) struct StandardForm<'a> {
    pub(crate) p: &'a MilpProblem,
    n: usize,
    m: usize,
    cols: Vec<Vec<(usize, f64)>>,
    row_lo: Vec<f64>,
    row_hi: Vec<f64>,
    /// Internal objective, always maximized.
    cost: Vec<f64>,
}

impl<'a> StandardForm<'a> {
    pub(crate) fn new(p: &'a MilpProblem) -> Self {
        let n = p.variables.len();
        let m = p.constraints.len();
        let mut cols = vec![Vec::new(); n];
        let mut row_lo = Vec::with_capacity(m);
        let mut row_hi = Vec::with_capacity(m);
        for (i, c) in p.constraints.iter().enumerate() {
            // merge duplicate terms so each column has one entry per row
            let mut terms = c.terms.clone();
            terms.sort_by_key(|t| t.0);
            let mut k = 0;
            while k < terms.len() {
                let j = terms[k].0;
                let mut a = 0.0;
                while k < terms.len() && terms[k].0 == j {
                    a += terms[k].1;
                    k += 1;
                }
                if a != 0.0 {
                    cols[j].push((i, a));
                }
            }
            let (lo, hi) = match c.sense {
                Sense::Le => (f64::NEG_INFINITY, c.rhs),
                Sense::Ge => (c.rhs, f64::INFINITY),
                Sense::Eq => (c.rhs, c.rhs),
            };
            row_lo.push(lo);
            row_hi.push(hi);
        }
        let sign = match p.sense {
            ObjectiveSense::Maximize => 1.0,
            ObjectiveSense::Minimize => -1.0,
        };
        let mut cost = vec![0.0; n];
        for (j, c) in &p.objective {
            cost[*j] += sign * c;
        }
        Self {
            p,
            n,
            m,
            cols,
            row_lo,
            row_hi,
            cost,
        }
    }

    pub(crate) fn sign(&self) -> f64 {
        match self.p.sense {
            ObjectiveSense::Maximize => 1.0,
            ObjectiveSense::Minimize => -1.0,
        }
    }
}

struct Solver<'s, 'a> {
    sf: &'s StandardForm<'a>,
    /// `(row, sign)` of each artificial column.
    arts: Vec<(usize, f64)>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    at_upper: Vec<bool>,
    basis: Vec<usize>,
    /// Basis position of each variable, `usize::MAX` when nonbasic.
    pos: Vec<usize>,
    binv: Vec<f64>,
    cost: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
    since_refactor: usize,
    degenerate_run: usize,
}

enum PhaseEnd {
    Optimal,
    Unbounded,
}

impl<'s, 'a> Solver<'s, 'a> {
    fn n_total(&self) -> usize {
        self.sf.n + self.sf.m + self.arts.len()
    }

    /// Nonzeros of column `j`.
    fn for_col(&self, j: usize, mut f: impl FnMut(usize, f64)) {
        let (n, m) = (self.sf.n, self.sf.m);
        if j < n {
            for &(i, a) in &self.sf.cols[j] {
                f(i, a);
            }
        } else if j < n + m {
            f(j - n, -1.0);
        } else {
            let (i, s) = self.arts[j - n - m];
            f(i, s);
        }
    }

    fn refactor(&mut self) -> Result<()> {
        let m = self.sf.m;
        self.since_refactor = 0;
        if m == 0 {
            return Ok(());
        }
        let mut b = DMatrix::<f64>::zeros(m, m);
        for (k, &j) in self.basis.iter().enumerate() {
            self.for_col(j, |i, a| b[(i, k)] = a);
        }
        let inv = b
            .try_inverse()
            .ok_or_else(|| MilpError::Numerical("singular basis".into()))?;
        for r in 0..m {
            for c in 0..m {
                self.binv[r * m + c] = inv[(r, c)];
            }
        }
        // x_B = -B^-1 N x_N
        let mut rhs = vec![0.0; m];
        for j in 0..self.n_total() {
            if self.pos[j] == usize::MAX && self.x[j] != 0.0 {
                let xj = self.x[j];
                self.for_col(j, |i, a| rhs[i] -= a * xj);
            }
        }
        for k in 0..m {
            let row = &self.binv[k * m..(k + 1) * m];
            self.x[self.basis[k]] = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
        }
        Ok(())
    }

    fn duals(&self) -> Vec<f64> {
        let m = self.sf.m;
        let mut y = vec![0.0; m];
        for (k, &j) in self.basis.iter().enumerate() {
            let c = self.cost[j];
            if c != 0.0 {
                for (yi, b) in y.iter_mut().zip(&self.binv[k * m..(k + 1) * m]) {
                    *yi += c * b;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64]) -> f64 {
        let mut d = self.cost[j];
        self.for_col(j, |i, a| d -= y[i] * a);
        d
    }

    fn run_phase(&mut self) -> Result<PhaseEnd> {
        let m = self.sf.m;
        let total = self.n_total();
        let mut alpha = vec![0.0; m];
        loop {
            if self.iterations >= self.max_iterations {
                return Err(MilpError::IterationLimit(self.max_iterations));
            }
            if self.since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
            let bland = self.degenerate_run >= DEGENERATE_RUN;
            let y = self.duals();

            // pricing
            let mut entering = None;
            let mut best = 0.0;
            for j in 0..total {
                if self.pos[j] != usize::MAX || self.upper[j] <= self.lower[j] {
                    continue;
                }
                let d = self.reduced_cost(j, &y);
                let eligible = if self.at_upper[j] { d < -OPT_TOL } else { d > OPT_TOL };
                if !eligible {
                    continue;
                }
                if bland {
                    entering = Some(j);
                    break;
                }
                if d.abs() > best {
                    best = d.abs();
                    entering = Some(j);
                }
            }
            let Some(q) = entering else {
                return Ok(PhaseEnd::Optimal);
            };
            let dir = if self.at_upper[q] { -1.0 } else { 1.0 };

            alpha.iter_mut().for_each(|a| *a = 0.0);
            self.for_col(q, |i, a| {
                for k in 0..m {
                    alpha[k] += self.binv[k * m + i] * a;
                }
            });

            // ratio test
            let mut theta = self.upper[q] - self.lower[q];
            let mut leave: Option<(usize, bool)> = None;
            for k in 0..m {
                let rate = -dir * alpha[k];
                if rate.abs() <= PIVOT_TOL {
                    continue;
                }
                let j = self.basis[k];
                let (lim, hits_upper) = if rate > 0.0 {
                    if self.upper[j] == f64::INFINITY {
                        continue;
                    }
                    ((self.upper[j] - self.x[j]) / rate, true)
                } else {
                    if self.lower[j] == f64::NEG_INFINITY {
                        continue;
                    }
                    ((self.lower[j] - self.x[j]) / rate, false)
                };
                let lim = lim.max(0.0);
                let better = match leave {
                    _ if lim < theta - 1e-12 => true,
                    Some((r, _)) if lim <= theta + 1e-12 => {
                        if bland {
                            j < self.basis[r]
                        } else {
                            alpha[k].abs() > alpha[r].abs()
                                || (alpha[k].abs() == alpha[r].abs() && j < self.basis[r])
                        }
                    }
                    _ => false,
                };
                if better {
                    theta = lim;
                    leave = Some((k, hits_upper));
                }
            }
            if theta == f64::INFINITY {
                return Ok(PhaseEnd::Unbounded);
            }

            self.iterations += 1;
            if theta <= 1e-12 {
                self.degenerate_run += 1;
            } else {
                self.degenerate_run = 0;
            }
            self.x[q] += dir * theta;
            for k in 0..m {
                if alpha[k] != 0.0 {
                    let j = self.basis[k];
                    self.x[j] -= dir * alpha[k] * theta;
                }
            }
            match leave {
                None => {
                    // bound flip
                    self.at_upper[q] = !self.at_upper[q];
                    self.x[q] = if self.at_upper[q] { self.upper[q] } else { self.lower[q] };
                }
                Some((r, hits_upper)) => {
                    let l = self.basis[r];
                    self.x[l] = if hits_upper { self.upper[l] } else { self.lower[l] };
                    self.at_upper[l] = hits_upper;
                    self.pos[l] = usize::MAX;
                    self.basis[r] = q;
                    self.pos[q] = r;
                    let piv = alpha[r];
                    let (before, rest) = self.binv.split_at_mut(r * m);
                    let (prow, after) = rest.split_at_mut(m);
                    prow.iter_mut().for_each(|v| *v /= piv);
                    for (k, row) in before.chunks_mut(m).enumerate() {
                        let f = alpha[k];
                        if f != 0.0 {
                            row.iter_mut().zip(prow.iter()).for_each(|(a, b)| *a -= f * b);
                        }
                    }
                    for (k, row) in after.chunks_mut(m).enumerate() {
                        let f = alpha[r + 1 + k];
                        if f != 0.0 {
                            row.iter_mut().zip(prow.iter()).for_each(|(a, b)| *a -= f * b);
                        }
                    }
                    self.since_refactor += 1;
                }
            }
        }
    }
}

/// Solve the LP of `sf` with structural bounds `lower`/`upper`.
pub(crate) fn solve_bounded(
    sf: &StandardForm,
    lower: &[f64],
    upper: &[f64],
    opts: &SimplexOptions,
) -> Result<LpSolution> {
    let (n, m) = (sf.n, sf.m);
    for j in 0..n {
        if !lower[j].is_finite() || !upper[j].is_finite() {
            return Err(MilpError::InfiniteBound(sf.p.variables[j].name.clone()));
        }
        if lower[j] > upper[j] + FEAS_TOL {
            return Ok(LpSolution::without_point(LpStatus::Infeasible, 0));
        }
    }

    let mut x: Vec<f64> = (0..n).map(|j| lower[j].min(upper[j])).collect();
    let mut lo: Vec<f64> = (0..n).map(|j| lower[j].min(upper[j])).collect();
    let mut hi: Vec<f64> = upper.to_vec();
    let mut at_upper = vec![false; n];
    // start each structural at the bound nearer zero
    for j in 0..n {
        if hi[j].abs() < lo[j].abs() {
            x[j] = hi[j];
            at_upper[j] = true;
        }
    }
    let mut act = vec![0.0; m];
    for j in 0..n {
        for &(i, a) in &sf.cols[j] {
            act[i] += a * x[j];
        }
    }
    let mut arts = Vec::new();
    let mut basis = Vec::with_capacity(m);
    let mut binv_diag = Vec::with_capacity(m);
    x.extend_from_slice(&act);
    lo.extend_from_slice(&sf.row_lo);
    hi.extend_from_slice(&sf.row_hi);
    at_upper.extend(std::iter::repeat_n(false, m));
    let mut art_vals = Vec::new();
    for i in 0..m {
        let tol = FEAS_TOL * (1.0 + act[i].abs());
        if act[i] < sf.row_lo[i] - tol || act[i] > sf.row_hi[i] + tol {
            let beta = if act[i] < sf.row_lo[i] { sf.row_lo[i] } else { sf.row_hi[i] };
            x[n + i] = beta;
            at_upper[n + i] = beta == sf.row_hi[i] && act[i] > sf.row_hi[i];
            let s = if beta - act[i] > 0.0 { 1.0 } else { -1.0 };
            arts.push((i, s));
            art_vals.push((beta - act[i]).abs());
            basis.push(n + m + arts.len() - 1);
            binv_diag.push(s);
        } else {
            basis.push(n + i);
            binv_diag.push(-1.0);
        }
    }
    let n_art = arts.len();
    x.extend_from_slice(&art_vals);
    lo.extend(std::iter::repeat_n(0.0, n_art));
    hi.extend(std::iter::repeat_n(f64::INFINITY, n_art));
    at_upper.extend(std::iter::repeat_n(false, n_art));
    let total = n + m + n_art;
    let mut pos = vec![usize::MAX; total];
    for (k, &j) in basis.iter().enumerate() {
        pos[j] = k;
    }
    let mut binv = vec![0.0; m * m];
    for (k, d) in binv_diag.iter().enumerate() {
        binv[k * m + k] = *d;
    }

    let mut cost = vec![0.0; total];
    for j in n + m..total {
        cost[j] = -1.0;
    }
    let mut s = Solver {
        sf,
        arts,
        lower: lo,
        upper: hi,
        x,
        at_upper,
        basis,
        pos,
        binv,
        cost,
        iterations: 0,
        max_iterations: opts.max_iterations,
        since_refactor: 0,
        degenerate_run: 0,
    };

    if n_art > 0 {
        s.run_phase()?;
        s.refactor()?;
        // each leftover artificial is judged against the terms of its row
        for (a, &(i, _)) in s.arts.iter().enumerate() {
            let terms = &sf.p.constraints[i].terms;
            let mag: f64 = terms.iter().map(|&(c, w)| (w * s.x[c]).abs()).sum();
            if s.x[n + m + a].abs() > FEAS_TOL * (1.0 + mag) {
                return Ok(LpSolution::without_point(LpStatus::Infeasible, s.iterations));
            }
        }
        for j in n + m..total {
            s.upper[j] = 0.0;
            s.cost[j] = 0.0;
            if s.pos[j] == usize::MAX {
                s.x[j] = 0.0;
                s.at_upper[j] = false;
            }
        }
    }
    s.cost[..n].copy_from_slice(&sf.cost);
    s.degenerate_run = 0;
    match s.run_phase()? {
        PhaseEnd::Unbounded => {
            return Ok(LpSolution::without_point(LpStatus::Unbounded, s.iterations));
        }
        PhaseEnd::Optimal => {}
    }
    s.refactor()?;

    // post-check on the recomputed basic solution
    let mut worst: f64 = 0.0;
    let mut culprit = 0;
    for k in 0..m {
        let j = s.basis[k];
        let v = s.x[j];
        let viol = (s.lower[j] - v).max(v - s.upper[j]);
        // logical rows are judged against the magnitude of their terms
        let scale = if j >= n && j < n + m {
            let terms = &sf.p.constraints[j - n].terms;
            1.0 + terms.iter().map(|&(c, a)| (a * s.x[c]).abs()).sum::<f64>()
        } else {
            1.0 + s.lower[j].abs().min(s.upper[j].abs()).min(v.abs())
        };
        if viol / scale > worst {
            worst = viol / scale;
            culprit = j;
        }
    }
    if worst > FEAS_TOL {
        let name = if culprit < n {
            sf.p.variables[culprit].name.clone()
        } else if culprit < n + m {
            format!("row `{}`", sf.p.constraints[culprit - n].name)
        } else {
            format!("artificial of row `{}`", sf.p.constraints[s.arts[culprit - n - m].0].name)
        };
        return Err(MilpError::Numerical(format!(
            "basic variable {name} violates its bounds by {worst:e} after refactorization"
        )));
    }

    let values: Vec<f64> = (0..n).map(|j| s.x[j].clamp(lower[j], upper[j].max(lower[j]))).collect();
    let y = s.duals();
    let sign = sf.sign();
    let objective = sf.p.objective_value(&values);
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective,
        values,
        duals: y.iter().map(|v| sign * v).collect(),
        iterations: s.iterations,
        nodes: 0,
    })
}
