//! Exact mixed-integer encoding of ReLU networks, pre-activation bounds, and
//! a small self-contained LP/MILP solver.
//!
//! Each hidden neuron `z = max(zhat, 0)` with bounds `zhat in [lo, hi]`,
//! `lo < 0 < hi`, becomes the big-M system
//!
//! ```text
//! z <= zhat - lo (1 - b),  z >= zhat,  z <= hi b,  z >= 0,  b in {0, 1}
//! ```
//!
//! which is exact: any feasible point has `z = max(zhat, 0)`. Neurons whose
//! bounds fix the sign are encoded without a binary.

mod bnb;
mod bounds;
mod encode;
mod lp_format;
mod simplex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bnb::{branch_and_bound, branch_and_bound_with, BbOptions};
pub use bounds::{
    interval_bounds, read_bounds, tighten_bounds_lp, write_bounds, BoundsEntry, BoundsFile,
    BoundsSource, NeuronBounds, TightenOptions,
};
pub use encode::{encode, InputDomain, NeuronVars, Roles};
pub use lp_format::{export_lp_file, lp_string, sanitize_names};
pub use simplex::{simplex_solve, simplex_solve_with, SimplexOptions, FEAS_TOL, OPT_TOL};

#[derive(Debug, Error)]
pub enum MilpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("variable `{0}` has an infinite bound")]
    InfiniteBound(String),
    #[error("neuron {neuron} of layer {layer} has unbounded pre-activation")]
    UnboundedNeuron { layer: usize, neuron: usize },
    #[error("bound LP for neuron {neuron} of layer {layer} failed: {reason}")]
    BoundLp {
        layer: usize,
        neuron: usize,
        reason: String,
    },
    #[error("simplex iteration limit ({0}) reached")]
    IterationLimit(usize),
    #[error("node limit {nodes} reached (incumbent {incumbent:?}, bound {bound})")]
    NodeLimit {
        nodes: usize,
        incumbent: Option<f64>,
        bound: f64,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("bounds file: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Pinn(#[from] crate::pinn::PinnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MilpError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub binary: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveSense {
    Maximize,
    Minimize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilpProblem {
    pub variables: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    pub objective: Vec<(usize, f64)>,
    pub sense: ObjectiveSense,
    pub roles: Roles,
}

impl Default for MilpProblem {
    fn default() -> Self {
        Self {
            variables: Vec::new(),
            constraints: Vec::new(),
            objective: Vec::new(),
            sense: ObjectiveSense::Maximize,
            roles: Roles::default(),
        }
    }
}

impl MilpProblem {
    pub fn new(sense: ObjectiveSense) -> Self {
        Self {
            sense,
            ..Self::default()
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> usize {
        self.variables.push(Variable {
            name: name.into(),
            lower,
            upper,
            binary: false,
        });
        self.variables.len() - 1
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> usize {
        self.variables.push(Variable {
            name: name.into(),
            lower: 0.0,
            upper: 1.0,
            binary: true,
        });
        self.variables.len() - 1
    }

    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        terms: Vec<(usize, f64)>,
        sense: Sense,
        rhs: f64,
    ) -> usize {
        self.constraints.push(Constraint {
            name: name.into(),
            terms,
            sense,
            rhs,
        });
        self.constraints.len() - 1
    }

    pub fn set_objective(&mut self, sense: ObjectiveSense, terms: Vec<(usize, f64)>) {
        self.sense = sense;
        self.objective = terms;
    }

    /// Fix a variable to `value`.
    pub fn fix(&mut self, var: usize, value: f64) {
        self.variables[var].lower = value;
        self.variables[var].upper = value;
    }

    pub fn n_binaries(&self) -> usize {
        self.variables.iter().filter(|v| v.binary).count()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Copy with every binary relaxed to the interval `[0, 1]`.
    pub fn relaxed(&self) -> Self {
        let mut p = self.clone();
        for v in &mut p.variables {
            v.binary = false;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.variables.len();
        for v in &self.variables {
            if v.lower.is_nan() || v.upper.is_nan() {
                return Err(MilpError::InvalidProblem(format!("NaN bound on `{}`", v.name)));
            }
            if v.binary && (v.lower < 0.0 || v.upper > 1.0) {
                return Err(MilpError::InvalidProblem(format!(
                    "binary `{}` has bounds outside [0, 1]",
                    v.name
                )));
            }
        }
        for c in &self.constraints {
            if let Some((j, _)) = c.terms.iter().find(|(j, _)| *j >= n) {
                return Err(MilpError::InvalidProblem(format!(
                    "constraint `{}` references undeclared variable {j}",
                    c.name
                )));
            }
            if !c.rhs.is_finite() || c.terms.iter().any(|(_, a)| !a.is_finite()) {
                return Err(MilpError::InvalidProblem(format!(
                    "constraint `{}` has a non-finite coefficient",
                    c.name
                )));
            }
        }
        if let Some((j, _)) = self.objective.iter().find(|(j, _)| *j >= n) {
            return Err(MilpError::InvalidProblem(format!(
                "objective references undeclared variable {j}"
            )));
        }
        Ok(())
    }

    /// Activity `sum a_j x_j` of constraint `i`.
    pub fn activity(&self, i: usize, x: &[f64]) -> f64 {
        self.constraints[i].terms.iter().map(|(j, a)| a * x[*j]).sum()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|(j, c)| c * x[*j]).sum()
    }

    /// Largest bound or constraint violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (v, xv) in self.variables.iter().zip(x) {
            worst = worst.max(v.lower - xv).max(xv - v.upper);
        }
        for (i, c) in self.constraints.iter().enumerate() {
            let r = self.activity(i, x) - c.rhs;
            let viol = match c.sense {
                Sense::Le => r,
                Sense::Ge => -r,
                Sense::Eq => r.abs(),
            };
            worst = worst.max(viol);
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Objective in the problem's own sense; NaN unless optimal.
    pub objective: f64,
    pub values: Vec<f64>,
    /// `d objective / d rhs` per constraint (LP solves only).
    pub duals: Vec<f64>,
    pub iterations: usize,
    /// Branch-and-bound nodes solved (0 for a plain LP).
    pub nodes: usize,
}

impl LpSolution {
    pub(crate) fn without_point(status: LpStatus, iterations: usize) -> Self {
        Self {
            status,
            objective: f64::NAN,
            values: Vec::new(),
            duals: Vec::new(),
            iterations,
            nodes: 0,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}
