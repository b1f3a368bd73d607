//! Hybrid DAE model of a grid-following converter under a rectangular
//! voltage dip.
//!
//! The converter is connected through a coupling impedance `(R_c, L_c)` to an
//! infinite bus whose voltage is the disturbed terminal voltage `V_t`. The
//! continuous states are `[theta_pll, i_d, i_q, V_meas]`; the LVRT factor is
//! carried alongside as a ratchet (`f_latched`) that only ever decreases.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::{Dual, Real};

/// Below this measured voltage the current references are undefined.
pub const V_MEAS_FLOOR: f64 = 1e-6;

/// Measured voltage at which both current limiters switch priority.
pub const LIMITER_SWITCH_VOLTAGE: f64 = 0.9;

/// Number of continuous states.
pub const N_STATES: usize = 4;

/// Bisection stops once the bracket is narrower than this [s].
pub const BISECTION_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("measured voltage {v_meas:e} pu is below the division guard")]
    DivisionGuard { v_meas: f64 },
    #[error("integration diverged at t = {t} s")]
    Diverged { t: f64 },
    #[error("equilibrium not found after {iterations} iterations (residual {residual:e})")]
    EquilibriumNotFound { iterations: usize, residual: f64 },
    #[error("criterion is not monotone over the bracket [{lo}, {hi}]")]
    NotMonotone { lo: f64, hi: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// Physical and control constants of the converter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConverterParams {
    /// Active current lag [s].
    pub t_p: f64,
    /// Reactive current lag [s].
    pub t_q: f64,
    /// Voltage measurement filter [s].
    pub t_m: f64,
    /// PLL proportional gain [pu/pu].
    pub k_pomega: f64,
    pub omega_ref: f64,
    /// Reactive current injection droop [pu/pu].
    pub k_rci: f64,
    pub i_q0: f64,
    /// Voltage below which reactive support is injected [pu].
    pub v_q: f64,
    pub i_nom: f64,
    /// LVRT entry threshold [pu].
    pub v_int: f64,
    pub v_min: f64,
    /// LVRT factor immediately below `v_int`.
    pub c: f64,
    pub r_c: f64,
    pub l_c: f64,
    pub p_ext: f64,
    pub q_ext: f64,
}

impl Default for ConverterParams {
    fn default() -> Self {
        Self {
            t_p: 0.02,
            t_q: 0.02,
            t_m: 0.125,
            k_pomega: 5.0,
            omega_ref: 1.0,
            k_rci: 1.0,
            i_q0: 0.1,
            v_q: 0.9,
            i_nom: 1.1,
            v_int: 0.7,
            v_min: 0.3,
            c: 0.6,
            r_c: 0.005,
            l_c: 0.05,
            p_ext: 0.8,
            q_ext: 0.2,
        }
    }
}

impl ConverterParams {
    /// Same parameters with the coupling impedance removed.
    pub fn without_impedance(&self) -> Self {
        Self {
            r_c: 0.0,
            l_c: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DynamicsError::InvalidParams(m.to_string()));
        let all = [
            self.t_p,
            self.t_q,
            self.t_m,
            self.k_pomega,
            self.omega_ref,
            self.k_rci,
            self.i_q0,
            self.v_q,
            self.i_nom,
            self.v_int,
            self.v_min,
            self.c,
            self.r_c,
            self.l_c,
            self.p_ext,
            self.q_ext,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value");
        }
        if self.t_p <= 0.0 || self.t_q <= 0.0 || self.t_m <= 0.0 {
            return bad("time constants must be positive");
        }
        if !(0.0 < self.v_min && self.v_min < self.v_int && self.v_int < 1.0) {
            return bad("require 0 < V_min < V_int < 1");
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return bad("require 0 < c <= 1");
        }
        if self.i_nom <= 0.0 {
            return bad("I_nom must be positive");
        }
        if self.v_q > 1.0 {
            return bad("V_Q must not exceed 1");
        }
        Ok(())
    }
}

/// Rectangular dip of the external voltage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub delta_v: f64,
    pub delta_t: f64,
    pub v_set: f64,
}

impl DisturbanceSpec {
    pub fn new(delta_v: f64, delta_t: f64) -> Self {
        Self {
            delta_v,
            delta_t,
            v_set: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v >= 0.0 && self.delta_v < self.v_set) {
            return Err(DynamicsError::InvalidInput(format!(
                "delta_V = {} must lie in [0, V_set = {})",
                self.delta_v, self.v_set
            )));
        }
        if !(self.delta_t >= 0.0 && self.delta_t.is_finite()) {
            return Err(DynamicsError::InvalidInput(format!(
                "delta_T = {} must be non-negative",
                self.delta_t
            )));
        }
        Ok(())
    }

    /// External voltage at time `tau`.
    pub fn v_t(&self, tau: f64) -> f64 {
        if tau >= 0.0 && tau < self.delta_t {
            self.v_set - self.delta_v
        } else {
            self.v_set
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConverterState {
    pub theta_pll: f64,
    pub i_d: f64,
    pub i_q: f64,
    pub v_meas: f64,
    /// Running minimum of the instantaneous LVRT factor.
    pub f_latched: f64,
}

impl ConverterState {
    pub fn continuous(&self) -> [f64; N_STATES] {
        [self.theta_pll, self.i_d, self.i_q, self.v_meas]
    }

    fn with_continuous(&self, x: [f64; N_STATES]) -> Self {
        Self {
            theta_pll: x[0],
            i_d: x[1],
            i_q: x[2],
            v_meas: x[3],
            f_latched: self.f_latched,
        }
    }
}

/// Algebraic variables of the converter, generic over the scalar type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Algebraic<T> {
    pub v_d: T,
    pub v_q: T,
    pub omega_pll: T,
    pub v_gd: T,
    pub v_gq: T,
    pub p_vsc: T,
    pub q_vsc: T,
    pub v_pcc: T,
    pub p_total: T,
    pub q_total: T,
    pub i_q_inj: T,
    pub f_inst: T,
    /// Effective factor, `min(f_inst, f_latched)`.
    pub f: T,
    pub i_d_ref: T,
    pub i_q_ref: T,
    pub i_d_max: T,
    pub i_q_max: T,
}

pub type AlgebraicVars = Algebraic<f64>;

/// Reactive current injection for voltage support.
pub fn reactive_injection<T: Real>(v_meas: T, p: &ConverterParams) -> T {
    if v_meas.value() > p.v_q {
        T::cst(0.0)
    } else {
        -((T::cst(p.v_q) - v_meas).scale(p.k_rci) + T::cst(p.i_q0))
    }
}

/// Instantaneous three-piece LVRT characteristic; `V_meas == V_int` counts as
/// normal operation.
pub fn lvrt_factor<T: Real>(v_meas: T, p: &ConverterParams) -> T {
    let v = v_meas.value();
    if v >= p.v_int {
        T::cst(1.0)
    } else if v >= p.v_min {
        (v_meas - T::cst(p.v_min)).scale(p.c / (p.v_int - p.v_min))
    } else {
        T::cst(0.0)
    }
}

#[inline]
fn sqrt_pos<T: Real>(x: T) -> T {
    if x.value() > 0.0 {
        x.sqrt()
    } else {
        T::cst(0.0)
    }
}

/// Algebraic equations for continuous states `x = [theta, i_d, i_q, V_meas]`.
pub fn eval_algebraic<T: Real>(
    x: &[T; N_STATES],
    f_latched: f64,
    v_t: f64,
    p: &ConverterParams,
) -> Result<Algebraic<T>> {
    let [theta, i_d, i_q, v_meas] = *x;
    if !(v_meas.value() >= V_MEAS_FLOOR) {
        return Err(DynamicsError::DivisionGuard {
            v_meas: v_meas.value(),
        });
    }
    // infinite bus at the disturbed voltage: (v_x, v_y) = (V_t, 0)
    let (v_x, v_y) = (T::cst(v_t), T::cst(0.0));
    let (s, c) = (theta.sin(), theta.cos());
    let v_d = v_x * c + v_y * s;
    let v_q = -(v_x * s) + v_y * c;
    let omega_pll = v_q.scale(p.k_pomega) + T::cst(1.0);
    let wl = omega_pll.scale(p.l_c);
    let v_gd = v_d + wl * i_q - i_d.scale(p.r_c);
    let v_gq = v_q - wl * i_d - i_q.scale(p.r_c);

    let i_q_inj = reactive_injection(v_meas, p);
    let f_inst = lvrt_factor(v_meas, p);
    let f = f_inst.min_r(T::cst(f_latched));

    let i_nom2 = T::cst(p.i_nom * p.i_nom);
    let (i_d_max, i_q_max) = if v_meas.value() >= LIMITER_SWITCH_VOLTAGE {
        (T::cst(p.i_nom), sqrt_pos(i_nom2 - i_d * i_d))
    } else {
        (sqrt_pos(i_nom2 - i_q * i_q), T::cst(p.i_nom))
    };
    let i_d_unl = T::cst(p.p_ext) / v_meas * f;
    let i_q_unl = (-(T::cst(p.q_ext) / v_meas) + i_q_inj) * f;
    let i_d_ref = i_d_unl.min_r(i_d_max);
    let i_q_ref = i_q_unl.min_r(i_q_max).max_r(-i_q_max);

    Ok(Algebraic {
        v_d,
        v_q,
        omega_pll,
        v_gd,
        v_gq,
        p_vsc: v_d * i_d + v_q * i_q,
        q_vsc: v_q * i_d - v_d * i_q,
        v_pcc: sqrt_pos(v_x * v_x + v_y * v_y),
        p_total: v_gd * i_d + v_gq * i_q,
        q_total: v_gq * i_d - v_gd * i_q,
        i_q_inj,
        f_inst,
        f,
        i_d_ref,
        i_q_ref,
        i_d_max,
        i_q_max,
    })
}

/// Time derivatives of the continuous states.
pub fn eval_rhs<T: Real>(
    x: &[T; N_STATES],
    f_latched: f64,
    v_t: f64,
    p: &ConverterParams,
) -> Result<[T; N_STATES]> {
    let a = eval_algebraic(x, f_latched, v_t, p)?;
    let [_, i_d, i_q, v_meas] = *x;
    let v_mag = sqrt_pos(a.v_d * a.v_d + a.v_q * a.v_q);
    Ok([
        (a.omega_pll - T::cst(1.0)).scale(p.omega_ref),
        (a.i_d_ref - i_d).scale(1.0 / p.t_p),
        (a.i_q_ref - i_q).scale(1.0 / p.t_q),
        (v_mag - v_meas).scale(1.0 / p.t_m),
    ])
}

pub fn algebraic_eval(
    state: &ConverterState,
    v_t: f64,
    params: &ConverterParams,
) -> Result<AlgebraicVars> {
    eval_algebraic(&state.continuous(), state.f_latched, v_t, params)
}

pub fn rhs(state: &ConverterState, v_t: f64, params: &ConverterParams) -> Result<[f64; N_STATES]> {
    eval_rhs(&state.continuous(), state.f_latched, v_t, params)
}

/// Jacobian of [`rhs`] with respect to the continuous states, row-major.
pub fn rhs_jacobian(
    state: &ConverterState,
    v_t: f64,
    params: &ConverterParams,
) -> Result<[[f64; N_STATES]; N_STATES]> {
    let c = state.continuous();
    let x: [Dual<N_STATES>; N_STATES] = std::array::from_fn(|i| Dual::var(c[i], i));
    let r = eval_rhs(&x, state.f_latched, v_t, params)?;
    Ok(std::array::from_fn(|i| r[i].d))
}

/// Sampled response to one disturbance.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ConverterState>,
    pub algebraic: Vec<AlgebraicVars>,
    /// External voltage at each sample.
    pub v_t: Vec<f64>,
    pub disturbance: DisturbanceSpec,
    pub dt: f64,
    /// Minimum of `V_meas` over all step ends, including the split step at
    /// the clearing instant which is not a sample.
    pub min_v_meas: f64,
}

pub const TRAJECTORY_HEADER: &str = "t,theta_pll,i_d,i_q,V_meas,f_latched,v_d,v_q,omega_pll,v_gd,v_gq,P_VSC,Q_VSC,V_PCC,P_total,Q_total,V_t";

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &ConverterState {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn last_algebraic(&self) -> &AlgebraicVars {
        self.algebraic
            .last()
            .expect("trajectory has at least one sample")
    }

    /// Row values in [`TRAJECTORY_HEADER`] order.
    pub fn row(&self, k: usize) -> [f64; 17] {
        let s = &self.states[k];
        let a = &self.algebraic[k];
        [
            self.times[k],
            s.theta_pll,
            s.i_d,
            s.i_q,
            s.v_meas,
            s.f_latched,
            a.v_d,
            a.v_q,
            a.omega_pll,
            a.v_gd,
            a.v_gq,
            a.p_vsc,
            a.q_vsc,
            a.v_pcc,
            a.p_total,
            a.q_total,
            self.v_t[k],
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 17 * 20);
        out.push_str(TRAJECTORY_HEADER);
        out.push('\n');
        for k in 0..self.len() {
            let row = self.row(k);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn rk4_step(
    x: [f64; N_STATES],
    f_latched: f64,
    v_t: f64,
    h: f64,
    p: &ConverterParams,
) -> Result<[f64; N_STATES]> {
    let add = |a: &[f64; N_STATES], k: &[f64; N_STATES], s: f64| -> [f64; N_STATES] {
        std::array::from_fn(|i| a[i] + s * k[i])
    };
    let k1 = eval_rhs(&x, f_latched, v_t, p)?;
    let k2 = eval_rhs(&add(&x, &k1, 0.5 * h), f_latched, v_t, p)?;
    let k3 = eval_rhs(&add(&x, &k2, 0.5 * h), f_latched, v_t, p)?;
    let k4 = eval_rhs(&add(&x, &k3, h), f_latched, v_t, p)?;
    Ok(std::array::from_fn(|i| {
        x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    }))
}

/// Fixed-step classical RK4 with the clearing instant forced onto a step
/// boundary. The LVRT ratchet is applied after every accepted (sub)step.
pub fn integrate(
    x0: &ConverterState,
    disturbance: &DisturbanceSpec,
    params: &ConverterParams,
    dt: f64,
    horizon: f64,
) -> Result<Trajectory> {
    params.validate()?;
    disturbance.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidInput(format!("dt = {dt} must be positive")));
    }
    if !(horizon >= disturbance.delta_t) {
        return Err(DynamicsError::InvalidInput(format!(
            "horizon {horizon} s is shorter than delta_T {} s",
            disturbance.delta_t
        )));
    }
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(DynamicsError::InvalidInput(format!(
            "dt = {dt} does not divide horizon = {horizon}"
        )));
    }
    let steps = steps as usize;

    let mut state = *x0;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut algebraic = Vec::with_capacity(steps + 1);
    let mut v_ts = Vec::with_capacity(steps + 1);
    let mut min_v_meas = state.v_meas;

    let mut record = |t: f64, s: &ConverterState| -> Result<()> {
        let v_t = disturbance.v_t(t);
        algebraic.push(algebraic_eval(s, v_t, params)?);
        times.push(t);
        states.push(*s);
        v_ts.push(v_t);
        Ok(())
    };
    record(0.0, &state)?;

    let switch = disturbance.delta_t;
    for k in 0..steps {
        let a = k as f64 * dt;
        let b = (k + 1) as f64 * dt;
        let split = switch > a + 1e-12 && switch < b - 1e-12;
        let bounds: &[(f64, f64)] = if split {
            &[(a, switch), (switch, b)]
        } else {
            &[(a, b)]
        };
        for &(lo, hi) in bounds {
            let v_t = disturbance.v_t(0.5 * (lo + hi));
            let x = rk4_step(state.continuous(), state.f_latched, v_t, hi - lo, params)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DynamicsError::Diverged { t: hi });
            }
            state = state.with_continuous(x);
            if state.v_meas >= V_MEAS_FLOOR {
                state.f_latched = state.f_latched.min(lvrt_factor(state.v_meas, params));
            }
            min_v_meas = min_v_meas.min(state.v_meas);
        }
        record(b, &state)?;
    }

    Ok(Trajectory {
        times,
        states,
        algebraic,
        v_t: v_ts,
        disturbance: *disturbance,
        dt,
        min_v_meas,
    })
}

fn solve4(j: &[[f64; N_STATES]; N_STATES], r: &[f64; N_STATES]) -> Option<[f64; N_STATES]> {
    let m = nalgebra::Matrix4::from_fn(|i, k| j[i][k]);
    let b = nalgebra::Vector4::from_column_slice(r);
    m.lu().solve(&b).map(|x| [x[0], x[1], x[2], x[3]])
}

/// Pre-fault operating point for terminal voltage `v_t` (damped Newton on
/// `rhs = 0` with `f_latched = 1`).
pub fn find_equilibrium(params: &ConverterParams, v_t: f64) -> Result<ConverterState> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-10;
    params.validate()?;
    if !(v_t > params.v_int) {
        return Err(DynamicsError::InvalidInput(format!(
            "equilibrium requires V_t = {v_t} above V_int = {}",
            params.v_int
        )));
    }
    let mut state = ConverterState {
        theta_pll: 0.0,
        i_d: params.p_ext / v_t,
        i_q: -params.q_ext / v_t + reactive_injection(v_t, params),
        v_meas: v_t,
        f_latched: 1.0,
    };
    let norm = |r: &[f64; N_STATES]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut r = rhs(&state, v_t, params)?;
    let mut res = norm(&r);
    for _ in 0..MAX_ITER {
        if res < TOL {
            return Ok(state);
        }
        let jac = rhs_jacobian(&state, v_t, params)?;
        let Some(step) = solve4(&jac, &r) else {
            break;
        };
        let x = state.continuous();
        let mut lambda = 1.0;
        loop {
            let trial =
                state.with_continuous(std::array::from_fn(|i| x[i] - lambda * step[i]));
            if let Ok(rt) = rhs(&trial, v_t, params) {
                let nt = norm(&rt);
                if nt < res || lambda < 1e-6 {
                    state = trial;
                    r = rt;
                    res = nt;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-9 {
                break;
            }
        }
    }
    if res < TOL {
        return Ok(state);
    }
    Err(DynamicsError::EquilibriumNotFound {
        iterations: MAX_ITER,
        residual: res,
    })
}

/// Predicate deciding whether a disturbance is critical.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Criterion {
    /// `min_t V_meas(t) < V_int`.
    LvrtEntry,
    /// `P_total(horizon) < mu * P_ext`.
    PowerFraction(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CriticalOutcome {
    Critical(f64),
    /// Criterion never triggers inside the bracket.
    NeverCritical,
    /// Criterion already triggers at the lower end of the bracket.
    AlwaysCritical,
}

impl CriticalOutcome {
    pub fn duration(&self) -> Option<f64> {
        match self {
            CriticalOutcome::Critical(t) => Some(*t),
            _ => None,
        }
    }
}

/// Settings shared by all ground-truth simulations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub dt: f64,
    pub horizon: f64,
    pub v_set: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 1.0,
            v_set: 1.0,
        }
    }
}

/// Simulate one disturbance starting from the pre-fault equilibrium.
pub fn simulate(
    params: &ConverterParams,
    delta_v: f64,
    delta_t: f64,
    sim: &SimSettings,
) -> Result<Trajectory> {
    let x0 = find_equilibrium(params, sim.v_set)?;
    let dist = DisturbanceSpec {
        delta_v,
        delta_t,
        v_set: sim.v_set,
    };
    integrate(&x0, &dist, params, sim.dt, sim.horizon)
}

fn is_critical(
    x0: &ConverterState,
    delta_v: f64,
    delta_t: f64,
    criterion: Criterion,
    params: &ConverterParams,
    sim: &SimSettings,
) -> Result<bool> {
    let dist = DisturbanceSpec {
        delta_v,
        delta_t,
        v_set: sim.v_set,
    };
    let traj = integrate(x0, &dist, params, sim.dt, sim.horizon)?;
    Ok(match criterion {
        Criterion::LvrtEntry => traj.min_v_meas < params.v_int,
        Criterion::PowerFraction(mu) => traj.last_algebraic().p_total < mu * params.p_ext,
    })
}

/// Longest disturbance duration before `criterion` triggers, by bisection.
pub fn critical_duration(
    delta_v: f64,
    criterion: Criterion,
    params: &ConverterParams,
    sim: &SimSettings,
    bracket: (f64, f64),
) -> Result<CriticalOutcome> {
    let (mut lo, mut hi) = bracket;
    if !(lo >= 0.0 && hi > lo && hi <= sim.horizon) {
        return Err(DynamicsError::InvalidInput(format!(
            "bracket [{lo}, {hi}] must satisfy 0 <= lo < hi <= horizon"
        )));
    }
    let x0 = find_equilibrium(params, sim.v_set)?;
    let at_lo = is_critical(&x0, delta_v, lo, criterion, params, sim)?;
    let at_hi = is_critical(&x0, delta_v, hi, criterion, params, sim)?;
    match (at_lo, at_hi) {
        (false, false) => return Ok(CriticalOutcome::NeverCritical),
        (true, true) => return Ok(CriticalOutcome::AlwaysCritical),
        (true, false) => return Err(DynamicsError::NotMonotone { lo, hi }),
        (false, true) => {}
    }
    while hi - lo >= BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if is_critical(&x0, delta_v, mid, criterion, params, sim)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CriticalOutcome::Critical(0.5 * (lo + hi)))
}
