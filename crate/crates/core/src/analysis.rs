//! Boundary queries on an encoded network: the largest disturbance duration
//! that keeps the measured voltage above the LVRT threshold (or keeps enough
//! active power delivered after one second), swept over voltage drops and
//! compared against simulated ground truth.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    critical_duration, simulate, ConverterParams, Criterion, CriticalOutcome, DynamicsError,
    SimSettings,
};
use crate::layout::{out, InputBox};
use crate::milp::{
    branch_and_bound_with, encode, BbOptions, BoundsSource, InputDomain, LpStatus, MilpError,
    MilpProblem, NeuronBounds, ObjectiveSense, Sense,
};
use crate::pinn::MlpModel;

/// Header of a boundary curve CSV.
pub const CURVE_HEADER: &str = "delta_V,delta_T,status,objective,solve_ms,bounds_source,param";

/// Default power fractions of the power-delivery sweep.
pub const DEFAULT_MU_VALUES: [f64; 8] = [0.25, 0.5, 0.55, 0.6, 0.75, 0.9, 0.95, 0.98];

/// Tolerance for deciding that the optimum sits on the box maximum.
const BOX_EDGE_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("curves share no disturbance magnitude")]
    EmptyOverlap,
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Milp(#[from] MilpError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("curve metadata: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QueryKind {
    /// Keep `V_meas >= V_int + epsilon` at the end of the fault.
    Lvrt { epsilon: f64 },
    /// Keep `P_total >= mu * P_ext` at one second.
    Power { mu: f64 },
}

impl QueryKind {
    pub fn param(&self) -> f64 {
        match self {
            QueryKind::Lvrt { epsilon } => *epsilon,
            QueryKind::Power { mu } => *mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            QueryKind::Lvrt { epsilon } if !(epsilon >= 0.0 && epsilon.is_finite()) => Err(
                AnalysisError::InvalidQuery(format!("epsilon must be >= 0, got {epsilon}")),
            ),
            QueryKind::Power { mu } if !(0.0..=1.0).contains(&mu) => Err(
                AnalysisError::InvalidQuery(format!("mu must lie in [0, 1], got {mu}")),
            ),
            _ => Ok(()),
        }
    }

    /// The simulator predicate matching this query.
    pub fn criterion(&self) -> Criterion {
        match self {
            QueryKind::Lvrt { .. } => Criterion::LvrtEntry,
            QueryKind::Power { mu } => Criterion::PowerFraction(*mu),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointStatus {
    Optimal,
    NeverCritical,
    Infeasible,
    /// The solve itself failed; the message is kept on the point.
    Failed,
}

impl PointStatus {
    /// Optimal and never-critical points carry a duration.
    pub fn is_feasible(&self) -> bool {
        matches!(self, PointStatus::Optimal | PointStatus::NeverCritical)
    }
}

impl fmt::Display for PointStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointStatus::Optimal => "optimal",
            PointStatus::NeverCritical => "never-critical",
            PointStatus::Infeasible => "infeasible",
            PointStatus::Failed => "failed",
        })
    }
}

impl FromStr for PointStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "optimal" => Ok(PointStatus::Optimal),
            "never-critical" => Ok(PointStatus::NeverCritical),
            "infeasible" => Ok(PointStatus::Infeasible),
            "failed" => Ok(PointStatus::Failed),
            other => Err(format!("unknown point status `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryQuery {
    pub kind: QueryKind,
    pub delta_v: f64,
    pub input_box: InputBox,
    pub bounds_source: BoundsSource,
}

impl BoundaryQuery {
    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        let (lo, hi) = (self.input_box.lower[1], self.input_box.upper[1]);
        if !(self.delta_v >= lo && self.delta_v <= hi) {
            return Err(AnalysisError::InvalidQuery(format!(
                "delta_V = {} lies outside the training box [{lo}, {hi}]",
                self.delta_v
            )));
        }
        Ok(())
    }
}

/// Outcome of one boundary MILP.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySolution {
    pub status: PointStatus,
    pub delta_t: Option<f64>,
    /// Network inputs `(t, delta_V, delta_T)` at the optimum.
    pub inputs: Vec<f64>,
    /// Network outputs at the optimum, as MILP variables.
    pub outputs: Vec<f64>,
    pub nodes: usize,
    pub solve_ms: f64,
}

/// A network encoded once over its input box; queries clone the base MILP
/// and add their own rows.
#[derive(Clone, Debug)]
pub struct BoundaryProblem {
    pub model: MlpModel,
    pub input_box: InputBox,
    pub bounds: NeuronBounds,
    pub bounds_source: BoundsSource,
    pub params: ConverterParams,
    pub model_hash: String,
    pub options: BbOptions,
    base: MilpProblem,
}

impl BoundaryProblem {
    pub fn new(
        model: &MlpModel,
        input_box: InputBox,
        bounds: NeuronBounds,
        bounds_source: BoundsSource,
        params: &ConverterParams,
    ) -> Result<Self> {
        model.validate_pinn().map_err(MilpError::from)?;
        if !input_box.is_valid() {
            return Err(AnalysisError::InvalidQuery("input box is not a valid box".into()));
        }
        let base = encode(model, &InputDomain::from(&input_box), &bounds)?;
        Ok(Self {
            model: model.clone(),
            input_box,
            bounds,
            bounds_source,
            params: params.clone(),
            model_hash: model.hash(),
            options: BbOptions::default(),
            base,
        })
    }

    pub fn base(&self) -> &MilpProblem {
        &self.base
    }

    pub fn query(&self, kind: QueryKind, delta_v: f64) -> BoundaryQuery {
        BoundaryQuery {
            kind,
            delta_v,
            input_box: self.input_box,
            bounds_source: self.bounds_source,
        }
    }

    /// The MILP of one query, ready to solve.
    pub fn formulate(&self, kind: QueryKind, delta_v: f64) -> Result<MilpProblem> {
        self.query(kind, delta_v).validate()?;
        let mut p = self.base.clone();
        let [t, dv, dt] = [p.roles.inputs[0], p.roles.inputs[1], p.roles.inputs[2]];
        p.add_constraint("fix_delta_V", vec![(dv, 1.0)], Sense::Eq, delta_v);
        match kind {
            QueryKind::Lvrt { epsilon } => {
                // the voltage is lowest right before the fault clears
                p.add_constraint("t_at_clearing", vec![(t, 1.0), (dt, -1.0)], Sense::Eq, 0.0);
                let v = p.roles.outputs[out::V_MEAS];
                p.add_constraint("lvrt_margin", vec![(v, 1.0)], Sense::Ge, self.params.v_int + epsilon);
            }
            QueryKind::Power { mu } => {
                let horizon = self.input_box.upper[0];
                p.add_constraint("t_final", vec![(t, 1.0)], Sense::Eq, horizon);
                let pt = p.roles.outputs[out::P_TOTAL];
                p.add_constraint("power_delivery", vec![(pt, 1.0)], Sense::Ge, mu * self.params.p_ext);
            }
        }
        p.set_objective(ObjectiveSense::Maximize, vec![(dt, 1.0)]);
        Ok(p)
    }

    pub fn solve(&self, kind: QueryKind, delta_v: f64) -> Result<BoundarySolution> {
        let p = self.formulate(kind, delta_v)?;
        let start = Instant::now();
        let s = branch_and_bound_with(&p, &self.options)?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let pick = |idx: &[usize]| idx.iter().map(|&j| s.values[j]).collect::<Vec<f64>>();
        Ok(match s.status {
            LpStatus::Optimal => {
                let dt_max = self.input_box.upper[2];
                let status = if s.objective >= dt_max - BOX_EDGE_TOL {
                    PointStatus::NeverCritical
                } else {
                    PointStatus::Optimal
                };
                BoundarySolution {
                    status,
                    delta_t: Some(s.objective),
                    inputs: pick(&p.roles.inputs),
                    outputs: pick(&p.roles.outputs),
                    nodes: s.nodes,
                    solve_ms,
                }
            }
            // every variable is boxed, so unboundedness cannot be genuine
            LpStatus::Infeasible | LpStatus::Unbounded => BoundarySolution {
                status: PointStatus::Infeasible,
                delta_t: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                nodes: s.nodes,
                solve_ms,
            },
        })
    }

    pub fn solve_lvrt(&self, delta_v: f64, epsilon: f64) -> Result<BoundarySolution> {
        self.solve(QueryKind::Lvrt { epsilon }, delta_v)
    }

    pub fn solve_power(&self, delta_v: f64, mu: f64) -> Result<BoundarySolution> {
        self.solve(QueryKind::Power { mu }, delta_v)
    }

    /// One MILP per grid value. Failures are recorded on their point and the
    /// sweep carries on.
    pub fn sweep(&self, kind: QueryKind, grid: &[f64]) -> Result<BoundaryCurve> {
        kind.validate()?;
        check_grid(grid)?;
        let points: Vec<BoundaryPoint> = grid
            .par_iter()
            .map(|&dv| match self.solve(kind, dv) {
                Ok(s) => BoundaryPoint {
                    delta_v: dv,
                    delta_t: s.delta_t,
                    status: s.status,
                    objective: s.delta_t,
                    solve_ms: s.solve_ms,
                    message: None,
                },
                Err(e) => {
                    log::warn!("boundary solve failed at delta_V = {dv}: {e}");
                    BoundaryPoint {
                        delta_v: dv,
                        delta_t: None,
                        status: PointStatus::Failed,
                        objective: None,
                        solve_ms: 0.0,
                        message: Some(e.to_string()),
                    }
                }
            })
            .collect();
        let total: f64 = points.iter().map(|p| p.solve_ms).sum();
        Ok(BoundaryCurve {
            points,
            meta: CurveMeta {
                source: CurveSource::Milp,
                model_hash: Some(self.model_hash.clone()),
                query: kind,
                bounds_source: Some(self.bounds_source),
                input_box: Some(self.input_box),
                total_solve_ms: total,
                config: None,
            },
        })
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(AnalysisError::InvalidQuery("empty delta_V grid".into()));
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::InvalidQuery(
            "delta_V grid must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `start, start + step, ...` up to `stop` inclusive, rounded to suppress
/// accumulated drift.
pub fn delta_v_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(AnalysisError::InvalidQuery(format!(
            "grid [{start}, {stop}] with step {step} is empty"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveSource {
    Milp,
    Simulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub source: CurveSource,
    pub model_hash: Option<String>,
    pub query: QueryKind,
    pub bounds_source: Option<BoundsSource>,
    pub input_box: Option<InputBox>,
    pub total_solve_ms: f64,
    /// Snapshot of the run configuration that produced the curve.
    #[serde(default)]
    pub config: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub delta_v: f64,
    pub delta_t: Option<f64>,
    pub status: PointStatus,
    pub objective: Option<f64>,
    pub solve_ms: f64,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCurve {
    pub points: Vec<BoundaryPoint>,
    pub meta: CurveMeta,
}

impl BoundaryCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn delta_t_at(&self, delta_v: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| (p.delta_v - delta_v).abs() < 1e-9)
            .and_then(|p| p.delta_t)
    }

    /// True when the durations of consecutive optimal points never increase.
    pub fn is_non_increasing(&self, tol: f64) -> bool {
        let opt: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.status == PointStatus::Optimal)
            .filter_map(|p| p.delta_t)
            .collect();
        opt.windows(2).all(|w| w[1] <= w[0] + tol)
    }

    pub fn to_csv(&self) -> String {
        self.to_csv_with(true)
    }

    /// CSV text; with `timings` off the `solve_ms` column is written as 0 so
    /// repeated runs give byte-identical files.
    pub fn to_csv_with(&self, timings: bool) -> String {
        let source = match self.meta.bounds_source {
            Some(b) => b.to_string(),
            None => "none".to_string(),
        };
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.delta_v,
                opt(p.delta_t),
                p.status,
                opt(p.objective),
                if timings { p.solve_ms } else { 0.0 },
                source,
                self.meta.query.param()
            ));
        }
        s
    }

    pub fn meta_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)?)
    }
}

/// Sidecar path `<csv>.meta.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_curve(curve: &BoundaryCurve, csv: &Path) -> Result<()> {
    fs::write(csv, curve.to_csv())?;
    fs::write(sidecar_path(csv), curve.meta_json()?)?;
    Ok(())
}

/// Read a curve CSV and its sidecar. Per-point failure messages are not part
/// of the CSV and come back empty.
pub fn read_curve(csv: &Path) -> Result<BoundaryCurve> {
    let meta: CurveMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(csv))?)?;
    let text = fs::read_to_string(csv)?;
    let err = |line: usize, msg: String| AnalysisError::Parse {
        file: csv.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => return Err(err(1, format!("expected header `{CURVE_HEADER}`"))),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err(i + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| err(i + 1, format!("bad number `{s}`: {e}")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        points.push(BoundaryPoint {
            delta_v: num(f[0])?,
            delta_t: opt(f[1])?,
            status: f[2].trim().parse().map_err(|e| err(i + 1, e))?,
            objective: opt(f[3])?,
            solve_ms: num(f[4])?,
            message: None,
        });
    }
    Ok(BoundaryCurve { points, meta })
}

/// Simulated boundary for each grid value, bisecting inside `bracket`.
pub fn ground_truth_curve(
    grid: &[f64],
    kind: QueryKind,
    params: &ConverterParams,
    sim: &SimSettings,
    bracket: (f64, f64),
) -> Result<BoundaryCurve> {
    kind.validate()?;
    check_grid(grid)?;
    let start = Instant::now();
    let outcomes: Vec<(f64, CriticalOutcome, f64)> = grid
        .par_iter()
        .map(|&dv| {
            let t0 = Instant::now();
            let o = critical_duration(dv, kind.criterion(), params, sim, bracket)?;
            Ok((dv, o, t0.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_>>()?;
    let points = outcomes
        .into_iter()
        .map(|(dv, o, ms)| {
            let (status, delta_t) = match o {
                CriticalOutcome::Critical(t) => (PointStatus::Optimal, Some(t)),
                CriticalOutcome::NeverCritical => (PointStatus::NeverCritical, Some(bracket.1)),
                CriticalOutcome::AlwaysCritical => (PointStatus::Infeasible, None),
            };
            BoundaryPoint {
                delta_v: dv,
                delta_t,
                status,
                objective: None,
                solve_ms: ms,
                message: None,
            }
        })
        .collect();
    Ok(BoundaryCurve {
        points,
        meta: CurveMeta {
            source: CurveSource::Simulation,
            model_hash: None,
            query: kind,
            bounds_source: None,
            input_box: None,
            total_solve_ms: start.elapsed().as_secs_f64() * 1e3,
            config: None,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparedPoint {
    pub delta_v: f64,
    pub predicted: Option<f64>,
    pub reference: Option<f64>,
    pub predicted_status: PointStatus,
    pub reference_status: PointStatus,
    /// `predicted - reference` when both are optimal.
    pub difference: Option<f64>,
    /// The prediction allows a longer disturbance than the reference.
    pub non_conservative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveComparison {
    pub points: Vec<ComparedPoint>,
    /// Over points where both curves are optimal; `None` if there are none.
    pub max_abs: Option<f64>,
    pub mean_abs: Option<f64>,
    pub n_non_conservative: usize,
}

/// Reference value at `x`, interpolating linearly between neighbouring
/// points when the grids differ.
fn reference_at(b: &BoundaryCurve, x: f64) -> Option<(PointStatus, Option<f64>)> {
    let pts = &b.points;
    if let Some(p) = pts.iter().find(|p| (p.delta_v - x).abs() < 1e-9) {
        return Some((p.status, p.delta_t));
    }
    let k = pts.windows(2).position(|w| w[0].delta_v < x && x < w[1].delta_v)?;
    let (l, r) = (&pts[k], &pts[k + 1]);
    match (l.status, r.status, l.delta_t, r.delta_t) {
        (PointStatus::Optimal, PointStatus::Optimal, Some(a), Some(c)) => {
            let w = (x - l.delta_v) / (r.delta_v - l.delta_v);
            Some((PointStatus::Optimal, Some(a + w * (c - a))))
        }
        (sl, sr, _, _) if sl == sr && sl != PointStatus::Optimal => Some((sl, l.delta_t)),
        _ => None,
    }
}

/// Compare a predicted curve `a` against a reference `b`.
pub fn compare_curves(a: &BoundaryCurve, b: &BoundaryCurve) -> Result<CurveComparison> {
    let mut points = Vec::new();
    for p in &a.points {
        let Some((rs, rv)) = reference_at(b, p.delta_v) else {
            continue;
        };
        let both_opt = p.status == PointStatus::Optimal && rs == PointStatus::Optimal;
        let difference = match (both_opt, p.delta_t, rv) {
            (true, Some(x), Some(y)) => Some(x - y),
            _ => None,
        };
        let non_conservative = p.status.is_feasible()
            && match (rs, p.delta_t, rv) {
                (PointStatus::Infeasible, _, _) => true,
                (s, Some(x), Some(y)) if s.is_feasible() => x > y,
                _ => false,
            };
        points.push(ComparedPoint {
            delta_v: p.delta_v,
            predicted: p.delta_t,
            reference: rv,
            predicted_status: p.status,
            reference_status: rs,
            difference,
            non_conservative,
        });
    }
    if points.is_empty() {
        return Err(AnalysisError::EmptyOverlap);
    }
    let diffs: Vec<f64> = points.iter().filter_map(|p| p.difference).map(f64::abs).collect();
    let (max_abs, mean_abs) = if diffs.is_empty() {
        (None, None)
    } else {
        (
            Some(diffs.iter().copied().fold(0.0, f64::max)),
            Some(diffs.iter().sum::<f64>() / diffs.len() as f64),
        )
    };
    let n_non_conservative = points.iter().filter(|p| p.non_conservative).count();
    Ok(CurveComparison {
        points,
        max_abs,
        mean_abs,
        n_non_conservative,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub delta_v: f64,
    pub delta_t: f64,
    /// Whether the true system violates the query's criterion.
    pub violated: bool,
}

/// Re-simulate the true system slightly inside every optimal point of a
/// predicted curve, at `delta_T* - backoff`.
pub fn spot_check(
    curve: &BoundaryCurve,
    params: &ConverterParams,
    sim: &SimSettings,
    backoff: f64,
) -> Result<Vec<SpotCheck>> {
    curve
        .points
        .iter()
        .filter(|p| p.status == PointStatus::Optimal)
        .filter_map(|p| p.delta_t.map(|t| (p.delta_v, t - backoff)))
        .filter(|&(_, t)| t > 0.0)
        .map(|(dv, dt)| {
            let traj = simulate(params, dv, dt, sim)?;
            let violated = match curve.meta.query.criterion() {
                Criterion::LvrtEntry => traj.min_v_meas < params.v_int,
                Criterion::PowerFraction(mu) => traj.last_algebraic().p_total < mu * params.p_ext,
            };
            Ok(SpotCheck {
                delta_v: dv,
                delta_t: dt,
                violated,
            })
        })
        .collect()
}
