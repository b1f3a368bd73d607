//! Training data: simulated trajectories over a disturbance grid plus
//! Latin-hypercube collocation points, and their on-disk form.
//!
//! A set is stored as a directory holding `manifest.toml`, `labeled.csv` and
//! `collocation.csv`. Floats are written in shortest round-trip form, so a
//! write/read cycle reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    self, find_equilibrium, integrate, lvrt_factor, ConverterParams, DisturbanceSpec,
    DynamicsError, TRAJECTORY_HEADER,
};
use crate::layout::{InputBox, N_OUTPUTS};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LABELED_FILE: &str = "labeled.csv";
pub const COLLOCATION_FILE: &str = "collocation.csv";
pub const COLLOCATION_HEADER: &str = "t,delta_V,delta_T,V_t,f_latched";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("simulation failed at delta_V = {delta_v}, delta_T = {delta_t}: {source}")]
    Simulation {
        delta_v: f64,
        delta_t: f64,
        #[source]
        source: DynamicsError,
    },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("manifest inconsistent with data: {0}")]
    Consistency(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Disturbance grid of simulated trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub delta_t_values: Vec<f64>,
    pub delta_v_values: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl GridSpec {
    /// The 4 x 10 grid with 1 ms steps up to 1 s.
    pub fn standard() -> Self {
        Self {
            delta_t_values: vec![0.1, 0.15, 0.2, 0.25],
            delta_v_values: vec![
                0.2, 0.267, 0.333, 0.4, 0.467, 0.533, 0.6, 0.667, 0.733, 0.8,
            ],
            dt: 1e-3,
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[f64]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.delta_t_values) || !increasing(&self.delta_v_values) {
            return Err(DatasetError::InvalidGrid(
                "value arrays must be non-empty and strictly increasing".into(),
            ));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(DatasetError::InvalidGrid("dt and horizon must be positive".into()));
        }
        Ok(())
    }

    /// `[0, horizon] x [dV_min, dV_max] x [dT_min, dT_max]`.
    pub fn input_box(&self) -> InputBox {
        let first = |v: &[f64]| v[0];
        let last = |v: &[f64]| v[v.len() - 1];
        InputBox::new(
            (0.0, self.horizon),
            (first(&self.delta_v_values), last(&self.delta_v_values)),
            (first(&self.delta_t_values), last(&self.delta_t_values)),
        )
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Samples kept per trajectory under `stride`.
    pub fn samples_per_trajectory(&self, stride: usize) -> usize {
        self.steps() / stride + 1
    }

    pub fn n_trajectories(&self) -> usize {
        self.delta_t_values.len() * self.delta_v_values.len()
    }

    /// `(delta_V, delta_T)` pairs in generation order (delta_T outer).
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.delta_t_values
            .iter()
            .flat_map(|&dt| self.delta_v_values.iter().map(move |&dv| (dv, dt)))
            .collect()
    }
}

/// One simulated sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    /// `(t, delta_V, delta_T)`.
    pub input: [f64; 3],
    /// Outputs in [`crate::layout::OUTPUT_NAMES`] order.
    pub outputs: [f64; N_OUTPUTS],
    pub f_latched: f64,
    pub v_t: f64,
}

/// Input at which only physics residuals are evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollocationPoint {
    pub input: [f64; 3],
    pub v_t: f64,
    /// LVRT ratchet value implied by the disturbance up to `t`.
    pub f_latched: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub grid: GridSpec,
    pub stride: usize,
    pub seed: u64,
    pub v_set: f64,
    pub params: ConverterParams,
    pub labeled: Vec<LabeledPoint>,
    pub collocation: Vec<CollocationPoint>,
}

impl TrainingSet {
    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_collocation(&self) -> usize {
        self.collocation.len()
    }

    pub fn input_box(&self) -> InputBox {
        self.grid.input_box()
    }
}

fn labeled_from_row(row: &[f64; 17], dist: &DisturbanceSpec) -> LabeledPoint {
    // row follows TRAJECTORY_HEADER
    let outputs = [
        row[1], row[2], row[3], row[4], // theta, i_d, i_q, V_meas
        row[6], row[7], row[8], // v_d, v_q, omega
        row[11], row[13], row[12], // P_VSC, V_PCC, Q_VSC
        row[9], row[10], // v_gd, v_gq
        row[14], row[15], // P_total, Q_total
    ];
    LabeledPoint {
        input: [row[0], dist.delta_v, dist.delta_t],
        outputs,
        f_latched: row[5],
        v_t: row[16],
    }
}

/// Simulate every grid trajectory from the set-point equilibrium and keep
/// every `stride`-th sample.
pub fn generate_labeled(
    grid: &GridSpec,
    params: &ConverterParams,
    v_set: f64,
    stride: usize,
) -> Result<Vec<LabeledPoint>> {
    grid.validate()?;
    if stride == 0 {
        return Err(DatasetError::InvalidGrid("stride must be at least 1".into()));
    }
    let x0 = find_equilibrium(params, v_set)?;
    let per_traj: Vec<Vec<LabeledPoint>> = grid
        .pairs()
        .par_iter()
        .map(|&(delta_v, delta_t)| {
            let dist = DisturbanceSpec {
                delta_v,
                delta_t,
                v_set,
            };
            let traj = integrate(&x0, &dist, params, grid.dt, grid.horizon).map_err(|source| {
                DatasetError::Simulation {
                    delta_v,
                    delta_t,
                    source,
                }
            })?;
            Ok((0..traj.len())
                .step_by(stride)
                .map(|k| labeled_from_row(&traj.row(k), &dist))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_traj.into_iter().flatten().collect())
}

/// Latin-hypercube sample of `n_c` points in `bx`, each carrying the external
/// voltage and the latched LVRT factor of its disturbance.
///
/// The measurement filter is driven by `|v_dq| = V_t`, so the voltage nadir up
/// to `t` is the closed-form filter response and the latched factor follows
/// without simulation.
pub fn sample_collocation(
    bx: &InputBox,
    n_c: usize,
    seed: u64,
    params: &ConverterParams,
    v_set: f64,
) -> Vec<CollocationPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axes = [vec![0.0; n_c], vec![0.0; n_c], vec![0.0; n_c]];
    for (axis, values) in axes.iter_mut().enumerate() {
        let mut strata: Vec<usize> = (0..n_c).collect();
        strata.shuffle(&mut rng);
        for (v, s) in values.iter_mut().zip(strata) {
            let u: f64 = rng.gen();
            *v = bx.lower[axis] + (s as f64 + u) / n_c as f64 * bx.width(axis);
        }
    }
    (0..n_c)
        .map(|j| {
            let input = [axes[0][j], axes[1][j], axes[2][j]];
            collocation_point(input, params, v_set)
        })
        .collect()
}

pub fn collocation_point(input: [f64; 3], params: &ConverterParams, v_set: f64) -> CollocationPoint {
    let [t, delta_v, delta_t] = input;
    let dist = DisturbanceSpec {
        delta_v,
        delta_t,
        v_set,
    };
    let nadir = v_set - delta_v * (1.0 - (-t.min(delta_t).max(0.0) / params.t_m).exp());
    let f_latched = lvrt_factor(nadir.max(dynamics::V_MEAS_FLOOR), params).min(1.0);
    CollocationPoint {
        input,
        v_t: dist.v_t(t),
        f_latched,
    }
}

/// Build a complete set: labeled trajectories and `n_c` collocation points.
pub fn generate_training_set(
    grid: &GridSpec,
    params: &ConverterParams,
    stride: usize,
    n_c: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let v_set = 1.0;
    let labeled = generate_labeled(grid, params, v_set, stride)?;
    let collocation = sample_collocation(&grid.input_box(), n_c, seed, params, v_set);
    Ok(TrainingSet {
        grid: grid.clone(),
        stride,
        seed,
        v_set,
        params: params.clone(),
        labeled,
        collocation,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    seed: u64,
    stride: usize,
    v_set: f64,
    n_labeled: usize,
    n_collocation: usize,
    n_trajectories: usize,
    grid: GridSpec,
    params: ConverterParams,
}

fn push_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v}").unwrap();
    }
    out.push('\n');
}

/// Write `set` into directory `dir` (created if missing).
pub fn write_set(set: &TrainingSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed: set.seed,
        stride: set.stride,
        v_set: set.v_set,
        n_labeled: set.labeled.len(),
        n_collocation: set.collocation.len(),
        n_trajectories: set.grid.n_trajectories(),
        grid: set.grid.clone(),
        params: set.params.clone(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| DatasetError::Consistency(format!("manifest encoding: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;

    let mut out = String::new();
    writeln!(out, "delta_V,delta_T,{TRAJECTORY_HEADER}").unwrap();
    for p in &set.labeled {
        let o = &p.outputs;
        push_row(
            &mut out,
            &[
                p.input[1], p.input[2], p.input[0], o[0], o[1], o[2], o[3], p.f_latched, o[4],
                o[5], o[6], o[10], o[11], o[7], o[9], o[8], o[12], o[13], p.v_t,
            ],
        );
    }
    fs::write(dir.join(LABELED_FILE), out)?;

    let mut out = String::new();
    writeln!(out, "{COLLOCATION_HEADER}").unwrap();
    for c in &set.collocation {
        push_row(
            &mut out,
            &[c.input[0], c.input[1], c.input[2], c.v_t, c.f_latched],
        );
    }
    fs::write(dir.join(COLLOCATION_FILE), out)?;
    Ok(())
}

fn parse_csv(file: &str, text: &str, header: &str) -> Result<Vec<Vec<f64>>> {
    let n_cols = header.split(',').count();
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        _ => {
            return Err(DatasetError::Parse {
                file: file.into(),
                line: 1,
                msg: format!("expected header `{header}`"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(DatasetError::Parse {
                file: file.into(),
                line: line_no,
                msg: format!("expected {n_cols} fields, found {}", fields.len()),
            });
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| DatasetError::Parse {
                    file: file.into(),
                    line: line_no,
                    msg: format!("bad number `{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Read a set written by [`write_set`], checking it against its manifest.
pub fn read_set(dir: &Path) -> Result<TrainingSet> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| DatasetError::Parse {
        file: MANIFEST_FILE.into(),
        line: e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0),
        msg: e.message().to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::Consistency(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    manifest
        .grid
        .validate()
        .map_err(|e| DatasetError::Consistency(e.to_string()))?;

    let header = format!("delta_V,delta_T,{TRAJECTORY_HEADER}");
    let rows = parse_csv(
        LABELED_FILE,
        &fs::read_to_string(dir.join(LABELED_FILE))?,
        &header,
    )?;
    let labeled: Vec<LabeledPoint> = rows
        .iter()
        .map(|r| LabeledPoint {
            input: [r[2], r[0], r[1]],
            outputs: [
                r[3], r[4], r[5], r[6], r[8], r[9], r[10], r[13], r[15], r[14], r[11], r[12],
                r[16], r[17],
            ],
            f_latched: r[7],
            v_t: r[18],
        })
        .collect();
    let rows = parse_csv(
        COLLOCATION_FILE,
        &fs::read_to_string(dir.join(COLLOCATION_FILE))?,
        COLLOCATION_HEADER,
    )?;
    let collocation: Vec<CollocationPoint> = rows
        .iter()
        .map(|r| CollocationPoint {
            input: [r[0], r[1], r[2]],
            v_t: r[3],
            f_latched: r[4],
        })
        .collect();

    let grid = &manifest.grid;
    if manifest.n_trajectories != grid.n_trajectories() {
        return Err(DatasetError::Consistency(format!(
            "manifest lists {} trajectories but the grid has {}",
            manifest.n_trajectories,
            grid.n_trajectories()
        )));
    }
    if manifest.stride == 0 {
        return Err(DatasetError::Consistency("stride is zero".into()));
    }
    let expected = grid.n_trajectories() * grid.samples_per_trajectory(manifest.stride);
    if labeled.len() != manifest.n_labeled || labeled.len() != expected {
        return Err(DatasetError::Consistency(format!(
            "{} labeled rows, manifest says {}, grid implies {expected}",
            labeled.len(),
            manifest.n_labeled
        )));
    }
    if collocation.len() != manifest.n_collocation {
        return Err(DatasetError::Consistency(format!(
            "{} collocation rows, manifest says {}",
            collocation.len(),
            manifest.n_collocation
        )));
    }
    let on_grid = |p: &LabeledPoint| {
        grid.delta_v_values.contains(&p.input[1]) && grid.delta_t_values.contains(&p.input[2])
    };
    if let Some(p) = labeled.iter().find(|p| !on_grid(p)) {
        return Err(DatasetError::Consistency(format!(
            "labeled point (delta_V = {}, delta_T = {}) is not on the manifest grid",
            p.input[1], p.input[2]
        )));
    }
    let bx = grid.input_box();
    if let Some(c) = collocation.iter().find(|c| !bx.contains(&c.input)) {
        return Err(DatasetError::Consistency(format!(
            "collocation point {:?} lies outside the grid box",
            c.input
        )));
    }
    Ok(TrainingSet {
        grid: manifest.grid,
        stride: manifest.stride,
        seed: manifest.seed,
        v_set: manifest.v_set,
        params: manifest.params,
        labeled,
        collocation,
    })
}
