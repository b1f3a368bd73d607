//! Pre-activation bounds: interval propagation and LP-relaxation tightening.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encode::{build, InputDomain};
use super::simplex::{solve_bounded, SimplexOptions, StandardForm};
use super::{LpStatus, MilpError, ObjectiveSense, Result};
use crate::pinn::MlpModel;

/// Slack added to LP optima so round-off never cuts off a reachable value.
const LP_PAD: f64 = 1e-7;

/// Pre-activation bounds `zhat_min`, `zhat_max` of every hidden neuron, in
/// network (scaled) units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundsSource {
    Interval,
    LpTightened,
}

impl BoundsSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundsSource::Interval => "interval",
            BoundsSource::LpTightened => "lp-tightened",
        }
    }
}

impl std::fmt::Display for BoundsSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BoundsSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "interval" => Ok(Self::Interval),
            "lp-tightened" | "lp" => Ok(Self::LpTightened),
            other => Err(format!("unknown bounds source `{other}`")),
        }
    }
}

impl NeuronBounds {
    pub fn n_layers(&self) -> usize {
        self.lower.len()
    }

    pub fn get(&self, layer: usize, neuron: usize) -> (f64, f64) {
        (self.lower[layer][neuron], self.upper[layer][neuron])
    }

    /// Sum of `zhat_max - zhat_min` over all neurons.
    pub fn total_width(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .flat_map(|(l, u)| l.iter().zip(u).map(|(a, b)| b - a))
            .sum()
    }

    /// Neurons whose sign is not fixed by the bounds.
    pub fn n_unstable(&self) -> usize {
        self.lower
            .iter()
            .zip(&self.upper)
            .flat_map(|(l, u)| l.iter().zip(u))
            .filter(|(a, b)| **a < 0.0 && **b > 0.0)
            .count()
    }

    /// True when every interval of `self` lies inside the matching one of
    /// `outer` (up to `tol`).
    pub fn nested_in(&self, outer: &NeuronBounds, tol: f64) -> bool {
        self.lower.len() == outer.lower.len()
            && (0..self.lower.len()).all(|k| {
                (0..self.lower[k].len()).all(|j| {
                    self.lower[k][j] >= outer.lower[k][j] - tol
                        && self.upper[k][j] <= outer.upper[k][j] + tol
                })
            })
    }

    /// True when every hidden pre-activation of `model` at `input` lies in
    /// the bounds (up to `tol`).
    pub fn contains_point(&self, model: &MlpModel, input: &[f64], tol: f64) -> bool {
        model
            .pre_activations(input)
            .iter()
            .enumerate()
            .all(|(k, layer)| {
                layer.iter().enumerate().all(|(j, v)| {
                    *v >= self.lower[k][j] - tol && *v <= self.upper[k][j] + tol
                })
            })
    }

    fn check_shape(&self, model: &MlpModel) -> Result<()> {
        let widths = model.hidden_widths();
        let ok = self.lower.len() == widths.len()
            && self.upper.len() == widths.len()
            && widths
                .iter()
                .enumerate()
                .all(|(k, w)| self.lower[k].len() == *w && self.upper[k].len() == *w);
        if ok {
            Ok(())
        } else {
            Err(MilpError::InvalidProblem(
                "bounds do not match the network's hidden layers".into(),
            ))
        }
    }
}

/// Interval image of `W z + b` for `z` in `[zl, zu]`.
fn affine_interval(
    layer: &crate::pinn::Layer,
    zl: &[f64],
    zu: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::with_capacity(layer.n_out);
    let mut hi = Vec::with_capacity(layer.n_out);
    for r in 0..layer.n_out {
        let (mut a, mut b) = (layer.biases[r], layer.biases[r]);
        for c in 0..layer.n_in {
            let w = layer.w(r, c);
            if w >= 0.0 {
                a += w * zl[c];
                b += w * zu[c];
            } else {
                a += w * zu[c];
                b += w * zl[c];
            }
        }
        lo.push(a);
        hi.push(b);
    }
    (lo, hi)
}

fn relu_interval(lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        lo.iter().map(|v| v.max(0.0)).collect(),
        hi.iter().map(|v| v.max(0.0)).collect(),
    )
}

/// Scaled-input interval of the domain.
pub(crate) fn scaled_input_interval(model: &MlpModel, d: &InputDomain) -> (Vec<f64>, Vec<f64>) {
    let s = &model.input_scaling;
    (0..d.lower.len())
        .map(|i| {
            let a = s.apply(i, d.lower[i]);
            let b = s.apply(i, d.upper[i]);
            (a.min(b), a.max(b))
        })
        .unzip()
}

/// Interval bounds of the outputs (scaled units) given hidden bounds.
pub(crate) fn output_interval(model: &MlpModel, b: &NeuronBounds) -> (Vec<f64>, Vec<f64>) {
    let k = b.n_layers();
    let last = model.layers.last().unwrap();
    if k == 0 {
        return (last.biases.clone(), last.biases.clone());
    }
    let (zl, zu) = relu_interval(&b.lower[k - 1], &b.upper[k - 1]);
    affine_interval(last, &zl, &zu)
}

/// Layer-wise interval arithmetic with `W+` / `W-` splitting.
pub fn interval_bounds(model: &MlpModel, domain: &InputDomain) -> NeuronBounds {
    let (mut zl, mut zu) = scaled_input_interval(model, domain);
    let mut out = NeuronBounds {
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for layer in &model.layers[..model.depth()] {
        let (lo, hi) = affine_interval(layer, &zl, &zu);
        (zl, zu) = relu_interval(&lo, &hi);
        out.lower.push(lo);
        out.upper.push(hi);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TightenOptions {
    /// Passes over all layers; 1 is the single front-to-back sweep.
    pub passes: usize,
    pub simplex: SimplexOptions,
}

impl Default for TightenOptions {
    fn default() -> Self {
        Self {
            passes: 1,
            simplex: SimplexOptions::default(),
        }
    }
}

/// Replace the bounds of each layer after the first by the optima of
/// `max/min zhat` over the LP relaxation of the preceding layers.
pub fn tighten_bounds_lp(
    model: &MlpModel,
    domain: &InputDomain,
    bounds: &NeuronBounds,
    opts: &TightenOptions,
) -> Result<NeuronBounds> {
    bounds.check_shape(model)?;
    let mut b = bounds.clone();
    let depth = model.depth();
    for _ in 0..opts.passes {
        for k in 1..depth {
            let lp = build(model, domain, &b, k, true)?;
            let zhat = &lp.roles.neurons[k];
            let lower: Vec<f64> = lp.variables.iter().map(|v| v.lower).collect();
            let upper: Vec<f64> = lp.variables.iter().map(|v| v.upper).collect();
            let results: Vec<Result<(f64, f64)>> = (0..zhat.len())
                .into_par_iter()
                .map(|j| {
                    let var = zhat[j].pre;
                    let mut ext = [0.0; 2];
                    for (slot, sense) in [ObjectiveSense::Minimize, ObjectiveSense::Maximize]
                        .into_iter()
                        .enumerate()
                    {
                        let mut p = lp.clone();
                        p.set_objective(sense, vec![(var, 1.0)]);
                        let sf = StandardForm::new(&p);
                        let sol = solve_bounded(&sf, &lower, &upper, &opts.simplex)?;
                        if sol.status != LpStatus::Optimal {
                            return Err(MilpError::BoundLp {
                                layer: k,
                                neuron: j,
                                reason: format!("{:?}", sol.status),
                            });
                        }
                        ext[slot] = sol.objective;
                    }
                    Ok((ext[0], ext[1]))
                })
                .collect();
            for (j, r) in results.into_iter().enumerate() {
                let (lo, hi) = r.map_err(|e| match e {
                    e @ MilpError::BoundLp { .. } => e,
                    other => MilpError::BoundLp {
                        layer: k,
                        neuron: j,
                        reason: other.to_string(),
                    },
                })?;
                let pad_lo = LP_PAD * (1.0 + lo.abs());
                let pad_hi = LP_PAD * (1.0 + hi.abs());
                b.lower[k][j] = b.lower[k][j].max(lo - pad_lo);
                b.upper[k][j] = b.upper[k][j].min(hi + pad_hi);
                if b.lower[k][j] > b.upper[k][j] {
                    let mid = 0.5 * (b.lower[k][j] + b.upper[k][j]);
                    b.lower[k][j] = mid;
                    b.upper[k][j] = mid;
                }
            }
            // propagate the tightened layer forward
            if k + 1 < depth {
                let (zl, zu) = relu_interval(&b.lower[k], &b.upper[k]);
                let (lo, hi) = affine_interval(&model.layers[k + 1], &zl, &zu);
                for j in 0..lo.len() {
                    b.lower[k + 1][j] = b.lower[k + 1][j].max(lo[j]);
                    b.upper[k + 1][j] = b.upper[k + 1][j].min(hi[j]);
                }
            }
        }
    }
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsEntry {
    pub layer: usize,
    pub neuron: usize,
    pub zhat_min: f64,
    pub zhat_max: f64,
}

/// On-disk bounds cache keyed by model hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsFile {
    pub model_hash: String,
    pub source: BoundsSource,
    pub widths: Vec<usize>,
    pub entries: Vec<BoundsEntry>,
}

impl BoundsFile {
    pub fn new(bounds: &NeuronBounds, model_hash: &str, source: BoundsSource) -> Self {
        let mut entries = Vec::new();
        for k in 0..bounds.n_layers() {
            for j in 0..bounds.lower[k].len() {
                entries.push(BoundsEntry {
                    layer: k,
                    neuron: j,
                    zhat_min: bounds.lower[k][j],
                    zhat_max: bounds.upper[k][j],
                });
            }
        }
        Self {
            model_hash: model_hash.into(),
            source,
            widths: bounds.lower.iter().map(Vec::len).collect(),
            entries,
        }
    }

    pub fn to_bounds(&self) -> Result<NeuronBounds> {
        let mut b = NeuronBounds {
            lower: self.widths.iter().map(|w| vec![f64::NAN; *w]).collect(),
            upper: self.widths.iter().map(|w| vec![f64::NAN; *w]).collect(),
        };
        for e in &self.entries {
            if e.layer >= self.widths.len() || e.neuron >= self.widths[e.layer] {
                return Err(MilpError::InvalidProblem(format!(
                    "bounds entry ({}, {}) outside the declared widths",
                    e.layer, e.neuron
                )));
            }
            b.lower[e.layer][e.neuron] = e.zhat_min;
            b.upper[e.layer][e.neuron] = e.zhat_max;
        }
        if b.lower.iter().flatten().any(|v| v.is_nan()) {
            return Err(MilpError::InvalidProblem("bounds file misses neurons".into()));
        }
        Ok(b)
    }
}

pub fn write_bounds(path: &Path, file: &BoundsFile) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(file)?)?;
    Ok(())
}

pub fn read_bounds(path: &Path) -> Result<BoundsFile> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
