//! Physics-informed ReLU multilayer perceptron.
//!
//! The network maps `(t, delta_V, delta_T)` to the four differential states
//! and ten algebraic outputs of the converter. Inputs are scaled to `[-1, 1]`
//! over the training box and outputs are de-scaled by per-output mean and
//! standard deviation; both affine maps live in the model file so the MILP
//! encoder reproduces them exactly.
//!
//! Gradients are computed by hand-written reverse mode. The physics term
//! needs `d x_hat / dt`, which is obtained by a forward tangent pass through
//! the same ReLU masks; since the masks are piecewise constant in the weights,
//! the tangent path is linear in each layer's weights and is differentiated
//! alongside the primal path.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{CollocationPoint, LabeledPoint, TrainingSet};
use crate::dynamics::{eval_rhs, ConverterParams};
use crate::layout::{InputBox, INPUT_NAMES, N_ALG, N_DIFF, N_INPUTS, N_OUTPUTS, OUTPUT_NAMES};
use crate::real::{Dual, Real};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Predicted `V_meas` is clamped to this value before the converter
/// equations divide by it.
pub const PHYSICS_V_MEAS_FLOOR: f64 = 0.05;

const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum PinnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("model file schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("model file: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PinnError>;

/// Per-dimension affine map `y = scale * x + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Self {
            scale: vec![1.0; n],
            offset: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    #[inline]
    pub fn apply(&self, i: usize, x: f64) -> f64 {
        self.scale[i] * x + self.offset[i]
    }

    #[inline]
    pub fn invert(&self, i: usize, y: f64) -> f64 {
        (y - self.offset[i]) / self.scale[i]
    }

    /// Map each axis of `bx` onto `[-1, 1]`.
    pub fn unit_box(bx: &InputBox) -> Self {
        let mut a = Self::identity(N_INPUTS);
        for i in 0..N_INPUTS {
            let w = bx.width(i);
            if w > 0.0 {
                a.scale[i] = 2.0 / w;
                a.offset[i] = -(bx.upper[i] + bx.lower[i]) / w;
            } else {
                a.offset[i] = -bx.lower[i];
            }
        }
        a
    }

    /// De-scaling by per-column mean and standard deviation; near-constant
    /// columns keep unit scale.
    pub fn standardizing(columns: &[Vec<f64>]) -> Self {
        let n = columns.len();
        let mut a = Self::identity(n);
        for (i, col) in columns.iter().enumerate() {
            let m = col.len().max(1) as f64;
            let mean = col.iter().sum::<f64>() / m;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let std = var.sqrt();
            a.offset[i] = mean;
            a.scale[i] = if std > 1e-8 { std } else { 1.0 };
        }
        a
    }
}

/// Dense layer with row-major `n_out x n_in` weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    /// `W^T v`, zeroed wherever the previous pre-activation in `mask` is
    /// not positive.
    fn backprop_relu(&self, v: &[f64], mask: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_in];
        for (r, &d) in v.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &self.weights[r * self.n_in..(r + 1) * self.n_in];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * d;
            }
        }
        for (o, p) in out.iter_mut().zip(mask) {
            if *p <= 0.0 {
                *o = 0.0;
            }
        }
        out
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            biases: vec![0.0; n_out],
        }
    }

    #[inline]
    pub fn w(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.n_in + col]
    }

    #[inline]
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.n_out {
            let row = &self.weights[r * self.n_in..(r + 1) * self.n_in];
            let s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.push(s + self.biases[r]);
        }
    }

    #[inline]
    fn linear(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.n_out {
            let row = &self.weights[r * self.n_in..(r + 1) * self.n_in];
            out.push(row.iter().zip(x).map(|(w, v)| w * v).sum());
        }
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// ReLU network with input scaling and output de-scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub input_scaling: Affine,
    pub output_scaling: Affine,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Pre-activations of every layer; the last entry is the scaled output.
    pub pre: Vec<Vec<f64>>,
    /// `z_0` (scaled input) followed by each hidden activation.
    pub act: Vec<Vec<f64>>,
    /// Tangents `d z_k / dt` of the same activations (tangent passes only).
    pub tan: Vec<Vec<f64>>,
    /// `d (scaled output) / dt`.
    pub out_tan: Vec<f64>,
}

impl MlpModel {
    /// Zero network with the given layer widths `[n_in, hidden.., n_out]` and
    /// identity scalings.
    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let n_in = widths[0];
        let n_out = *widths.last().unwrap();
        Self {
            layers,
            input_scaling: Affine::identity(n_in),
            output_scaling: Affine::identity(n_out),
            input_names: (0..n_in).map(|i| format!("x{i}")).collect(),
            output_names: (0..n_out).map(|i| format!("y{i}")).collect(),
        }
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform(widths: &[usize], seed: u64) -> Self {
        let mut m = Self::zeros(widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut m.layers {
            let limit = (6.0 / layer.n_in as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        m
    }

    /// Zero network with the converter input/output naming.
    pub fn pinn_layout(hidden: &[usize]) -> Self {
        let mut widths = vec![N_INPUTS];
        widths.extend_from_slice(hidden);
        widths.push(N_OUTPUTS);
        let mut m = Self::zeros(&widths);
        m.input_names = INPUT_NAMES.iter().map(|s| s.to_string()).collect();
        m.output_names = OUTPUT_NAMES.iter().map(|s| s.to_string()).collect();
        m
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.depth()].iter().map(|l| l.n_out).collect()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.n_inputs()];
        w.extend(self.layers.iter().map(|l| l.n_out));
        w
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(PinnError::InvalidModel("no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.n_in * l.n_out || l.biases.len() != l.n_out {
                return Err(PinnError::Dimension(format!(
                    "layer {k}: {} weights / {} biases for {}x{}",
                    l.weights.len(),
                    l.biases.len(),
                    l.n_out,
                    l.n_in
                )));
            }
            if k > 0 && self.layers[k - 1].n_out != l.n_in {
                return Err(PinnError::Dimension(format!(
                    "layer {k} expects {} inputs, previous layer has {}",
                    l.n_in,
                    self.layers[k - 1].n_out
                )));
            }
        }
        let check_affine = |a: &Affine, n: usize, what: &str| -> Result<()> {
            if a.scale.len() != n || a.offset.len() != n {
                return Err(PinnError::Dimension(format!("{what} scaling has wrong length")));
            }
            if a.scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
                return Err(PinnError::InvalidModel(format!("{what} scaling is not invertible")));
            }
            Ok(())
        };
        check_affine(&self.input_scaling, self.n_inputs(), "input")?;
        check_affine(&self.output_scaling, self.n_outputs(), "output")?;
        if self.input_names.len() != self.n_inputs() || self.output_names.len() != self.n_outputs() {
            return Err(PinnError::Dimension("name lists do not match dimensions".into()));
        }
        Ok(())
    }

    /// Checks the converter layout: 3 inputs, 14 named outputs in state order.
    pub fn validate_pinn(&self) -> Result<()> {
        self.validate()?;
        if self.n_inputs() != N_INPUTS || self.n_outputs() != N_OUTPUTS {
            return Err(PinnError::Dimension(format!(
                "converter network needs {N_INPUTS} inputs and {N_OUTPUTS} outputs, got {} and {}",
                self.n_inputs(),
                self.n_outputs()
            )));
        }
        if self.output_names.iter().zip(OUTPUT_NAMES).any(|(a, b)| a != b) {
            return Err(PinnError::InvalidModel(
                "output names do not follow the state ordering".into(),
            ));
        }
        Ok(())
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.output_names.iter().position(|n| n == name)
    }

    /// True when every scaled input lies in `[-1, 1]`.
    pub fn in_training_box(&self, input: &[f64]) -> bool {
        input
            .iter()
            .enumerate()
            .all(|(i, x)| self.input_scaling.apply(i, *x).abs() <= 1.0 + 1e-9)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.n_inputs() {
            return Err(PinnError::Dimension(format!(
                "expected {} inputs, got {}",
                self.n_inputs(),
                input.len()
            )));
        }
        if !self.in_training_box(input) {
            log::debug!("input {input:?} lies outside the training box");
        }
        Ok(())
    }

    /// Full forward pass, optionally with the `t`-tangent.
    pub fn trace(&self, input: &[f64], with_tangent: bool) -> Trace {
        let depth = self.depth();
        let mut tr = Trace {
            pre: Vec::with_capacity(depth + 1),
            act: Vec::with_capacity(depth + 1),
            tan: Vec::new(),
            out_tan: Vec::new(),
        };
        let z0: Vec<f64> = input
            .iter()
            .enumerate()
            .map(|(i, x)| self.input_scaling.apply(i, *x))
            .collect();
        tr.act.push(z0);
        if with_tangent {
            let mut t0 = vec![0.0; input.len()];
            t0[0] = self.input_scaling.scale[0];
            tr.tan.push(t0);
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let mut pre = Vec::with_capacity(layer.n_out);
            layer.affine(&tr.act[k], &mut pre);
            let mut tan = Vec::new();
            if with_tangent {
                layer.linear(&tr.tan[k], &mut tan);
            }
            if k < depth {
                let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                if with_tangent {
                    for (t, p) in tan.iter_mut().zip(&pre) {
                        if *p <= 0.0 {
                            *t = 0.0;
                        }
                    }
                    tr.tan.push(tan);
                }
                tr.act.push(act);
            } else if with_tangent {
                tr.out_tan = tan;
            }
            tr.pre.push(pre);
        }
        tr
    }

    fn descale(&self, scaled: &[f64]) -> Vec<f64> {
        scaled
            .iter()
            .enumerate()
            .map(|(i, v)| self.output_scaling.apply(i, *v))
            .collect()
    }

    /// Network outputs in physical units.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let tr = self.trace(input, false);
        Ok(self.descale(tr.pre.last().unwrap()))
    }

    /// Derivative of every output with respect to the first input (`t`), in
    /// physical units. ReLU derivatives are 1 for positive pre-activations
    /// and 0 otherwise.
    pub fn forward_dt(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let tr = self.trace(input, true);
        Ok(tr
            .out_tan
            .iter()
            .enumerate()
            .map(|(i, v)| self.output_scaling.scale[i] * v)
            .collect())
    }

    /// Hidden-layer pre-activations for `input`.
    pub fn pre_activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut tr = self.trace(input, false);
        tr.pre.pop();
        tr.pre
    }

    /// Flat parameter vector: per layer, weights then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.biases);
        }
        v
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut o = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[o..o + nw]);
            o += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&p[o..o + nb]);
            o += nb;
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut o = 0;
        for l in &self.layers {
            offs.push(o);
            o += l.n_params();
        }
        offs
    }

    /// Accumulate into `grad` the parameter gradient for adjoints of the
    /// scaled outputs (`out_adj`) and of their `t`-tangents (`tan_adj`).
    fn backprop(
        &self,
        tr: &Trace,
        out_adj: &[f64],
        tan_adj: Option<&[f64]>,
        offs: &[usize],
        grad: &mut [f64],
    ) {
        let mut delta = out_adj.to_vec();
        let mut gamma = tan_adj.map(|g| g.to_vec());
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let base = offs[k];
            let z_prev = &tr.act[k];
            let (gw, gb) = grad[base..base + layer.n_params()].split_at_mut(layer.weights.len());
            for r in 0..layer.n_out {
                let d = delta[r];
                let row = &mut gw[r * layer.n_in..(r + 1) * layer.n_in];
                if d != 0.0 {
                    for (g, z) in row.iter_mut().zip(z_prev) {
                        *g += d * z;
                    }
                    gb[r] += d;
                }
                if let Some(gm) = &gamma {
                    let g_r = gm[r];
                    if g_r != 0.0 {
                        for (g, s) in row.iter_mut().zip(&tr.tan[k]) {
                            *g += g_r * s;
                        }
                    }
                }
            }
            if k == 0 {
                break;
            }
            let mask = &tr.pre[k - 1];
            delta = layer.backprop_relu(&delta, mask);
            gamma = gamma.map(|g| layer.backprop_relu(&g, mask));
        }
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            activation: "relu".into(),
            widths: self.widths(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
            input_scaling: self.input_scaling.clone(),
            output_scaling: self.output_scaling.clone(),
            input_names: self.input_names.clone(),
            output_names: self.output_names.clone(),
        }
    }

    pub fn from_file(f: ModelFile) -> Result<Self> {
        if f.schema_version != MODEL_SCHEMA_VERSION {
            return Err(PinnError::SchemaVersion {
                found: f.schema_version,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        if f.activation != "relu" {
            return Err(PinnError::InvalidModel(format!(
                "unsupported activation `{}`",
                f.activation
            )));
        }
        if f.widths.len() < 2
            || f.weights.len() != f.widths.len() - 1
            || f.biases.len() != f.widths.len() - 1
        {
            return Err(PinnError::Dimension(
                "widths, weights and biases disagree on the layer count".into(),
            ));
        }
        let layers = f
            .widths
            .windows(2)
            .zip(f.weights)
            .zip(f.biases)
            .map(|((w, weights), biases)| Layer {
                n_in: w[0],
                n_out: w[1],
                weights,
                biases,
            })
            .collect();
        let m = Self {
            layers,
            input_scaling: f.input_scaling,
            output_scaling: f.output_scaling,
            input_names: f.input_names,
            output_names: f.output_names,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    /// SHA-256 of the serialized model.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// On-disk model document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub activation: String,
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_scaling: Affine,
    pub output_scaling: Affine,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_json())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    MlpModel::from_json(&fs::read_to_string(path)?)
}

/// Per-output loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub x: [f64; N_DIFF],
    pub y: [f64; N_ALG],
    pub f: [f64; N_DIFF],
    pub g: [f64; N_ALG],
}

impl LossWeights {
    pub fn uniform(x: f64, y: f64, f: f64, g: f64) -> Self {
        Self {
            x: [x; N_DIFF],
            y: [y; N_ALG],
            f: [f; N_DIFF],
            g: [g; N_ALG],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.x.iter().chain(&self.y).chain(&self.f).chain(&self.g);
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(PinnError::InvalidConfig("loss weights must be non-negative".into()));
        }
        if !all.into_iter().any(|w| *w > 0.0) {
            return Err(PinnError::InvalidConfig("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    fn data(&self, i: usize) -> f64 {
        if i < N_DIFF {
            self.x[i]
        } else {
            self.y[i - N_DIFF]
        }
    }

    fn has_physics(&self) -> bool {
        self.f.iter().chain(&self.g).any(|w| *w > 0.0)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0, 1.0, 0.1, 0.1)
    }
}

/// Individual loss terms and their weighted sum.
///
/// Data terms are mean-squared errors in scaled output units; physics terms
/// are mean-squared residuals in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub data_x: Vec<f64>,
    pub data_y: Vec<f64>,
    pub phys_f: Vec<f64>,
    pub phys_g: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Differential residuals `rhs(x_hat) - dx_hat/dt` and algebraic residuals
/// of the ten output relations, from physical outputs `o` and time
/// derivatives `d`.
pub fn physics_residuals<T: Real>(
    o: &[T; N_OUTPUTS],
    d: &[T; N_DIFF],
    v_t: f64,
    f_latched: f64,
    p: &ConverterParams,
) -> ([T; N_DIFF], [T; N_ALG]) {
    let x = [o[0], o[1], o[2], o[3].max_r(T::cst(PHYSICS_V_MEAS_FLOOR))];
    let rhs = eval_rhs(&x, f_latched, v_t, p).expect("clamped V_meas is above the guard");
    let rf = std::array::from_fn(|i| rhs[i] - d[i]);

    let [theta, i_d, i_q, _] = [o[0], o[1], o[2], o[3]];
    let [v_d, v_q, omega, p_vsc, v_pcc, q_vsc, v_gd, v_gq, p_total, q_total] =
        std::array::from_fn(|i| o[N_DIFF + i]);
    let vt = T::cst(v_t);
    let wl = omega.scale(p.l_c);
    let rg = [
        v_d - vt * theta.cos(),
        v_q + vt * theta.sin(),
        omega - (v_q.scale(p.k_pomega) + T::cst(1.0)),
        p_vsc - (v_d * i_d + v_q * i_q),
        v_pcc - vt,
        q_vsc - (v_q * i_d - v_d * i_q),
        v_gd - (v_d + wl * i_q - i_d.scale(p.r_c)),
        v_gq - (v_q - wl * i_d - i_q.scale(p.r_c)),
        p_total - (v_gd * i_d + v_gq * i_q),
        q_total - (v_gq * i_d - v_gd * i_q),
    ];
    (rf, rg)
}

const N_PHYS_VARS: usize = N_OUTPUTS + N_DIFF;

/// Unnormalized sums over a chunk of points.
struct Partial {
    sq: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Partial {
    fn new(n_sq: usize, n_params: Option<usize>) -> Self {
        Self {
            sq: vec![0.0; n_sq],
            grad: n_params.map(|n| vec![0.0; n]),
        }
    }

    fn merge(mut self, other: Partial) -> Self {
        for (a, b) in self.sq.iter_mut().zip(other.sq) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.grad, other.grad) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }
}

fn data_chunk(
    model: &MlpModel,
    pts: &[&LabeledPoint],
    w: &LossWeights,
    offs: &[usize],
    want_grad: bool,
) -> Partial {
    let mut part = Partial::new(N_OUTPUTS, want_grad.then(|| model.n_params()));
    let mut adj = vec![0.0; N_OUTPUTS];
    for p in pts {
        let tr = model.trace(&p.input, false);
        let out = tr.pre.last().unwrap();
        for i in 0..N_OUTPUTS {
            let r = out[i] - model.output_scaling.invert(i, p.outputs[i]);
            part.sq[i] += r * r;
            adj[i] = 2.0 * w.data(i) * r;
        }
        if let Some(g) = &mut part.grad {
            model.backprop(&tr, &adj, None, offs, g);
        }
    }
    part
}

fn physics_chunk(
    model: &MlpModel,
    pts: &[&CollocationPoint],
    w: &LossWeights,
    params: &ConverterParams,
    offs: &[usize],
    want_grad: bool,
) -> Partial {
    let mut part = Partial::new(N_OUTPUTS, want_grad.then(|| model.n_params()));
    let sc = &model.output_scaling;
    for c in pts {
        let tr = model.trace(&c.input, true);
        let out = tr.pre.last().unwrap();
        let o: [f64; N_OUTPUTS] = std::array::from_fn(|i| sc.apply(i, out[i]));
        let d: [f64; N_DIFF] = std::array::from_fn(|i| sc.scale[i] * tr.out_tan[i]);
        if let Some(g) = &mut part.grad {
            let od: [Dual<N_PHYS_VARS>; N_OUTPUTS] = std::array::from_fn(|i| Dual::var(o[i], i));
            let dd: [Dual<N_PHYS_VARS>; N_DIFF] =
                std::array::from_fn(|i| Dual::var(d[i], N_OUTPUTS + i));
            let (rf, rg) = physics_residuals(&od, &dd, c.v_t, c.f_latched, params);
            let mut a = [0.0; N_PHYS_VARS];
            let mut acc = |r: &Dual<N_PHYS_VARS>, lam: f64| {
                if lam != 0.0 {
                    for (ak, dk) in a.iter_mut().zip(r.d.iter()) {
                        *ak += 2.0 * lam * r.v * dk;
                    }
                }
            };
            for i in 0..N_DIFF {
                part.sq[i] += rf[i].v * rf[i].v;
                acc(&rf[i], w.f[i]);
            }
            for i in 0..N_ALG {
                part.sq[N_DIFF + i] += rg[i].v * rg[i].v;
                acc(&rg[i], w.g[i]);
            }
            let out_adj: Vec<f64> = (0..N_OUTPUTS).map(|i| a[i] * sc.scale[i]).collect();
            let mut tan_adj = vec![0.0; N_OUTPUTS];
            for i in 0..N_DIFF {
                tan_adj[i] = a[N_OUTPUTS + i] * sc.scale[i];
            }
            model.backprop(&tr, &out_adj, Some(&tan_adj), offs, g);
        } else {
            let (rf, rg) = physics_residuals(&o, &d, c.v_t, c.f_latched, params);
            for i in 0..N_DIFF {
                part.sq[i] += rf[i] * rf[i];
            }
            for i in 0..N_ALG {
                part.sq[N_DIFF + i] += rg[i] * rg[i];
            }
        }
    }
    part
}

fn reduce(parts: Vec<Partial>, n_sq: usize, n_params: Option<usize>) -> Partial {
    parts
        .into_iter()
        .fold(Partial::new(n_sq, n_params), Partial::merge)
}

/// Loss (and optionally gradient) over explicit point subsets.
pub fn evaluate(
    model: &MlpModel,
    labeled: &[&LabeledPoint],
    collocation: &[&CollocationPoint],
    weights: &LossWeights,
    params: &ConverterParams,
    want_grad: bool,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    model.validate_pinn()?;
    let offs = model.layer_offsets();
    let np = want_grad.then(|| model.n_params());
    let data = reduce(
        labeled
            .par_chunks(CHUNK)
            .map(|ch| data_chunk(model, ch, weights, &offs, want_grad))
            .collect(),
        N_OUTPUTS,
        np,
    );
    // physics gradients are skipped entirely when their weights vanish
    let phys_grad = want_grad && weights.has_physics();
    let phys = reduce(
        collocation
            .par_chunks(CHUNK)
            .map(|ch| physics_chunk(model, ch, weights, params, &offs, phys_grad))
            .collect(),
        N_OUTPUTS,
        phys_grad.then(|| model.n_params()),
    );
    let n = labeled.len().max(1) as f64;
    let nc = collocation.len().max(1) as f64;
    let dmse: Vec<f64> = data.sq.iter().map(|s| s / n).collect();
    let pmse: Vec<f64> = phys.sq.iter().map(|s| s / nc).collect();
    let mut total = 0.0;
    for i in 0..N_OUTPUTS {
        total += weights.data(i) * dmse[i];
    }
    for i in 0..N_DIFF {
        total += weights.f[i] * pmse[i];
    }
    for i in 0..N_ALG {
        total += weights.g[i] * pmse[N_DIFF + i];
    }
    let report = LossReport {
        data_x: dmse[..N_DIFF].to_vec(),
        data_y: dmse[N_DIFF..].to_vec(),
        phys_f: pmse[..N_DIFF].to_vec(),
        phys_g: pmse[N_DIFF..].to_vec(),
        total,
    };
    let grad = want_grad.then(|| {
        let mut g: Vec<f64> = data.grad.unwrap().iter().map(|v| v / n).collect();
        if let Some(pg) = phys.grad {
            for (a, b) in g.iter_mut().zip(pg) {
                *a += b / nc;
            }
        }
        g
    });
    Ok((report, grad))
}

fn check_collocation(set: &TrainingSet) -> Result<()> {
    if let Some(c) = set
        .collocation
        .iter()
        .find(|c| !c.v_t.is_finite() || !c.f_latched.is_finite())
    {
        return Err(PinnError::InvalidConfig(format!(
            "collocation point {:?} has no external voltage attached",
            c.input
        )));
    }
    Ok(())
}

pub fn loss(
    model: &MlpModel,
    set: &TrainingSet,
    weights: &LossWeights,
    params: &ConverterParams,
) -> Result<LossReport> {
    check_collocation(set)?;
    let lab: Vec<&LabeledPoint> = set.labeled.iter().collect();
    let col: Vec<&CollocationPoint> = set.collocation.iter().collect();
    Ok(evaluate(model, &lab, &col, weights, params, false)?.0)
}

/// Gradient of the total loss, flattened like [`MlpModel::params_flat`].
pub fn grad(
    model: &MlpModel,
    set: &TrainingSet,
    weights: &LossWeights,
    params: &ConverterParams,
) -> Result<Vec<f64>> {
    check_collocation(set)?;
    let lab: Vec<&LabeledPoint> = set.labeled.iter().collect();
    let col: Vec<&CollocationPoint> = set.collocation.iter().collect();
    Ok(evaluate(model, &lab, &col, weights, params, true)?.1.unwrap())
}

/// Per-output mean-squared error in physical units.
pub fn physical_mse(model: &MlpModel, points: &[LabeledPoint]) -> Result<Vec<f64>> {
    let n = model.n_outputs();
    let sums = points
        .par_chunks(CHUNK)
        .map(|ch| {
            let mut s = vec![0.0; n];
            for p in ch {
                let tr = model.trace(&p.input, false);
                for (i, v) in tr.pre.last().unwrap().iter().enumerate() {
                    let r = model.output_scaling.apply(i, *v) - p.outputs[i];
                    s[i] += r * r;
                }
            }
            s
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(vec![0.0; n], |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        });
    let m = points.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / m).collect())
}

/// Exponential learning-rate decay from `initial` to `last` over training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub last: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.initial;
        }
        let frac = (epoch.saturating_sub(1)) as f64 / (epochs - 1) as f64;
        self.initial * (self.last / self.initial).powf(frac)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Collocation points per optimizer step.
    pub collocation_batch: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub weights: LossWeights,
    /// Collocation points drawn when the pipeline builds the training set.
    pub n_collocation: usize,
    pub validation_split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            epochs: 2000,
            batch_size: 256,
            collocation_batch: 256,
            lr: LrSchedule {
                initial: 3e-3,
                last: 1e-4,
            },
            seed: 42,
            weights: LossWeights::default(),
            n_collocation: 10_000,
            validation_split: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.collocation_batch == 0 {
            return Err(PinnError::InvalidConfig(
                "epochs and batch sizes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return Err(PinnError::InvalidConfig("validation split must lie in [0, 1)".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(PinnError::InvalidConfig("hidden widths must be positive".into()));
        }
        if !(self.lr.initial > 0.0 && self.lr.last > 0.0) {
            return Err(PinnError::InvalidConfig("learning rates must be positive".into()));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossReport,
    pub validation_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Epoch 0 is the initialization.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_total,validation_total");
        for n in OUTPUT_NAMES {
            s.push_str(&format!(",data_{n}"));
        }
        for n in &OUTPUT_NAMES[..N_DIFF] {
            s.push_str(&format!(",phys_f_{n}"));
        }
        for n in &OUTPUT_NAMES[N_DIFF..] {
            s.push_str(&format!(",phys_g_{n}"));
        }
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{}",
                e.epoch, e.lr, e.train.total, e.validation_total
            ));
            for v in e
                .train
                .data_x
                .iter()
                .chain(&e.train.data_y)
                .chain(&e.train.phys_f)
                .chain(&e.train.phys_g)
            {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Untrained network with scalings fitted to `set`.
pub fn initial_model(set: &TrainingSet, config: &TrainConfig) -> MlpModel {
    let mut widths = vec![N_INPUTS];
    widths.extend_from_slice(&config.hidden);
    widths.push(N_OUTPUTS);
    let he = MlpModel::he_uniform(&widths, config.seed);
    let mut m = MlpModel::pinn_layout(&config.hidden);
    m.layers = he.layers;
    m.input_scaling = Affine::unit_box(&set.input_box());
    let columns: Vec<Vec<f64>> = (0..N_OUTPUTS)
        .map(|i| set.labeled.iter().map(|p| p.outputs[i]).collect())
        .collect();
    m.output_scaling = Affine::standardizing(&columns);
    m
}

/// Adam training on mini-batches of labeled and collocation points. Returns
/// the parameters with the lowest validation loss (the initialization
/// included).
pub fn train(
    set: &TrainingSet,
    config: &TrainConfig,
    params: &ConverterParams,
) -> Result<(MlpModel, TrainHistory)> {
    config.validate()?;
    check_collocation(set)?;
    if set.labeled.is_empty() {
        return Err(PinnError::InvalidConfig("training set has no labeled points".into()));
    }
    let mut model = initial_model(set, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_da7a);

    let mut order: Vec<usize> = (0..set.labeled.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (config.validation_split * set.labeled.len() as f64).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    if train_idx.is_empty() {
        return Err(PinnError::InvalidConfig("validation split leaves no training points".into()));
    }
    let train_pts: Vec<&LabeledPoint> = train_idx.iter().map(|&i| &set.labeled[i]).collect();
    let val_pts: Vec<&LabeledPoint> = val_idx.iter().map(|&i| &set.labeled[i]).collect();
    let all_col: Vec<&CollocationPoint> = set.collocation.iter().collect();
    let mut col_order: Vec<usize> = (0..set.collocation.len()).collect();

    let w = &config.weights;
    let assess = |m: &MlpModel, lr: f64, epoch: usize| -> Result<EpochRecord> {
        let (train, _) = evaluate(m, &train_pts, &all_col, w, params, false)?;
        let validation_total = if val_pts.is_empty() {
            train.total
        } else {
            evaluate(m, &val_pts, &all_col, w, params, false)?.0.total
        };
        if !train.is_finite() || !validation_total.is_finite() {
            return Err(PinnError::TrainingDiverged { epoch });
        }
        Ok(EpochRecord {
            epoch,
            lr,
            train,
            validation_total,
        })
    };

    let mut history = TrainHistory::default();
    history.epochs.push(assess(&model, config.lr.initial, 0)?);
    let mut best = (history.epochs[0].validation_total, model.params_flat());
    let mut theta = model.params_flat();
    let mut adam = Adam::new(theta.len());

    for epoch in 1..=config.epochs {
        let lr = config.lr.at(epoch, config.epochs);
        train_idx.shuffle(&mut rng);
        col_order.shuffle(&mut rng);
        let mut col_cursor = 0;
        for batch in train_idx.chunks(config.batch_size) {
            let lab: Vec<&LabeledPoint> = batch.iter().map(|&i| &set.labeled[i]).collect();
            let cb = config.collocation_batch.min(col_order.len());
            let col: Vec<&CollocationPoint> = (0..cb)
                .map(|k| &set.collocation[col_order[(col_cursor + k) % col_order.len()]])
                .collect();
            col_cursor = (col_cursor + cb) % col_order.len().max(1);
            let (_, g) = evaluate(&model, &lab, &col, w, params, true)?;
            let g = g.unwrap();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(PinnError::TrainingDiverged { epoch });
            }
            adam.update(&mut theta, &g, lr);
            model.set_params_flat(&theta);
        }
        let rec = assess(&model, lr, epoch)?;
        if rec.validation_total < best.0 {
            best = (rec.validation_total, theta.clone());
            history.best_epoch = epoch;
        }
        if epoch % 100 == 0 {
            log::info!(
                "epoch {epoch}: train {:.4e}, validation {:.4e}",
                rec.train.total,
                rec.validation_total
            );
        }
        history.epochs.push(rec);
    }
    model.set_params_flat(&best.1);
    Ok((model, history))
}
