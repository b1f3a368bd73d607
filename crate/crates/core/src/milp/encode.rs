//! Big-M MILP encoding of a ReLU network over a box of physical inputs.

use serde::{Deserialize, Serialize};

use super::bounds::{output_interval, NeuronBounds};
use super::{MilpError, MilpProblem, ObjectiveSense, Result, Sense};
use crate::layout::InputBox;
use crate::pinn::MlpModel;

/// Box of physical network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    /// All corners plus the centre.
    pub fn probe_points(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut pts: Vec<Vec<f64>> = (0..1usize << d.min(12))
            .map(|mask| {
                (0..d)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.upper[i]
                        } else {
                            self.lower[i]
                        }
                    })
                    .collect()
            })
            .collect();
        pts.push((0..d).map(|i| 0.5 * (self.lower[i] + self.upper[i])).collect());
        pts
    }
}

impl From<&InputBox> for InputDomain {
    fn from(b: &InputBox) -> Self {
        Self::new(b.lower.to_vec(), b.upper.to_vec())
    }
}

impl From<InputBox> for InputDomain {
    fn from(b: InputBox) -> Self {
        Self::from(&b)
    }
}

/// Variables of one hidden neuron. `post` is `None` for neurons fixed at
/// zero and equals `pre` for neurons that are always active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronVars {
    pub pre: usize,
    pub post: Option<usize>,
    pub binary: Option<usize>,
}

/// Where each network quantity lives in the MILP.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub inputs: Vec<usize>,
    pub neurons: Vec<Vec<NeuronVars>>,
    pub outputs: Vec<usize>,
}

/// Affine expression `sum a_j x_j + c`.
type Expr = (Vec<(usize, f64)>, f64);

fn combine(weights: &[f64], prev: &[Expr], bias: f64) -> Expr {
    let mut terms = Vec::new();
    let mut c = bias;
    for (w, (t, k)) in weights.iter().zip(prev) {
        if *w == 0.0 {
            continue;
        }
        c += w * k;
        terms.extend(t.iter().map(|(j, a)| (*j, w * a)));
    }
    (terms, c)
}

/// Encode the first `full_layers` hidden layers exactly; when fewer than the
/// network depth, also add the pre-activations of the next layer (for bound
/// tightening). Outputs are included only for the full network.
pub(crate) fn build(
    model: &MlpModel,
    domain: &InputDomain,
    bounds: &NeuronBounds,
    full_layers: usize,
    relax: bool,
) -> Result<MilpProblem> {
    model.validate()?;
    if domain.dim() != model.n_inputs() {
        return Err(MilpError::InvalidProblem(format!(
            "domain has {} dimensions, network expects {}",
            domain.dim(),
            model.n_inputs()
        )));
    }
    let depth = model.depth();
    let mut p = MilpProblem::new(ObjectiveSense::Maximize);
    let s = &model.input_scaling;
    let mut prev: Vec<Expr> = Vec::new();
    for i in 0..model.n_inputs() {
        let v = p.add_var(model.input_names[i].clone(), domain.lower[i], domain.upper[i]);
        p.roles.inputs.push(v);
        prev.push((vec![(v, s.scale[i])], s.offset[i]));
    }
    let pre_layers = if full_layers < depth { full_layers + 1 } else { depth };
    for k in 0..pre_layers {
        let layer = &model.layers[k];
        let full = k < full_layers;
        let mut vars = Vec::with_capacity(layer.n_out);
        let mut next = Vec::with_capacity(layer.n_out);
        for j in 0..layer.n_out {
            let (lo, hi) = bounds.get(k, j);
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(MilpError::UnboundedNeuron { layer: k, neuron: j });
            }
            let zhat = p.add_var(format!("zhat_{}_{j}", k + 1), lo, hi);
            let row = &layer.weights[j * layer.n_in..(j + 1) * layer.n_in];
            let (mut terms, c) = combine(row, &prev, layer.biases[j]);
            terms.push((zhat, -1.0));
            p.add_constraint(format!("affine_{}_{j}", k + 1), terms, Sense::Eq, -c);
            if !full {
                vars.push(NeuronVars {
                    pre: zhat,
                    post: None,
                    binary: None,
                });
                continue;
            }
            let nv = if hi <= 0.0 {
                NeuronVars {
                    pre: zhat,
                    post: None,
                    binary: None,
                }
            } else if lo >= 0.0 {
                NeuronVars {
                    pre: zhat,
                    post: Some(zhat),
                    binary: None,
                }
            } else {
                let z = p.add_var(format!("z_{}_{j}", k + 1), 0.0, hi);
                let b = if relax {
                    p.add_var(format!("b_{}_{j}", k + 1), 0.0, 1.0)
                } else {
                    p.add_binary(format!("b_{}_{j}", k + 1))
                };
                // z <= zhat - lo (1 - b)
                p.add_constraint(
                    format!("relu_ub_{}_{j}", k + 1),
                    vec![(z, 1.0), (zhat, -1.0), (b, -lo)],
                    Sense::Le,
                    -lo,
                );
                // z >= zhat
                p.add_constraint(
                    format!("relu_lb_{}_{j}", k + 1),
                    vec![(z, 1.0), (zhat, -1.0)],
                    Sense::Ge,
                    0.0,
                );
                // z <= hi b
                p.add_constraint(
                    format!("relu_on_{}_{j}", k + 1),
                    vec![(z, 1.0), (b, -hi)],
                    Sense::Le,
                    0.0,
                );
                NeuronVars {
                    pre: zhat,
                    post: Some(z),
                    binary: Some(b),
                }
            };
            next.push(match nv.post {
                Some(v) => (vec![(v, 1.0)], 0.0),
                None => (Vec::new(), 0.0),
            });
            vars.push(nv);
        }
        p.roles.neurons.push(vars);
        prev = next;
    }

    if full_layers >= depth {
        let last = model.layers.last().unwrap();
        let sc = &model.output_scaling;
        let (olo, ohi) = output_interval(model, bounds);
        for i in 0..last.n_out {
            let a = sc.apply(i, olo[i]);
            let b = sc.apply(i, ohi[i]);
            let (lo, hi) = (a.min(b), a.max(b));
            let pad = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
            let y = p.add_var(format!("y_{}", model.output_names[i]), lo - pad, hi + pad);
            let row = &last.weights[i * last.n_in..(i + 1) * last.n_in];
            let (terms, c) = combine(row, &prev, last.biases[i]);
            // y = scale (W z + b) + offset
            let mut t: Vec<(usize, f64)> = terms.iter().map(|(j, w)| (*j, -sc.scale[i] * w)).collect();
            t.push((y, 1.0));
            p.add_constraint(
                format!("output_{}", model.output_names[i]),
                t,
                Sense::Eq,
                sc.scale[i] * c + sc.offset[i],
            );
            p.roles.outputs.push(y);
        }
    }
    Ok(p)
}

/// Exact MILP of `model` over `domain` with big-M constants from `bounds`.
pub fn encode(model: &MlpModel, domain: &InputDomain, bounds: &NeuronBounds) -> Result<MilpProblem> {
    if cfg!(debug_assertions) {
        for x in domain.probe_points() {
            if !bounds.contains_point(model, &x, 1e-6) {
                return Err(MilpError::InvalidProblem(format!(
                    "bounds do not cover the network at {x:?}"
                )));
            }
        }
    }
    build(model, domain, bounds, model.depth(), false)
}
