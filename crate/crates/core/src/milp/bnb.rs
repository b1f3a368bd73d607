//! Best-first branch-and-bound over binary variables.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::simplex::{solve_bounded, SimplexOptions, StandardForm};
use super::{LpSolution, LpStatus, MilpError, MilpProblem, Result, Sense};

#[derive(Clone, Debug, PartialEq)]
pub struct BbOptions {
    pub node_limit: usize,
    /// Absolute optimality gap used for pruning.
    pub gap: f64,
    pub int_tol: f64,
    pub simplex: SimplexOptions,
}

impl Default for BbOptions {
    fn default() -> Self {
        Self {
            node_limit: 1_000_000,
            gap: 1e-6,
            int_tol: 1e-6,
            simplex: SimplexOptions::default(),
        }
    }
}

const PROPAGATION_PAD: f64 = 1e-5;

struct Node {
    /// Parent LP value in maximization sense.
    bound: f64,
    seq: u64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // highest bound first, then oldest node
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Activity-based bound tightening over every row, repeated until nothing
/// changes (or `MAX_PASSES`). Derived bounds are padded outward so rounding
/// never cuts off a feasible point; integer bounds are rounded inward.
/// Returns false when the box is proven empty.
fn propagate(p: &MilpProblem, lower: &mut [f64], upper: &mut [f64], int_tol: f64) -> bool {
    const MAX_PASSES: usize = 20;
    for _ in 0..MAX_PASSES {
        let mut changed = false;
        for c in &p.constraints {
            let (mut min_act, mut max_act, mut mag) = (0.0, 0.0, 0.0);
            for &(j, a) in &c.terms {
                let (lo, hi) = (a * lower[j], a * upper[j]);
                min_act += lo.min(hi);
                max_act += lo.max(hi);
                mag += lo.abs().max(hi.abs());
            }
            let le = matches!(c.sense, Sense::Le | Sense::Eq);
            let ge = matches!(c.sense, Sense::Ge | Sense::Eq);
            for &(j, a) in &c.terms {
                if a == 0.0 {
                    continue;
                }
                let (lo, hi) = (a * lower[j], a * upper[j]);
                // a x_j <= rhs - min(rest), a x_j >= rhs - max(rest)
                let mut cap_hi = f64::INFINITY;
                let mut cap_lo = f64::NEG_INFINITY;
                if le {
                    cap_hi = c.rhs - (min_act - lo.min(hi));
                }
                if ge {
                    cap_lo = c.rhs - (max_act - lo.max(hi));
                }
                let (mut new_lo, mut new_hi) = if a > 0.0 {
                    (cap_lo / a, cap_hi / a)
                } else {
                    (cap_hi / a, cap_lo / a)
                };
                // continuous boxes are kept well above the simplex tolerance
                let pad = 1e-12 * mag / a.abs();
                new_lo -= pad + PROPAGATION_PAD * (1.0 + new_lo.abs());
                new_hi += pad + PROPAGATION_PAD * (1.0 + new_hi.abs());
                if p.variables[j].binary {
                    new_lo = (new_lo - int_tol).ceil();
                    new_hi = (new_hi + int_tol).floor();
                }
                if new_lo > lower[j] {
                    lower[j] = new_lo;
                    changed = true;
                }
                if new_hi < upper[j] {
                    upper[j] = new_hi;
                    changed = true;
                }
                if lower[j] > upper[j] {
                    if lower[j] - upper[j] > 1e-7 * (1.0 + upper[j].abs()) {
                        return false;
                    }
                    let mid = 0.5 * (lower[j] + upper[j]);
                    lower[j] = mid;
                    upper[j] = mid;
                }
            }
        }
        if !changed {
            break;
        }
    }
    true
}

pub fn branch_and_bound(p: &MilpProblem) -> Result<LpSolution> {
    branch_and_bound_with(p, &BbOptions::default())
}

pub fn branch_and_bound_with(p: &MilpProblem, opts: &BbOptions) -> Result<LpSolution> {
    p.validate()?;
    let sf = StandardForm::new(p);
    let sign = sf.sign();
    let binaries: Vec<usize> = (0..p.variables.len())
        .filter(|&j| p.variables[j].binary)
        .collect();

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    heap.push(Node {
        bound: f64::INFINITY,
        seq,
        lower: p.variables.iter().map(|v| v.lower).collect(),
        upper: p.variables.iter().map(|v| v.upper).collect(),
    });
    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut nodes = 0usize;
    let mut iterations = 0usize;

    while let Some(mut node) = heap.pop() {
        let inc_val = incumbent.as_ref().map_or(f64::NEG_INFINITY, |(v, _)| *v);
        if node.bound <= inc_val + opts.gap {
            // best-first: every remaining node is bounded by this one
            break;
        }
        if nodes >= opts.node_limit {
            return Err(MilpError::NodeLimit {
                nodes,
                incumbent: incumbent.map(|(v, _)| sign * v),
                bound: sign * node.bound,
            });
        }
        nodes += 1;
        let (raw_lower, raw_upper) = (node.lower.clone(), node.upper.clone());
        if !propagate(p, &mut node.lower, &mut node.upper, opts.int_tol) {
            continue;
        }
        let lp = match solve_bounded(&sf, &node.lower, &node.upper, &opts.simplex) {
            Ok(lp) => lp,
            // propagated boxes can be thin enough to upset the simplex; the
            // node's own bounds describe the same integer points
            Err(MilpError::Numerical(_)) => {
                node.lower = raw_lower;
                node.upper = raw_upper;
                solve_bounded(&sf, &node.lower, &node.upper, &opts.simplex)?
            }
            Err(e) => return Err(e),
        };
        iterations += lp.iterations;
        match lp.status {
            LpStatus::Infeasible => continue,
            LpStatus::Unbounded => {
                return Ok(LpSolution {
                    nodes,
                    iterations,
                    ..LpSolution::without_point(LpStatus::Unbounded, 0)
                })
            }
            LpStatus::Optimal => {}
        }
        let val = sign * lp.objective;
        if val <= inc_val + opts.gap {
            continue;
        }
        // most fractional binary, lowest index on ties
        let mut branch: Option<(usize, f64)> = None;
        for &j in &binaries {
            let v = lp.values[j];
            let frac = (v - v.floor()).min(v.ceil() - v);
            if frac > opts.int_tol && branch.is_none_or(|(_, f)| frac > f) {
                branch = Some((j, frac));
            }
        }
        match branch {
            None => {
                let mut values = lp.values;
                for &j in &binaries {
                    values[j] = values[j].round();
                }
                incumbent = Some((val, values));
            }
            Some((j, _)) => {
                for fix in [0.0, 1.0] {
                    seq += 1;
                    let mut lower = node.lower.clone();
                    let mut upper = node.upper.clone();
                    lower[j] = fix;
                    upper[j] = fix;
                    heap.push(Node {
                        bound: val,
                        seq,
                        lower,
                        upper,
                    });
                }
            }
        }
    }

    Ok(match incumbent {
        Some((val, values)) => LpSolution {
            status: LpStatus::Optimal,
            objective: sign * val,
            values,
            duals: Vec::new(),
            iterations,
            nodes,
        },
        None => LpSolution {
            nodes,
            iterations,
            ..LpSolution::without_point(LpStatus::Infeasible, 0)
        },
    })
}
