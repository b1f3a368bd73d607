//! Input and output layout shared by the dataset, the network and its MILP
//! encoding.

use serde::{Deserialize, Serialize};

pub const N_INPUTS: usize = 3;
pub const N_DIFF: usize = 4;
pub const N_ALG: usize = 10;
pub const N_OUTPUTS: usize = N_DIFF + N_ALG;

pub const INPUT_NAMES: [&str; N_INPUTS] = ["t", "delta_V", "delta_T"];

/// Differential states first, then algebraic outputs.
pub const OUTPUT_NAMES: [&str; N_OUTPUTS] = [
    "theta_pll",
    "i_d",
    "i_q",
    "V_meas",
    "v_d",
    "v_q",
    "omega_pll",
    "P_VSC",
    "V_PCC",
    "Q_VSC",
    "v_gd",
    "v_gq",
    "P_total",
    "Q_total",
];

pub mod out {
    pub const THETA_PLL: usize = 0;
    pub const I_D: usize = 1;
    pub const I_Q: usize = 2;
    pub const V_MEAS: usize = 3;
    pub const V_D: usize = 4;
    pub const V_Q: usize = 5;
    pub const OMEGA_PLL: usize = 6;
    pub const P_VSC: usize = 7;
    pub const V_PCC: usize = 8;
    pub const Q_VSC: usize = 9;
    pub const V_GD: usize = 10;
    pub const V_GQ: usize = 11;
    pub const P_TOTAL: usize = 12;
    pub const Q_TOTAL: usize = 13;
}

pub fn output_index(name: &str) -> Option<usize> {
    OUTPUT_NAMES.iter().position(|n| *n == name)
}

/// Axis-aligned box over `(t, delta_V, delta_T)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: [f64; N_INPUTS],
    pub upper: [f64; N_INPUTS],
}

impl InputBox {
    pub fn new(t: (f64, f64), delta_v: (f64, f64), delta_t: (f64, f64)) -> Self {
        Self {
            lower: [t.0, delta_v.0, delta_t.0],
            upper: [t.1, delta_v.1, delta_t.1],
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..N_INPUTS).all(|i| {
            self.lower[i].is_finite() && self.upper[i].is_finite() && self.lower[i] <= self.upper[i]
        })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }
}
