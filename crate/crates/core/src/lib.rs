//! Grid-following converter dynamics approximated by physics-informed ReLU
//! networks, and exact mixed-integer reformulation of those networks to
//! locate critical disturbance boundaries by optimization.
// NaN-rejecting `!(x > 0.0)` checks and index loops over parallel arrays are
// deliberate in the numerical code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod dataset;
pub mod dynamics;
pub mod layout;
pub mod milp;
pub mod pinn;
pub mod real;
