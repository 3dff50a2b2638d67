// Negated comparisons such as `!(x > 0.0)` are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bootstrap;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fgt;
pub mod fit;
pub mod io;
pub mod numeric;
pub mod predict;
pub mod robust;
pub mod sim;
pub mod tuning;
pub mod variance;
