//! Stiff ROBER kinetics ground truth, a from-scratch patch-mixer forecaster,
//! and batchwise / dynamic extrapolation evaluation.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::excessive_precision,
    clippy::too_many_arguments,
    clippy::needless_range_loop,
    clippy::manual_clamp
)]

pub mod dataset;
pub mod forecast;
pub mod integrator;
pub mod kinetics;
pub mod mixer;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
