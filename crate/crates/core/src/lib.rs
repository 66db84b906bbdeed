//! Climate zoning, yield simulation and surrogate modelling for fixed-tilt
//! photovoltaic farms.

// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod climate;
pub mod evaluate;
pub mod experiment;
pub mod homogenize;
pub mod rng;
pub mod sampler;
pub mod simulator;
pub mod solar;
pub mod surrogate;
pub mod zones;
