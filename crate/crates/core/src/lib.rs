//! Simulation and verification toolkit for a constant-size trait-structured
//! population model: exact event simulation, slow/fast observables, the
//! canonical-equation ODE, frozen fast-component dynamics, generator checks
//! and polynomial duality.

// `!(a < b)` is used on purpose where NaN must fall through to the error path
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod cead;
pub mod dual;
pub mod experiments;
pub mod expr;
pub mod fv;
pub mod generator;
pub mod model;
pub mod observables;
pub mod poly;
pub mod quadrature;
pub mod sim;
pub mod stats;
