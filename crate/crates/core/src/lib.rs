//! Store-and-forward signal-control laboratory.
//!
//! The crate covers the whole loop of a network-wide split controller:
//! the linear store-and-forward network model ([`network`]), a nonlinear
//! ground-truth simulator with back-holding and blocked-demand accounting
//! ([`simulator`]), per-link Kalman filters that jointly estimate occupancy
//! and exogenous demand ([`estimator`]), LQ feedback-feedforward gain
//! synthesis ([`synthesis`]), green-time projection ([`controller`]), demand
//! scenarios ([`scenario`]) and the performance metrics ([`metrics`]).

// `!(a >= b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundled;
pub mod controller;
pub mod estimator;
pub mod metrics;
pub mod network;
pub mod scenario;
pub mod simulator;
pub mod synthesis;
mod util;
