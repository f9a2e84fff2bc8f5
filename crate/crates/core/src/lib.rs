//! Simulation and blind estimation for two Heisenberg-coupled spin qubits.
//!
//! The crate covers the whole chain: separable state preparation
//! ([`qstate`]), coupled evolution ([`heisenberg`]), single-preparation
//! measurement statistics ([`measurement`], [`source`]), then the blind
//! estimators built on top of them: process tomography ([`bqpt`]),
//! Hamiltonian parameter estimation ([`bhpe`]), source separation and state
//! restoration ([`bqss`]) and overlap-based classification ([`classifier`]).
//! [`harness`] wires everything into reproducible experiments.

// `!(x > 0.0)` deliberately rejects NaN too; fixed-size index loops mirror the matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
// tests quote worked examples at their printed precision
#![cfg_attr(test, allow(clippy::approx_constant))]

pub mod bhpe;
pub mod bqpt;
pub mod bqss;
pub mod classifier;
pub mod error;
pub mod flags;
pub mod harness;
pub mod heisenberg;
pub mod linalg;
pub mod measurement;
pub mod qstate;
pub mod rng;
pub mod source;

pub use error::{Error, Result};
pub use heisenberg::{PhysicalModel, Unitary4};
pub use linalg::{Mat4, C64};
pub use measurement::{Basis, CountTable, Prob4};
pub use qstate::{EnsembleSpec, ParamDist, ParamDraw, QubitParams, TwoQubitState};
