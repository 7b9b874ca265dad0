//! Simulation library for quasi-probability quantum error mitigation with
//! influence-martingale-reweighted quantum jump trajectories, including the
//! discrete ancilla-measurement realization of those trajectories.
//!
//! The crate is organized around a dense complex linear-algebra kernel
//! ([`complexla`]), model builders ([`models`]), a deterministic master
//! equation integrator used as the exactness oracle ([`propagate`]), the
//! stochastic jump-trajectory engine ([`jumps`]), martingale reweighting
//! ([`martingale`]), the end-to-end mitigation pipeline ([`mitigate`]), a
//! quasi-probability post-processing estimator ([`qprob`]) and the ancilla
//! qubit realization of jump trajectories ([`lloyd_viola`]).

pub mod cli;
pub mod complexla;
pub mod error;
pub mod jumps;
pub mod lloyd_viola;
pub mod martingale;
pub mod mitigate;
pub mod models;
pub mod propagate;
pub mod qprob;

pub use complexla::{CMatrix, CVector, C64};
pub use error::{Error, Result};
