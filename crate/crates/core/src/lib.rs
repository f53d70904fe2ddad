//! Simulation and numerical verification for symbiotic branching and its
//! moment duals.
//!
//! The crate is organised bottom-up:
//!
//! * [`coloring`]: colorings, set partitions and measures on colorings.
//! * [`flow`]: the linear color flow `K_t`, its limit `K_inf`, eigenvectors and spectrum.
//! * [`walkers`] and [`dual`]: dual walker systems and the dual color processes.
//! * [`lattice`]: forward Euler simulation of the lattice model.
//! * [`heat`]: closed-form heat semigroup for piecewise-constant profiles.
//! * [`interface`]: interfaces at `rho = -1`, infinite rate.
//! * [`harness`]: experiment configuration and comparison reports.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coloring;
pub mod dual;
pub mod error;
pub mod flow;
pub mod harness;
pub mod heat;
pub mod interface;
pub mod lattice;
pub mod rng;
pub mod stats;
pub mod walkers;

pub use coloring::{Color, ColorMeasure, Coloring, SetPartition, N_MAX};
pub use error::{Result, SbmError};
