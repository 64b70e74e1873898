//! Closed-form hard affine-constraint output layer for neural networks.
//!
//! A network produces an unconstrained prediction `f(x)` and a null-space
//! vector `w(x)`. The layer decomposes the input-dependent system
//! `A(x) y <= b(x)` into row subsets, projects onto each subset's affine hull
//! with a pseudoinverse, keeps the projections that satisfy the full system,
//! and returns the one closest to `f(x)`. When `f(x)` is already feasible it
//! passes through untouched.
//!
//! The crate is `no_std` with `alloc`; IO, CLI and file formats live in the
//! `caffnet` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod constraint;
pub mod error;
pub mod experiments;
pub mod fuzz;
pub mod layer;
pub mod linalg;
pub mod neural;
pub mod oracle;
pub mod rng;
pub mod suites;

pub use constraint::{
    enumerate_combinations, select_sub, violation, CombinationMode, CombinationSet,
    ConstraintProvider, ConstraintSystem, IndexCombination, ViolationStats,
};
pub use error::{Error, Result};
pub use layer::{
    backward, candidates, forward, project_sub, Branch, LayerConfig, ProjectionCandidate,
    SelectionRecord,
};
pub use linalg::{pinv, spectral_norm, vec_pnorm, Matrix, Vector};
