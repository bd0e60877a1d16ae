//! Federated learning simulator for feature-normalized training.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` numerics with a reverse-mode tape
//!   and a finite-difference gradient checker.
//! * [`model`]: MLP extractor, standard / normalized / frozen-orthonormal heads,
//!   and the CE, one-hot MSE and feature-norm-penalized losses.
//! * [`data`]: synthetic Gaussian mixtures and IID, sharding and Dirichlet partitions.
//! * [`fl`]: client sampling, local SGD, aggregation, the round loop.
//! * [`diagnostics`]: similarity factors and local-vs-global norm reports.
//! * [`pfl`]: per-client fine-tuning and personalized accuracy.
//! * [`experiment`]: config-driven runs that write metrics and reports to disk.
//!
//! With the default `parallel` feature, client-level work runs on rayon;
//! results are identical to sequential execution.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod model;
pub mod par;
pub mod pfl;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
