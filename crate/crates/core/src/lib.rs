//! Conditional average treatment effect estimation with double machine
//! learning on horizontally partitioned data.
//!
//! The crate is organised along the protocol:
//!
//! - [`data`]: datasets, horizontal partitions, CSV ingestion and the
//!   simulation data-generating processes.
//! - [`nuisance`]: outcome/propensity learners and cross-fitting.
//! - [`dml`]: the centralized linear-CATE DML estimator with sandwich
//!   variance and coefficient tests.
//! - [`dimred`]: private user-side dimensionality reduction functions.
//! - [`protocol`]: the three-stage data collaboration protocol (shares,
//!   SVD aggregation, analyst fit, return packages, user back-transform).
//! - [`ni`]: the non-readily-identifiable variant with mixing and row
//!   permutation.

pub mod data;
pub mod dimred;
pub mod dml;
pub mod error;
pub mod linalg;
pub mod ni;
pub mod nuisance;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
