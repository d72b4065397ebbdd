//! Two-stage joint modeling of multiple longitudinal markers and a
//! right-censored time-to-event outcome.
//!
//! Stage 1 fits one Bayesian joint model per marker (or a plain linear mixed
//! model for the multiple two-stage comparator), stage 2 fits a Cox model with
//! the predicted marker trajectories as time-varying covariates and pools the
//! fits over posterior imputations. The crate also provides dynamic risk
//! prediction, IPCW accuracy metrics and a simulation generator.

pub mod cox;
pub mod data;
pub mod design;
pub mod error;
pub mod linalg;
pub mod mcmc;
pub mod metrics;
pub mod predict;
pub mod quadrature;
pub mod sim;
pub mod study;
pub mod two_stage;

pub use error::{Error, Result};
