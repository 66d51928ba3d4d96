//! Simulation-based calibration of Bayes factors for repeated-measures data.
//!
//! The crate simulates data from linear mixed models, computes Bayes factors
//! on aggregated and non-aggregated views of the same data (a collapsed
//! Bayesian LMM with bridge sampling, and default JZS Bayes factors), and
//! checks whether the average posterior model probability matches the prior.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod error;
pub mod freq;
pub mod jzs;
pub mod bridge;
pub mod collapsed;
pub mod linalg;
pub mod lmm;
pub mod mcmc;
pub mod numeric;
pub mod priors;
pub mod sbc;
pub mod scenarios;
pub mod simulate;
pub mod stats;

pub use design::{
    build_trial_table, contrast_matrix, expand_design, Assignment, ContrastKind, ContrastScheme,
    DesignMatrixBundle, DesignSpec, FactorSpec, GroupBlock, RandomRequest, Term, TrialTable,
};
pub use error::{Error, Result};
pub use priors::{Dist, GPriorScales, ParamPins, PriorSpec};
pub use simulate::{aggregate, simulate, Aggregation, Dataset, Family, LmmParams};
