//! Statistical engine for defining and estimating treatment-effect estimands
//! in longitudinal trials with intercurrent events: MMRM fitting by REML,
//! reference-based multiple imputation, Rubin pooling, and a potential-outcome
//! simulator that supplies exact oracles for verification.

pub mod data;
pub mod error;
pub mod estimand;
pub mod ice;
pub mod impute;
pub mod mmrm;
pub mod pool;
pub mod sim;
pub mod report;
pub mod seed;
pub mod validate;

pub use error::{Error, Result};
