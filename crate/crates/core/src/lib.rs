//! Two-phase analysis of clustered recurrent events: fit a proportional
//! intensity model to start/stop event histories, reconstruct per-unit
//! cumulative-hazard curves, split their variability across cluster and unit
//! levels with multilevel functional PCA, and feed the resulting scores into
//! a student-level logistic predictor. A simulator with a clustered
//! functional-ANOVA intensity model drives end-to-end studies.

pub mod agmodel;
pub mod compensator;
pub mod curve;
pub mod dataio;
pub mod error;
pub mod mfpca;
pub mod predict;
pub mod simulate;

pub use error::{Error, ErrorCategory, Result};
