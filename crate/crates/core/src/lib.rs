//! Regression-weighted baseline correction for event-related potentials.
//!
//! Instead of subtracting the pre-stimulus mean from every epoch, the
//! baseline mean enters the model as a covariate and its weight is
//! estimated from the data. Weight 1 reproduces traditional correction and
//! weight 0 means no correction. The crate covers the whole analysis path:
//! epoch ingestion and aggregation ([`epochs`]), baseline features
//! ([`baseline`]), sum-coded designs ([`design`]), least squares and the
//! per-timepoint engine ([`ols`]), crossed-random-effects mixed models
//! ([`lmm`]), bootstrap bands ([`inference`]), simulation-based power
//! ([`power`]), a Metropolis sampler for the baseline weight ([`bayes`]) and
//! a ground-truth data generator ([`synth`]).

pub mod baseline;
pub mod bayes;
pub mod design;
pub mod epochs;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod lmm;
pub mod ols;
pub mod optim;
pub mod par;
pub mod power;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
