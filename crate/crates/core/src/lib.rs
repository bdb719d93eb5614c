//! Validation toolkit for emulator and approximate-likelihood models.
//!
//! Given a stochastic simulator treated as ground truth and a fast emulator
//! standing in for it, this crate tests whether the two agree in
//! distribution: locally at a fixed parameter value, globally across
//! parameter space by pooling independent local p-values and testing them
//! for uniformity, and pointwise in feature space with false-discovery-rate
//! control. The main two-sample statistic turns the comparison into a
//! regression problem, so any plug-in regression method (random forest by
//! default) carries the test into high-dimensional or structured data.
//!
//! Everything that draws randomness takes an explicit [`rng::RngStream`];
//! results are bit-identical for a given stream under any thread count.

pub mod data;
pub mod diagnose;
pub mod error;
pub mod globaltest;
pub mod harness;
pub mod localtest;
pub mod models;
pub mod regress;
pub mod result;
pub mod rng;
pub mod stats;

pub use data::{pool_and_label, LabeledDataset, Sample};
pub use error::{Error, Result};
pub use result::TestResult;
pub use rng::{derive_substream, RngStream};
